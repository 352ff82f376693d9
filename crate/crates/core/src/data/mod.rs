//! Interaction corpora: catalog construction, parsing, splitting and padding.
//!
//! Dense ids start at 1 in both vocabularies; id 0 is the padding token.

mod synth;

pub use synth::{generate_synthetic, SynthSpec};

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;

/// Item and intent vocabularies plus the total item → intent map.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Catalog {
    item_raw: Vec<u64>,
    intent_raw: Vec<u64>,
    item_intent: Vec<usize>,
}

impl Catalog {
    /// Builds a catalog from observed `(raw item, raw intent)` pairs. Dense ids
    /// follow ascending raw id order.
    pub fn from_pairs(pairs: &BTreeMap<u64, u64>) -> Result<Self> {
        let mut intents: Vec<u64> = pairs.values().copied().collect();
        intents.sort_unstable();
        intents.dedup();
        let intent_index: HashMap<u64, usize> = intents.iter().enumerate().map(|(i, &r)| (r, i + 1)).collect();

        let mut item_raw = vec![0];
        let mut item_intent = vec![PAD];
        for (&item, intent) in pairs {
            item_raw.push(item);
            item_intent.push(intent_index[intent]);
        }
        let mut intent_raw = vec![0];
        intent_raw.extend(intents);
        let catalog = Self {
            item_raw,
            intent_raw,
            item_intent,
        };
        if catalog.num_items() > 0 && catalog.num_intents() >= catalog.num_items() {
            return Err(Error::Integrity(format!(
                "{} intents for {} items; intents must be fewer than items",
                catalog.num_intents(),
                catalog.num_items()
            )));
        }
        Ok(catalog)
    }

    /// Number of real items, excluding padding.
    pub fn num_items(&self) -> usize {
        self.item_raw.len().saturating_sub(1)
    }

    pub fn num_intents(&self) -> usize {
        self.intent_raw.len().saturating_sub(1)
    }

    /// Embedding-table rows needed for items (real items plus padding).
    pub fn item_vocab(&self) -> usize {
        self.num_items() + 1
    }

    pub fn intent_vocab(&self) -> usize {
        self.num_intents() + 1
    }

    pub fn intent_of(&self, item: usize) -> Result<usize> {
        match self.item_intent.get(item) {
            Some(&c) if item != PAD => Ok(c),
            _ => Err(Error::UnknownId {
                what: "item",
                id: item,
                size: self.item_vocab(),
            }),
        }
    }

    pub fn item_raw_id(&self, item: usize) -> u64 {
        self.item_raw[item]
    }

    pub fn intent_raw_id(&self, intent: usize) -> u64 {
        self.intent_raw[intent]
    }

    /// Dense ids of every real item.
    pub fn items(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.num_items()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub item: usize,
    pub intent: usize,
    pub timestamp: i64,
}

/// One user's interactions in temporal order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSequence {
    pub user: u64,
    pub events: Vec<Interaction>,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn items(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.item).collect()
    }

    pub fn intents(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.intent).collect()
    }

    /// Checks temporal order and agreement with the catalog's intent map.
    pub fn validate(&self, catalog: &Catalog) -> Result<()> {
        for w in self.events.windows(2) {
            if w[1].timestamp < w[0].timestamp {
                return Err(Error::Integrity(format!("user {}: timestamps decrease", self.user)));
            }
        }
        for e in &self.events {
            if catalog.intent_of(e.item)? != e.intent {
                return Err(Error::Integrity(format!(
                    "user {}: item {} carries intent {} but maps to {}",
                    self.user,
                    catalog.item_raw_id(e.item),
                    e.intent,
                    catalog.intent_of(e.item)?
                )));
            }
        }
        Ok(())
    }
}

/// A parsed or generated corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub catalog: Catalog,
    pub sequences: Vec<InteractionSequence>,
}

/// One raw line of the interchange format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawInteraction {
    pub user: u64,
    pub item: u64,
    pub intent: u64,
    pub timestamp: i64,
}

/// Groups raw interactions by user (ascending user id), orders each group by
/// timestamp with ties kept in input order, and maps to dense ids.
pub fn build_dataset(records: &[RawInteraction]) -> Result<Dataset> {
    let mut pairs: BTreeMap<u64, u64> = BTreeMap::new();
    for r in records {
        if let Some(&prev) = pairs.get(&r.item) {
            if prev != r.intent {
                return Err(Error::Integrity(format!(
                    "item {} mapped to intents {} and {}",
                    r.item, prev, r.intent
                )));
            }
        } else {
            pairs.insert(r.item, r.intent);
        }
    }
    let catalog = Catalog::from_pairs(&pairs)?;
    let item_index: HashMap<u64, usize> = pairs.keys().enumerate().map(|(i, &r)| (r, i + 1)).collect();

    let mut by_user: BTreeMap<u64, Vec<Interaction>> = BTreeMap::new();
    for r in records {
        let item = item_index[&r.item];
        by_user.entry(r.user).or_default().push(Interaction {
            item,
            intent: catalog.intent_of(item)?,
            timestamp: r.timestamp,
        });
    }
    let sequences = by_user
        .into_iter()
        .map(|(user, mut events)| {
            events.sort_by_key(|e| e.timestamp);
            InteractionSequence { user, events }
        })
        .collect();
    Ok(Dataset { catalog, sequences })
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, name: &str, line: usize) -> Result<T> {
    let raw = field.ok_or_else(|| Error::Parse {
        line,
        message: format!("missing {name}"),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("{name} {raw:?} is not an integer"),
    })
}

/// Parses `user<TAB>item<TAB>intent<TAB>timestamp` lines; `#` lines are comments.
pub fn parse_records(text: &str) -> Result<Vec<RawInteraction>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let record = RawInteraction {
            user: parse_field(fields.next(), "user_id", line_no)?,
            item: parse_field(fields.next(), "item_id", line_no)?,
            intent: parse_field(fields.next(), "intent_id", line_no)?,
            timestamp: parse_field(fields.next(), "timestamp", line_no)?,
        };
        if fields.next().is_some() {
            return Err(Error::Parse {
                line: line_no,
                message: "more than four fields".into(),
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn parse_dataset_str(text: &str) -> Result<Dataset> {
    let records = parse_records(text)?;
    build_dataset(&records)
}

pub fn parse_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset_str(&text)
}

/// Renders a dataset in the interchange format using raw ids.
pub fn render_dataset(data: &Dataset) -> String {
    let mut out = String::from("# user_id\titem_id\tintent_id\ttimestamp\n");
    for seq in &data.sequences {
        for e in &seq.events {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                seq.user,
                data.catalog.item_raw_id(e.item),
                data.catalog.intent_raw_id(e.intent),
                e.timestamp
            );
        }
    }
    out
}

/// Leave-last-2-out partition of one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split<'a> {
    pub train: &'a [Interaction],
    pub validation: Option<Interaction>,
    pub test: Option<Interaction>,
}

/// Holds out the last interaction for test and the one before for
/// validation. Sequences shorter than 3 are entirely training data.
pub fn leave_last_2_split(seq: &InteractionSequence) -> Split<'_> {
    let ev = &seq.events;
    if ev.len() < 3 {
        return Split {
            train: ev,
            validation: None,
            test: None,
        };
    }
    let k = ev.len();
    Split {
        train: &ev[..k - 2],
        validation: Some(ev[k - 2]),
        test: Some(ev[k - 1]),
    }
}

/// Keeps the most recent `n` tokens and left-pads with [`PAD`].
pub fn pad_truncate(tokens: &[usize], n: usize) -> Vec<usize> {
    assert!(n >= 1, "sequence length must be positive");
    let keep = &tokens[tokens.len().saturating_sub(n)..];
    let mut out = vec![PAD; n - keep.len()];
    out.extend_from_slice(keep);
    out
}

/// Per-item interaction counts over the training portions of all sequences,
/// indexed by dense item id.
pub fn training_counts(data: &Dataset) -> Vec<u64> {
    let mut counts = vec![0u64; data.catalog.item_vocab()];
    for seq in &data.sequences {
        for e in leave_last_2_split(seq).train {
            counts[e.item] += 1;
        }
    }
    counts
}

/// Interaction counts over every event, indexed by dense item id.
pub fn item_frequencies(data: &Dataset) -> Vec<u64> {
    let mut counts = vec![0u64; data.catalog.item_vocab()];
    for e in data.sequences.iter().flat_map(|s| &s.events) {
        counts[e.item] += 1;
    }
    counts
}
