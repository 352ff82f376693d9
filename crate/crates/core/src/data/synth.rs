//! Synthetic corpora with sticky intent transitions and power-law item
//! popularity inside each intent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{build_dataset, Dataset, RawInteraction};
use crate::error::{Error, Result};
use crate::kv::KvMap;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub users: usize,
    pub intents: usize,
    pub items_per_intent: usize,
    /// Sequence lengths are uniform on `min_len..=max_len`.
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of keeping the current intent at each step.
    pub stickiness: f64,
    /// Exponent of the within-intent popularity law (`rank^-skew`).
    pub skew: f64,
    /// Items with fewer interactions are removed after generation.
    pub min_item_freq: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            users: 200,
            intents: 10,
            items_per_intent: 50,
            min_len: 5,
            max_len: 20,
            stickiness: 0.9,
            skew: 1.0,
            min_item_freq: 1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.stickiness) {
            return bad("stickiness must lie in [0, 1]");
        }
        if !(self.skew >= 0.0 && self.skew.is_finite()) {
            return bad("skew must be finite and nonnegative");
        }
        if self.users == 0 || self.intents == 0 || self.items_per_intent == 0 {
            return bad("users, intents and items_per_intent must be positive");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if self.intents * self.items_per_intent <= self.intents {
            return bad("need more items than intents");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("users", self.users);
        kv.set("intents", self.intents);
        kv.set("items_per_intent", self.items_per_intent);
        kv.set("min_len", self.min_len);
        kv.set("max_len", self.max_len);
        kv.set("stickiness", self.stickiness);
        kv.set("skew", self.skew);
        kv.set("min_item_freq", self.min_item_freq);
        kv.set("seed", self.seed);
        kv
    }

    /// Starts from defaults and applies every known key; unknown keys are errors.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut s = Self::default();
        for key in kv.keys() {
            if !s.to_kv().keys().any(|k| k == key) {
                return Err(Error::Config(format!("unknown synth key {key:?}")));
            }
        }
        kv.apply("users", &mut s.users)?;
        kv.apply("intents", &mut s.intents)?;
        kv.apply("items_per_intent", &mut s.items_per_intent)?;
        kv.apply("min_len", &mut s.min_len)?;
        kv.apply("max_len", &mut s.max_len)?;
        kv.apply("stickiness", &mut s.stickiness)?;
        kv.apply("skew", &mut s.skew)?;
        kv.apply("min_item_freq", &mut s.min_item_freq)?;
        kv.apply("seed", &mut s.seed)?;
        s.validate()?;
        Ok(s)
    }
}

/// Cumulative distribution over ranks `1..=n` with weights `rank^-skew`.
fn power_law_cdf(n: usize, skew: f64) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = (1..=n)
        .map(|r| {
            acc += (r as f64).powf(-skew);
            acc
        })
        .collect();
    for c in &mut cdf {
        *c /= acc;
    }
    cdf
}

fn draw(cdf: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// Raw records before frequency filtering. Item ids are
/// `intent_index * items_per_intent + rank` (1-based); intent ids are 1-based.
pub(crate) fn generate_raw(spec: &SynthSpec) -> Vec<RawInteraction> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cdf = power_law_cdf(spec.items_per_intent, spec.skew);
    let mut records = Vec::new();
    for user in 1..=spec.users as u64 {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut intent = rng.random_range(0..spec.intents);
        for t in 0..len {
            if t > 0 && spec.intents > 1 && rng.random::<f64>() >= spec.stickiness {
                // Jump to a different intent, uniformly.
                let hop = rng.random_range(1..spec.intents);
                intent = (intent + hop) % spec.intents;
            }
            let rank = draw(&cdf, &mut rng);
            records.push(RawInteraction {
                user,
                item: (intent * spec.items_per_intent + rank + 1) as u64,
                intent: intent as u64 + 1,
                timestamp: t as i64,
            });
        }
    }
    records
}

/// Drops interactions of items seen fewer than `k` times, in one pass.
pub(crate) fn filter_min_frequency(records: Vec<RawInteraction>, k: usize) -> Vec<RawInteraction> {
    let mut counts = std::collections::HashMap::<u64, usize>::new();
    for r in &records {
        *counts.entry(r.item).or_default() += 1;
    }
    records.into_iter().filter(|r| counts[&r.item] >= k).collect()
}

/// Generates a corpus; deterministic in `spec`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let records = filter_min_frequency(generate_raw(spec), spec.min_item_freq);
    if records.is_empty() {
        return Err(Error::Empty("synthetic corpus"));
    }
    build_dataset(&records)
}
