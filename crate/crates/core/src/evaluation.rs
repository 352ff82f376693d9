//! Sampled-candidate ranking evaluation, joint inference scoring, and
//! attention-map inspection.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{training_counts, Catalog, Dataset, Interaction, PAD};
use crate::error::{Error, Result};
use crate::layers::Forward;
use crate::model::{score_intents, score_items, CafeModel, SequenceBatch};
use crate::numerics::Tensor;
use crate::training::training_sequences;

/// Which held-out interaction is the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    /// Second-to-last interaction.
    Validation,
    /// Last interaction.
    Test,
}

impl SplitRole {
    pub fn name(self) -> &'static str {
        match self {
            SplitRole::Validation => "validation",
            SplitRole::Test => "test",
        }
    }

    /// `(history, truth)` for a sequence, or `None` when it is too short
    /// to hold out both validation and test interactions.
    pub fn holdout(self, events: &[Interaction]) -> Option<(&[Interaction], Interaction)> {
        let k = events.len();
        if k < 3 {
            return None;
        }
        Some(match self {
            SplitRole::Validation => (&events[..k - 2], events[k - 2]),
            SplitRole::Test => (&events[..k - 1], events[k - 1]),
        })
    }
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "validation" | "valid" => Ok(SplitRole::Validation),
            "test" => Ok(SplitRole::Test),
            other => Err(Error::Config(format!("unknown split role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalProtocol {
    pub k: usize,
    pub num_negatives: usize,
    pub role: SplitRole,
    /// Items in the user's history are never drawn as negatives.
    pub exclude_history: bool,
    /// Users scored per forward pass.
    pub batch_size: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            k: 5,
            num_negatives: 100,
            role: SplitRole::Test,
            exclude_history: true,
            batch_size: 256,
        }
    }
}

/// Draws `num_negatives` distinct items without replacement with probability
/// proportional to `train_counts`, skipping `truth` and `history`, and
/// appends `truth`. Items with zero count are drawn (uniformly) only once
/// every positive-count item has been taken.
pub fn sample_eval_candidates(
    truth: usize,
    history: &HashSet<usize>,
    train_counts: &[u64],
    num_negatives: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    // Efraimidis-Spirakis: the k largest keys ln(u)/w form a weighted sample
    // without replacement.
    let mut keyed: Vec<(f64, usize)> = Vec::new();
    let mut zero: Vec<(f64, usize)> = Vec::new();
    for (item, &c) in train_counts.iter().enumerate().skip(1) {
        if item == truth || history.contains(&item) {
            continue;
        }
        let u: f64 = 1.0 - rng.random::<f64>();
        if c > 0 {
            keyed.push((u.ln() / c as f64, item));
        } else {
            zero.push((u, item));
        }
    }
    let eligible = keyed.len() + zero.len();
    if eligible < num_negatives {
        return Err(Error::InsufficientCandidates {
            eligible,
            needed: num_negatives,
        });
    }
    let by_key_desc = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    keyed.sort_by(by_key_desc);
    zero.sort_by(by_key_desc);
    let mut out: Vec<usize> = keyed
        .iter()
        .chain(&zero)
        .take(num_negatives)
        .map(|&(_, item)| item)
        .collect();
    out.push(truth);
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn ln_sigmoid(x: f64) -> f64 {
    -((-x.abs()).exp().ln_1p()) + x.min(0.0)
}

/// Probability of `item`: `σ(r_c[c(item)]) · σ(r_v[item])` with joint
/// inference, else `σ(r_v[item])`. Logit vectors are indexed by dense id.
pub fn joint_score(item: usize, r_c: &[f64], r_v: &[f64], catalog: &Catalog, joint: bool) -> Result<f64> {
    let v = logit_at(r_v, item, "item")?;
    if !joint {
        return Ok(sigmoid(v));
    }
    let c = logit_at(r_c, catalog.intent_of(item)?, "intent")?;
    Ok(sigmoid(c) * sigmoid(v))
}

/// `ln` of [`joint_score`], computed without saturating; orders candidates
/// exactly as the score does.
pub fn joint_log_score(item: usize, r_c: &[f64], r_v: &[f64], catalog: &Catalog, joint: bool) -> Result<f64> {
    let v = ln_sigmoid(logit_at(r_v, item, "item")?);
    if !joint {
        return Ok(v);
    }
    let c = logit_at(r_c, catalog.intent_of(item)?, "intent")?;
    Ok(ln_sigmoid(c) + v)
}

fn logit_at(logits: &[f64], id: usize, what: &'static str) -> Result<f64> {
    logits.get(id).copied().ok_or(Error::UnknownId {
        what,
        id,
        size: logits.len(),
    })
}

/// 1-based rank of `candidates[truth_index]` by descending score, ties broken
/// by ascending item id.
pub fn rank_of_truth(candidates: &[usize], scores: &[f64], truth_index: usize) -> Result<usize> {
    if scores.len() != candidates.len() || truth_index >= candidates.len() {
        return Err(Error::Config("score/candidate length mismatch".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerics(crate::numerics::NumericsError::NonFinite { op: "ranking" }));
    }
    let (ts, tid) = (scores[truth_index], candidates[truth_index]);
    let ahead = candidates
        .iter()
        .zip(scores)
        .enumerate()
        .filter(|&(j, (&id, &s))| j != truth_index && (s > ts || (s == ts && id < tid)))
        .count();
    Ok(ahead + 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub hr: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

/// HR@K, NDCG@K and MRR over 1-based ranks.
pub fn compute_metrics(ranks: &[usize], k: usize) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(Error::Empty("rank list"));
    }
    if ranks.contains(&0) {
        return Err(Error::Config("ranks are 1-based".into()));
    }
    let (mut hr, mut ndcg, mut mrr) = (0.0, 0.0, 0.0);
    for &r in ranks {
        if r <= k {
            hr += 1.0;
            ndcg += 1.0 / ((r + 1) as f64).log2();
        }
        mrr += 1.0 / r as f64;
    }
    let n = ranks.len() as f64;
    Ok(Metrics {
        hr: hr / n,
        ndcg: ndcg / n,
        mrr: mrr / n,
    })
}

/// Scores candidate lists given each user's history.
pub trait Scorer {
    /// `out[u][j]` orders `candidates[u][j]`: larger ranks higher.
    fn score(&self, histories: &[&[Interaction]], candidates: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Model scoring through the representation at the last history position.
pub struct ModelScorer<'a> {
    pub model: &'a CafeModel,
    pub catalog: &'a Catalog,
}

impl ModelScorer<'_> {
    /// Item and (with the intent stream) intent logits at the last position
    /// of each history: `[B, |V|+1]` and `[B, |C|+1]`.
    pub fn last_step_logits(&self, histories: &[&[Interaction]]) -> Result<(Tensor, Option<Tensor>)> {
        let m = self.model;
        let batch = SequenceBatch::from_histories(histories, self.catalog, m.config.max_len)?;
        let mut fwd = Forward::eval(&m.params);
        let out = m.forward(&mut fwd, &batch)?;
        let fused = m.last_positions(&mut fwd, out.fused, &batch)?;
        let intent = out
            .intent_repr
            .map(|r| m.last_positions(&mut fwd, r, &batch))
            .transpose()?;
        let tape = fwd.into_tape();
        let r_v = score_items(tape.value(fused), m.item_table())?;
        let r_c = match (intent, m.intent_table()) {
            (Some(v), Some(table)) => Some(score_intents(tape.value(v), table)?),
            _ => None,
        };
        Ok((r_v, r_c))
    }
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, histories: &[&[Interaction]], candidates: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let (r_v, r_c) = self.last_step_logits(histories)?;
        let joint = self.model.config.switches.joint_inference;
        candidates
            .iter()
            .enumerate()
            .map(|(u, cands)| {
                let rc = r_c.as_ref().map_or(&[][..], |t| t.row(u));
                cands
                    .iter()
                    .map(|&v| joint_log_score(v, rc, r_v.row(u), self.catalog, joint))
                    .collect()
            })
            .collect()
    }
}

/// Ranks by training interaction count, ignoring history.
pub struct PopRecScorer {
    pub counts: Vec<u64>,
}

impl Scorer for PopRecScorer {
    fn score(&self, _: &[&[Interaction]], candidates: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        candidates
            .iter()
            .map(|c| {
                c.iter()
                    .map(|&v| {
                        self.counts.get(v).map(|&n| n as f64).ok_or(Error::UnknownId {
                            what: "item",
                            id: v,
                            size: self.counts.len(),
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingReport {
    pub dataset: String,
    pub role: SplitRole,
    pub k: usize,
    pub num_negatives: usize,
    pub history_excluded: bool,
    pub seed: u64,
    /// Raw user id and rank of the truth, in corpus order.
    pub ranks: Vec<(u64, usize)>,
    pub users_skipped: usize,
    pub metrics: Metrics,
}

impl RankingReport {
    pub fn users_evaluated(&self) -> usize {
        self.ranks.len()
    }

    /// `key: value` lines.
    pub fn render_text(&self) -> String {
        format!(
            "dataset: {}\nsplit: {}\nK: {}\nHR@{k}: {}\nNDCG@{k}: {}\nMRR: {}\nusers_evaluated: {}\nusers_skipped: {}\nnum_negatives: {}\nhistory_excluded: {}\nseed: {}\n",
            self.dataset,
            self.role,
            self.k,
            self.metrics.hr,
            self.metrics.ndcg,
            self.metrics.mrr,
            self.users_evaluated(),
            self.users_skipped,
            self.num_negatives,
            self.history_excluded,
            self.seed,
            k = self.k,
        )
    }

    /// One tab-free line of `key=value` fields.
    pub fn render_record(&self) -> String {
        format!(
            "dataset={} split={} K={} HR={} NDCG={} MRR={} users_evaluated={} users_skipped={} seed={} history_excluded={}\n",
            self.dataset,
            self.role,
            self.k,
            self.metrics.hr,
            self.metrics.ndcg,
            self.metrics.mrr,
            self.users_evaluated(),
            self.users_skipped,
            self.seed,
            self.history_excluded,
        )
    }

    /// `user<TAB>rank` lines.
    pub fn render_ranks(&self) -> String {
        self.ranks.iter().map(|(u, r)| format!("{u}\t{r}\n")).collect()
    }
}

/// Ranks each user's held-out interaction among popularity-sampled negatives.
/// Sequences too short for the role are skipped and counted.
pub fn evaluate<S: Scorer>(
    scorer: &S,
    data: &Dataset,
    dataset_name: &str,
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<RankingReport> {
    if protocol.k == 0 || protocol.batch_size == 0 {
        return Err(Error::Config("K and batch_size must be positive".into()));
    }
    let counts = training_counts(data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut users = Vec::new();
    let mut histories = Vec::new();
    let mut candidates = Vec::new();
    let mut skipped = 0;
    for seq in &data.sequences {
        let Some((history, truth)) = protocol.role.holdout(&seq.events) else {
            skipped += 1;
            continue;
        };
        let seen: HashSet<usize> = if protocol.exclude_history {
            history.iter().map(|e| e.item).collect()
        } else {
            HashSet::new()
        };
        candidates.push(sample_eval_candidates(
            truth.item,
            &seen,
            &counts,
            protocol.num_negatives,
            &mut rng,
        )?);
        histories.push(history);
        users.push(seq.user);
    }
    if users.is_empty() {
        return Err(Error::Empty("evaluation users"));
    }
    let mut ranks = Vec::with_capacity(users.len());
    for start in (0..users.len()).step_by(protocol.batch_size) {
        let end = (start + protocol.batch_size).min(users.len());
        let scores = scorer.score(&histories[start..end], &candidates[start..end])?;
        for (u, s) in (start..end).zip(scores) {
            let truth_index = candidates[u].len() - 1;
            ranks.push((users[u], rank_of_truth(&candidates[u], &s, truth_index)?));
        }
    }
    let flat: Vec<usize> = ranks.iter().map(|&(_, r)| r).collect();
    Ok(RankingReport {
        dataset: dataset_name.to_string(),
        role: protocol.role,
        k: protocol.k,
        num_negatives: protocol.num_negatives,
        history_excluded: protocol.exclude_history,
        seed,
        ranks,
        users_skipped: skipped,
        metrics: compute_metrics(&flat, protocol.k)?,
    })
}

pub fn evaluate_model(
    model: &CafeModel,
    data: &Dataset,
    dataset_name: &str,
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<RankingReport> {
    check_compatible(model, &data.catalog)?;
    let scorer = ModelScorer {
        model,
        catalog: &data.catalog,
    };
    evaluate(&scorer, data, dataset_name, protocol, seed)
}

pub fn check_compatible(model: &CafeModel, catalog: &Catalog) -> Result<()> {
    let c = &model.config;
    if c.num_items != catalog.num_items() || c.num_intents != catalog.num_intents() {
        return Err(Error::Config(format!(
            "model vocabulary {} items / {} intents, corpus {} / {}",
            c.num_items,
            c.num_intents,
            catalog.num_items(),
            catalog.num_intents()
        )));
    }
    Ok(())
}

/// Inference log-scores of every item id at every real training position,
/// with the sequence the position belongs to and its target.
fn training_position_scores(
    model: &CafeModel,
    data: &Dataset,
    mut visit: impl FnMut(&[Interaction], usize, &[f64]) -> Result<()>,
) -> Result<usize> {
    check_compatible(model, &data.catalog)?;
    let n = model.config.max_len;
    let joint = model.config.switches.joint_inference;
    let mut total = 0;
    let mut scores = vec![f64::NEG_INFINITY; data.catalog.item_vocab()];
    for chunk in training_sequences(data).chunks(64) {
        let inputs: Vec<&[Interaction]> = chunk.iter().map(|s| &s[..s.len() - 1]).collect();
        let batch = SequenceBatch::from_histories(&inputs, &data.catalog, n)?;
        let mut fwd = Forward::eval(&model.params);
        let out = model.forward(&mut fwd, &batch)?;
        let tape = fwd.into_tape();
        let r_v = score_items(tape.value(out.fused), model.item_table())?;
        let r_c = match (out.intent_repr, model.intent_table()) {
            (Some(v), Some(t)) => Some(score_intents(tape.value(v), t)?),
            _ => None,
        };
        for (b, seq) in chunk.iter().enumerate() {
            let targets = &seq[1..];
            let real = targets.len().min(n);
            for (t, target) in targets[targets.len() - real..].iter().enumerate() {
                let row = b * n + (n - real) + t;
                let rc = r_c.as_ref().map_or(&[][..], |x| x.row(row));
                for v in data.catalog.items() {
                    scores[v] = joint_log_score(v, rc, r_v.row(row), &data.catalog, joint)?;
                }
                visit(seq, target.item, &scores)?;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("training positions"));
    }
    Ok(total)
}

/// Fraction of training positions whose next item ranks within the top `k`
/// of the full catalog under the model's inference score.
pub fn training_hit_rate_full(model: &CafeModel, data: &Dataset, k: usize) -> Result<f64> {
    let mut hits = 0usize;
    let total = training_position_scores(model, data, |_, truth, scores| {
        let ts = scores[truth];
        let ahead = data
            .catalog
            .items()
            .filter(|&v| v != truth && (scores[v] > ts || (scores[v] == ts && v < truth)))
            .count();
        hits += usize::from(ahead < k);
        Ok(())
    })?;
    Ok(hits as f64 / total as f64)
}

/// HR@`protocol.k` over training positions, each target ranked against
/// `protocol.num_negatives` popularity-sampled items outside the user's
/// training sequence, as in held-out evaluation.
pub fn training_hit_rate(model: &CafeModel, data: &Dataset, protocol: &EvalProtocol, seed: u64) -> Result<f64> {
    let counts = training_counts(data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    let total = training_position_scores(model, data, |seq, truth, scores| {
        let seen: HashSet<usize> = seq.iter().map(|e| e.item).collect();
        let cands = sample_eval_candidates(truth, &seen, &counts, protocol.num_negatives, &mut rng)?;
        let s: Vec<f64> = cands.iter().map(|&v| scores[v]).collect();
        hits += usize::from(rank_of_truth(&cands, &s, cands.len() - 1)? <= protocol.k);
        Ok(())
    })?;
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Item,
    Intent,
}

impl FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "item" => Ok(Stream::Item),
            "intent" => Ok(Stream::Intent),
            other => Err(Error::Config(format!("unknown encoder `{other}`"))),
        }
    }
}

/// Attention weights averaged over sequences, indexed by time step counted
/// from each sequence's oldest retained interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub grid: Vec<Vec<f64>>,
    /// Sequences contributing to each row.
    pub counts: Vec<usize>,
    /// Mean weight each row placed on padding keys.
    pub pad_mass: Vec<f64>,
}

impl AttentionMap {
    /// Mean over rows `i >= window` of the weight on keys `i-window+1..=i`.
    pub fn recent_mass(&self, window: usize) -> Option<f64> {
        let rows: Vec<f64> = (window..self.grid.len())
            .filter(|&i| self.counts[i] > 0)
            .map(|i| self.grid[i][i + 1 - window..=i].iter().sum())
            .collect();
        (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
    }

    /// Whitespace-separated grid rows followed by `# row count pad_mass` lines.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for row in &self.grid {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        for (i, (c, p)) in self.counts.iter().zip(&self.pad_mass).enumerate() {
            s.push_str(&format!("# row {i} sequences {c} pad_mass {p:.6}\n"));
        }
        s
    }
}

/// Average post-softmax attention of one head over the evaluation histories
/// of `role`, restricted to the first `steps` time steps (fewer when no
/// history is that long).
pub fn average_attention(
    model: &CafeModel,
    data: &Dataset,
    role: SplitRole,
    stream: Stream,
    layer: usize,
    head: usize,
    steps: usize,
) -> Result<AttentionMap> {
    check_compatible(model, &data.catalog)?;
    let cfg = &model.config;
    if layer >= cfg.layers || head >= cfg.heads {
        return Err(Error::Config(format!(
            "layer {layer} / head {head} out of range ({} layers, {} heads)",
            cfg.layers, cfg.heads
        )));
    }
    if stream == Stream::Intent && model.intent_encoder.is_none() {
        return Err(Error::Config("model has no intent encoder".into()));
    }
    let n = cfg.max_len;
    let histories: Vec<&[Interaction]> = data
        .sequences
        .iter()
        .filter_map(|s| role.holdout(&s.events).map(|(h, _)| h))
        .collect();
    let Some(longest) = histories.iter().map(|h| h.len()).max() else {
        return Err(Error::Empty("evaluation histories"));
    };
    let steps = steps.min(n).min(longest);
    let mut grid = vec![vec![0.0; steps]; steps];
    let mut counts = vec![0usize; steps];
    let mut pad_mass = vec![0.0; steps];
    for chunk in histories.chunks(128) {
        let batch = SequenceBatch::from_histories(chunk, &data.catalog, n)?;
        let mut fwd = Forward::eval(&model.params);
        let out = model.forward(&mut fwd, &batch)?;
        let maps = match stream {
            Stream::Item => &out.item_attention,
            Stream::Intent => &out.intent_attention,
        };
        let w = fwd.tape.value(maps[layer][head]).data();
        for b in 0..batch.batch {
            let first = (0..n).find(|&p| batch.items[b * n + p] != PAD).unwrap_or(n);
            for i in 0..steps.min(n - first) {
                let qi = first + i;
                let row = &w[(b * n + qi) * n..(b * n + qi + 1) * n];
                counts[i] += 1;
                pad_mass[i] += row[..first].iter().sum::<f64>();
                for j in 0..steps.min(n - first) {
                    grid[i][j] += row[first + j];
                }
            }
        }
    }
    for i in 0..steps {
        if counts[i] > 0 {
            let c = counts[i] as f64;
            grid[i].iter_mut().for_each(|v| *v /= c);
            pad_mass[i] /= c;
        }
    }
    Ok(AttentionMap { grid, counts, pad_mass })
}
