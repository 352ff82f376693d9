//! Dual binary cross-entropy objective with per-step negatives, adaptive-moment
//! optimizer, and the epoch loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{leave_last_2_split, pad_truncate, Catalog, Dataset, Interaction, PAD};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::layers::Forward;
use crate::model::{CafeModel, ModelConfig, SequenceBatch};
use crate::numerics::{NumericsError, ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 200,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn write_kv(&self, kv: &mut KvMap) {
        kv.set("learning_rate", self.learning_rate);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("adam_eps", self.adam_eps);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
    }

    pub(crate) fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.apply("learning_rate", &mut self.learning_rate)?;
        kv.apply("beta1", &mut self.beta1)?;
        kv.apply("beta2", &mut self.beta2)?;
        kv.apply("adam_eps", &mut self.adam_eps)?;
        kv.apply("batch_size", &mut self.batch_size)?;
        kv.apply("epochs", &mut self.epochs)
    }
}

/// Adam moments for every parameter of a store.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, cfg: &TrainingConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient,
/// then zeroes the gradients.
pub fn adam_step(params: &mut ParamStore, state: &mut OptimizerState) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let p = params.get_mut(id);
        let Some(grad) = p.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let g = grad[k];
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w -= state.learning_rate * m_hat / (v_hat.sqrt() + state.eps);
        }
        p.zero_grad();
    }
}

/// Uniform draws from `1..vocab` skipping ids flagged in `excluded`.
pub fn sample_excluding(vocab: usize, excluded: &[bool], count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let eligible = (1..vocab).filter(|&i| !excluded[i]).count();
    if eligible == 0 {
        return Err(Error::Unsampleable(format!(
            "every one of {} ids is excluded",
            vocab.saturating_sub(1)
        )));
    }
    Ok((0..count)
        .map(|_| loop {
            let c = rng.random_range(1..vocab);
            if !excluded[c] {
                break c;
            }
        })
        .collect())
}

/// Negative item and intent per step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Negatives {
    pub items: Vec<usize>,
    pub intents: Vec<usize>,
}

fn membership(vocab: usize, ids: impl Iterator<Item = usize>) -> Vec<bool> {
    let mut seen = vec![false; vocab];
    for i in ids {
        seen[i] = true;
    }
    seen
}

/// One negative item (not in the sequence) and one negative intent (not in
/// the sequence) for each of `steps` positions, uniformly and independently.
pub fn sample_negatives(
    seq: &[Interaction],
    catalog: &Catalog,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<Negatives> {
    let items_seen = membership(catalog.item_vocab(), seq.iter().map(|e| e.item));
    let intents_seen = membership(catalog.intent_vocab(), seq.iter().map(|e| e.intent));
    let items = sample_excluding(catalog.item_vocab(), &items_seen, steps, rng)?;
    let intents = sample_excluding(catalog.intent_vocab(), &intents_seen, steps, rng)?;
    Ok(Negatives { items, intents })
}

/// Padded inputs, next-step targets and negatives for one minibatch.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub input: SequenceBatch,
    pub target_items: Vec<usize>,
    pub target_intents: Vec<usize>,
    pub neg_items: Vec<usize>,
    pub neg_intents: Vec<usize>,
    /// True where the target is a real interaction.
    pub loss_mask: Vec<bool>,
    /// Like `loss_mask`, but false for sequences whose intents cover the
    /// whole intent vocabulary (no valid negative intent exists).
    pub intent_neg_mask: Vec<bool>,
}

impl TrainingBatch {
    /// Position `t` of each row predicts interaction `t+1`. Every sequence
    /// must have at least two interactions.
    pub fn build(seqs: &[&[Interaction]], catalog: &Catalog, n: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut inputs = Vec::with_capacity(seqs.len());
        let (mut ti, mut tc, mut ni, mut nc) = (vec![], vec![], vec![], vec![]);
        let (mut mask, mut neg_mask) = (vec![], vec![]);
        for seq in seqs {
            if seq.len() < 2 {
                return Err(Error::Config("training sequence shorter than 2".into()));
            }
            let steps = seq.len() - 1;
            inputs.push(&seq[..steps]);
            let target = &seq[1..];
            let items: Vec<usize> = target.iter().map(|e| e.item).collect();
            let intents: Vec<usize> = target.iter().map(|e| e.intent).collect();
            let row_items = pad_truncate(&items, n);
            let real = steps.min(n);

            let items_seen = membership(catalog.item_vocab(), seq.iter().map(|e| e.item));
            let intents_seen = membership(catalog.intent_vocab(), seq.iter().map(|e| e.intent));
            let neg_v = sample_excluding(catalog.item_vocab(), &items_seen, real, rng)?;
            let (neg_c, intent_ok) = match sample_excluding(catalog.intent_vocab(), &intents_seen, real, rng) {
                Ok(v) => (v, true),
                Err(Error::Unsampleable(_)) => (vec![PAD; real], false),
                Err(e) => return Err(e),
            };

            mask.extend(row_items.iter().map(|&i| i != PAD));
            neg_mask.extend(row_items.iter().map(|&i| i != PAD && intent_ok));
            ti.extend(row_items);
            tc.extend(pad_truncate(&intents, n));
            ni.extend(pad_truncate(&neg_v, n));
            nc.extend(pad_truncate(&neg_c, n));
        }
        Ok(Self {
            input: SequenceBatch::from_histories(&inputs, catalog, n)?,
            target_items: ti,
            target_intents: tc,
            neg_items: ni,
            neg_intents: nc,
            loss_mask: mask,
            intent_neg_mask: neg_mask,
        })
    }

    pub fn masked_positions(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

fn mask_f64(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

/// `-Σ_masked [ln σ(pos) + ln(1 - σ(neg))]`, with separate masks for the
/// positive and negative terms.
pub fn bce_loss_split(
    tape: &mut Tape,
    pos: Var,
    neg: Var,
    pos_mask: &[bool],
    neg_mask: &[bool],
) -> Result<Var, NumericsError> {
    let lp = tape.log_sigmoid(pos)?;
    let lp = tape.mul_const(lp, mask_f64(pos_mask))?;
    // ln(1 - σ(x)) = ln σ(-x)
    let flipped = tape.scale(neg, -1.0)?;
    let ln = tape.log_sigmoid(flipped)?;
    let ln = tape.mul_const(ln, mask_f64(neg_mask))?;
    let both = tape.add(lp, ln)?;
    let s = tape.sum(both)?;
    tape.scale(s, -1.0)
}

/// Summed binary cross-entropy over masked positions for one stream.
pub fn bce_loss(tape: &mut Tape, pos: Var, neg: Var, mask: &[bool]) -> Result<Var, NumericsError> {
    bce_loss_split(tape, pos, neg, mask, mask)
}

/// Summed intent and item losses (`L_c + L_v`) for one batch. The intent
/// term is present only with the intent stream.
pub fn batch_loss(model: &CafeModel, fwd: &mut Forward, batch: &TrainingBatch) -> Result<Var> {
    let out = model.forward(fwd, &batch.input)?;
    let pos = model.gather_logits(fwd, out.fused, &model.item_emb, &batch.target_items)?;
    let neg = model.gather_logits(fwd, out.fused, &model.item_emb, &batch.neg_items)?;
    let mut loss = bce_loss(&mut fwd.tape, pos, neg, &batch.loss_mask)?;
    if let Some(rc) = out.intent_repr {
        let table = model.intent_emb.as_ref().expect("intent stream has a table");
        let pos = model.gather_logits(fwd, rc, table, &batch.target_intents)?;
        let neg = model.gather_logits(fwd, rc, table, &batch.neg_intents)?;
        let lc = bce_loss_split(&mut fwd.tape, pos, neg, &batch.loss_mask, &batch.intent_neg_mask)?;
        loss = fwd.tape.add(loss, lc)?;
    }
    Ok(loss)
}

/// Training portions with at least one next-step target, in corpus order.
pub fn training_sequences(data: &Dataset) -> Vec<&[Interaction]> {
    data.sequences
        .iter()
        .map(|s| leave_last_2_split(s).train)
        .filter(|t| t.len() >= 2)
        .collect()
}

pub struct TrainOutcome {
    pub model: CafeModel,
    /// Mean loss per masked position, one entry per epoch.
    pub loss_trace: Vec<f64>,
}

/// Builds a model from `config` (initialized from `seed`) and trains it.
pub fn train(data: &Dataset, config: &ModelConfig, seed: u64) -> Result<TrainOutcome> {
    let mut model = CafeModel::new(config.clone(), seed)?;
    let loss_trace = train_model(&mut model, data, seed)?;
    Ok(TrainOutcome { model, loss_trace })
}

/// Runs `config.training.epochs` epochs of shuffled minibatch Adam on `model`.
///
/// The objective per step is `(L_c + L_v)` divided by the number of masked
/// positions in the batch; negatives are redrawn every epoch.
pub fn train_model(model: &mut CafeModel, data: &Dataset, seed: u64) -> Result<Vec<f64>> {
    let seqs = training_sequences(data);
    if seqs.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if data.catalog.num_items() != model.config.num_items || data.catalog.num_intents() != model.config.num_intents
    {
        return Err(Error::Config(format!(
            "corpus has {} items / {} intents, model expects {} / {}",
            data.catalog.num_items(),
            data.catalog.num_intents(),
            model.config.num_items,
            model.config.num_intents
        )));
    }
    let cfg = model.config.training.clone();
    let n = model.config.max_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut state = OptimizerState::new(&model.params, &cfg);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<&[Interaction]> = chunk.iter().map(|&i| seqs[i]).collect();
            let batch = TrainingBatch::build(&rows, &data.catalog, n, &mut rng)?;
            let masked = batch.masked_positions();
            if masked == 0 {
                continue;
            }
            let dropout_rng = ChaCha8Rng::from_rng(&mut rng);
            let mut fwd = Forward::train(&model.params, model.config.dropout, dropout_rng);
            let summed = batch_loss(model, &mut fwd, &batch)?;
            let mut tape = fwd.into_tape();
            let value = tape.value(summed).data()[0];
            if !value.is_finite() {
                return Err(Error::Numerics(NumericsError::NonFinite { op: "training loss" }));
            }
            let objective = tape.scale(summed, 1.0 / masked as f64)?;
            tape.backward_into(objective, &mut model.params)?;
            adam_step(&mut model.params, &mut state);
            total += value;
            count += masked;
        }
        let mean = total / count.max(1) as f64;
        trace.push(mean);
        log_epoch(epoch, mean);
    }
    Ok(trace)
}

fn log_epoch(epoch: usize, mean: f64) {
    if std::env::var_os("CAFE_TRACE").is_some() {
        eprintln!("epoch {epoch}\tloss {mean:.6}");
    }
}

/// `epoch<TAB>mean_loss` lines.
pub fn render_loss_trace(trace: &[f64]) -> String {
    trace
        .iter()
        .enumerate()
        .map(|(e, l)| format!("{}\t{l}\n", e + 1))
        .collect()
}
