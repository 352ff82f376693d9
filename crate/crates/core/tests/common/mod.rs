#![allow(dead_code)]

use cafe::numerics::{NumericsError, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of `build` against central finite differences
/// over every entry of every input. Returns the worst relative error.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, floor: f64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        tape.value(loss).data()[0]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone().with_requires_grad())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i], numeric, floor));
        }
    }
    worst
}

/// Reduces any tensor to a scalar with fixed pseudo-random weights so that
/// every output entry contributes a distinct gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
    let n = tape.value(x).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7713).sin()).collect();
    let y = tape.mul_const(x, w)?;
    tape.sum(y)
}

pub mod corpora;
pub mod reference;

use std::collections::BTreeMap;

use cafe::data::{Catalog, Dataset, Interaction, InteractionSequence};
use cafe::layers::Forward;
use cafe::model::{CafeModel, ModelConfig, Variant};
use cafe::training::{batch_loss, TrainingBatch};
use rand::Rng;

/// `items` items spread round-robin over `intents` intents (raw ids equal
/// dense ids).
pub fn catalog(items: u64, intents: u64) -> Catalog {
    let pairs: BTreeMap<u64, u64> = (1..=items).map(|i| (i, (i - 1) % intents + 1)).collect();
    Catalog::from_pairs(&pairs).unwrap()
}

/// d=8, n=6, one layer, two heads, |V|=20, |C|=4, no dropout.
pub fn toy_config(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::new(20, 4).with_variant(variant);
    c.d = 8;
    c.max_len = 6;
    c.layers = 1;
    c.heads = 2;
    c.dropout = 0.0;
    c
}

/// Larger-than-default init so attention patterns are far from uniform.
pub fn toy_model(variant: Variant, seed: u64) -> CafeModel {
    let mut c = toy_config(variant);
    c.init_std = 0.5;
    CafeModel::new(c, seed).unwrap()
}

pub fn random_sequence(rng: &mut impl Rng, catalog: &Catalog, len: usize) -> Vec<Interaction> {
    (0..len)
        .map(|t| {
            let item = rng.random_range(1..=catalog.num_items());
            Interaction {
                item,
                intent: catalog.intent_of(item).unwrap(),
                timestamp: t as i64,
            }
        })
        .collect()
}

pub fn random_dataset(rng: &mut impl Rng, catalog: &Catalog, users: usize, len: std::ops::RangeInclusive<usize>) -> Dataset {
    let sequences = (0..users)
        .map(|u| {
            let l = rng.random_range(len.clone());
            InteractionSequence {
                user: u as u64 + 1,
                events: random_sequence(rng, catalog, l),
            }
        })
        .collect();
    Dataset {
        catalog: catalog.clone(),
        sequences,
    }
}

/// Training objective (summed losses over masked count) in evaluation mode.
pub fn objective(model: &CafeModel, batch: &TrainingBatch) -> f64 {
    let mut fwd = Forward::eval(&model.params);
    let l = batch_loss(model, &mut fwd, batch).unwrap();
    fwd.tape.value(l).data()[0] / batch.masked_positions() as f64
}

/// Analytic gradient of [`objective`] for every parameter, in store order.
pub fn objective_grads(model: &CafeModel, batch: &TrainingBatch) -> Vec<Vec<f64>> {
    let mut params = model.params.clone();
    params.zero_grad();
    let mut fwd = Forward::eval(&model.params);
    let l = batch_loss(model, &mut fwd, batch).unwrap();
    let mut tape = fwd.into_tape();
    let obj = tape.scale(l, 1.0 / batch.masked_positions() as f64).unwrap();
    tape.backward_into(obj, &mut params).unwrap();
    params
        .iter()
        .map(|(_, _, t)| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect()
}

/// Worst relative error between analytic and central-difference gradients
/// over every parameter entry, with the name of the worst parameter.
pub fn model_gradcheck(model: &CafeModel, batch: &TrainingBatch, h: f64, floor: f64) -> (f64, String) {
    let analytic = objective_grads(model, batch);
    let mut probe = model.clone();
    let ids: Vec<_> = probe.params.ids().collect();
    let mut worst = (0.0, String::new());
    for (k, id) in ids.into_iter().enumerate() {
        for i in 0..probe.params.get(id).numel() {
            let orig = probe.params.get(id).data()[i];
            probe.params.get_mut(id).data_mut()[i] = orig + h;
            let up = objective(&probe, batch);
            probe.params.get_mut(id).data_mut()[i] = orig - h;
            let down = objective(&probe, batch);
            probe.params.get_mut(id).data_mut()[i] = orig;
            let e = rel_err(analytic[k][i], (up - down) / (2.0 * h), floor);
            if e > worst.0 {
                worst = (e, format!("{}[{i}]", probe.params.name(id)));
            }
        }
    }
    worst
}

/// Metrics from explicit ranked relevance lists: DCG over positions, ideal
/// DCG from the sorted list, first relevant position for reciprocal rank.
pub fn brute_force_metrics(ranks: &[usize], k: usize) -> (f64, f64, f64) {
    let (mut hr, mut ndcg, mut mrr) = (0.0, 0.0, 0.0);
    for &r in ranks {
        let list: Vec<f64> = (1..=r.max(101)).map(|p| if p == r { 1.0 } else { 0.0 }).collect();
        let mut ideal = list.clone();
        ideal.sort_by(|a, b| b.total_cmp(a));
        let dcg_at = |l: &[f64]| -> f64 { l.iter().take(k).enumerate().map(|(i, g)| g / ((i + 2) as f64).log2()).sum() };
        ndcg += dcg_at(&list) / dcg_at(&ideal);
        hr += if list.iter().take(k).any(|&g| g > 0.0) { 1.0 } else { 0.0 };
        mrr += 1.0 / (list.iter().position(|&g| g > 0.0).unwrap() + 1) as f64;
    }
    let n = ranks.len() as f64;
    (hr / n, ndcg / n, mrr / n)
}
