mod common;

use std::collections::HashSet;

use cafe::data::{generate_synthetic, parse_dataset_str, training_counts, Dataset, Interaction, SynthSpec};
use cafe::evaluation::{
    average_attention, compute_metrics, evaluate, evaluate_model, joint_log_score, joint_score, rank_of_truth,
    sample_eval_candidates, training_hit_rate, training_hit_rate_full, EvalProtocol, ModelScorer, PopRecScorer,
    Scorer, SplitRole, Stream,
};
use cafe::layers::Forward;
use cafe::model::{score_items, CafeModel, ModelConfig, SequenceBatch, Variant};
use cafe::Error;
use common::{brute_force_metrics, catalog, random_dataset, rng, toy_model};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn exactly_enough_eligible_items_are_all_selected() {
    let counts: Vec<u64> = (0..=102).map(|i| if i == 0 { 0 } else { 1 + i % 7 }).collect();
    let history: HashSet<usize> = [2].into();
    let cands = sample_eval_candidates(1, &history, &counts, 100, &mut rng(0)).unwrap();
    assert_eq!(cands.len(), 101);
    assert_eq!(*cands.last().unwrap(), 1);
    let mut negs = cands[..100].to_vec();
    negs.sort_unstable();
    assert_eq!(negs, (3..=102).collect::<Vec<_>>());
}

#[test]
fn zero_count_items_wait_for_positive_ones() {
    // Items 1..=150 seen in training, 151..=200 never.
    let counts: Vec<u64> = (0..=200).map(|i| u64::from((1..=150).contains(&i))).collect();
    for seed in 0..20 {
        let c = sample_eval_candidates(1, &HashSet::new(), &counts, 100, &mut rng(seed)).unwrap();
        assert!(c[..100].iter().all(|&v| v <= 150));
    }
    // Only 80 positive items remain eligible: all of them, then 20 zero-count ones.
    let history: HashSet<usize> = (2..=70).collect();
    let c = sample_eval_candidates(1, &history, &counts, 100, &mut rng(1)).unwrap();
    assert_eq!(c[..100].iter().filter(|&&v| v <= 150).count(), 80);
}

#[test]
fn popularity_sampling_follows_counts() {
    // counts a=9000, b=1000, three items with weight 1; one negative per trial.
    let counts = vec![0, 9000, 1000, 1, 1, 1, 0];
    let (mut a, mut b) = (0usize, 0usize);
    let mut r = rng(42);
    for _ in 0..10_000 {
        match sample_eval_candidates(6, &HashSet::new(), &counts, 1, &mut r).unwrap()[0] {
            1 => a += 1,
            2 => b += 1,
            _ => {}
        }
    }
    let ratio = a as f64 / b as f64;
    assert!((ratio / 9.0 - 1.0).abs() <= 0.05, "{a}:{b}");
}

#[test]
fn too_few_eligible_items_is_an_error() {
    let counts = vec![0u64; 51];
    let err = sample_eval_candidates(1, &HashSet::new(), &counts, 50, &mut rng(0)).unwrap_err();
    assert!(matches!(err, Error::InsufficientCandidates { eligible: 49, needed: 50 }));
}

proptest! {
    #[test]
    fn truth_appears_once_and_history_never(seed in 0u64..100_000, hist in 0usize..60) {
        let mut r = rng(seed);
        let counts: Vec<u64> = (0..=250).map(|i| if i == 0 { 0 } else { r.random_range(0..20) }).collect();
        let truth = r.random_range(1..=250);
        let history: HashSet<usize> = (0..hist).map(|_| r.random_range(1..=250)).filter(|&v| v != truth).collect();
        let c = sample_eval_candidates(truth, &history, &counts, 100, &mut r).unwrap();
        prop_assert_eq!(c.len(), 101);
        prop_assert_eq!(c.iter().filter(|&&v| v == truth).count(), 1);
        prop_assert!(c.iter().all(|v| !history.contains(v) && *v != 0));
        prop_assert_eq!(c.iter().collect::<HashSet<_>>().len(), 101);
    }
}

#[test]
fn joint_score_at_zero_logits_is_a_quarter() {
    let cat = catalog(6, 2);
    let s = joint_score(3, &[0.0; 3], &[0.0; 7], &cat, true).unwrap();
    assert_eq!(s, 0.25);
    assert_eq!(joint_score(3, &[], &[0.0; 7], &cat, false).unwrap(), 0.5);
}

#[test]
fn unmapped_item_is_rejected() {
    let cat = catalog(6, 2);
    assert!(joint_score(7, &[0.0; 3], &[0.0; 8], &cat, true).is_err());
    assert!(joint_score(7, &[0.0; 3], &[0.0; 7], &cat, false).is_err());
    assert!(joint_log_score(0, &[0.0; 3], &[0.0; 7], &cat, true).is_err());
}

fn order_by(items: &[usize], key: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut v = items.to_vec();
    v.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    v
}

proptest! {
    #[test]
    fn conditional_ranking_follows_item_logits(rv in prop::collection::vec(-8.0f64..8.0, 11)) {
        let cat = catalog(10, 3);
        let items: Vec<usize> = cat.items().collect();
        let by_logit = order_by(&items, |v| rv[v]);
        let by_score = order_by(&items, |v| joint_score(v, &[], &rv, &cat, false).unwrap());
        let by_log = order_by(&items, |v| joint_log_score(v, &[], &rv, &cat, false).unwrap());
        prop_assert_eq!(&by_logit, &by_score);
        prop_assert_eq!(&by_logit, &by_log);
    }

    /// Candidates sharing an intent keep their item-only order under the joint rule.
    #[test]
    fn shared_intent_factor_cancels(
        rv in prop::collection::vec(-8.0f64..8.0, 13),
        rc in prop::collection::vec(-8.0f64..8.0, 4),
        intent in 1usize..=3,
    ) {
        let cat = catalog(12, 3);
        let same: Vec<usize> = cat.items().filter(|&v| cat.intent_of(v).unwrap() == intent).collect();
        let joint = order_by(&same, |v| joint_log_score(v, &rc, &rv, &cat, true).unwrap());
        prop_assert_eq!(joint, order_by(&same, |v| rv[v]));
    }

    #[test]
    fn joint_log_score_orders_like_the_product(
        rv in prop::collection::vec(-8.0f64..8.0, 13),
        rc in prop::collection::vec(-8.0f64..8.0, 4),
    ) {
        let cat = catalog(12, 3);
        for v in cat.items() {
            let p = joint_score(v, &rc, &rv, &cat, true).unwrap();
            let l = joint_log_score(v, &rc, &rv, &cat, true).unwrap();
            prop_assert!((p.ln() - l).abs() <= 1e-12);
        }
    }

    /// Shifting every item logit by a constant keeps the truth's rank under
    /// the item-only rule, and among same-intent candidates under the joint one.
    #[test]
    fn constant_shift_keeps_ranks(
        rv in prop::collection::vec(-5.0f64..5.0, 13),
        rc in prop::collection::vec(-5.0f64..5.0, 4),
        shift in -5.0f64..5.0,
        truth in 1usize..=12,
    ) {
        let cat = catalog(12, 3);
        let shifted: Vec<f64> = rv.iter().map(|x| x + shift).collect();
        let rank = |cands: &[usize], r: &[f64], joint: bool| {
            let s: Vec<f64> = cands.iter().map(|&v| joint_log_score(v, &rc, r, &cat, joint).unwrap()).collect();
            rank_of_truth(cands, &s, cands.len() - 1).unwrap()
        };
        let all: Vec<usize> = cat.items().filter(|&v| v != truth).chain([truth]).collect();
        prop_assert_eq!(rank(&all, &rv, false), rank(&all, &shifted, false));
        let c = cat.intent_of(truth).unwrap();
        let same: Vec<usize> = all.iter().copied().filter(|&v| cat.intent_of(v).unwrap() == c).collect();
        prop_assert_eq!(rank(&same, &rv, true), rank(&same, &shifted, true));
    }
}

#[test]
fn ties_go_to_the_lower_item_id() {
    let cands = [5, 2, 9, 4];
    let scores = [1.0, 1.0, 3.0, 1.0];
    assert_eq!(rank_of_truth(&cands, &scores, 3).unwrap(), 3);
    assert_eq!(rank_of_truth(&cands, &scores, 1).unwrap(), 2);
    assert!(rank_of_truth(&cands, &[1.0, f64::NAN, 0.0, 0.0], 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metrics_match_brute_force(ranks in prop::collection::vec(1usize..=101, 1..40), k in 1usize..=10) {
        let m = compute_metrics(&ranks, k).unwrap();
        let (hr, ndcg, mrr) = brute_force_metrics(&ranks, k);
        prop_assert_eq!(m.hr, hr);
        prop_assert_eq!(m.ndcg, ndcg);
        prop_assert_eq!(m.mrr, mrr);
        for v in [m.hr, m.ndcg, m.mrr] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.hr >= m.ndcg);
        for &r in &ranks {
            let hit = if r <= k { 1.0 } else { 0.0 };
            prop_assert!(hit >= hit / ((r + 1) as f64).log2());
        }
    }
}

#[test]
fn metric_closed_forms() {
    let m = compute_metrics(&[1, 1, 1], 5).unwrap();
    assert_eq!((m.hr, m.ndcg, m.mrr), (1.0, 1.0, 1.0));
    let m = compute_metrics(&[3], 5).unwrap();
    assert_eq!(m.ndcg, 0.5);
    assert_eq!(m.mrr, 1.0 / 3.0);
    let m = compute_metrics(&[1, 2, 6], 5).unwrap();
    assert!((m.hr - 2.0 / 3.0).abs() < 1e-15);
    assert!((m.ndcg - (1.0 + 1.0 / 3f64.log2()) / 3.0).abs() < 1e-15);
    assert!((m.mrr - (1.0 + 0.5 + 1.0 / 6.0) / 3.0).abs() < 1e-15);
    assert!(matches!(compute_metrics(&[], 5), Err(Error::Empty(_))));
    assert!(compute_metrics(&[0], 5).is_err());
}

struct Oracle;

impl Scorer for Oracle {
    fn score(&self, histories: &[&[Interaction]], candidates: &[Vec<usize>]) -> cafe::Result<Vec<Vec<f64>>> {
        assert_eq!(histories.len(), candidates.len());
        Ok(candidates
            .iter()
            .map(|c| (0..c.len()).map(|j| if j + 1 == c.len() { f64::INFINITY } else { j as f64 }).collect())
            .collect())
    }
}

fn synthetic(users: usize, seed: u64) -> Dataset {
    generate_synthetic(&SynthSpec {
        users,
        intents: 10,
        items_per_intent: 30,
        min_len: 4,
        max_len: 15,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

#[test]
fn scorer_that_knows_the_truth_scores_one() {
    let data = synthetic(80, 1);
    let report = evaluate(&Oracle, &data, "toy", &EvalProtocol::default(), 3).unwrap();
    assert_eq!(report.users_evaluated(), 80);
    assert_eq!((report.metrics.hr, report.metrics.ndcg, report.metrics.mrr), (1.0, 1.0, 1.0));
}

#[test]
fn untrained_model_ranks_uniformly() {
    // Items drawn independently of the history: any sequential structure
    // would let even random embeddings favour the truth.
    let cat = catalog(300, 10);
    let data = random_dataset(&mut rng(2), &cat, 600, 4..=15);
    let mut c = ModelConfig::for_catalog(&data.catalog).with_variant(Variant::Cafe);
    c.d = 16;
    c.max_len = 15;
    let model = CafeModel::new(c, 4).unwrap();
    let report = evaluate_model(&model, &data, "toy", &EvalProtocol::default(), 5).unwrap();
    assert!(report.users_evaluated() >= 500);
    let expect: f64 = (1..=101).map(|r| 1.0 / r as f64).sum::<f64>() / 101.0;
    assert!((expect - 0.0514).abs() < 1e-4);
    assert!((report.metrics.mrr - expect).abs() <= 0.01, "{}", report.metrics.mrr);
}

const POP_TOY: &str = "\
1\t1\t1\t0\n1\t2\t2\t1\n1\t1\t1\t2\n1\t3\t1\t3\n1\t4\t2\t4\n\
2\t2\t2\t0\n2\t1\t1\t1\n2\t5\t1\t2\n2\t6\t2\t3\n2\t2\t2\t4\n\
3\t1\t1\t0\n3\t5\t1\t1\n3\t3\t1\t2\n\
4\t6\t2\t0\n4\t4\t2\t1\n";

#[test]
fn poprec_report_matches_hand_ranks() {
    let data = parse_dataset_str(POP_TOY).unwrap();
    // Training prefixes: [1, 2, 1], [2, 1, 5], [1] and [6, 4] (too short to hold out).
    assert_eq!(training_counts(&data), vec![0, 4, 2, 0, 1, 1, 1]);
    let scorer = PopRecScorer {
        counts: training_counts(&data),
    };
    // With history kept, every other item is a candidate, so the ranking is the
    // full popularity order 1, 2, 4, 5, 6, 3.
    let protocol = EvalProtocol {
        num_negatives: 5,
        exclude_history: false,
        ..EvalProtocol::default()
    };
    let test = evaluate(&scorer, &data, "toy", &protocol, 0).unwrap();
    assert_eq!(test.ranks, vec![(1, 3), (2, 2), (3, 6)]);
    assert_eq!(test.users_skipped, 1);
    let valid = evaluate(
        &scorer,
        &data,
        "toy",
        &EvalProtocol {
            role: SplitRole::Validation,
            ..protocol
        },
        0,
    )
    .unwrap();
    assert_eq!(valid.ranks, vec![(1, 6), (2, 5), (3, 4)]);
    let m = &test.metrics;
    assert!((m.ndcg - (0.5 + 1.0 / 3f64.log2()) / 3.0).abs() < 1e-15);
    assert!((m.hr - 2.0 / 3.0).abs() < 1e-15);
    assert!((m.mrr - (1.0 / 3.0 + 0.5 + 1.0 / 6.0) / 3.0).abs() < 1e-15);
}

#[test]
fn report_renders_every_field() {
    let data = parse_dataset_str(POP_TOY).unwrap();
    let scorer = PopRecScorer {
        counts: training_counts(&data),
    };
    let protocol = EvalProtocol {
        num_negatives: 5,
        exclude_history: false,
        ..EvalProtocol::default()
    };
    let r = evaluate(&scorer, &data, "toy", &protocol, 9).unwrap();
    let text = r.render_text();
    for key in [
        "dataset: toy",
        "split: test",
        "K: 5",
        "HR@5: ",
        "NDCG@5: ",
        "MRR: ",
        "users_evaluated: 3",
        "users_skipped: 1",
        "seed: 9",
        "history_excluded: false",
    ] {
        assert!(text.contains(key), "{key} missing from\n{text}");
    }
    let record = r.render_record();
    assert_eq!(record.lines().count(), 1);
    assert!(record.starts_with("dataset=toy split=test K=5 HR="));
    assert_eq!(r.render_ranks(), "1\t3\n2\t2\n3\t6\n");
}

#[test]
fn model_scores_use_the_last_history_position() {
    let cat = catalog(20, 4);
    let data = random_dataset(&mut rng(1), &cat, 3, 3..=8);
    let model = toy_model(Variant::FusedIntentJoint, 1);
    let scorer = ModelScorer {
        model: &model,
        catalog: &data.catalog,
    };
    let hist: Vec<&[Interaction]> = data.sequences.iter().map(|s| &s.events[..s.len() - 1]).collect();
    let (rv, rc) = scorer.last_step_logits(&hist).unwrap();
    let rc = rc.unwrap();
    for (u, h) in hist.iter().enumerate() {
        let batch = SequenceBatch::from_histories(&[h], &cat, 6).unwrap();
        let mut fwd = Forward::eval(&model.params);
        let out = model.forward(&mut fwd, &batch).unwrap();
        let all = score_items(fwd.tape.value(out.fused), model.item_table()).unwrap();
        assert_eq!(rv.row(u), all.row(5));
        let cands: Vec<usize> = cat.items().collect();
        let s = scorer.score(&[h], &[cands.clone()]).unwrap();
        for (j, &v) in cands.iter().enumerate() {
            assert_eq!(s[0][j], joint_log_score(v, rc.row(u), rv.row(u), &cat, true).unwrap());
        }
    }
}

#[test]
fn joint_inference_needs_intent_logits() {
    let cat = catalog(20, 4);
    let data = random_dataset(&mut rng(2), &cat, 3, 4..=6);
    let mut model = toy_model(Variant::Fused, 2);
    model.config.switches.joint_inference = true;
    let scorer = ModelScorer {
        model: &model,
        catalog: &data.catalog,
    };
    let h: &[Interaction] = &data.sequences[0].events[..3];
    assert!(scorer.score(&[h], &[vec![1, 2]]).is_err());
}

#[test]
fn evaluation_is_deterministic_under_a_seed() {
    let data = synthetic(120, 3);
    let mut c = ModelConfig::for_catalog(&data.catalog);
    c.d = 8;
    c.max_len = 10;
    let model = CafeModel::new(c, 1).unwrap();
    let p = EvalProtocol::default();
    let a = evaluate_model(&model, &data, "s", &p, 7).unwrap();
    let b = evaluate_model(&model, &data, "s", &p, 7).unwrap();
    assert_eq!(a.render_text(), b.render_text());
    assert_eq!(a.render_ranks(), b.render_ranks());
    let other = toy_model(Variant::Backbone, 0);
    assert!(evaluate_model(&other, &data, "s", &p, 7).is_err());
}

#[test]
fn training_hit_rates_are_fractions() {
    let cat = catalog(20, 4);
    let data = random_dataset(&mut rng(3), &cat, 6, 5..=9);
    let model = toy_model(Variant::Cafe, 3);
    let full = training_hit_rate_full(&model, &data, 20).unwrap();
    assert_eq!(full, 1.0);
    let one = training_hit_rate_full(&model, &data, 1).unwrap();
    assert!((0.0..=1.0).contains(&one));
    let protocol = EvalProtocol {
        k: 1,
        num_negatives: 5,
        ..EvalProtocol::default()
    };
    let sampled = training_hit_rate(&model, &data, &protocol, 0).unwrap();
    assert!((0.0..=1.0).contains(&sampled));
    assert_eq!(sampled, training_hit_rate(&model, &data, &protocol, 0).unwrap());
}

#[test]
fn attention_rows_are_distributions_over_past_steps() {
    let cat = catalog(20, 4);
    let data = random_dataset(&mut rng(4), &cat, 8, 4..=9);
    let model = toy_model(Variant::Cafe, 4);
    let map = average_attention(&model, &data, SplitRole::Test, Stream::Item, 0, 1, 6).unwrap();
    for (i, row) in map.grid.iter().enumerate() {
        if map.counts[i] == 0 {
            continue;
        }
        let total: f64 = row.iter().sum::<f64>() + map.pad_mass[i];
        assert!((total - 1.0).abs() < 1e-9, "row {i}: {total}");
        assert!(row[i + 1..].iter().all(|&w| w == 0.0));
    }
    assert!(map.recent_mass(1).unwrap() > 0.0);
    assert!(average_attention(&model, &data, SplitRole::Test, Stream::Item, 1, 0, 6).is_err());
    assert!(average_attention(&model, &data, SplitRole::Test, Stream::Item, 0, 2, 6).is_err());
    let backbone = toy_model(Variant::Backbone, 4);
    assert!(average_attention(&backbone, &data, SplitRole::Test, Stream::Intent, 0, 0, 6).is_err());
    assert!("intent".parse::<Stream>().is_ok() && "x".parse::<Stream>().is_err());
}
