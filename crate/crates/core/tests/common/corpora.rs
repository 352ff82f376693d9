//! Fixed corpora and model settings shared by the slow tests.

#![allow(dead_code)]

use std::collections::HashMap;

use cafe::data::{build_dataset, generate_synthetic, parse_records, render_dataset, Dataset, SynthSpec};
use cafe::model::{ModelConfig, Variant};

pub const MEMO_USERS: usize = 50;
pub const MEMO_INTENTS: usize = 10;
pub const MEMO_ITEMS_PER_INTENT: usize = 20;

/// 50 users over exactly 200 items in 10 intents, uniform within intent.
///
/// The random walk can miss a few items; each missing item replaces one
/// event of an over-represented item in the same intent, so the catalog is
/// complete and every user keeps its length.
pub fn memorization_corpus(seed: u64) -> Dataset {
    let spec = SynthSpec {
        users: MEMO_USERS,
        intents: MEMO_INTENTS,
        items_per_intent: MEMO_ITEMS_PER_INTENT,
        min_len: 10,
        max_len: 30,
        stickiness: 0.9,
        skew: 0.0,
        min_item_freq: 1,
        seed,
    };
    let synth = generate_synthetic(&spec).unwrap();
    let mut records = parse_records(&render_dataset(&synth)).unwrap();
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for r in &records {
        *counts.entry(r.item).or_default() += 1;
    }
    let total = (MEMO_INTENTS * MEMO_ITEMS_PER_INTENT) as u64;
    let missing: Vec<u64> = (1..=total).filter(|i| !counts.contains_key(i)).collect();
    for missing in missing {
        let intent = (missing - 1) / MEMO_ITEMS_PER_INTENT as u64 + 1;
        let slot = records
            .iter()
            .position(|r| r.intent == intent && counts[&r.item] >= 2)
            .unwrap_or_else(|| panic!("intent {intent} has no spare event"));
        *counts.get_mut(&records[slot].item).unwrap() -= 1;
        records[slot].item = missing;
        counts.insert(missing, 1);
    }
    let data = build_dataset(&records).unwrap();
    assert_eq!(data.catalog.num_items(), total as usize);
    assert_eq!(data.catalog.num_intents(), MEMO_INTENTS);
    data
}

/// Small, dropout-free model that can overfit the memorization corpus.
pub fn memorization_config(data: &Dataset) -> ModelConfig {
    let mut c = ModelConfig::for_catalog(&data.catalog).with_variant(Variant::Cafe);
    c.d = 32;
    c.max_len = 30;
    c.layers = 2;
    c.heads = 2;
    c.dropout = 0.0;
    c.training.batch_size = 4;
    c.training.learning_rate = 3e-3;
    c.training.epochs = 200;
    c
}

/// Sparse intent-sticky corpus used for the ablation and sparsity runs.
pub fn ablation_spec(min_item_freq: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        users: 2000,
        intents: 20,
        items_per_intent: 100,
        min_len: 5,
        max_len: 20,
        stickiness: 0.9,
        skew: 1.2,
        min_item_freq,
        seed,
    }
}

pub fn ablation_config(data: &Dataset, variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::for_catalog(&data.catalog).with_variant(variant);
    c.d = 32;
    c.max_len = 20;
    c.layers = 2;
    c.heads = 2;
    c.dropout = 0.2;
    c.training.batch_size = 64;
    c.training.learning_rate = 1e-3;
    c.training.epochs = 10;
    c
}
