//! Model assembly: dual embeddings, intent and item encoders, additive
//! fusion and dot-product scoring heads. The item-only backbone and the
//! intermediate ablations are configurations of the same model.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{pad_truncate, Catalog, Interaction, PAD};
use crate::encoders::{EncoderStack, StackShape};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::layers::{BatchLayout, EmbeddingTable, Forward, PositionTable};
use crate::numerics::{read_tensor, write_tensor, ParamStore, Tensor, Var};
use crate::training::TrainingConfig;

/// The four ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Switches {
    /// (1) add the intent embedding to each item input embedding.
    pub fuse_intent_embedding: bool,
    /// (2) run the intent encoder and add its output to the item output.
    pub intent_stream: bool,
    /// (3) learned local-attention bias in the item encoder.
    pub local_mask: bool,
    /// (4) rank by intent probability × item probability.
    pub joint_inference: bool,
}

impl Switches {
    pub const BACKBONE: Self = Self {
        fuse_intent_embedding: false,
        intent_stream: false,
        local_mask: false,
        joint_inference: false,
    };
    pub const CAFE: Self = Self {
        fuse_intent_embedding: true,
        intent_stream: true,
        local_mask: true,
        joint_inference: true,
    };
}

/// Named columns of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Backbone,
    Fused,
    FusedIntent,
    FusedIntentLocal,
    FusedIntentJoint,
    Cafe,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Backbone,
        Variant::Fused,
        Variant::FusedIntent,
        Variant::FusedIntentLocal,
        Variant::FusedIntentJoint,
        Variant::Cafe,
    ];

    pub fn switches(self) -> Switches {
        let (f, i, l, j) = match self {
            Variant::Backbone => (false, false, false, false),
            Variant::Fused => (true, false, false, false),
            Variant::FusedIntent => (true, true, false, false),
            Variant::FusedIntentLocal => (true, true, true, false),
            Variant::FusedIntentJoint => (true, true, false, true),
            Variant::Cafe => (true, true, true, true),
        };
        Switches {
            fuse_intent_embedding: f,
            intent_stream: i,
            local_mask: l,
            joint_inference: j,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Backbone => "backbone",
            Variant::Fused => "+1",
            Variant::FusedIntent => "+1+2",
            Variant::FusedIntentLocal => "+1+2+3",
            Variant::FusedIntentJoint => "+1+2+4",
            Variant::Cafe => "cafe",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub max_len: usize,
    pub heads: usize,
    pub layers: usize,
    /// Real items, excluding padding.
    pub num_items: usize,
    /// Real intents, excluding padding.
    pub num_intents: usize,
    pub switches: Switches,
    /// Give each head its own slice of a `d`-wide distance table.
    pub per_head_distance: bool,
    pub dropout: f64,
    pub init_std: f64,
    pub layer_norm_eps: f64,
    pub training: TrainingConfig,
}

impl ModelConfig {
    /// Full model with the default hyperparameters (`d=128`, `n=50`, two
    /// layers of two heads).
    pub fn new(num_items: usize, num_intents: usize) -> Self {
        Self {
            d: 128,
            max_len: 50,
            heads: 2,
            layers: 2,
            num_items,
            num_intents,
            switches: Switches::CAFE,
            per_head_distance: false,
            dropout: 0.2,
            init_std: 0.02,
            layer_norm_eps: 1e-8,
            training: TrainingConfig::default(),
        }
    }

    pub fn for_catalog(catalog: &Catalog) -> Self {
        Self::new(catalog.num_items(), catalog.num_intents())
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.switches = v.switches();
        self
    }

    pub fn uses_intents(&self) -> bool {
        self.switches.fuse_intent_embedding || self.switches.intent_stream
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("heads={} must divide d={}", self.heads, self.d));
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1".into());
        }
        if self.num_items == 0 {
            return bad("no items".into());
        }
        if self.switches.joint_inference && !self.switches.intent_stream {
            return bad("joint_inference needs intent_stream".into());
        }
        if self.uses_intents() && self.num_intents == 0 {
            return bad("intent switches need intent data".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.training.validate()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("d", self.d);
        kv.set("max_len", self.max_len);
        kv.set("heads", self.heads);
        kv.set("layers", self.layers);
        kv.set("num_items", self.num_items);
        kv.set("num_intents", self.num_intents);
        kv.set("fuse_intent_embedding", self.switches.fuse_intent_embedding);
        kv.set("intent_stream", self.switches.intent_stream);
        kv.set("local_mask", self.switches.local_mask);
        kv.set("joint_inference", self.switches.joint_inference);
        kv.set("per_head_distance", self.per_head_distance);
        kv.set("dropout", self.dropout);
        kv.set("init_std", self.init_std);
        kv.set("layer_norm_eps", self.layer_norm_eps);
        self.training.write_kv(&mut kv);
        kv
    }

    /// Overwrites fields named in `kv`; unknown keys are ignored so that run
    /// configs can carry other sections.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.apply("d", &mut self.d)?;
        kv.apply("max_len", &mut self.max_len)?;
        kv.apply("heads", &mut self.heads)?;
        kv.apply("layers", &mut self.layers)?;
        kv.apply("num_items", &mut self.num_items)?;
        kv.apply("num_intents", &mut self.num_intents)?;
        if let Some(v) = kv.get("variant") {
            let variant = Variant::ALL
                .into_iter()
                .find(|x| x.name() == v)
                .ok_or_else(|| Error::Config(format!("unknown variant {v:?}")))?;
            self.switches = variant.switches();
        }
        kv.apply("fuse_intent_embedding", &mut self.switches.fuse_intent_embedding)?;
        kv.apply("intent_stream", &mut self.switches.intent_stream)?;
        kv.apply("local_mask", &mut self.switches.local_mask)?;
        kv.apply("joint_inference", &mut self.switches.joint_inference)?;
        kv.apply("per_head_distance", &mut self.per_head_distance)?;
        kv.apply("dropout", &mut self.dropout)?;
        kv.apply("init_std", &mut self.init_std)?;
        kv.apply("layer_norm_eps", &mut self.layer_norm_eps)?;
        self.training.apply_kv(kv)
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut c = Self::new(0, 0);
        c.apply_kv(kv)?;
        c.validate()?;
        Ok(c)
    }

    fn stack_shape(&self) -> StackShape {
        StackShape {
            d: self.d,
            d_ff: self.d,
            heads: self.heads,
            layers: self.layers,
            n: self.max_len,
            eps: self.layer_norm_eps,
            init_std: self.init_std,
        }
    }
}

/// Padded token matrices for a batch of sequences, all of length `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub items: Vec<usize>,
    pub intents: Vec<usize>,
    /// True where the position is padding; also masks those keys in attention.
    pub pad: Vec<bool>,
    pub batch: usize,
    pub n: usize,
}

impl SequenceBatch {
    /// Left-pads/truncates each history to `n` and checks every interaction
    /// against the catalog's item → intent map.
    pub fn from_histories(histories: &[&[Interaction]], catalog: &Catalog, n: usize) -> Result<Self> {
        let mut items = Vec::with_capacity(histories.len() * n);
        let mut intents = Vec::with_capacity(histories.len() * n);
        for h in histories {
            for e in h.iter() {
                let mapped = catalog.intent_of(e.item)?;
                if mapped != e.intent {
                    return Err(Error::Integrity(format!(
                        "item {} paired with intent {} but maps to {}",
                        e.item, e.intent, mapped
                    )));
                }
            }
            let it: Vec<usize> = h.iter().map(|e| e.item).collect();
            let ct: Vec<usize> = h.iter().map(|e| e.intent).collect();
            items.extend(pad_truncate(&it, n));
            intents.extend(pad_truncate(&ct, n));
        }
        Ok(Self::from_padded(items, intents, n))
    }

    /// Wraps already padded rows; padding is wherever the item id is [`PAD`].
    pub fn from_padded(items: Vec<usize>, intents: Vec<usize>, n: usize) -> Self {
        assert_eq!(items.len(), intents.len());
        assert!(n > 0 && items.len() % n == 0);
        let pad = items.iter().map(|&i| i == PAD).collect();
        Self {
            batch: items.len() / n,
            items,
            intents,
            pad,
            n,
        }
    }

    pub fn layout(&self) -> BatchLayout<'_> {
        BatchLayout {
            batch: self.batch,
            n: self.n,
            pad: &self.pad,
        }
    }
}

/// Encoder outputs for one batch, all `[B*n, d]`.
pub struct ModelOutput {
    /// Intent representations (only with the intent stream).
    pub intent_repr: Option<Var>,
    /// Item encoder output before fusion.
    pub item_repr: Var,
    /// `item_repr + intent_repr` with the intent stream, else `item_repr`.
    pub fused: Var,
    pub item_attention: Vec<Vec<Var>>,
    pub intent_attention: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct CafeModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub item_emb: EmbeddingTable,
    pub item_pos: PositionTable,
    pub item_encoder: EncoderStack,
    pub intent_emb: Option<EmbeddingTable>,
    pub intent_pos: Option<PositionTable>,
    pub intent_encoder: Option<EncoderStack>,
}

impl CafeModel {
    /// Builds a model with weights drawn from N(0, init_std²) (biases zero,
    /// layer-norm gains one), deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d, n, std) = (config.d, config.max_len, config.init_std);
        let sw = config.switches;

        let item_emb = EmbeddingTable::new(&mut params, "item_embedding", config.num_items + 1, d, std, &mut rng);
        let item_pos = PositionTable::new(&mut params, "item_position", n, d, std, &mut rng);
        let intent_emb = config
            .uses_intents()
            .then(|| EmbeddingTable::new(&mut params, "intent_embedding", config.num_intents + 1, d, std, &mut rng));
        let intent_pos = sw
            .intent_stream
            .then(|| PositionTable::new(&mut params, "intent_position", n, d, std, &mut rng));
        let item_encoder = EncoderStack::new(
            &mut params,
            "item_encoder",
            config.stack_shape(),
            sw.local_mask,
            config.per_head_distance,
            &mut rng,
        )?;
        let intent_encoder = if sw.intent_stream {
            Some(EncoderStack::new(
                &mut params,
                "intent_encoder",
                config.stack_shape(),
                false,
                false,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            item_emb,
            item_pos,
            item_encoder,
            intent_emb,
            intent_pos,
            intent_encoder,
        })
    }

    pub fn forward(&self, fwd: &mut Forward, batch: &SequenceBatch) -> Result<ModelOutput> {
        if batch.n != self.config.max_len {
            return Err(Error::Config(format!(
                "batch length {} but model expects {}",
                batch.n, self.config.max_len
            )));
        }
        let layout = batch.layout();

        let mut item_in = self.item_emb.lookup(fwd, &batch.items)?;
        if self.config.switches.fuse_intent_embedding {
            let c = self.intent_emb.as_ref().expect("built with intents").lookup(fwd, &batch.intents)?;
            item_in = fwd.tape.add(item_in, c)?;
        }
        let pos = self.item_pos.tiled(fwd, batch.batch)?;
        let item_in = fwd.tape.add(item_in, pos)?;
        let item_in = fwd.dropout(item_in)?;
        let item = self.item_encoder.encode(fwd, item_in, layout)?;

        let (intent_repr, fused, intent_attention) = match &self.intent_encoder {
            Some(enc) => {
                let emb = self.intent_emb.as_ref().expect("built with intents");
                let pos = self.intent_pos.as_ref().expect("built with intent stream");
                let e = emb.lookup(fwd, &batch.intents)?;
                let p = pos.tiled(fwd, batch.batch)?;
                let x = fwd.tape.add(e, p)?;
                let x = fwd.dropout(x)?;
                let enc = enc.encode(fwd, x, layout)?;
                let fused = fwd.tape.add(item.out, enc.out)?;
                (Some(enc.out), fused, enc.attention)
            }
            None => (None, item.out, Vec::new()),
        };
        Ok(ModelOutput {
            intent_repr,
            item_repr: item.out,
            fused,
            item_attention: item.attention,
            intent_attention,
        })
    }

    /// Logits `repr_r · table[ids_r]` for each row `r` of `repr` (`[rows]`).
    pub fn gather_logits(&self, fwd: &mut Forward, repr: Var, table: &EmbeddingTable, ids: &[usize]) -> Result<Var> {
        let e = table.lookup(fwd, ids)?;
        let prod = fwd.tape.mul(repr, e)?;
        Ok(fwd.tape.sum_lastdim(prod)?)
    }

    /// Representations at the last position of each sequence (`[B, d]`).
    /// With left padding this is the most recent interaction.
    pub fn last_positions(&self, fwd: &mut Forward, repr: Var, batch: &SequenceBatch) -> Result<Var> {
        let rows: Vec<usize> = (0..batch.batch).map(|b| b * batch.n + batch.n - 1).collect();
        Ok(fwd.tape.gather_rows(repr, &rows)?)
    }

    pub fn item_table(&self) -> &Tensor {
        self.params.get(self.item_emb.table)
    }

    pub fn intent_table(&self) -> Option<&Tensor> {
        self.intent_emb.as_ref().map(|e| self.params.get(e.table))
    }

    /// Writes `manifest.txt` plus one tensor blob per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("params"))?;
        let mut manifest = self.config.to_kv();
        manifest.set("format", CHECKPOINT_FORMAT);
        manifest.set("num_params", self.params.len());
        fs::write(dir.join("manifest.txt"), manifest.render())?;
        for (_, name, t) in self.params.iter() {
            let mut w = BufWriter::new(fs::File::create(dir.join("params").join(format!("{name}.bin")))?);
            write_tensor(&mut w, t)?;
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let kv = KvMap::parse(&text)?;
        if kv.get("format") != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", dir.display())));
        }
        let config = ModelConfig::from_kv(&kv)?;
        let mut model = Self::new(config, 0)?;
        if kv.parsed::<usize>("num_params")? != Some(model.params.len()) {
            return Err(Error::Checkpoint("parameter count does not match configuration".into()));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let path = dir.join("params").join(format!("{name}.bin"));
            let mut r = BufReader::new(
                fs::File::open(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?,
            );
            let loaded = read_tensor(&mut r)?;
            let slot = model.params.get_mut(id);
            if loaded.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    loaded.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(loaded.data());
        }
        Ok(model)
    }
}

const CHECKPOINT_FORMAT: &str = "cafe-checkpoint-v1";

/// Intent logits `r_c · E_cᵀ`: `[rows, d]` × `[|C|+1, d]` → `[rows, |C|+1]`.
/// Column `j` scores intent id `j` (column 0 is padding).
pub fn score_intents(intent_repr: &Tensor, intent_table: &Tensor) -> Result<Tensor> {
    Ok(intent_repr.matmul_nt(intent_table)?)
}

/// Item logits `r · E_vᵀ`, column `k` scoring item id `k`.
pub fn score_items(repr: &Tensor, item_table: &Tensor) -> Result<Tensor> {
    Ok(repr.matmul_nt(item_table)?)
}

/// Popularity baseline: each item's score is its training interaction count.
/// The padding slot scores `-inf`.
pub fn poprec_scores(catalog: &Catalog, train_counts: &[u64]) -> Result<Tensor> {
    if train_counts.len() != catalog.item_vocab() {
        return Err(Error::Config(format!(
            "{} counts for a vocabulary of {}",
            train_counts.len(),
            catalog.item_vocab()
        )));
    }
    let mut scores: Vec<f64> = train_counts.iter().map(|&c| c as f64).collect();
    scores[PAD] = f64::NEG_INFINITY;
    Ok(Tensor::new(vec![scores.len()], scores)?)
}
