//! Batch command-line surface: `generate`, `train`, `evaluate`,
//! `inspect-attention` and `export-embeddings`.
//!
//! Every command reads a flat `key=value` config file, applies `--set`
//! overrides, rejects unknown keys before doing any work, and writes a
//! resolved-config manifest next to its outputs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use cafe::data::{generate_synthetic, item_frequencies, parse_dataset, render_dataset, Dataset, SynthSpec};
use cafe::evaluation::{
    average_attention, evaluate, evaluate_model, EvalProtocol, PopRecScorer, RankingReport, SplitRole, Stream,
};
use cafe::kv::KvMap;
use cafe::model::{CafeModel, ModelConfig};
use cafe::training::{render_loss_trace, train};
use clap::{Args, Parser, Subcommand};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "CAFE_OUTPUT_DIR";
const FALLBACK_OUTPUT_DIR: &str = "cafe-out";

pub const CORPUS_FILE: &str = "corpus.tsv";
pub const CORPUS_MANIFEST: &str = "corpus.manifest";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_FILE: &str = "loss.tsv";
pub const TRAIN_MANIFEST: &str = "train.manifest";
pub const REPORT_FILE: &str = "report.txt";
pub const RECORD_FILE: &str = "report.record";
pub const RANKS_FILE: &str = "ranks.tsv";
pub const EVAL_MANIFEST: &str = "evaluate.manifest";
pub const ATTENTION_FILE: &str = "attention.txt";
pub const ATTENTION_MANIFEST: &str = "inspect-attention.manifest";
pub const ITEM_EMBEDDINGS_FILE: &str = "item_embeddings.tsv";
pub const INTENT_EMBEDDINGS_FILE: &str = "intent_embeddings.tsv";
pub const EXPORT_MANIFEST: &str = "export-embeddings.manifest";

#[derive(Debug, Parser)]
#[command(name = "cafe", version, about = "Coarse-to-fine self-attentive sequential recommender")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus and its spec manifest.
    Generate(CommonArgs),
    /// Train a model; writes a checkpoint and the per-epoch loss trace.
    Train(CommonArgs),
    /// Rank held-out interactions among sampled negatives.
    Evaluate(CommonArgs),
    /// Dump one head's average attention map over evaluation histories.
    InspectAttention(CommonArgs),
    /// Dump the item (and intent) embedding tables as text.
    ExportEmbeddings(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// key=value config file.
    #[arg(short, long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (default: $CAFE_OUTPUT_DIR, else ./cafe-out).
    #[arg(short, long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Files a command wrote and a short human-readable summary.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::InspectAttention(a) => cmd_inspect_attention(&a),
        Command::ExportEmbeddings(a) => cmd_export_embeddings(&a),
    }
}

/// Config file (if any) with `--set` overrides applied in order.
pub fn resolve_config(args: &CommonArgs) -> Result<KvMap> {
    let mut kv = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            KvMap::parse(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => KvMap::new(),
    };
    for s in &args.set {
        ensure!(s.contains('='), "--set expects KEY=VALUE, got {s:?}");
        kv.merge(&KvMap::parse(s)?);
    }
    Ok(kv)
}

pub fn output_dir(args: &CommonArgs) -> PathBuf {
    args.out
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUTPUT_DIR))
}

fn check_keys<'a>(kv: &KvMap, allowed: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let allowed: BTreeSet<&str> = allowed.into_iter().collect();
    let unknown: Vec<&str> = kv.keys().filter(|k| !allowed.contains(k)).collect();
    if !unknown.is_empty() {
        bail!("unknown config keys: {}", unknown.join(", "));
    }
    Ok(())
}

fn required<'a>(kv: &'a KvMap, key: &str) -> Result<&'a str> {
    kv.get(key).with_context(|| format!("missing required key `{key}`"))
}

fn parsed_or<T: std::str::FromStr>(kv: &KvMap, key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    Ok(kv.parsed(key)?.unwrap_or(default))
}

fn load_dataset(path: &str) -> Result<Dataset> {
    parse_dataset(Path::new(path)).with_context(|| format!("loading dataset {path}"))
}

fn load_checkpoint(path: &str) -> Result<CafeModel> {
    CafeModel::load(Path::new(path)).with_context(|| format!("loading checkpoint {path}"))
}

struct Writer {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(path.clone());
        Ok(path)
    }

    fn finish(self, summary: String) -> Outcome {
        Outcome {
            files: self.files,
            summary,
        }
    }
}

fn cmd_generate(args: &CommonArgs) -> Result<Outcome> {
    let kv = resolve_config(args)?;
    let spec = SynthSpec::from_kv(&kv)?;
    let data = generate_synthetic(&spec)?;
    let mut w = Writer::new(output_dir(args))?;
    let text = render_dataset(&data);
    let corpus = w.write(CORPUS_FILE, &text)?;
    w.write(CORPUS_MANIFEST, &spec.to_kv().render())?;

    let back = parse_dataset(&corpus)?;
    ensure!(back.sequences == data.sequences, "corpus did not parse back identically");
    let freq = item_frequencies(&back);
    let min = freq[1..].iter().copied().min().unwrap_or(0);
    ensure!(min as usize >= spec.min_item_freq, "item frequency {min} below the filter");
    let events: usize = back.sequences.iter().map(|s| s.len()).sum();
    let summary = format!(
        "users={} items={} intents={} interactions={} min_item_freq={min}\n",
        back.sequences.len(),
        back.catalog.num_items(),
        back.catalog.num_intents(),
        events
    );
    Ok(w.finish(summary))
}

/// Model keys accepted by `train`; vocabulary sizes come from the dataset.
fn model_keys() -> Vec<String> {
    ModelConfig::new(1, 0)
        .to_kv()
        .keys()
        .filter(|k| !matches!(*k, "num_items" | "num_intents"))
        .map(String::from)
        .chain(["variant".to_string()])
        .collect()
}

fn cmd_train(args: &CommonArgs) -> Result<Outcome> {
    let kv = resolve_config(args)?;
    let keys = model_keys();
    check_keys(&kv, keys.iter().map(String::as_str).chain(["dataset", "seed"]))?;
    let dataset = required(&kv, "dataset")?;
    let seed: u64 = parsed_or(&kv, "seed", 0)?;
    let data = load_dataset(dataset)?;
    let mut config = ModelConfig::for_catalog(&data.catalog);
    config.apply_kv(&kv)?;
    config.validate()?;

    let outcome = train(&data, &config, seed)?;
    let mut w = Writer::new(output_dir(args))?;
    let ckpt = w.path(CHECKPOINT_DIR);
    outcome.model.save(&ckpt)?;
    let reloaded = CafeModel::load(&ckpt)?;
    ensure!(
        same_values(&reloaded, &outcome.model),
        "checkpoint did not reload identically"
    );
    w.files.push(ckpt);
    w.write(LOSS_FILE, &render_loss_trace(&outcome.loss_trace))?;

    let mut manifest = config.to_kv();
    manifest.set("dataset", dataset);
    manifest.set("seed", seed);
    w.write(TRAIN_MANIFEST, &manifest.render())?;
    let summary = match outcome.loss_trace.last() {
        Some(l) => format!("epochs={} final_loss={l}\n", outcome.loss_trace.len()),
        None => "epochs=0\n".to_string(),
    };
    Ok(w.finish(summary))
}

/// Parameter names, shapes and values agree (gradient buffers are ignored).
pub fn same_values(a: &CafeModel, b: &CafeModel) -> bool {
    a.config == b.config
        && a.params.len() == b.params.len()
        && a.params
            .iter()
            .zip(b.params.iter())
            .all(|((_, na, ta), (_, nb, tb))| na == nb && ta.shape() == tb.shape() && ta.data() == tb.data())
}

const EVAL_KEYS: [&str; 11] = [
    "dataset",
    "checkpoint",
    "scorer",
    "name",
    "k",
    "num_negatives",
    "split",
    "exclude_history",
    "eval_batch_size",
    "joint_inference",
    "seed",
];

fn protocol_from(kv: &KvMap) -> Result<EvalProtocol> {
    let d = EvalProtocol::default();
    Ok(EvalProtocol {
        k: parsed_or(kv, "k", d.k)?,
        num_negatives: parsed_or(kv, "num_negatives", d.num_negatives)?,
        role: parsed_or(kv, "split", d.role)?,
        exclude_history: parsed_or(kv, "exclude_history", d.exclude_history)?,
        batch_size: parsed_or(kv, "eval_batch_size", d.batch_size)?,
    })
}

fn dataset_name(kv: &KvMap, path: &str) -> String {
    kv.get("name").map(String::from).unwrap_or_else(|| {
        Path::new(path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.to_string())
    })
}

fn cmd_evaluate(args: &CommonArgs) -> Result<Outcome> {
    let kv = resolve_config(args)?;
    check_keys(&kv, EVAL_KEYS)?;
    let dataset = required(&kv, "dataset")?;
    let scorer = kv.get("scorer").unwrap_or("model");
    let protocol = protocol_from(&kv)?;
    ensure!(protocol.k >= 1, "k must be at least 1");
    let seed: u64 = parsed_or(&kv, "seed", 0)?;
    let name = dataset_name(&kv, dataset);

    let mut manifest = KvMap::new();
    manifest.set("dataset", dataset);
    manifest.set("name", &name);
    manifest.set("scorer", scorer);
    manifest.set("k", protocol.k);
    manifest.set("num_negatives", protocol.num_negatives);
    manifest.set("split", protocol.role);
    manifest.set("exclude_history", protocol.exclude_history);
    manifest.set("eval_batch_size", protocol.batch_size);
    manifest.set("seed", seed);

    let data = load_dataset(dataset)?;
    let report: RankingReport = match scorer {
        "model" => {
            let path = required(&kv, "checkpoint")?;
            let mut model = load_checkpoint(path)?;
            if let Some(joint) = kv.parsed::<bool>("joint_inference")? {
                model.config.switches.joint_inference = joint;
                model.config.validate()?;
            }
            manifest.set("checkpoint", path);
            manifest.set("joint_inference", model.config.switches.joint_inference);
            evaluate_model(&model, &data, &name, &protocol, seed)?
        }
        "poprec" => {
            ensure!(
                kv.get("checkpoint").is_none() && kv.get("joint_inference").is_none(),
                "scorer=poprec takes no checkpoint or joint_inference"
            );
            let scorer = PopRecScorer {
                counts: cafe::data::training_counts(&data),
            };
            evaluate(&scorer, &data, &name, &protocol, seed)?
        }
        other => bail!("unknown scorer {other:?} (expected model or poprec)"),
    };

    let mut w = Writer::new(output_dir(args))?;
    let text = report.render_text();
    w.write(REPORT_FILE, &text)?;
    w.write(RECORD_FILE, &report.render_record())?;
    w.write(RANKS_FILE, &report.render_ranks())?;
    w.write(EVAL_MANIFEST, &manifest.render())?;
    Ok(w.finish(text))
}

fn cmd_inspect_attention(args: &CommonArgs) -> Result<Outcome> {
    let kv = resolve_config(args)?;
    check_keys(&kv, ["checkpoint", "dataset", "layer", "head", "stream", "steps", "split"])?;
    let ckpt = required(&kv, "checkpoint")?;
    let dataset = required(&kv, "dataset")?;
    let layer: usize = parsed_or(&kv, "layer", 0)?;
    let head: usize = parsed_or(&kv, "head", 0)?;
    let stream_name = kv.get("stream").unwrap_or("item");
    let stream: Stream = stream_name.parse()?;
    let steps: usize = parsed_or(&kv, "steps", 20)?;
    let role: SplitRole = parsed_or(&kv, "split", SplitRole::Test)?;
    ensure!(steps >= 1, "steps must be at least 1");

    let model = load_checkpoint(ckpt)?;
    let data = load_dataset(dataset)?;
    let map = average_attention(&model, &data, role, stream, layer, head, steps)?;

    let mut manifest = KvMap::new();
    manifest.set("checkpoint", ckpt);
    manifest.set("dataset", dataset);
    manifest.set("layer", layer);
    manifest.set("head", head);
    manifest.set("stream", stream_name);
    manifest.set("steps", steps);
    manifest.set("split", role);
    let mut w = Writer::new(output_dir(args))?;
    w.write(ATTENTION_FILE, &map.render())?;
    w.write(ATTENTION_MANIFEST, &manifest.render())?;
    let mut summary = format!("grid={}x{}\n", map.grid.len(), map.grid.len());
    if let Some(m) = map.recent_mass(3) {
        let _ = writeln!(summary, "recent_mass_3={m:.6}");
    }
    Ok(w.finish(summary))
}

/// `id<TAB>v_1<TAB>…<TAB>v_d` per real row; ids are raw ids when a catalog
/// is available.
fn render_table(table: &cafe::numerics::Tensor, raw_id: impl Fn(usize) -> u64) -> String {
    let mut s = String::new();
    for id in 1..table.shape()[0] {
        let _ = write!(s, "{}", raw_id(id));
        for v in table.row(id) {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}

fn cmd_export_embeddings(args: &CommonArgs) -> Result<Outcome> {
    let kv = resolve_config(args)?;
    check_keys(&kv, ["checkpoint", "dataset"])?;
    let ckpt = required(&kv, "checkpoint")?;
    let model = load_checkpoint(ckpt)?;
    let catalog = match kv.get("dataset") {
        Some(path) => {
            let data = load_dataset(path)?;
            cafe::evaluation::check_compatible(&model, &data.catalog)?;
            Some(data.catalog)
        }
        None => None,
    };
    let mut manifest = KvMap::new();
    manifest.set("checkpoint", ckpt);
    if let Some(path) = kv.get("dataset") {
        manifest.set("dataset", path);
    }
    manifest.set("id_space", if catalog.is_some() { "raw" } else { "dense" });
    manifest.set("d", model.config.d);

    let mut w = Writer::new(output_dir(args))?;
    let items = render_table(model.item_table(), |i| {
        catalog.as_ref().map_or(i as u64, |c| c.item_raw_id(i))
    });
    w.write(ITEM_EMBEDDINGS_FILE, &items)?;
    if let Some(table) = model.intent_table() {
        let intents = render_table(table, |c| catalog.as_ref().map_or(c as u64, |cat| cat.intent_raw_id(c)));
        w.write(INTENT_EMBEDDINGS_FILE, &intents)?;
    }
    w.write(EXPORT_MANIFEST, &manifest.render())?;
    let summary = format!("items={} d={}\n", model.config.num_items, model.config.d);
    Ok(w.finish(summary))
}
