//! End-to-end pipeline commands driven by a plain-text `key = value` config.
//!
//! Every command writes the fully resolved configuration next to its outputs
//! (`config.resolved`), so any run can be replayed from its own directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{
    load_csv, load_idx, standardize, synth_task, Dataset, Generator, LabelColumn, Split, SynthSpec,
};
use crate::error::{GpsError, Result};
use crate::masked_train::{
    evaluate, finetune, verify_frozen, write_metrics, EpochMetrics, Evaluation, Optimizer,
    TrainConfig,
};
use crate::model::{Architecture, Checkpoint, Model, ModelSpec, ParamRole};
use crate::rng::derive_seed;
use crate::selection::{
    accumulate_gradients, select, select_layer_budget, select_magnitude, select_net_topcount,
    select_neuron_topk, select_random, LossKind, RandomScheme, SelectionConfig, SelectionMask,
    SnapshotConfig, Strategy, DEFAULT_TAU,
};
use crate::sparse_delta::{apply_delta, export_delta, mask_distribution, mask_overlap};

pub const RESOLVED_CONFIG: &str = "config.resolved";

/// Every recognised key with its default (`""` = unset).
const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out", "out"),
    ("base", ""),
    ("mask", ""),
    ("checkpoint", ""),
    ("model.arch", "mlp"),
    ("model.input", ""),
    ("model.hidden", "64,64"),
    ("model.channels", "8,16"),
    ("model.kernel", "3"),
    ("model.dim", "32"),
    ("model.heads", "4"),
    ("model.depth", "1"),
    ("model.mlp_ratio", "2"),
    ("data.source", "synth"),
    ("data.seed", ""),
    ("data.generator", "gaussian-blobs"),
    ("data.dim", "16"),
    ("data.classes", "4"),
    ("data.samples_per_class", "100"),
    ("data.noise", "0"),
    ("data.task_seed", ""),
    ("data.separation", "1"),
    ("data.shift", "0"),
    ("data.informative", "0"),
    ("data.train_images", ""),
    ("data.train_labels", ""),
    ("data.val_images", ""),
    ("data.val_labels", ""),
    ("data.train_csv", ""),
    ("data.val_csv", ""),
    ("data.label_column", "-1"),
    ("data.header", "false"),
    ("train.optimizer", "adam"),
    ("train.lr", "0.001"),
    ("train.weight_decay", "0"),
    ("train.epochs", "50"),
    ("train.warmup_epochs", "5"),
    ("train.batch_size", "32"),
    ("train.freeze_head", "false"),
    ("select.strategy", "neuron-topk"),
    ("select.k", ""),
    ("select.p", ""),
    ("select.count", ""),
    ("select.loss", "scl"),
    ("select.tau", ""),
    ("select.batch_size", "64"),
    ("compare.strategies", "neuron-topk,net-topfrac,layer-topfrac,net-random,neuron-random,magnitude"),
    ("compare.k", "1"),
    ("compare.seeds", "1"),
    ("report.kind", "distribution"),
    ("report.masks", ""),
];

/// Raw `key = value` settings over the defaults in [`KEYS`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.trim()
        .parse()
        .map_err(|e| GpsError::Config(format!("{key} = '{raw}': {e}")))
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// `"1..5"` (inclusive) or a comma list.
fn parse_ks(raw: &str) -> Result<Vec<usize>> {
    if let Some((a, b)) = raw.split_once("..") {
        let (a, b): (usize, usize) = (parse("compare.k", a)?, parse("compare.k", b)?);
        if a == 0 || b < a {
            return Err(GpsError::Config(format!("compare.k range '{raw}' is empty")));
        }
        return Ok((a..=b).collect());
    }
    let ks = parse_list("compare.k", raw)?;
    if ks.is_empty() {
        return Err(GpsError::Config("compare.k is empty".into()));
    }
    Ok(ks)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                GpsError::Config(format!("line {}: expected 'key = value', got '{line}'", n + 1))
            })?;
            let k = k.trim();
            if seen.insert(k.to_string(), n + 1).is_some() {
                return Err(GpsError::Config(format!("line {}: duplicate key '{k}'", n + 1)));
            }
            cfg.set(k, v.trim())
                .map_err(|e| GpsError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| GpsError::io(&path, e))?;
        RunConfig::parse(&text)
    }

    /// Sets a known key; unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(GpsError::Config(format!("unknown config key '{key}'"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key).trim() {
            "" => Ok(None),
            raw => parse(key, raw).map(Some),
        }
    }

    fn req<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.opt(key)?
            .ok_or_else(|| GpsError::Config(format!("missing required key '{key}'")))
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        match self.get(key).trim() {
            "" => Err(GpsError::Config(format!("missing required key '{key}'"))),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.req("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out"))
    }

    /// Every key in sorted order, one `key = value` per line.
    pub fn resolved(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn model_spec(&self, classes: usize) -> Result<ModelSpec> {
        let arch = match self.get("model.arch") {
            "mlp" => Architecture::Mlp {
                hidden: parse_list("model.hidden", self.get("model.hidden"))?,
            },
            "cnn" => Architecture::Cnn {
                channels: parse_list("model.channels", self.get("model.channels"))?,
                kernel: self.req("model.kernel")?,
            },
            "tiny-transformer" | "transformer" => Architecture::TinyTransformer {
                dim: self.req("model.dim")?,
                heads: self.req("model.heads")?,
                depth: self.req("model.depth")?,
                mlp_ratio: self.req("model.mlp_ratio")?,
            },
            other => return Err(GpsError::Config(format!("unknown model.arch '{other}'"))),
        };
        let input_shape = match self.get("model.input").trim() {
            "" => match (self.get("data.source"), &arch) {
                ("synth", Architecture::Mlp { .. }) => vec![self.req("data.dim")?],
                _ => return Err(GpsError::Config("missing required key 'model.input'".into())),
            },
            raw => raw
                .split('x')
                .map(|d| parse("model.input", d))
                .collect::<Result<Vec<usize>>>()?,
        };
        let spec = ModelSpec {
            arch,
            input_shape,
            classes,
            seed: self.seed()?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let seed = self.seed()?;
        let data_seed = self.opt("data.seed")?.unwrap_or(seed);
        let spec = SynthSpec {
            generator: Generator::from_str(self.get("data.generator"))?,
            dim: self.req("data.dim")?,
            classes: self.req("data.classes")?,
            samples_per_class: self.req("data.samples_per_class")?,
            noise: self.req("data.noise")?,
            seed: data_seed,
            task_seed: self.opt("data.task_seed")?.unwrap_or(data_seed),
            separation: self.req("data.separation")?,
            shift: self.req("data.shift")?,
            informative: self.req("data.informative")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `(train, validation)` splits.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match self.get("data.source") {
            "synth" => {
                let (train, val, _) = synth_task(&self.synth_spec()?)?;
                Ok((train, val))
            }
            "idx" => {
                let mut train = load_idx(self.path("data.train_images")?, self.path("data.train_labels")?)?;
                let mut val = load_idx(self.path("data.val_images")?, self.path("data.val_labels")?)?;
                let classes = train.classes.max(val.classes);
                train.classes = classes;
                val.classes = classes;
                val.split = Split::Val;
                Ok((train, val))
            }
            "csv" => {
                let label = LabelColumn::from_str(self.get("data.label_column"))?;
                let header: bool = self.req("data.header")?;
                let mut train = load_csv(self.path("data.train_csv")?, &label, header)?;
                let mut val = load_csv(self.path("data.val_csv")?, &label, header)?;
                if val.classes > train.classes {
                    return Err(GpsError::Input(format!(
                        "validation CSV has {} classes, training CSV {}",
                        val.classes, train.classes
                    )));
                }
                val.classes = train.classes;
                val.split = Split::Val;
                standardize(&mut train, &mut [&mut val]);
                Ok((train, val))
            }
            other => Err(GpsError::Config(format!("unknown data.source '{other}'"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            optimizer: Optimizer::from_str(self.get("train.optimizer"))?,
            base_lr: self.req("train.lr")?,
            weight_decay: self.req("train.weight_decay")?,
            epochs: self.req("train.epochs")?,
            warmup_epochs: self.req("train.warmup_epochs")?,
            batch_size: self.req("train.batch_size")?,
            seed: self.seed()?,
            freeze_head: self.req("train.freeze_head")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn selection_config(&self) -> Result<SelectionConfig> {
        let cfg = SelectionConfig {
            strategy: Strategy::from_str(self.get("select.strategy"))?,
            k: self.opt("select.k")?,
            p: self.opt("select.p")?,
            count: self.opt("select.count")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn snapshot_config(&self) -> Result<SnapshotConfig> {
        let tau = self.opt("select.tau")?.unwrap_or(DEFAULT_TAU);
        if !(tau > 0.0) {
            return Err(GpsError::Config(format!("select.tau must be > 0, got {tau}")));
        }
        Ok(SnapshotConfig {
            loss: LossKind::from_str(self.get("select.loss"))?,
            tau,
            batch_size: self.req("select.batch_size")?,
            seed: derive_seed(self.seed()?, "selection-batches"),
        })
    }

    fn write_resolved(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join(RESOLVED_CONFIG), self.resolved().as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| GpsError::io(path, e))
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir).map_err(|e| GpsError::io(&dir, e))?;
    cfg.write_resolved(&dir)?;
    Ok(dir)
}

/// Loads a checkpoint, taking the class count from its head.
pub fn load_base(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let ckpt = Checkpoint::load(path)?;
    let classes = ckpt
        .get("head.bias")
        .map(|t| t.value.numel())
        .ok_or_else(|| GpsError::Format(format!("{}: checkpoint has no head.bias", path.display())))?;
    Model::from_checkpoint(&cfg.model_spec(classes)?, &ckpt)
}

/// The base with a fresh head sized for the target task.
fn working_model(base: &Model, classes: usize, seed: u64) -> Result<Model> {
    base.with_new_head(classes, derive_seed(seed, "head"))
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub history: Vec<EpochMetrics>,
    pub digest: u64,
}

/// Trains every parameter of a fresh model on the configured (source) task.
pub fn run_pretrain(cfg: &RunConfig) -> Result<PretrainOutcome> {
    let dir = prepare_out(cfg)?;
    let (train, val) = cfg.datasets()?;
    let model = Model::build(&cfg.model_spec(train.classes)?)?;
    let mask = SelectionMask::full(&model.enumerate_neurons());
    let (tuned, history) = finetune(&model, &mask, &train, &val, &cfg.train_config()?)?;
    let ckpt = tuned.to_checkpoint();
    let path = dir.join("checkpoint.gpsw");
    ckpt.save(&path)?;
    write_metrics(dir.join("metrics.jsonl"), &history)?;
    Ok(PretrainOutcome {
        checkpoint: path,
        history,
        digest: ckpt.digest()?,
    })
}

#[derive(Clone, Debug)]
pub struct SelectOutcome {
    pub mask_path: PathBuf,
    pub mask: SelectionMask,
    pub summary: String,
}

fn build_mask(cfg: &RunConfig, working: &Model, train: &Dataset) -> Result<SelectionMask> {
    let sel = cfg.selection_config()?;
    let snapshot = if sel.strategy.needs_snapshot() {
        Some(accumulate_gradients(working, train, &cfg.snapshot_config()?)?)
    } else {
        None
    };
    select(working, snapshot.as_ref(), &sel)
}

/// Human-readable mask summary: counts, percentage and per-block distribution.
pub fn mask_summary(mask: &SelectionMask, model: &Model) -> Result<String> {
    let selectable = model.selectable_count();
    let selected = mask.popcount();
    let mut s = String::new();
    writeln!(s, "strategy: {}", mask.strategy).unwrap();
    writeln!(s, "budget: {}", budget_label(mask)).unwrap();
    writeln!(
        s,
        "selected: {selected}/{selectable} = {:.2}%",
        100.0 * selected as f64 / selectable as f64
    )
    .unwrap();
    let bias: usize = model
        .params()
        .iter()
        .filter(|p| p.role == ParamRole::Bias)
        .map(|p| p.value.numel())
        .sum();
    let extra = mask.trainable_count(model) - selected;
    if extra > 0 {
        writeln!(s, "additionally trainable (non-selectable): {extra}").unwrap();
    }
    writeln!(s, "bias parameters: {bias}").unwrap();
    writeln!(s, "trainable non-head parameters: {}", mask.trainable_count(model)).unwrap();
    writeln!(s, "block,selected,selectable,fraction").unwrap();
    for row in mask_distribution(mask, model)? {
        writeln!(s, "{},{},{},{:.4}", row.block, row.selected, row.selectable, row.fraction).unwrap();
    }
    Ok(s)
}

fn budget_label(mask: &SelectionMask) -> String {
    use crate::selection::Budget;
    match mask.budget {
        Budget::None => "-".into(),
        Budget::PerNeuron(k) => format!("K={k}"),
        Budget::Fraction(p) => format!("p={p:.6}"),
        Budget::Count(c) => format!("count={c}"),
    }
}

/// Builds a selection mask for the target task on top of `base`.
pub fn run_select(cfg: &RunConfig) -> Result<SelectOutcome> {
    let dir = prepare_out(cfg)?;
    let base = load_base(cfg, &cfg.path("base")?)?;
    let (train, _) = cfg.datasets()?;
    let working = working_model(&base, train.classes, cfg.seed()?)?;
    let mask = build_mask(cfg, &working, &train)?;
    let path = dir.join("mask.gpsm");
    mask.save(&path)?;
    let summary = mask_summary(&mask, &working)?;
    write_file(&dir.join("summary.txt"), summary.as_bytes())?;
    Ok(SelectOutcome {
        mask_path: path,
        mask,
        summary,
    })
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub tuned: Model,
    pub history: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
    pub delta: PathBuf,
    pub metrics: PathBuf,
}

/// Fine-tunes under the configured mask (or one selected on the spot),
/// checks frozen-complement exactness and writes checkpoint, delta and metrics.
pub fn run_finetune(cfg: &RunConfig) -> Result<FinetuneOutcome> {
    let dir = prepare_out(cfg)?;
    let base = load_base(cfg, &cfg.path("base")?)?;
    let (train, val) = cfg.datasets()?;
    let working = working_model(&base, train.classes, cfg.seed()?)?;
    let mask = match cfg.get("mask").trim() {
        "" => build_mask(cfg, &working, &train)?,
        p => SelectionMask::load(p)?,
    };
    let tcfg = cfg.train_config()?;
    let (tuned, history) = finetune(&working, &mask, &train, &val, &tcfg)?;
    verify_frozen(&working, &tuned, &mask, tcfg.freeze_head)?;
    let delta = export_delta(&base, &tuned, &mask)?;
    if !apply_delta(&base, &delta)?.bitwise_eq(&tuned) {
        return Err(GpsError::Integrity("delta does not reproduce the tuned model".into()));
    }
    let checkpoint = dir.join("tuned.gpsw");
    tuned.to_checkpoint().save(&checkpoint)?;
    let delta_path = dir.join("delta.gpsd");
    delta.save(&delta_path)?;
    let metrics = dir.join("metrics.jsonl");
    write_metrics(&metrics, &history)?;
    Ok(FinetuneOutcome {
        tuned,
        history,
        checkpoint,
        delta: delta_path,
        metrics,
    })
}

/// Evaluates `checkpoint` on the validation split; writes `eval.json`.
pub fn run_eval(cfg: &RunConfig) -> Result<Evaluation> {
    let dir = prepare_out(cfg)?;
    let model = load_base(cfg, &cfg.path("checkpoint")?)?;
    let (_, val) = cfg.datasets()?;
    let e = evaluate(&model, &val)?;
    let json = serde_json::json!({ "accuracy": e.accuracy, "loss": e.loss, "samples": val.len() });
    write_file(&dir.join("eval.json"), format!("{json}\n").as_bytes())?;
    Ok(e)
}

/// One comparison variant: a selection strategy, optionally with the
/// cross-entropy snapshot (`neuron-topk+ce`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub strategy: Strategy,
    pub ce: bool,
}

impl FromStr for Variant {
    type Err = GpsError;

    fn from_str(s: &str) -> Result<Self> {
        let (name, ce) = match s.strip_suffix("+ce") {
            Some(n) => (n, true),
            None => (s, false),
        };
        let strategy = Strategy::from_str(name)?;
        if ce && !strategy.needs_snapshot() {
            return Err(GpsError::Config(format!("'{s}': +ce needs a gradient strategy")));
        }
        Ok(Variant { strategy, ce })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{}", self.strategy, if self.ce { "+ce" } else { "" })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub seed: u64,
    pub variant: Variant,
    pub k: usize,
    pub budget: String,
    pub outcome: std::result::Result<RowResult, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowResult {
    pub params: usize,
    pub params_pct: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

/// Mask for one comparison row. Budgets match neuron-topk at the same K.
pub fn compare_mask(
    variant: Variant,
    k: usize,
    working: &Model,
    train: &Dataset,
    snapshot_cfg: &SnapshotConfig,
    seed: u64,
) -> Result<SelectionMask> {
    let map = working.enumerate_neurons();
    let count: usize = map.entries.iter().map(|e| k.min(e.connections.len())).sum();
    let snapshot = |ce: bool| {
        let mut c = snapshot_cfg.clone();
        if ce {
            c.loss = LossKind::CeWithHead;
        }
        accumulate_gradients(working, train, &c)
    };
    let mut mask = match variant.strategy {
        Strategy::NeuronTopK => select_neuron_topk(&snapshot(variant.ce)?, &map, k)?,
        Strategy::NetTopFrac => select_net_topcount(&snapshot(variant.ce)?, count)?,
        Strategy::LayerTopFrac => select_layer_budget(&snapshot(variant.ce)?, count)?,
        Strategy::NetRandom => select_random(&map, RandomScheme::Net { count }, seed)?,
        Strategy::NeuronRandom => select_random(&map, RandomScheme::Neuron { k }, seed)?,
        Strategy::Magnitude => select_magnitude(working, &map, k)?,
        Strategy::BiasOnly | Strategy::LinearOnly => SelectionMask::empty(&map, variant.strategy),
        Strategy::Full => SelectionMask::full(&map),
    };
    mask.seed = seed;
    Ok(mask)
}

#[derive(Clone, Debug)]
pub struct CompareOutcome {
    pub rows: Vec<CompareRow>,
    pub results_csv: PathBuf,
    pub summary_csv: PathBuf,
}

fn thread_count() -> usize {
    std::env::var("GPS_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs every (seed, K, strategy) variant against one base checkpoint.
pub fn run_compare(cfg: &RunConfig) -> Result<CompareOutcome> {
    let dir = prepare_out(cfg)?;
    let base = load_base(cfg, &cfg.path("base")?)?;
    let variants: Vec<Variant> = parse_list("compare.strategies", cfg.get("compare.strategies"))?;
    if variants.is_empty() {
        return Err(GpsError::Config("compare.strategies is empty".into()));
    }
    let ks = parse_ks(cfg.get("compare.k"))?;
    let reps: u64 = cfg.req("compare.seeds")?;
    if reps == 0 {
        return Err(GpsError::Config("compare.seeds must be >= 1".into()));
    }
    let root = cfg.seed()?;
    let mut jobs = Vec::new();
    for r in 0..reps {
        for &k in &ks {
            for &v in &variants {
                let sensitive = matches!(
                    v.strategy,
                    Strategy::NeuronTopK
                        | Strategy::NetTopFrac
                        | Strategy::LayerTopFrac
                        | Strategy::NetRandom
                        | Strategy::NeuronRandom
                        | Strategy::Magnitude
                );
                if sensitive || k == ks[0] {
                    jobs.push((root + r, k, v));
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| GpsError::Config(format!("thread pool: {e}")))?;
    let rows: Vec<CompareRow> = pool.install(|| {
        jobs.par_iter()
            .map(|&(seed, k, variant)| {
                let mut row_cfg = cfg.clone();
                row_cfg.values.insert("seed".into(), seed.to_string());
                let sub = dir.join("rows").join(format!("{variant}_k{k}_s{seed}"));
                let outcome = compare_row(&row_cfg, &base, variant, k, &sub);
                let budget = match &outcome {
                    Ok((b, _)) => b.clone(),
                    Err(_) => "-".into(),
                };
                CompareRow {
                    seed,
                    variant,
                    k,
                    budget,
                    outcome: outcome.map(|(_, r)| r).map_err(|e| e.to_string()),
                }
            })
            .collect()
    });
    let results_csv = dir.join("results.csv");
    write_file(&results_csv, results_table(&rows).as_bytes())?;
    let summary_csv = dir.join("summary.csv");
    write_file(&summary_csv, summary_table(&rows).as_bytes())?;
    Ok(CompareOutcome {
        rows,
        results_csv,
        summary_csv,
    })
}

fn compare_row(
    cfg: &RunConfig,
    base: &Model,
    variant: Variant,
    k: usize,
    dir: &Path,
) -> Result<(String, RowResult)> {
    let start = Instant::now();
    fs::create_dir_all(dir).map_err(|e| GpsError::io(dir, e))?;
    let seed = cfg.seed()?;
    let (train, val) = cfg.datasets()?;
    let working = working_model(base, train.classes, seed)?;
    let mask = compare_mask(variant, k, &working, &train, &cfg.snapshot_config()?, seed)?;
    mask.save(dir.join("mask.gpsm"))?;
    let tcfg = cfg.train_config()?;
    let (tuned, history) = finetune(&working, &mask, &train, &val, &tcfg)?;
    verify_frozen(&working, &tuned, &mask, tcfg.freeze_head)?;
    write_metrics(dir.join("metrics.jsonl"), &history)?;
    let params = mask.trainable_count(&working);
    let backbone: usize = working
        .params()
        .iter()
        .filter(|p| !p.role.is_head())
        .map(|p| p.value.numel())
        .sum();
    let val_acc = evaluate(&tuned, &val)?.accuracy;
    Ok((
        budget_label(&mask),
        RowResult {
            params,
            params_pct: 100.0 * params as f64 / backbone as f64,
            val_acc,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn results_table(rows: &[CompareRow]) -> String {
    let mut s = String::from("seed,strategy,k,budget,params,params_pct,val_acc,seconds,status\n");
    for r in rows {
        match &r.outcome {
            Ok(o) => writeln!(
                s,
                "{},{},{},{},{},{:.4},{:.6},{:.3},ok",
                r.seed, r.variant, r.k, r.budget, o.params, o.params_pct, o.val_acc, o.seconds
            ),
            Err(e) => writeln!(s, "{},{},{},-,,,,,{}", r.seed, r.variant, r.k, csv_field(&format!("FAILED: {e}"))),
        }
        .unwrap();
    }
    s
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Per (strategy, K): mean and sample standard deviation over seeds.
/// Aggregate of one (variant, K) group of comparison rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: Variant,
    pub k: usize,
    pub budget: String,
    pub params: usize,
    pub params_pct: f64,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

pub fn summarize(rows: &[CompareRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Variant, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.variant, r.k)) {
            keys.push((r.variant, r.k));
        }
    }
    keys.into_iter()
        .map(|(variant, k)| {
            let ok: Vec<(&String, &RowResult)> = rows
                .iter()
                .filter(|r| r.variant == variant && r.k == k)
                .filter_map(|r| r.outcome.as_ref().ok().map(|o| (&r.budget, o)))
                .collect();
            let accs: Vec<f64> = ok.iter().map(|(_, o)| o.val_acc).collect();
            let (mean, std) = if accs.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&accs) };
            SummaryRow {
                variant,
                k,
                budget: ok.first().map(|(b, _)| (*b).clone()).unwrap_or_else(|| "-".into()),
                params: ok.first().map(|(_, o)| o.params).unwrap_or(0),
                params_pct: ok.first().map(|(_, o)| o.params_pct).unwrap_or(0.0),
                mean,
                std,
                runs: accs.len(),
            }
        })
        .collect()
}

fn summary_table(rows: &[CompareRow]) -> String {
    let mut s = String::from("strategy,k,budget,params,params_pct,val_acc_mean,val_acc_std,runs\n");
    for r in summarize(rows) {
        writeln!(
            s,
            "{},{},{},{},{:.4},{:.6},{:.6},{}",
            r.variant, r.k, r.budget, r.params, r.params_pct, r.mean, r.std, r.runs
        )
        .unwrap();
    }
    s
}

/// Distribution (per-block histogram) or pairwise overlap of saved masks.
pub fn run_report(cfg: &RunConfig) -> Result<String> {
    let dir = prepare_out(cfg)?;
    let masks: Vec<PathBuf> = cfg
        .get("report.masks")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect();
    if masks.is_empty() {
        return Err(GpsError::Config("report.masks lists no masks".into()));
    }
    let loaded = masks
        .iter()
        .map(SelectionMask::load)
        .collect::<Result<Vec<_>>>()?;
    let mut s = String::new();
    let name = match cfg.get("report.kind") {
        "distribution" => {
            let base = load_base(cfg, &cfg.path("base")?)?;
            writeln!(s, "mask,block,selected,selectable,fraction").unwrap();
            for (path, m) in masks.iter().zip(&loaded) {
                for row in mask_distribution(m, &base)? {
                    writeln!(
                        s,
                        "{},{},{},{},{:.6}",
                        csv_field(&path.display().to_string()),
                        row.block,
                        row.selected,
                        row.selectable,
                        row.fraction
                    )
                    .unwrap();
                }
            }
            "distribution.csv"
        }
        "overlap" => {
            if !(2..=3).contains(&loaded.len()) {
                return Err(GpsError::Config(format!(
                    "overlap report takes 2 or 3 masks, got {}",
                    loaded.len()
                )));
            }
            writeln!(s, "a,b,scope,jaccard,shared,only_a,only_b,union").unwrap();
            for i in 0..loaded.len() {
                for j in i + 1..loaded.len() {
                    let o = mask_overlap(&loaded[i], &loaded[j])?;
                    let (a, b) = (
                        csv_field(&masks[i].display().to_string()),
                        csv_field(&masks[j].display().to_string()),
                    );
                    let mut line = |scope: &str, r: &crate::sparse_delta::OverlapRow, jac: f64| {
                        writeln!(
                            s,
                            "{a},{b},{scope},{jac:.6},{},{},{},{}",
                            r.shared,
                            r.only_a,
                            r.only_b,
                            r.union()
                        )
                        .unwrap();
                    };
                    line("total", &o.total, o.jaccard);
                    for r in &o.blocks {
                        let jac = match r.union() {
                            0 => 1.0,
                            u => r.shared as f64 / u as f64,
                        };
                        line(&format!("block:{}", r.name), r, jac);
                    }
                }
            }
            "overlap.csv"
        }
        other => return Err(GpsError::Config(format!("unknown report.kind '{other}'"))),
    };
    write_file(&dir.join(name), s.as_bytes())?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parser_rejects_unknown_and_duplicate_keys() {
        let cfg = RunConfig::parse("seed = 3\n# comment\n\nmodel.hidden = 8, 8 # trailing\n").unwrap();
        assert_eq!(cfg.get("seed"), "3");
        assert_eq!(cfg.get("model.hidden"), "8, 8");
        assert!(matches!(RunConfig::parse("sed = 3"), Err(GpsError::Config(m)) if m.contains("line 1")));
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(GpsError::Config(_))));
        assert!(matches!(RunConfig::parse("seed"), Err(GpsError::Config(_))));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::parse("seed = 9\nselect.k = 2\n").unwrap();
        let again = RunConfig::parse(&cfg.resolved()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn typed_views() {
        let cfg = RunConfig::parse(
            "data.dim = 4\nmodel.hidden = 8\nselect.strategy = net-topfrac\nselect.p = 0.1\ncompare.k = 1..4",
        )
        .unwrap();
        let spec = cfg.model_spec(3).unwrap();
        assert_eq!(spec.input_shape, vec![4]);
        assert_eq!(cfg.selection_config().unwrap().p, Some(0.1));
        assert_eq!(parse_ks(cfg.get("compare.k")).unwrap(), vec![1, 2, 3, 4]);
        let bad = RunConfig::parse("select.strategy = neuron-topk").unwrap();
        assert!(matches!(bad.selection_config(), Err(GpsError::Config(_))));
        assert!(matches!(
            RunConfig::parse("train.lr = fast").unwrap().train_config(),
            Err(GpsError::Config(_))
        ));
    }

    #[test]
    fn variants_parse() {
        assert_eq!(
            "neuron-topk+ce".parse::<Variant>().unwrap(),
            Variant {
                strategy: Strategy::NeuronTopK,
                ce: true
            }
        );
        assert!("net-random+ce".parse::<Variant>().is_err());
        assert_eq!("magnitude".parse::<Variant>().unwrap().to_string(), "magnitude");
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }
}
