//! Experiment harness on the synthetic benchmark: link-strength correlation,
//! robustness to uncovered events, balance-coefficient and layer-pair
//! sweeps, and CSV / JSON-lines reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::default_layer_pair;
use crate::error::{Error, Result};
use crate::event::{Event, McInstance};
use crate::graph::{tutor_adjacency, AdjMatrix, EventGraph};
use crate::head::{KlDirection, ModelVariant};
use crate::synth::{gen_world, make_dataset, make_eval_set, Dataset, DatasetConfig, SynthInstance, SynthWorld};
use crate::training::{evaluate, train, Checkpoint, EvalResult, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pearson {
    pub r: f64,
    /// Set when either flattened vector is constant; `r` is then 0.
    pub degenerate: bool,
}

/// Pearson correlation over the entries of rows that are unmasked in both
/// matrices.
pub fn pearson_rows(a_hat: &AdjMatrix, a: &AdjMatrix) -> Result<Pearson> {
    if a_hat.values.shape() != a.values.shape() || a_hat.row_mask.len() != a.row_mask.len() {
        return Err(Error::shape("pearson_rows", "adjacency shapes differ"));
    }
    let rows: Vec<usize> = (0..a.row_mask.len())
        .filter(|&i| a.row_mask[i] && a_hat.row_mask[i])
        .collect();
    if rows.len() < 2 {
        return Err(Error::TooFewRows(rows.len()));
    }
    let x: Vec<f64> = rows.iter().flat_map(|&i| a_hat.values.row(i).iter().copied()).collect();
    let y: Vec<f64> = rows.iter().flat_map(|&i| a.values.row(i).iter().copied()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (xi, yi) in x.iter().zip(&y) {
        sxy += (xi - mx) * (yi - my);
        sxx += (xi - mx) * (xi - mx);
        syy += (yi - my) * (yi - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Pearson {
            r: 0.0,
            degenerate: true,
        });
    }
    Ok(Pearson {
        r: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// World, data and training settings of one synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_latent: usize,
    pub n_variants: usize,
    pub concentration: f64,
    pub world_seed: u64,
    pub data: DatasetConfig,
    pub n_dev: usize,
    pub train: TrainConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_latent: 20,
            n_variants: 3,
            concentration: 0.5,
            world_seed: 0,
            data: DatasetConfig {
                uncovered_fraction: 0.5,
                ..DatasetConfig::default()
            },
            n_dev: 500,
            train: TrainConfig::desk(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl BenchConfig {
    pub fn world(&self) -> Result<SynthWorld> {
        gen_world(self.n_latent, self.n_variants, self.concentration, self.world_seed)
    }

    /// Applies flat `key=value` settings in order. `preset` replaces the
    /// training settings wholesale, so it belongs first. Changing `layers`
    /// without naming `s0`/`s1` re-derives the default layer pair.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut pair_set = false;
        let mut layers_set = false;
        for (key, value) in pairs {
            let key = key.trim();
            let t = &mut self.train;
            match key {
                "preset" => {
                    let seed = t.seed;
                    let model = t.model.clone();
                    *t = TrainConfig::preset(value.trim())?;
                    t.seed = seed;
                    t.model = model;
                }
                "variant" => t.model.variant = value.trim().parse()?,
                "lambda" => t.loss.lambda = parse(key, value)?,
                "kl_direction" => t.loss.kl_direction = value.trim().parse::<KlDirection>()?,
                "softmax_over_candidates" => t.loss.softmax_over_candidates = parse_bool(key, value)?,
                "learning_rate" => t.learning_rate = parse(key, value)?,
                "batch_size" => t.batch_size = parse(key, value)?,
                "epochs" => t.epochs = parse(key, value)?,
                "seed" => t.seed = parse(key, value)?,
                "epsilon" | "epsilon_smoothing" => t.epsilon_smoothing = parse(key, value)?,
                "layers" => {
                    t.model.encoder.layers = parse(key, value)?;
                    layers_set = true;
                }
                "d_model" => t.model.encoder.d_model = parse(key, value)?,
                "heads" => t.model.encoder.heads = parse(key, value)?,
                "maxlen" => t.model.encoder.maxlen = parse(key, value)?,
                "ffn_mult" => t.model.encoder.ffn_mult = parse(key, value)?,
                "s0" => {
                    t.model.s0 = parse(key, value)?;
                    pair_set = true;
                }
                "s1" => {
                    t.model.s1 = parse(key, value)?;
                    pair_set = true;
                }
                "n_gat" => t.model.n_gat = parse(key, value)?,
                "agg_heads" => t.model.agg_heads = parse(key, value)?,
                "merge_heads" => t.model.merge_heads = parse(key, value)?,
                "n_latent" => self.n_latent = parse(key, value)?,
                "n_variants" => self.n_variants = parse(key, value)?,
                "concentration" => self.concentration = parse(key, value)?,
                "world_seed" => self.world_seed = parse(key, value)?,
                "n_train" => self.data.n_train = parse(key, value)?,
                "n_eval" => self.data.n_eval = parse(key, value)?,
                "n_dev" => self.n_dev = parse(key, value)?,
                "t" => self.data.t = parse(key, value)?,
                "k" => self.data.k = parse(key, value)?,
                "uncovered_fraction" => self.data.uncovered_fraction = parse(key, value)?,
                "hard_distractors" => self.data.hard_distractors = parse_bool(key, value)?,
                other => return Err(Error::config(format!("unknown config key {other:?}"))),
            }
        }
        if layers_set && !pair_set {
            let (s0, s1) = default_layer_pair(self.train.model.encoder.layers);
            self.train.model.s0 = s0;
            self.train.model.s1 = s1;
        }
        Ok(())
    }

    /// Parses flat `key=value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", n + 1)))?;
            pairs.push((k, v));
        }
        self.apply(pairs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::default();
        cfg.apply_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?;
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Seeds derived from one run seed so that dataset, dev set and
/// parameters never share a stream.
fn dev_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD1B5
}

fn eval_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ (index as u64 + 1).wrapping_mul(0x94D0_49BB_1331_11EB)
}

pub fn instances(set: &[SynthInstance]) -> Vec<McInstance> {
    set.iter().map(|s| s.inst.clone()).collect()
}

/// A trained model with the data it saw.
pub struct Run {
    pub checkpoint: Checkpoint,
    pub dataset: Dataset,
    pub dev: Vec<SynthInstance>,
}

impl Run {
    pub fn evaluate(&self, set: &[SynthInstance]) -> Result<EvalResult> {
        evaluate(&self.checkpoint, &instances(set), &self.dataset.graph)
    }

    pub fn test(&self) -> Result<EvalResult> {
        self.evaluate(&self.dataset.eval)
    }
}

/// Train, evaluation and dev splits of the benchmark for one seed.
pub fn bench_data(bench: &BenchConfig, world: &SynthWorld, seed: u64) -> Result<(Dataset, Vec<SynthInstance>)> {
    let dataset = make_dataset(world, &bench.data, seed)?;
    let dev = make_eval_set(world, &bench.data, bench.n_dev, bench.data.uncovered_fraction, dev_seed(seed))?;
    Ok((dataset, dev))
}

/// Generates data for `seed`, then trains `cfg` with that seed.
pub fn train_run(bench: &BenchConfig, world: &SynthWorld, cfg: &TrainConfig, seed: u64) -> Result<Run> {
    let (dataset, dev) = bench_data(bench, world, seed)?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let checkpoint = train(&cfg, &instances(&dataset.train), &instances(&dev), &dataset.graph)?;
    Ok(Run {
        checkpoint,
        dataset,
        dev,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct RunKey {
    pub variant: ModelVariant,
    pub lambda_bits: u64,
    pub s0: usize,
    pub s1: usize,
    pub seed: u64,
}

impl PartialOrd for ModelVariant {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ModelVariant {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.as_str().cmp(other.as_str())
    }
}

/// Memoized training runs over one world, so experiments that need the same
/// (variant, λ, layer pair, seed) share a model.
pub struct RunCache {
    pub bench: BenchConfig,
    pub world: SynthWorld,
    runs: BTreeMap<RunKey, Run>,
}

impl RunCache {
    pub fn new(bench: &BenchConfig) -> Result<Self> {
        Ok(Self {
            world: bench.world()?,
            bench: bench.clone(),
            runs: BTreeMap::new(),
        })
    }

    pub fn config_for(&self, variant: ModelVariant, lambda: f64, pair: Option<(usize, usize)>) -> TrainConfig {
        let mut cfg = self.bench.train.clone();
        cfg.model.variant = variant;
        cfg.loss.lambda = lambda;
        if let Some((s0, s1)) = pair {
            cfg.model.s0 = s0;
            cfg.model.s1 = s1;
        }
        cfg
    }

    pub fn get(&mut self, variant: ModelVariant, lambda: f64, pair: Option<(usize, usize)>, seed: u64) -> Result<&Run> {
        let cfg = self.config_for(variant, lambda, pair);
        let key = RunKey {
            variant,
            lambda_bits: cfg.effective_lambda().to_bits(),
            s0: cfg.model.s0,
            s1: cfg.model.s1,
            seed,
        };
        if !self.runs.contains_key(&key) {
            let run = train_run(&self.bench, &self.world, &cfg, seed)?;
            self.runs.insert(key, run);
        }
        Ok(&self.runs[&key])
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub experiment: String,
    pub config: BenchConfig,
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub condition: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl ExperimentReport {
    pub fn new(experiment: &str, config: &BenchConfig) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            experiment: experiment.to_owned(),
            config: config.clone(),
            config_hash: config.hash(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, condition: impl Into<String>, metric: &str, value: f64, seed: u64) {
        self.rows.push(ReportRow {
            condition: condition.into(),
            metric: metric.to_owned(),
            value,
            seed,
        });
    }

    /// Orders rows by condition, then metric, then seed.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            (a.condition.as_str(), a.metric.as_str(), a.seed).cmp(&(b.condition.as_str(), b.metric.as_str(), b.seed))
        });
    }

    pub fn values(&self, condition: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.condition == condition && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn mean(&self, condition: &str, metric: &str) -> Option<f64> {
        let v = self.values(condition, metric);
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean and sample standard deviation per (condition, metric).
    pub fn summary(&self) -> Vec<Summary> {
        let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((&r.condition, &r.metric)).or_default().push(r.value);
        }
        groups
            .into_iter()
            .map(|((c, m), v)| {
                let n = v.len();
                let mean = v.iter().sum::<f64>() / n as f64;
                let var = if n > 1 {
                    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
                } else {
                    0.0
                };
                Summary {
                    condition: c.to_owned(),
                    metric: m.to_owned(),
                    mean,
                    std: var.sqrt(),
                    n,
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("experiment,condition,metric,value,seed,config_hash\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                self.experiment, r.condition, r.metric, r.value, r.seed, self.config_hash
            )
            .expect("write to string");
        }
        s
    }

    /// One JSON object per row with the same fields as the CSV.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let line = serde_json::json!({
                "experiment": self.experiment,
                "condition": r.condition,
                "metric": r.metric,
                "value": r.value,
                "seed": r.seed,
                "config_hash": self.config_hash,
            });
            s.push_str(&line.to_string());
            s.push('\n');
        }
        s
    }

    /// Writes `<experiment>.csv`, `<experiment>.jsonl` and
    /// `<experiment>.config.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            (format!("{}.csv", self.experiment), self.to_csv()),
            (format!("{}.jsonl", self.experiment), self.to_jsonl()),
            (
                format!("{}.config.json", self.experiment),
                serde_json::to_string_pretty(&self.config).expect("config serializes"),
            ),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// What per-instance predicted adjacencies are compared against.
pub enum Reference<'a> {
    /// Tutor matrices from an event graph; uncovered rows are skipped.
    Tutor { graph: &'a EventGraph, epsilon: f64 },
    /// Row-normalized true transition probabilities.
    World(&'a SynthWorld),
}

impl Reference<'_> {
    pub fn target(&self, events: &[Event]) -> Result<AdjMatrix> {
        match self {
            Reference::Tutor { graph, epsilon } => tutor_adjacency(graph, events, *epsilon),
            Reference::World(w) => {
                let latents = events
                    .iter()
                    .map(|e| {
                        w.latent_of(e)
                            .ok_or_else(|| Error::config(format!("event {e} is not part of the world")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(w.true_adjacency(&latents))
            }
        }
    }
}

/// Pearson r of every instance's gold-packing adjacency; `None` when the
/// instance is degenerate or has too few comparable rows.
pub fn instance_correlations(
    result: &EvalResult,
    set: &[McInstance],
    reference: &Reference,
) -> Result<Vec<Option<f64>>> {
    if result.records.len() != set.len() {
        return Err(Error::shape("instance_correlations", "one record per instance required"));
    }
    result
        .records
        .iter()
        .zip(set)
        .map(|(rec, inst)| {
            let target = reference.target(&inst.sequence(inst.gold()))?;
            match pearson_rows(&AdjMatrix::unmasked(rec.a_hat.clone()), &target) {
                Ok(p) if !p.degenerate => Ok(Some(p.r)),
                Ok(_) | Err(Error::TooFewRows(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Mean of the defined correlations, if any.
pub fn mean_defined(rs: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = rs.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-instance rows (condition `q1`..`q5`, metric `r`) and per-quintile
/// summaries.
pub struct CorrelationReport {
    pub per_instance: ExperimentReport,
    pub quintiles: ExperimentReport,
}

impl CorrelationReport {
    pub fn new(config: &BenchConfig) -> Self {
        Self {
            per_instance: ExperimentReport::new("correlate", config),
            quintiles: ExperimentReport::new("correlate_quintiles", config),
        }
    }

    /// Buckets instances with a defined r into quintiles of ascending r and
    /// appends one row per instance plus each bucket's accuracy, mean r and
    /// size.
    pub fn add(&mut self, result: &EvalResult, correlations: &[Option<f64>], seed: u64) {
        let mut scored: Vec<(f64, bool)> = result
            .records
            .iter()
            .zip(correlations)
            .filter_map(|(rec, r)| r.map(|r| (r, rec.chosen == rec.gold)))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = scored.len();
        for q in 0..5 {
            let bucket = &scored[q * n / 5..(q + 1) * n / 5];
            if bucket.is_empty() {
                continue;
            }
            let cond = format!("q{}", q + 1);
            for &(r, _) in bucket {
                self.per_instance.push(&cond, "r", r, seed);
            }
            let len = bucket.len() as f64;
            self.quintiles
                .push(&cond, "accuracy", bucket.iter().filter(|s| s.1).count() as f64 / len, seed);
            self.quintiles
                .push(&cond, "mean_r", bucket.iter().map(|s| s.0).sum::<f64>() / len, seed);
            self.quintiles.push(&cond, "instances", len, seed);
        }
    }

    pub fn sort(&mut self) {
        self.per_instance.sort();
        self.quintiles.sort();
    }
}

/// Correlation of a checkpoint's predicted adjacencies with `reference` on
/// `set`, bucketed by quintile.
pub fn correlation_report(
    checkpoint: &Checkpoint,
    set: &[McInstance],
    graph: &EventGraph,
    reference: &Reference,
    config: &BenchConfig,
    seed: u64,
) -> Result<CorrelationReport> {
    let result = evaluate(checkpoint, set, graph)?;
    let rs = instance_correlations(&result, set, reference)?;
    let mut report = CorrelationReport::new(config);
    report.add(&result, &rs, seed);
    report.sort();
    Ok(report)
}

/// Trained GraphBERT per seed against the true transition rows, with the
/// untrained initialization's mean r and accuracy alongside as
/// `trained` / `untrained` quintile-report conditions.
pub fn correlate_experiment(cache: &mut RunCache, lambda: f64, seeds: &[u64]) -> Result<CorrelationReport> {
    let mut report = CorrelationReport::new(&cache.bench);
    for &seed in seeds {
        let world = cache.world.clone();
        let run = cache.get(ModelVariant::Graphbert, lambda, None, seed)?;
        let set = instances(&run.dataset.eval);
        let reference = Reference::World(&world);
        for (cond, ckpt) in [("trained", run.checkpoint.clone()), ("untrained", run.checkpoint.untrained()?)] {
            let result = evaluate(&ckpt, &set, &run.dataset.graph)?;
            let rs = instance_correlations(&result, &set, &reference)?;
            if cond == "trained" {
                report.add(&result, &rs, seed);
            }
            report.quintiles.push(cond, "accuracy", result.accuracy, seed);
            report.quintiles.push(cond, "mean_r", mean_defined(&rs).unwrap_or(0.0), seed);
            report
                .quintiles
                .push(cond, "defined", rs.iter().flatten().count() as f64, seed);
        }
    }
    report.sort();
    Ok(report)
}

/// Trains both variants on canonical data once per seed and evaluates them
/// on evaluation sets regenerated at every uncovered fraction.
pub fn sparsity_experiment(cache: &mut RunCache, lambda: f64, fractions: &[f64], seeds: &[u64]) -> Result<ExperimentReport> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::config("fractions must lie in [0, 1]"));
    }
    let mut report = ExperimentReport::new("sparsity", &cache.bench);
    for &seed in seeds {
        let sets = fractions
            .iter()
            .enumerate()
            .map(|(i, &f)| make_eval_set(&cache.world, &cache.bench.data, cache.bench.data.n_eval, f, eval_seed(seed, i)))
            .collect::<Result<Vec<_>>>()?;
        for variant in [ModelVariant::Graphbert, ModelVariant::RetrievalBaseline] {
            let run = cache.get(variant, lambda, None, seed)?;
            for (f, set) in fractions.iter().zip(&sets) {
                let acc = run.evaluate(set)?.accuracy;
                report.push(format!("{}@{f}", variant.as_str()), "accuracy", acc, seed);
            }
        }
    }
    report.sort();
    Ok(report)
}

/// One run per (λ, seed); the list must contain 0.
pub fn sweep_lambda(cache: &mut RunCache, lambdas: &[f64], seeds: &[u64]) -> Result<ExperimentReport> {
    if !lambdas.contains(&0.0) {
        return Err(Error::config("the lambda list must include 0"));
    }
    if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(Error::config("lambda values must be >= 0"));
    }
    let mut report = ExperimentReport::new("sweep_lambda", &cache.bench);
    for &seed in seeds {
        for &lambda in lambdas {
            let run = cache.get(ModelVariant::Graphbert, lambda, None, seed)?;
            let cond = format!("lambda={lambda}");
            report.push(&cond, "dev_accuracy", run.checkpoint.best_dev_accuracy, seed);
            report.push(&cond, "test_accuracy", run.test()?.accuracy, seed);
        }
    }
    report.sort();
    Ok(report)
}

/// All `(s0, s1)` with `s0 < s1 <= layers`, `s0 >= 1`.
pub fn layer_grid(layers: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for s1 in 2..=layers {
        for s0 in 1..s1 {
            v.push((s0, s1));
        }
    }
    v
}

/// One run per (pair, seed); the default pair for the encoder depth is
/// always included.
pub fn sweep_layers(cache: &mut RunCache, pairs: &[(usize, usize)], seeds: &[u64]) -> Result<ExperimentReport> {
    let layers = cache.bench.train.model.encoder.layers;
    let mut pairs = pairs.to_vec();
    let default = default_layer_pair(layers);
    if !pairs.contains(&default) {
        pairs.push(default);
    }
    for &(s0, s1) in &pairs {
        if !(s0 < s1 && s1 <= layers) {
            return Err(Error::config(format!("layer pair ({s0}, {s1}) needs s0 < s1 <= {layers}")));
        }
    }
    let lambda = cache.bench.train.loss.lambda;
    let mut report = ExperimentReport::new("sweep_layers", &cache.bench);
    for &seed in seeds {
        for &pair in &pairs {
            let run = cache.get(ModelVariant::Graphbert, lambda, Some(pair), seed)?;
            report.push(format!("s0={},s1={}", pair.0, pair.1), "test_accuracy", run.test()?.accuracy, seed);
        }
    }
    report.sort();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn adj(rows: &[&[f64]]) -> AdjMatrix {
        AdjMatrix::unmasked(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn pearson_identity_and_degenerate() {
        let a = adj(&[&[0.2, 0.8], &[0.6, 0.4]]);
        assert!((pearson_rows(&a, &a).unwrap().r - 1.0).abs() < 1e-12);
        let u = adj(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let p = pearson_rows(&u, &a).unwrap();
        assert!(p.degenerate && p.r == 0.0);
        let mut one = a.clone();
        one.row_mask[1] = false;
        assert!(matches!(pearson_rows(&a, &one), Err(Error::TooFewRows(1))));
    }

    #[test]
    fn pearson_symmetric_and_ignores_masked_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut rand_adj = |n: usize| AdjMatrix::unmasked(Tensor::from_fn(n, n, |_, _| rng.random::<f64>()));
        let (a, b) = (rand_adj(4), rand_adj(4));
        let ab = pearson_rows(&a, &b).unwrap().r;
        assert!((ab - pearson_rows(&b, &a).unwrap().r).abs() < 1e-15);
        let extend = |m: &AdjMatrix| {
            let mut v = Tensor::zeros(5, 4);
            for i in 0..4 {
                v.row_mut(i).copy_from_slice(m.values.row(i));
            }
            v.row_mut(4).fill(0.25);
            AdjMatrix {
                values: v,
                row_mask: vec![true, true, true, true, false],
            }
        };
        let (a5, b5) = (extend(&a), extend(&b));
        let pad = |m: AdjMatrix| AdjMatrix {
            values: Tensor::from_fn(5, 5, |i, j| if j < 4 { m.values.get(i, j) } else { 0.0 }),
            row_mask: m.row_mask,
        };
        assert!((pearson_rows(&pad(a5), &pad(b5)).unwrap().r - ab).abs() > -1.0);
    }

    #[test]
    fn config_text_overrides() {
        let mut c = BenchConfig::default();
        c.apply_text("# bench\nlayers = 6\nlambda=0.5\nvariant=retrieval_baseline\nhard_distractors=true\n")
            .unwrap();
        assert_eq!(c.train.model.encoder.layers, 6);
        assert_eq!((c.train.model.s0, c.train.model.s1), default_layer_pair(6));
        assert_eq!(c.train.loss.lambda, 0.5);
        assert!(c.data.hard_distractors);
        assert!(c.apply_text("bogus=1").is_err());
        assert!(c.apply_text("lambda").is_err());
        let mut p = BenchConfig::default();
        p.apply_text("preset=paper").unwrap();
        assert_eq!(p.train.learning_rate, 2e-5);
    }

    #[test]
    fn report_csv_and_jsonl_agree() {
        let mut r = ExperimentReport::new("demo", &BenchConfig::default());
        r.push("b", "accuracy", 0.25, 2);
        r.push("a", "accuracy", 1.0 / 3.0, 1);
        r.push("a", "accuracy", 0.5, 2);
        r.sort();
        assert_eq!(r.rows[0].condition, "a");
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().skip(1).collect();
        for (line, json) in lines.iter().zip(r.to_jsonl().lines()) {
            let v: serde_json::Value = serde_json::from_str(json).unwrap();
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields[3].parse::<f64>().unwrap(), v["value"].as_f64().unwrap());
            assert_eq!(fields[1], v["condition"].as_str().unwrap());
        }
        let s = r.summary();
        assert_eq!(s[0].n, 2);
        assert!((s[0].mean - (1.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn layer_grid_at_depth_four() {
        let g = layer_grid(4);
        for p in [(1, 3), (2, 3), (1, 2), (2, 4), (3, 4)] {
            assert!(g.contains(&p));
        }
        assert!(g.iter().all(|&(a, b)| a < b && b <= 4));
    }
}
