//! Adam, the seeded training loop with best-dev selection, evaluation and
//! checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{build_vocab, pack_input, PackedInput, Vocab};
use crate::error::{Error, Result};
use crate::event::McInstance;
use crate::graph::{tutor_adjacency, AdjMatrix, EventGraph, DEFAULT_EPSILON};
use crate::head::{total_loss, LossConfig, LossVars, Model, ModelConfig, ModelVariant, Retrieved, TraceVars};
use crate::numerics::{sigmoid_scalar, ParamSet, Tape, Tensor};
use crate::snapshot::{self, Reader, Writer};

const MAGIC: &[u8; 8] = b"GBCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub epsilon_smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small-model preset: lr 3e-4, batch 32, 10 epochs, λ 0.1.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            learning_rate: 3e-4,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            epsilon_smoothing: DEFAULT_EPSILON,
        }
    }

    /// Large-model fine-tuning preset: lr 2e-5, batch 64, 3 epochs, λ 0.01.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.learning_rate = 2e-5;
        c.batch_size = 64;
        c.epochs = 3;
        c.loss.lambda = 0.01;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn variant(&self) -> ModelVariant {
        self.model.variant
    }

    /// The reconstruction weight actually applied: zero for the λ=0 ablation
    /// and for the retrieval baseline, which has no predicted adjacency.
    pub fn effective_lambda(&self) -> f64 {
        match self.model.variant {
            ModelVariant::Graphbert => self.loss.lambda,
            ModelVariant::GraphbertLambda0 | ModelVariant::RetrievalBaseline => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.loss.lambda >= 0.0 && self.loss.lambda.is_finite()) {
            return Err(Error::config("lambda must be >= 0"));
        }
        if !(self.epsilon_smoothing > 0.0 && self.epsilon_smoothing.is_finite()) {
            return Err(Error::config("epsilon_smoothing must be positive"));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::shape("adam_step", "parameter count differs from moments"));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != self.m[i].shape() {
                return Err(Error::shape("adam_step", format!("gradient {i} shape")));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in params.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Packed candidates of one instance with its tutor matrix (predictive
/// variants) or retrieved structure (retrieval variant).
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub packs: Vec<PackedInput>,
    pub gold: usize,
    pub tutor: Option<AdjMatrix>,
    pub retrieved: Option<Vec<Retrieved>>,
}

pub fn prepare(inst: &McInstance, vocab: &Vocab, graph: &EventGraph, cfg: &TrainConfig) -> Result<Prepared> {
    let k = inst.candidates().len();
    let packs = (0..k)
        .map(|c| pack_input(inst, c, vocab, cfg.model.encoder.maxlen))
        .collect::<Result<Vec<_>>>()?;
    let (tutor, retrieved) = if cfg.variant().is_retrieval() {
        let r = (0..k)
            .map(|c| {
                let seq = inst.sequence(c);
                Ok(Retrieved {
                    node_ids: graph.node_ids(&seq),
                    adjacency: tutor_adjacency(graph, &seq, 0.0)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        (None, Some(r))
    } else {
        let seq = inst.sequence(inst.gold());
        (Some(tutor_adjacency(graph, &seq, cfg.epsilon_smoothing)?), None)
    };
    Ok(Prepared {
        packs,
        gold: inst.gold(),
        tutor,
        retrieved,
    })
}

pub fn prepare_all(
    insts: &[McInstance],
    vocab: &Vocab,
    graph: &EventGraph,
    cfg: &TrainConfig,
) -> Result<Vec<Prepared>> {
    insts.iter().map(|i| prepare(i, vocab, graph, cfg)).collect()
}

/// Vocabulary over every event of the training instances.
pub fn vocab_for(train: &[McInstance]) -> Result<Vocab> {
    build_vocab(
        train
            .iter()
            .flat_map(|i| i.context().iter().chain(i.candidates()))
            .map(|e| e.surface_form()),
        1,
    )
}

/// Forward passes over every candidate of one instance and its loss.
pub fn instance_loss(
    tape: &mut Tape,
    model: &Model,
    params: &ParamSet,
    prep: &Prepared,
    loss: &LossConfig,
) -> Result<(LossVars, Vec<TraceVars>)> {
    let batch = model.forward_batch(tape, params, &prep.packs, prep.retrieved.as_deref())?;
    let (traces, logits) = (batch.traces, batch.logits);
    let a_hat = (!model.cfg.variant.is_retrieval()).then(|| traces[prep.gold].a_hat);
    let vars = total_loss(tape, logits, prep.gold, a_hat, prep.tutor.as_ref(), loss)?;
    Ok((vars, traces))
}

/// Index of the largest score, lowest index on ties.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub chosen: usize,
    pub gold: usize,
    pub scores: Vec<f64>,
    /// Adjacency of the gold packing: predicted for the predictive variants,
    /// retrieved for the baseline.
    pub a_hat: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_l_pred: f64,
    pub records: Vec<EvalRecord>,
}

pub fn evaluate_prepared(model: &Model, params: &ParamSet, data: &[Prepared], loss: &LossConfig) -> Result<EvalResult> {
    let mut tape = Tape::new();
    let mut records = Vec::with_capacity(data.len());
    let mut correct = 0usize;
    let mut l_pred = 0.0;
    for prep in data {
        tape.reset();
        let (vars, traces) = instance_loss(&mut tape, model, params, prep, loss)?;
        let scores: Vec<f64> = traces
            .iter()
            .map(|t| sigmoid_scalar(tape.value(t.logit).item()))
            .collect();
        let chosen = argmax_lowest(&scores);
        correct += usize::from(chosen == prep.gold);
        l_pred += tape.value(vars.pred).item();
        records.push(EvalRecord {
            chosen,
            gold: prep.gold,
            scores,
            a_hat: tape.value(traces[prep.gold].a_hat).clone(),
        });
    }
    let n = data.len().max(1) as f64;
    Ok(EvalResult {
        accuracy: correct as f64 / n,
        mean_l_pred: l_pred / n,
        records,
    })
}

/// Evaluates the best-dev parameters of `ckpt`.
pub fn evaluate(ckpt: &Checkpoint, dataset: &[McInstance], graph: &EventGraph) -> Result<EvalResult> {
    let (model, params) = ckpt.best_model()?;
    let data = prepare_all(dataset, &ckpt.vocab, graph, &ckpt.config)?;
    evaluate_prepared(&model, &params, &data, &ckpt.loss_config())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training losses over the epoch; absent for the initial record.
    pub l_pred: Option<f64>,
    pub l_rec: Option<f64>,
    pub dev_accuracy: f64,
    pub dev_l_pred: f64,
}

pub fn metrics_jsonl(metrics: &[EpochMetrics]) -> String {
    metrics
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: u128,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    vocab: String,
    graph_nodes: usize,
    epoch: usize,
    adam_t: u64,
    rng: RngState,
    best_dev_accuracy: f64,
    best_epoch: usize,
    metrics: Vec<EpochMetrics>,
    param_names: Vec<String>,
}

/// Complete training state at an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub graph_nodes: usize,
    pub epoch: usize,
    pub param_names: Vec<String>,
    pub params: Vec<Tensor>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub adam_t: u64,
    rng: RngState,
    pub best_params: Vec<Tensor>,
    pub best_dev_accuracy: f64,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

fn rebuild(cfg: &TrainConfig, vocab: &Vocab, graph_nodes: usize, names: &[String], values: &[Tensor]) -> Result<(Model, ParamSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (model, mut params) = Model::new(&cfg.model, vocab.len(), graph_nodes, &mut rng)?;
    if params.len() != values.len() || names.len() != values.len() {
        return Err(Error::CorruptSnapshot("parameter count mismatch".into()));
    }
    for (id, (name, v)) in params.ids().collect::<Vec<_>>().into_iter().zip(names.iter().zip(values)) {
        if params.name(id) != name || params.get(id).shape() != v.shape() {
            return Err(Error::CorruptSnapshot(format!("parameter {name} does not match the model")));
        }
        params.set(id, v.clone());
    }
    Ok((model, params))
}

impl Checkpoint {
    /// The same checkpoint with its best parameters replaced by the
    /// seed-derived initialization, i.e. the model before any update.
    pub fn untrained(&self) -> Result<Checkpoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let (_, params) = Model::new(&self.config.model, self.vocab.len(), self.graph_nodes, &mut rng)?;
        Ok(Checkpoint {
            best_params: param_values(&params),
            ..self.clone()
        })
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.config.effective_lambda(),
            ..self.config.loss
        }
    }

    /// The model with the best-dev parameters.
    pub fn best_model(&self) -> Result<(Model, ParamSet)> {
        rebuild(&self.config, &self.vocab, self.graph_nodes, &self.param_names, &self.best_params)
    }

    /// The model with the most recent parameters.
    pub fn current_model(&self) -> Result<(Model, ParamSet)> {
        rebuild(&self.config, &self.vocab, self.graph_nodes, &self.param_names, &self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.to_text(),
            graph_nodes: self.graph_nodes,
            epoch: self.epoch,
            adam_t: self.adam_t,
            rng: self.rng.clone(),
            best_dev_accuracy: self.best_dev_accuracy,
            best_epoch: self.best_epoch,
            metrics: self.metrics.clone(),
            param_names: self.param_names.clone(),
        };
        let mut w = Writer::default();
        w.bytes(serde_json::to_string(&header).expect("header serializes").as_bytes());
        for group in [&self.params, &self.adam_m, &self.adam_v, &self.best_params] {
            w.u64(group.len() as u64);
            for t in group {
                w.tensor(t);
            }
        }
        snapshot::seal(MAGIC, VERSION, &w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = snapshot::open(bytes, MAGIC, VERSION)?;
        let mut r = Reader::new(body);
        let header: Header = serde_json::from_slice(r.bytes()?)
            .map_err(|e| Error::CorruptSnapshot(format!("checkpoint header: {e}")))?;
        let mut groups = Vec::with_capacity(4);
        for _ in 0..4 {
            let n = r.usize()?;
            if n != header.param_names.len() {
                return Err(Error::CorruptSnapshot("tensor group size".into()));
            }
            groups.push((0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?);
        }
        r.finish()?;
        let best_params = groups.pop().expect("4 groups");
        let adam_v = groups.pop().expect("4 groups");
        let adam_m = groups.pop().expect("4 groups");
        let params = groups.pop().expect("4 groups");
        Ok(Self {
            config: header.config,
            vocab: Vocab::from_text(&header.vocab)?,
            graph_nodes: header.graph_nodes,
            epoch: header.epoch,
            param_names: header.param_names,
            params,
            adam_m,
            adam_v,
            adam_t: header.adam_t,
            rng: header.rng,
            best_params,
            best_dev_accuracy: header.best_dev_accuracy,
            best_epoch: header.best_epoch,
            metrics: header.metrics,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Training state over prepared train and dev sets.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub params: ParamSet,
    pub vocab: Vocab,
    graph_nodes: usize,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    best_params: Vec<Tensor>,
    best_dev_accuracy: f64,
    best_epoch: usize,
    metrics: Vec<EpochMetrics>,
    train: Vec<Prepared>,
    dev: Vec<Prepared>,
}

fn param_values(params: &ParamSet) -> Vec<Tensor> {
    params.ids().map(|id| params.get(id).clone()).collect()
}

impl Trainer {
    /// Initializes parameters from the seed and evaluates the dev set once,
    /// which becomes the initial best.
    pub fn new(cfg: &TrainConfig, train: &[McInstance], dev: &[McInstance], graph: &EventGraph) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || dev.is_empty() {
            return Err(Error::config("train and dev sets must be non-empty"));
        }
        let vocab = vocab_for(train)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (model, params) = Model::new(&cfg.model, vocab.len(), graph.num_nodes(), &mut init_rng)?;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(1);
        let adam = Adam::new(&params, cfg.learning_rate);
        let train = prepare_all(train, &vocab, graph, cfg)?;
        let dev = prepare_all(dev, &vocab, graph, cfg)?;
        let mut t = Self {
            cfg: cfg.clone(),
            model,
            best_params: param_values(&params),
            params,
            vocab,
            graph_nodes: graph.num_nodes(),
            adam,
            rng: shuffle_rng,
            epoch: 0,
            best_dev_accuracy: 0.0,
            best_epoch: 0,
            metrics: Vec::new(),
            train,
            dev,
        };
        let dev_eval = t.evaluate_dev()?;
        t.best_dev_accuracy = dev_eval.accuracy;
        t.metrics.push(EpochMetrics {
            epoch: 0,
            l_pred: None,
            l_rec: None,
            dev_accuracy: dev_eval.accuracy,
            dev_l_pred: dev_eval.mean_l_pred,
        });
        Ok(t)
    }

    /// Continues from an epoch-boundary checkpoint.
    pub fn resume(ckpt: &Checkpoint, train: &[McInstance], dev: &[McInstance], graph: &EventGraph) -> Result<Self> {
        if graph.num_nodes() != ckpt.graph_nodes {
            return Err(Error::config("graph does not match the checkpoint"));
        }
        let (model, params) = ckpt.current_model()?;
        let adam = Adam {
            m: ckpt.adam_m.clone(),
            v: ckpt.adam_v.clone(),
            t: ckpt.adam_t,
            ..Adam::new(&params, ckpt.config.learning_rate)
        };
        Ok(Self {
            cfg: ckpt.config.clone(),
            model,
            params,
            vocab: ckpt.vocab.clone(),
            graph_nodes: ckpt.graph_nodes,
            adam,
            rng: ckpt.rng.restore(),
            epoch: ckpt.epoch,
            best_params: ckpt.best_params.clone(),
            best_dev_accuracy: ckpt.best_dev_accuracy,
            best_epoch: ckpt.best_epoch,
            metrics: ckpt.metrics.clone(),
            train: prepare_all(train, &ckpt.vocab, graph, &ckpt.config)?,
            dev: prepare_all(dev, &ckpt.vocab, graph, &ckpt.config)?,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.metrics
    }

    fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.cfg.effective_lambda(),
            ..self.cfg.loss
        }
    }

    pub fn evaluate_dev(&self) -> Result<EvalResult> {
        evaluate_prepared(&self.model, &self.params, &self.dev, &self.loss_config())
    }

    /// One pass over the shuffled training set followed by a dev
    /// evaluation; the best parameters move only on strict improvement.
    pub fn run_epoch(&mut self) -> Result<&EpochMetrics> {
        let loss_cfg = self.loss_config();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut tape = Tape::new();
        let (mut sum_pred, mut sum_rec, mut n_rec) = (0.0, 0.0, 0usize);
        for batch in order.chunks(self.cfg.batch_size) {
            let mut grads = self.params.zeros_like();
            for &i in batch {
                tape.reset();
                let (vars, _) = instance_loss(&mut tape, &self.model, &self.params, &self.train[i], &loss_cfg)?;
                sum_pred += tape.value(vars.pred).item();
                if let Some(rec) = vars.rec {
                    sum_rec += tape.value(rec).item();
                    n_rec += 1;
                }
                tape.backward(vars.total)?.accumulate_into(&mut grads);
            }
            tape.reset();
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.scale_assign(scale));
            self.adam.step(&mut self.params, &grads)?;
        }
        self.epoch += 1;
        let dev_eval = self.evaluate_dev()?;
        if dev_eval.accuracy > self.best_dev_accuracy {
            self.best_dev_accuracy = dev_eval.accuracy;
            self.best_epoch = self.epoch;
            self.best_params = param_values(&self.params);
        }
        let n = self.train.len() as f64;
        self.metrics.push(EpochMetrics {
            epoch: self.epoch,
            l_pred: Some(sum_pred / n),
            l_rec: (n_rec > 0).then(|| sum_rec / n_rec as f64),
            dev_accuracy: dev_eval.accuracy,
            dev_l_pred: dev_eval.mean_l_pred,
        });
        Ok(self.metrics.last().expect("just pushed"))
    }

    /// Runs the remaining configured epochs.
    pub fn run(&mut self) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            vocab: self.vocab.clone(),
            graph_nodes: self.graph_nodes,
            epoch: self.epoch,
            param_names: self.params.ids().map(|id| self.params.name(id).to_owned()).collect(),
            params: param_values(&self.params),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
            adam_t: self.adam.t,
            rng: RngState::capture(&self.rng),
            best_params: self.best_params.clone(),
            best_dev_accuracy: self.best_dev_accuracy,
            best_epoch: self.best_epoch,
            metrics: self.metrics.clone(),
        }
    }
}

/// Trains for the configured number of epochs and returns the final state,
/// whose best-dev parameters are used for evaluation.
pub fn train(cfg: &TrainConfig, train: &[McInstance], dev: &[McInstance], graph: &EventGraph) -> Result<Checkpoint> {
    let mut t = Trainer::new(cfg, train, dev, graph)?;
    t.run()?;
    Ok(t.checkpoint())
}
