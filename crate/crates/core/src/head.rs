//! Aggregator, GAT inferer with bilinear link scores, structure merger,
//! scorer and the training loss, plus the full model that wires them onto
//! the encoder for both the predictive and the retrieval variant.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{default_layer_pair, Encoder, EncoderConfig, LayerNormParams, PackedInput};
use crate::error::{Error, Result};
use crate::graph::AdjMatrix;
use crate::numerics::{
    multi_head_attention_grouped, AttentionParams, AttnGroup, ParamId, ParamSet, Tape, Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Graphbert,
    RetrievalBaseline,
    GraphbertLambda0,
}

impl ModelVariant {
    pub fn is_retrieval(self) -> bool {
        self == ModelVariant::RetrievalBaseline
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Graphbert => "graphbert",
            ModelVariant::RetrievalBaseline => "retrieval_baseline",
            ModelVariant::GraphbertLambda0 => "graphbert_lambda0",
        }
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graphbert" => Ok(ModelVariant::Graphbert),
            "retrieval_baseline" => Ok(ModelVariant::RetrievalBaseline),
            "graphbert_lambda0" => Ok(ModelVariant::GraphbertLambda0),
            other => Err(Error::config(format!("unknown model variant {other:?}"))),
        }
    }
}

/// Which way round the reconstruction divergence is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(Â || A)`.
    PredictedFirst,
    /// `KL(A || Â)`.
    TutorFirst,
}

impl std::str::FromStr for KlDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted_first" => Ok(KlDirection::PredictedFirst),
            "tutor_first" => Ok(KlDirection::TutorFirst),
            other => Err(Error::config(format!("unknown kl direction {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub encoder: EncoderConfig,
    pub s0: usize,
    pub s1: usize,
    pub n_gat: usize,
    pub agg_heads: usize,
    pub merge_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        let (s0, s1) = default_layer_pair(encoder.layers);
        Self {
            variant: ModelVariant::Graphbert,
            s0,
            s1,
            n_gat: 1,
            agg_heads: 4,
            merge_heads: 4,
            encoder,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let d = self.encoder.d_model;
        if !(self.s0 < self.s1 && self.s1 <= self.encoder.layers) {
            return Err(Error::config(format!(
                "layer pair ({}, {}) must satisfy s0 < s1 <= {}",
                self.s0, self.s1, self.encoder.layers
            )));
        }
        for (name, h) in [("agg_heads", self.agg_heads), ("merge_heads", self.merge_heads)] {
            if h == 0 || !d.is_multiple_of(h) {
                return Err(Error::config(format!("{name}={h} does not divide d_model={d}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GatLayer {
    /// `1 x 2d` attention vector over `[W_α ê_i || W_α ê_j]`.
    pub u: ParamId,
    pub w_alpha: ParamId,
}

/// Parameter handles of everything above the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphHeadParams {
    pub aggregator: AttentionParams,
    pub gat: Vec<GatLayer>,
    pub w_r: ParamId,
    pub w_u: ParamId,
    pub merge_attn: AttentionParams,
    pub merge_ln: LayerNormParams,
    pub score_w: ParamId,
    pub score_b: ParamId,
    /// Learned node-embedding table of the retrieval variant.
    pub node_emb: Option<ParamId>,
}

fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(rows, cols, |_, _| dist.sample(rng))
}

impl GraphHeadParams {
    pub fn register(
        params: &mut ParamSet,
        cfg: &ModelConfig,
        graph_nodes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.encoder.d_model;
        let fan = (d as f64).sqrt().recip();
        let aggregator =
            AttentionParams::register(params, "head.agg", d, |r, c| normal(rng, r, c, fan));
        let gat = (0..cfg.n_gat)
            .map(|l| GatLayer {
                u: params.add(
                    format!("head.gat{l}.u"),
                    normal(rng, 1, 2 * d, (2.0 * d as f64).sqrt().recip()),
                ),
                w_alpha: params.add(format!("head.gat{l}.w_alpha"), normal(rng, d, d, fan)),
            })
            .collect();
        let w_r = params.add("head.w_r", normal(rng, d, d, 1.0 / d as f64));
        let w_u = params.add("head.w_u", normal(rng, d, d, fan));
        let merge_attn =
            AttentionParams::register(params, "head.merge", d, |r, c| normal(rng, r, c, fan));
        let merge_ln = LayerNormParams::register(params, "head.merge_ln", d);
        let score_w = params.add("head.score_w", normal(rng, d, 1, fan));
        let score_b = params.add("head.score_b", Tensor::zeros(1, 1));
        let node_emb = cfg
            .variant
            .is_retrieval()
            .then(|| params.add("head.node_emb", normal(rng, graph_nodes, d, 1.0)));
        Self {
            aggregator,
            gat,
            w_r,
            w_u,
            merge_attn,
            merge_ln,
            score_w,
            score_b,
            node_emb,
        }
    }
}

/// Event representations pooled from `h` (the `s0` hidden states): each
/// event's span mean queries attention over that span's tokens only.
pub fn aggregate(
    tape: &mut Tape,
    params: &ParamSet,
    head: &GraphHeadParams,
    heads: usize,
    h: Var,
    spans: &[(usize, usize)],
) -> Result<Var> {
    let len = tape.value(h).rows();
    let mut mean = Tensor::zeros(spans.len(), len);
    let mut groups = Vec::with_capacity(spans.len());
    for (i, &(s, e)) in spans.iter().enumerate() {
        if s >= e {
            return Err(Error::EmptySpan(i));
        }
        if e > len {
            return Err(Error::IndexOutOfRange { index: e, limit: len });
        }
        mean.row_mut(i)[s..e].fill(1.0 / (e - s) as f64);
        groups.push(AttnGroup {
            queries: i..i + 1,
            keys: s..e,
        });
    }
    let mean = tape.constant(mean);
    let q = tape.matmul(mean, h)?;
    let w = head.aggregator.vars(tape, params);
    Ok(multi_head_attention_grouped(tape, q, h, h, &w, heads, &groups)?.out)
}

/// One GAT layer over the complete graph without self loops.
pub fn gat_layer(tape: &mut Tape, params: &ParamSet, layer: &GatLayer, e: Var) -> Result<Var> {
    let n = tape.value(e).rows();
    let d = tape.value(e).cols();
    let w = tape.param(params, layer.w_alpha);
    let u = tape.param(params, layer.u);
    if tape.value(w).shape() != (d, d) {
        return Err(Error::shape("gat_layer", "W_alpha does not match event width"));
    }
    let s = tape.matmul(e, w)?;
    let u1 = tape.slice_cols(u, 0, d)?;
    let u2 = tape.slice_cols(u, d, 2 * d)?;
    let left = tape.matmul_nt(s, u1)?;
    let right = tape.matmul_nt(u2, s)?;
    let scores = tape.broadcast_add(left, right)?;
    let scores = tape.relu(scores);
    let allowed: Vec<bool> = (0..n * n).map(|k| k / n != k % n).collect();
    let alpha = tape.softmax_rows(scores, Some(&allowed))?;
    let mixed = tape.matmul(alpha, s)?;
    Ok(tape.sigmoid(mixed))
}

/// Predicted adjacency: the GAT stack, bilinear scores over all ordered
/// pairs including self pairs, then a row softmax.
pub fn infer_adjacency(
    tape: &mut Tape,
    params: &ParamSet,
    head: &GraphHeadParams,
    e_hat: Var,
) -> Result<Var> {
    let (n, d) = tape.value(e_hat).shape();
    if n < 2 {
        return Err(Error::shape("infer_adjacency", "need at least 2 events"));
    }
    let mut e = e_hat;
    for layer in &head.gat {
        e = gat_layer(tape, params, layer, e)?;
    }
    let w_r = tape.param(params, head.w_r);
    if tape.value(w_r).shape() != (d, d) {
        return Err(Error::shape("infer_adjacency", "W_R does not match event width"));
    }
    let left = tape.matmul(e, w_r)?;
    let gamma = tape.matmul_nt(left, e)?;
    tape.softmax_rows(gamma, None)
}

pub struct Merged {
    pub hidden: Var,
    pub e_u: Var,
}

/// Graph-conditioned update of the `s1` hidden states by event
/// representations `e` under adjacency `a`.
pub fn merge(
    tape: &mut Tape,
    params: &ParamSet,
    head: &GraphHeadParams,
    heads: usize,
    h: Var,
    e: Var,
    a: Var,
) -> Result<Merged> {
    let n = tape.value(h).rows();
    merge_segmented(tape, params, head, heads, h, std::slice::from_ref(&(0..n)), &[(e, a)])
}

/// [`merge`] over sequences stacked by rows: segment `c` of `h` attends only
/// to the updated events built from `structures[c]`. The returned `e_u`
/// stacks every segment's events in order.
pub fn merge_segmented(
    tape: &mut Tape,
    params: &ParamSet,
    head: &GraphHeadParams,
    heads: usize,
    h: Var,
    segments: &[Range<usize>],
    structures: &[(Var, Var)],
) -> Result<Merged> {
    if segments.len() != structures.len() {
        return Err(Error::shape("merge", "one structure per segment required"));
    }
    let d = tape.value(h).cols();
    let mut mixed = Vec::with_capacity(structures.len());
    let mut groups = Vec::with_capacity(structures.len());
    let mut offset = 0;
    for (seg, &(e, a)) in segments.iter().zip(structures) {
        let (n, de) = tape.value(e).shape();
        if tape.value(a).shape() != (n, n) || de != d {
            return Err(Error::shape(
                "merge",
                format!("hidden width {d}, events {:?}, adjacency {:?}", (n, de), tape.value(a).shape()),
            ));
        }
        mixed.push(tape.matmul(a, e)?);
        groups.push(AttnGroup {
            queries: seg.clone(),
            keys: offset..offset + n,
        });
        offset += n;
    }
    let ae = if mixed.len() == 1 { mixed[0] } else { tape.concat_rows(&mixed)? };
    let w_u = tape.param(params, head.w_u);
    let z = tape.matmul(ae, w_u)?;
    let e_u = tape.sigmoid(z);
    let w = head.merge_attn.vars(tape, params);
    let sel = multi_head_attention_grouped(tape, h, e_u, e_u, &w, heads, &groups)?.out;
    let r = tape.add(sel, h)?;
    let hidden = head.merge_ln.apply(tape, params, r)?;
    Ok(Merged { hidden, e_u })
}

/// `1 x 1` logit of the relatedness score from the `[CLS]` row.
pub fn score_logit(tape: &mut Tape, params: &ParamSet, head: &GraphHeadParams, h: Var) -> Result<Var> {
    let cls = tape.slice_rows(h, PackedInput::CLS_INDEX, PackedInput::CLS_INDEX + 1)?;
    let w = tape.param(params, head.score_w);
    let b = tape.param(params, head.score_b);
    let z = tape.matmul(cls, w)?;
    tape.add(z, b)
}

/// Tape handles of one candidate's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TraceVars {
    pub e_hat: Var,
    pub a_hat: Var,
    pub e_u: Var,
    pub logit: Var,
}

/// Values of one candidate's forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub e_hat: Tensor,
    pub a_hat: AdjMatrix,
    pub e_u: Tensor,
    pub y: f64,
}

impl TraceVars {
    pub fn values(&self, tape: &Tape) -> ForwardTrace {
        ForwardTrace {
            e_hat: tape.value(self.e_hat).clone(),
            a_hat: AdjMatrix::unmasked(tape.value(self.a_hat).clone()),
            e_u: tape.value(self.e_u).clone(),
            y: crate::numerics::sigmoid_scalar(tape.value(self.logit).item()),
        }
    }
}

/// Retrieved structure for one packed sequence: graph node per event and the
/// unsmoothed tutor adjacency (uniform on uncovered rows).
#[derive(Clone, Debug, PartialEq)]
pub struct Retrieved {
    pub node_ids: Vec<Option<usize>>,
    pub adjacency: AdjMatrix,
}

/// Encoder plus head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub head: GraphHeadParams,
}

impl Model {
    /// Registers all parameters; `graph_nodes` sizes the retrieval variant's
    /// node-embedding table.
    pub fn new(
        cfg: &ModelConfig,
        vocab_size: usize,
        graph_nodes: usize,
        rng: &mut impl Rng,
    ) -> Result<(Self, ParamSet)> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let encoder = Encoder::register(&mut params, &cfg.encoder, vocab_size, rng)?;
        let head = GraphHeadParams::register(&mut params, cfg, graph_nodes, rng);
        Ok((
            Self {
                cfg: cfg.clone(),
                encoder,
                head,
            },
            params,
        ))
    }

    /// Forward pass of one packed sequence.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        p: &PackedInput,
        retrieved: Option<&Retrieved>,
    ) -> Result<TraceVars> {
        let r = retrieved.map(std::slice::from_ref);
        Ok(self.forward_batch(tape, params, std::slice::from_ref(p), r)?.traces[0])
    }

    pub fn forward_graphbert(&self, tape: &mut Tape, params: &ParamSet, p: &PackedInput) -> Result<TraceVars> {
        Ok(self
            .forward_batch_as(tape, params, std::slice::from_ref(p), Structure::Predicted)?
            .traces[0])
    }

    pub fn forward_retrieval(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        p: &PackedInput,
        retrieved: &Retrieved,
    ) -> Result<TraceVars> {
        let r = std::slice::from_ref(retrieved);
        Ok(self
            .forward_batch_as(tape, params, std::slice::from_ref(p), Structure::Retrieved(r))?
            .traces[0])
    }

    /// Retrieval path with caller-supplied event features.
    pub fn forward_retrieval_with(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        p: &PackedInput,
        e: Var,
        adjacency: &AdjMatrix,
    ) -> Result<TraceVars> {
        let given = [(e, adjacency)];
        Ok(self
            .forward_batch_as(tape, params, std::slice::from_ref(p), Structure::Given(&given))?
            .traces[0])
    }

    /// Forward pass of all candidate packings of one instance, stacked so the
    /// dense layers run once. `retrieved` is required for the retrieval
    /// variant and ignored otherwise.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        packs: &[PackedInput],
        retrieved: Option<&[Retrieved]>,
    ) -> Result<BatchTrace> {
        let structure = if self.cfg.variant.is_retrieval() {
            Structure::Retrieved(retrieved.ok_or(Error::MissingEmbeddings)?)
        } else {
            Structure::Predicted
        };
        self.forward_batch_as(tape, params, packs, structure)
    }

    fn forward_batch_as(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        packs: &[PackedInput],
        structure: Structure,
    ) -> Result<BatchTrace> {
        if packs.is_empty() {
            return Err(Error::shape("forward", "no packed inputs"));
        }
        let mut segments = Vec::with_capacity(packs.len());
        let mut embedded = Vec::with_capacity(packs.len());
        let mut offset = 0;
        for p in packs {
            embedded.push(self.encoder.embed(tape, params, &p.token_ids)?);
            segments.push(offset..offset + p.token_ids.len());
            offset += p.token_ids.len();
        }
        let mut h = if embedded.len() == 1 { embedded[0] } else { tape.concat_rows(&embedded)? };
        let mut h_s0 = h;
        for l in 1..=self.cfg.s1 {
            h = self.encoder.layer_segmented(tape, params, l, h, &segments)?;
            if l == self.cfg.s0 {
                h_s0 = h;
            }
        }

        let mut structures = Vec::with_capacity(packs.len());
        match structure {
            Structure::Predicted => {
                let spans: Vec<(usize, usize)> = packs
                    .iter()
                    .zip(&segments)
                    .flat_map(|(p, seg)| p.event_spans.iter().map(move |&(s, e)| (seg.start + s, seg.start + e)))
                    .collect();
                for (c, p) in packs.iter().enumerate() {
                    for (i, &(s, e)) in p.event_spans.iter().enumerate() {
                        if s >= e {
                            return Err(Error::EmptySpan(i));
                        }
                        if e > p.token_ids.len() {
                            return Err(Error::IndexOutOfRange {
                                index: e,
                                limit: segments[c].len(),
                            });
                        }
                    }
                }
                let e_all = aggregate(tape, params, &self.head, self.cfg.agg_heads, h_s0, &spans)?;
                let mut start = 0;
                for p in packs {
                    let n = p.event_spans.len();
                    let e = if packs.len() == 1 { e_all } else { tape.slice_rows(e_all, start, start + n)? };
                    let a = infer_adjacency(tape, params, &self.head, e)?;
                    structures.push((e, a));
                    start += n;
                }
            }
            Structure::Retrieved(retrieved) => {
                if retrieved.len() != packs.len() {
                    return Err(Error::shape("forward", "one retrieved structure per packing required"));
                }
                let table = self.head.node_emb.ok_or(Error::MissingEmbeddings)?;
                let table = tape.param(params, table);
                for r in retrieved {
                    let e = tape.gather_rows(table, &r.node_ids)?;
                    let a = tape.constant(r.adjacency.values.clone());
                    structures.push((e, a));
                }
            }
            Structure::Given(given) => {
                if given.len() != packs.len() {
                    return Err(Error::shape("forward", "one structure per packing required"));
                }
                for &(e, adj) in given {
                    let a = tape.constant(adj.values.clone());
                    structures.push((e, a));
                }
            }
        }

        let merged = merge_segmented(
            tape,
            params,
            &self.head,
            self.cfg.merge_heads,
            h,
            &segments,
            &structures,
        )?;
        h = merged.hidden;
        for l in self.cfg.s1 + 1..=self.encoder.num_layers() {
            h = self.encoder.layer_segmented(tape, params, l, h, &segments)?;
        }
        let cls: Vec<Option<usize>> = segments
            .iter()
            .map(|s| Some(s.start + PackedInput::CLS_INDEX))
            .collect();
        let cls = tape.gather_rows(h, &cls)?;
        let w = tape.param(params, self.head.score_w);
        let b = tape.param(params, self.head.score_b);
        let z = tape.matmul(cls, w)?;
        let z = tape.add_row(z, b)?;
        let logits = tape.transpose(z);

        let mut traces = Vec::with_capacity(packs.len());
        let mut start = 0;
        for (c, &(e, a)) in structures.iter().enumerate() {
            let n = tape.value(e).rows();
            let (e_u, logit) = if packs.len() == 1 {
                (merged.e_u, logits)
            } else {
                (tape.slice_rows(merged.e_u, start, start + n)?, tape.slice_cols(logits, c, c + 1)?)
            };
            traces.push(TraceVars {
                e_hat: e,
                a_hat: a,
                e_u,
                logit,
            });
            start += n;
        }
        Ok(BatchTrace { traces, logits })
    }
}

enum Structure<'a> {
    Predicted,
    Retrieved(&'a [Retrieved]),
    Given(&'a [(Var, &'a AdjMatrix)]),
}

/// Per-candidate handles plus the `1 x k` logits of a batched forward pass.
pub struct BatchTrace {
    pub traces: Vec<TraceVars>,
    pub logits: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub kl_direction: KlDirection,
    pub softmax_over_candidates: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            kl_direction: KlDirection::PredictedFirst,
            softmax_over_candidates: false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub pred: Var,
    pub rec: Option<Var>,
}

/// Prediction loss over the `1 x k` candidate logits plus `lambda` times the
/// reconstruction divergence between `a_hat` (gold packing) and the tutor
/// matrix. With `lambda == 0` the total is the prediction loss itself.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    gold: usize,
    a_hat: Option<Var>,
    tutor: Option<&AdjMatrix>,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let k = tape.value(logits).len();
    if gold >= k {
        return Err(Error::IndexOutOfRange { index: gold, limit: k });
    }
    let pred = if cfg.softmax_over_candidates {
        tape.softmax_cross_entropy(logits, gold)?
    } else {
        let labels: Vec<f64> = (0..k).map(|i| if i == gold { 1.0 } else { 0.0 }).collect();
        tape.bce_with_logits(logits, &labels)?
    };
    let rec = match (a_hat, tutor) {
        (Some(a_hat), Some(tutor)) => {
            if tape.value(a_hat).shape() != tutor.values.shape() {
                return Err(Error::shape("total_loss", "predicted and tutor adjacency differ in shape"));
            }
            let a = tape.constant(tutor.values.clone());
            Some(match cfg.kl_direction {
                KlDirection::PredictedFirst => tape.kl_rows(a_hat, a, &tutor.row_mask)?,
                KlDirection::TutorFirst => tape.kl_rows(a, a_hat, &tutor.row_mask)?,
            })
        }
        _ => None,
    };
    let total = match rec {
        Some(rec) if cfg.lambda != 0.0 => {
            let scaled = tape.scale(rec, cfg.lambda);
            tape.add(pred, scaled)?
        }
        _ => pred,
    };
    Ok(LossVars { total, pred, rec })
}
