//! Word-level vocabulary, input packing and the post-LN transformer encoder.
//!
//! Inputs are packed as `[CLS] e_1 [SEP] ... e_t [SEP] candidate [SEP]`
//! with learned position embeddings and no segment embeddings.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Event, McInstance};
use crate::numerics::{multi_head_attention_grouped, AttentionParams, AttnGroup, ParamId, ParamSet, Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// One token per line, reserved tokens first; a token's id is its line
    /// number.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::CorruptSnapshot("vocabulary lacks the reserved block".into()));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::CorruptSnapshot("duplicate vocabulary token".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Whitespace tokens of every surface form seen at least `min_freq` times,
/// in lexicographic order after the reserved block.
pub fn build_vocab<I, S>(surface_forms: I, min_freq: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if min_freq == 0 {
        return Err(Error::config("min_freq must be at least 1"));
    }
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    let mut any = false;
    for s in surface_forms {
        any = true;
        for tok in s.as_ref().split_whitespace() {
            *freq.entry(tok.to_owned()).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(Error::EmptyCorpus);
    }
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(
        freq.into_iter()
            .filter(|(t, n)| *n >= min_freq && !RESERVED.contains(&t.as_str()))
            .map(|(t, _)| t),
    );
    Ok(Vocab::from_tokens(tokens))
}

/// Token ids of one packed sequence and the half-open token span of each
/// event inside it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedInput {
    pub token_ids: Vec<usize>,
    pub event_spans: Vec<(usize, usize)>,
}

impl PackedInput {
    pub const CLS_INDEX: usize = 0;

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Packs `t` context events and candidate `candidate_idx`.
pub fn pack_input(
    inst: &McInstance,
    candidate_idx: usize,
    vocab: &Vocab,
    maxlen: usize,
) -> Result<PackedInput> {
    if candidate_idx >= inst.candidates().len() {
        return Err(Error::IndexOutOfRange {
            index: candidate_idx,
            limit: inst.candidates().len(),
        });
    }
    pack_sequence(&inst.sequence(candidate_idx), vocab, maxlen)
}

/// Packs an arbitrary event sequence. When the result would exceed `maxlen`,
/// tokens are dropped from the tail of the currently longest event (earliest
/// on ties) until it fits; events keep at least one token.
pub fn pack_sequence(events: &[Event], vocab: &Vocab, maxlen: usize) -> Result<PackedInput> {
    let mut per_event: Vec<Vec<usize>> = events
        .iter()
        .map(|e| vocab.encode(&e.surface_form()))
        .collect();
    let specials = 1 + events.len();
    let mut total = specials + per_event.iter().map(Vec::len).sum::<usize>();
    while total > maxlen {
        let (idx, len) = per_event
            .iter()
            .map(Vec::len)
            .enumerate()
            .fold((0, 0), |best, (i, l)| if l > best.1 { (i, l) } else { best });
        if len <= 1 {
            return Err(Error::OverLength { len: total, maxlen });
        }
        per_event[idx].pop();
        total -= 1;
    }
    let mut token_ids = Vec::with_capacity(total);
    let mut event_spans = Vec::with_capacity(events.len());
    token_ids.push(CLS);
    for toks in per_event {
        let start = token_ids.len();
        token_ids.extend(toks);
        event_spans.push((start, token_ids.len()));
        token_ids.push(SEP);
    }
    Ok(PackedInput {
        token_ids,
        event_spans,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub maxlen: usize,
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 64,
            heads: 4,
            maxlen: 96,
            ffn_mult: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model < 2 || self.heads == 0 || self.maxlen < 3 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// `(s0, s1)` at depth `layers`, keeping the 7-of-12 and 10-of-12 fractions.
pub fn default_layer_pair(layers: usize) -> (usize, usize) {
    let l = layers as f64;
    let s1 = ((10.0 * l / 12.0).round() as usize).clamp(1, layers.max(1));
    let s0 = ((7.0 * l / 12.0).round() as usize).min(s1 - 1);
    (s0, s1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn register(params: &mut ParamSet, prefix: &str, d: usize) -> Self {
        Self {
            gain: params.add(format!("{prefix}.gain"), Tensor::filled(1, d, 1.0)),
            bias: params.add(format!("{prefix}.bias"), Tensor::zeros(1, d)),
        }
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let g = tape.param(params, self.gain);
        let b = tape.param(params, self.bias);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerParams {
    attn: AttentionParams,
    ln1: LayerNormParams,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2: LayerNormParams,
}

/// Parameter handles of the encoder; values live in a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerParams>,
}

/// `rows x cols` weights drawn from `N(0, 1/rows)`.
pub(crate) fn fan_in_init(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid std");
    Tensor::from_fn(rows, cols, |_, _| normal.sample(rng))
}

impl Encoder {
    pub fn register(
        params: &mut ParamSet,
        cfg: &EncoderConfig,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let unit = Normal::new(0.0, 1.0).expect("valid std");
        let tok_emb = params.add(
            "enc.tok_emb",
            Tensor::from_fn(vocab_size, d, |_, _| unit.sample(rng)),
        );
        let pos_emb = params.add(
            "enc.pos_emb",
            Tensor::from_fn(cfg.maxlen, d, |_, _| unit.sample(rng)),
        );
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("enc.layer{l}");
            let attn = AttentionParams::register(params, &format!("{p}.attn"), d, |r, c| {
                fan_in_init(rng, r, c)
            });
            let ln1 = LayerNormParams::register(params, &format!("{p}.ln1"), d);
            let hidden = d * cfg.ffn_mult;
            let w1 = params.add(format!("{p}.ff.w1"), fan_in_init(rng, d, hidden));
            let b1 = params.add(format!("{p}.ff.b1"), Tensor::zeros(1, hidden));
            let w2 = params.add(format!("{p}.ff.w2"), fan_in_init(rng, hidden, d));
            let b2 = params.add(format!("{p}.ff.b2"), Tensor::zeros(1, d));
            let ln2 = LayerNormParams::register(params, &format!("{p}.ln2"), d);
            layers.push(LayerParams {
                attn,
                ln1,
                w1,
                b1,
                w2,
                b2,
                ln2,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Token plus position embeddings, `len x d`.
    pub fn embed(&self, tape: &mut Tape, params: &ParamSet, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.cfg.maxlen {
            return Err(Error::OverLength {
                len: ids.len(),
                maxlen: self.cfg.maxlen,
            });
        }
        let vocab = params.get(self.tok_emb).rows();
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                limit: vocab,
            });
        }
        let tok = tape.param(params, self.tok_emb);
        let pos = tape.param(params, self.pos_emb);
        let sel: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
        let t = tape.gather_rows(tok, &sel)?;
        let p = tape.slice_rows(pos, 0, ids.len())?;
        tape.add(t, p)
    }

    /// Applies layer `l` (1-based, matching hidden-state indices).
    pub fn layer(&self, tape: &mut Tape, params: &ParamSet, l: usize, h: Var) -> Result<Var> {
        let n = tape.value(h).rows();
        self.layer_segmented(tape, params, l, h, std::slice::from_ref(&(0..n)))
    }

    /// Layer `l` over several sequences stacked by rows; self-attention
    /// stays within each segment.
    pub fn layer_segmented(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        l: usize,
        h: Var,
        segments: &[Range<usize>],
    ) -> Result<Var> {
        let lp = self.layers.get(l.wrapping_sub(1)).ok_or(Error::IndexOutOfRange {
            index: l,
            limit: self.layers.len() + 1,
        })?;
        let w = lp.attn.vars(tape, params);
        let groups: Vec<AttnGroup> = segments
            .iter()
            .map(|s| AttnGroup {
                queries: s.clone(),
                keys: s.clone(),
            })
            .collect();
        let a = multi_head_attention_grouped(tape, h, h, h, &w, self.cfg.heads, &groups)?;
        let r = tape.add(h, a.out)?;
        let h1 = lp.ln1.apply(tape, params, r)?;
        let w1 = tape.param(params, lp.w1);
        let b1 = tape.param(params, lp.b1);
        let w2 = tape.param(params, lp.w2);
        let b2 = tape.param(params, lp.b2);
        let f = tape.matmul(h1, w1)?;
        let f = tape.add_row(f, b1)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2)?;
        let f = tape.add_row(f, b2)?;
        let r = tape.add(h1, f)?;
        lp.ln2.apply(tape, params, r)
    }

    /// All `L + 1` hidden states: the embedding output followed by each
    /// layer's output.
    pub fn encode(&self, tape: &mut Tape, params: &ParamSet, p: &PackedInput) -> Result<Vec<Var>> {
        let mut hs = Vec::with_capacity(self.layers.len() + 1);
        let mut h = self.embed(tape, params, &p.token_ids)?;
        hs.push(h);
        for l in 1..=self.layers.len() {
            h = self.layer(tape, params, l, h)?;
            hs.push(h);
        }
        Ok(hs)
    }
}

pub fn hidden_at(hiddens: &[Var], layer: usize) -> Result<Var> {
    hiddens.get(layer).copied().ok_or(Error::IndexOutOfRange {
        index: layer,
        limit: hiddens.len(),
    })
}
