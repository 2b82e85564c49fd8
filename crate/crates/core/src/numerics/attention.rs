use super::tape::{AttnGroup, ParamId, ParamSet, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Parameter handles of one multi-head attention block. Keys carry no bias:
/// it would add the same amount to every score of a query row, which the
/// softmax cancels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionParams {
    /// Registers `d x d` projections under `prefix`, drawing weights from
    /// `init`.
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        d: usize,
        mut init: impl FnMut(usize, usize) -> Tensor,
    ) -> Self {
        let mut w = |name: &str| params.add(format!("{prefix}.{name}"), init(d, d));
        let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
        let mut b = |name: &str| params.add(format!("{prefix}.{name}"), Tensor::zeros(1, d));
        let (bq, bv, bo) = (b("bq"), b("bv"), b("bo"));
        Self {
            wq,
            bq,
            wk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    pub fn vars(&self, tape: &mut Tape, params: &ParamSet) -> AttentionVars {
        AttentionVars {
            wq: tape.param(params, self.wq),
            bq: tape.param(params, self.bq),
            wk: tape.param(params, self.wk),
            wv: tape.param(params, self.wv),
            bv: tape.param(params, self.bv),
            wo: tape.param(params, self.wo),
            bo: tape.param(params, self.bo),
        }
    }
}

/// Projection variables already registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

pub struct AttentionOutput {
    pub out: Var,
    /// The fused attention node; its weights are read back with
    /// [`Tape::attention_probs`].
    pub core: Var,
}

/// Scaled dot-product attention over `heads` column blocks of the projected
/// queries, keys and values, followed by the output projection. Queries are
/// `m x d`, keys and values `n x d`.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    w: &AttentionVars,
    heads: usize,
) -> Result<AttentionOutput> {
    let group = AttnGroup {
        queries: 0..tape.value(q).rows(),
        keys: 0..tape.value(k).rows(),
    };
    multi_head_attention_grouped(tape, q, k, v, w, heads, &[group])
}

/// [`multi_head_attention`] where each group of query rows attends only to
/// its own block of key rows.
pub fn multi_head_attention_grouped(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    w: &AttentionVars,
    heads: usize,
    groups: &[AttnGroup],
) -> Result<AttentionOutput> {
    if tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::shape("multi_head_attention", "key/value row counts differ"));
    }
    let qp = tape.matmul(q, w.wq)?;
    let qp = tape.add_row(qp, w.bq)?;
    let kp = tape.matmul(k, w.wk)?;
    let vp = tape.matmul(v, w.wv)?;
    let vp = tape.add_row(vp, w.bv)?;
    let core = tape.attention(qp, kp, vp, heads, groups)?;
    let o = tape.matmul(core, w.wo)?;
    let out = tape.add_row(o, w.bo)?;
    Ok(AttentionOutput { out, core })
}
