//! Gated-attention pooling of an instance bag into one class token.

use alloc::format;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Graph, NodeId};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `d_in × d1`
    pub proj: ParamId,
    /// `d1 × d_att`, tanh branch
    pub att_v: ParamId,
    /// `d1 × d_att`, sigmoid gate branch
    pub att_u: ParamId,
    /// `d_att × 1`
    pub att_w: ParamId,
    pub d_in: usize,
    pub d1: usize,
    pub d_att: usize,
}

impl EncoderParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d1: usize,
        d_att: usize,
        rng: &mut Rng,
    ) -> Self {
        EncoderParams {
            proj: store.add_uniform(format!("{prefix}.W_proj"), d_in, d1, d_in, rng),
            att_v: store.add_uniform(format!("{prefix}.V_att"), d1, d_att, d1, rng),
            att_u: store.add_uniform(format!("{prefix}.U_att"), d1, d_att, d1, rng),
            att_w: store.add_uniform(format!("{prefix}.w_att"), d_att, 1, d_att, rng),
            d_in,
            d1,
            d_att,
        }
    }
}

/// Pooled token together with the attention weights over instances.
#[derive(Debug, Clone, Copy)]
pub struct EncodedBag {
    /// `1 × d1`
    pub token: NodeId,
    /// `1 × n`, sums to one
    pub attention: NodeId,
}

/// `h = bag·W_proj`, `a = softmax_i(w·(tanh(h_i V) ⊙ σ(h_i U)))`, output `Σ a_i h_i`.
pub fn encode_bag(
    g: &mut Graph,
    bound: &Bound,
    params: &EncoderParams,
    bag: &Matrix,
) -> Result<EncodedBag> {
    if bag.rows() == 0 {
        return Err(Error::EmptyBag);
    }
    if bag.cols() != params.d_in {
        return Err(Error::Shape {
            op: "encode_bag",
            left: bag.shape(),
            right: (params.d_in, params.d1),
        });
    }
    let x = g.leaf(bag.clone());
    let h = g.matmul(x, bound.node(params.proj))?;
    let hv = g.matmul(h, bound.node(params.att_v))?;
    let hu = g.matmul(h, bound.node(params.att_u))?;
    let branch = g.tanh(hv)?;
    let gate = g.sigmoid(hu)?;
    let gated = g.mul(branch, gate)?;
    let scores = g.matmul(gated, bound.node(params.att_w))?;
    let scores = g.transpose(scores)?;
    let attention = g.row_softmax(scores)?;
    let token = g.matmul(attention, h)?;
    Ok(EncodedBag { token, attention })
}
