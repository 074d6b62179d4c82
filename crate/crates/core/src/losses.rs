//! Training objectives: discrete-time survival NLL, feature decoupling,
//! router load balance, and their weighted total.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::DecoupledFeatures;
use crate::moe::RouterTrace;
use crate::tape::{Graph, NodeId};

/// Hazards are clamped into `[ε, 1 − ε]` before taking logs.
pub const HAZARD_EPS: f64 = 1e-7;
/// Added under the square root of each norm in the cosine metric.
pub const NORM_EPS: f64 = 1e-12;

/// `−c·log S(n) − (1−c)·(log h_n + log S(n−1))` on a `1×K` hazard node, with
/// `S(j) = Π_{k≤j}(1 − h_k)` and bin label `n ∈ 1..=K`.
pub fn survival_nll(g: &mut Graph, hazards: NodeId, bin: usize, censored: bool) -> Result<NodeId> {
    let (rows, k) = g.shape(hazards);
    if rows != 1 {
        return Err(Error::Shape {
            op: "survival_nll",
            left: (rows, k),
            right: (1, k),
        });
    }
    if bin == 0 || bin > k {
        return Err(Error::InvalidBin { label: bin, bins: k });
    }
    let h = g.clamp(hazards, HAZARD_EPS, 1.0 - HAZARD_EPS)?;
    let one_minus = g.affine(h, -1.0, 1.0)?;
    let log_surv = g.log(one_minus)?;
    let ll = if censored {
        let head = g.slice_cols(log_surv, 0, bin)?;
        g.sum(head)?
    } else {
        let hn = g.slice_cols(h, bin - 1, 1)?;
        let log_hn = g.log(hn)?;
        if bin == 1 {
            log_hn
        } else {
            let head = g.slice_cols(log_surv, 0, bin - 1)?;
            let s = g.sum(head)?;
            g.add(log_hn, s)?
        }
    };
    g.scale(ll, -1.0)
}

/// Plain-number [`survival_nll`].
pub fn survival_nll_value(hazards: &[f64], bin: usize, censored: bool) -> Result<f64> {
    let mut g = Graph::new();
    let h = g.leaf(Matrix::row_vector(hazards.to_vec()));
    let l = survival_nll(&mut g, h, bin, censored)?;
    Ok(g.scalar(l))
}

/// Distance used by the decoupling loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceMetric {
    /// `DM = 1 − cos`, `DM′ = cos`
    #[default]
    Cos,
    /// `DM = mean |x − y|`, `DM′ = −DM`
    L1,
    /// Symmetric KL of the softmax-normalized vectors, `DM′ = −DM`
    Kl,
    /// `DM = mean (x − y)²`, `DM′ = −DM`
    Mse,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 4] = [Self::Cos, Self::L1, Self::Kl, Self::Mse];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cos => "cos",
            Self::L1 => "l1",
            Self::Kl => "kl",
            Self::Mse => "mse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }

    /// `DM + DM′` for this metric.
    pub fn offset(self) -> f64 {
        match self {
            Self::Cos => 1.0,
            _ => 0.0,
        }
    }
}

fn guarded_norm(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let sq = g.square(x)?;
    let s = g.sum(sq)?;
    let s = g.affine(s, 1.0, NORM_EPS)?;
    g.sqrt(s)
}

/// `(DM, DM′)` between two `1×d` nodes.
pub fn distance(g: &mut Graph, kind: DistanceMetric, x: NodeId, y: NodeId) -> Result<(NodeId, NodeId)> {
    let (sx, sy) = (g.shape(x), g.shape(y));
    if sx != sy || sx.0 != 1 {
        return Err(Error::Shape {
            op: "distance",
            left: sx,
            right: sy,
        });
    }
    match kind {
        DistanceMetric::Cos => {
            let xy = g.dot(x, y)?;
            let nx = guarded_norm(g, x)?;
            let ny = guarded_norm(g, y)?;
            let den = g.mul(nx, ny)?;
            let cos = g.div(xy, den)?;
            let dm = g.affine(cos, -1.0, 1.0)?;
            Ok((dm, cos))
        }
        DistanceMetric::L1 | DistanceMetric::Mse => {
            let diff = g.sub(x, y)?;
            let e = if kind == DistanceMetric::L1 {
                g.abs(diff)?
            } else {
                g.square(diff)?
            };
            let dm = g.mean(e)?;
            let dmp = g.scale(dm, -1.0)?;
            Ok((dm, dmp))
        }
        DistanceMetric::Kl => {
            let lp = g.log_softmax(x)?;
            let lq = g.log_softmax(y)?;
            let p = g.exp(lp)?;
            let q = g.exp(lq)?;
            let dp = g.sub(p, q)?;
            let dl = g.sub(lp, lq)?;
            let dm = g.dot(dp, dl)?;
            let dmp = g.scale(dm, -1.0)?;
            Ok((dm, dmp))
        }
    }
}

/// Within-level pairs pushed apart with `DM′`, cross-level pairs pulled
/// together with `DM`, where the two first-level vectors of each kind are
/// concatenated before comparing against the second level.
pub fn decouple_loss(g: &mut Graph, kind: DistanceMetric, f: &DecoupledFeatures) -> Result<NodeId> {
    let (_, apart_a) = distance(g, kind, f.intra_a, f.share_a)?;
    let (_, apart_b) = distance(g, kind, f.intra_b, f.share_b)?;
    let (_, apart_2) = distance(g, kind, f.inter, f.share_3)?;
    let intra = g.concat_cols(&[f.intra_a, f.intra_b])?;
    let share = g.concat_cols(&[f.share_a, f.share_b])?;
    let (close_intra, _) = distance(g, kind, intra, f.inter)?;
    let (close_share, _) = distance(g, kind, share, f.share_3)?;
    let mut total = g.add(apart_a, apart_b)?;
    for t in [apart_2, close_intra, close_share] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

fn selection_fractions(trace: &RouterTrace) -> Result<Vec<f64>> {
    if trace.tokens.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let denom = (trace.tokens.len() * trace.top_k) as f64;
    Ok(trace.selection_counts().into_iter().map(|c| c as f64 / denom).collect())
}

/// `Σ_routers Σ_i f_i·P_i`. `f_i` (share of Top-K selections) is a constant;
/// gradient reaches the router only through the mean probabilities `P_i`.
/// Every trace must have been produced on `g`.
pub fn balance_loss(g: &mut Graph, traces: &[&RouterTrace]) -> Result<NodeId> {
    if traces.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut total: Option<NodeId> = None;
    for trace in traces {
        let f = selection_fractions(trace)?;
        let mut sum = trace.tokens[0].probs_node;
        for t in &trace.tokens[1..] {
            sum = g.add(sum, t.probs_node)?;
        }
        let mean = g.scale(sum, 1.0 / trace.tokens.len() as f64)?;
        let fl = g.leaf(Matrix::row_vector(f));
        let l = g.dot(mean, fl)?;
        total = Some(match total {
            None => l,
            Some(prev) => g.add(prev, l)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Plain-number load-balance value of a single router.
pub fn balance_loss_value(trace: &RouterTrace) -> Result<f64> {
    let f = selection_fractions(trace)?;
    Ok(f.iter().zip(trace.mean_probs()).map(|(f, p)| f * p).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub surv: f64,
    pub dm: f64,
    pub bl: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// `surv + α·dm + β·bl`.
pub fn total_loss(surv: f64, dm: f64, bl: f64, alpha: f64, beta: f64) -> LossBreakdown {
    LossBreakdown {
        surv,
        dm,
        bl,
        total: surv + alpha * dm + beta * bl,
        alpha,
        beta,
    }
}

/// Graph form of [`total_loss`]; returns the total node and its breakdown,
/// whose `total` equals the node value bitwise.
pub fn total_loss_node(
    g: &mut Graph,
    surv: NodeId,
    dm: NodeId,
    bl: NodeId,
    weights: LossWeights,
) -> Result<(NodeId, LossBreakdown)> {
    let wdm = g.scale(dm, weights.alpha)?;
    let wbl = g.scale(bl, weights.beta)?;
    let t = g.add(surv, wdm)?;
    let t = g.add(t, wbl)?;
    let mut breakdown = total_loss(g.scalar(surv), g.scalar(dm), g.scalar(bl), weights.alpha, weights.beta);
    breakdown.total = g.scalar(t);
    Ok((t, breakdown))
}
