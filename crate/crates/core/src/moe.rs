//! Token-level sparse mixture-of-experts with one shared expert.
//!
//! A `1×d` feature vector is cut into `d/ℓ` tokens. Each token is routed to
//! its Top-K experts by a softmax router and the gated expert outputs are
//! summed; the shared expert, with one parameter set for all tokens, is
//! applied to every token. Both paths are concatenated back to `1×d`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoEConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub token_len: usize,
    /// Hidden width of every expert is `expansion · token_len`.
    pub expansion: usize,
}

impl MoEConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::config(format!(
                "top_k must be in 1..={} (got {})",
                self.num_experts, self.top_k
            )));
        }
        if self.expansion == 0 {
            return Err(Error::config("expert expansion must be >= 1"));
        }
        if self.token_len == 0 || dim % self.token_len != 0 {
            return Err(Error::config(format!(
                "token length {} does not divide feature dim {dim}",
                self.token_len
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.expansion * self.token_len
    }

    pub fn token_count(&self, dim: usize) -> usize {
        dim / self.token_len
    }
}

/// Two-layer feed-forward expert `relu(x·W1 + b1)·W2 + b2`; maps `1×ℓ` to `1×ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertUnit {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ExpertUnit {
    pub fn init(store: &mut ParamStore, prefix: &str, token_len: usize, hidden: usize, rng: &mut Rng) -> Self {
        ExpertUnit {
            w1: store.add_uniform(format!("{prefix}.W1"), token_len, hidden, token_len, rng),
            b1: store.add_uniform(format!("{prefix}.b1"), 1, hidden, token_len, rng),
            w2: store.add_uniform(format!("{prefix}.W2"), hidden, token_len, hidden, rng),
            b2: store.add_uniform(format!("{prefix}.b2"), 1, token_len, hidden, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: NodeId) -> Result<NodeId> {
        let h = g.matmul(x, bound.node(self.w1))?;
        let h = g.add(h, bound.node(self.b1))?;
        let h = g.relu(h)?;
        let y = g.matmul(h, bound.node(self.w2))?;
        g.add(y, bound.node(self.b2))
    }
}

/// One MoE block: `N` routed experts, a shared expert and a router `ℓ×N`.
#[derive(Debug, Clone, PartialEq)]
pub struct MoELayer {
    pub config: MoEConfig,
    pub experts: Vec<ExpertUnit>,
    pub shared: ExpertUnit,
    pub router: ParamId,
}

impl MoELayer {
    pub fn init(store: &mut ParamStore, prefix: &str, config: MoEConfig, rng: &mut Rng) -> Self {
        let (l, h) = (config.token_len, config.hidden());
        let experts = (0..config.num_experts)
            .map(|j| ExpertUnit::init(store, &format!("{prefix}.expert{j}"), l, h, rng))
            .collect();
        let shared = ExpertUnit::init(store, &format!("{prefix}.shared"), l, h, rng);
        let router = store.add_uniform(format!("{prefix}.router"), l, config.num_experts, l, rng);
        MoELayer {
            config,
            experts,
            shared,
            router,
        }
    }
}

/// Routing decision for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRoute {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Top-K expert indices, highest probability first.
    pub selected: Vec<usize>,
    /// Raw softmax probability of each selected expert.
    pub gates: Vec<f64>,
    /// `1×N` softmax node on the graph that produced this route.
    pub probs_node: NodeId,
}

/// All routing decisions of one MoE block in one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterTrace {
    pub num_experts: usize,
    pub top_k: usize,
    pub tokens: Vec<TokenRoute>,
}

impl RouterTrace {
    /// Number of Top-K selections each expert received.
    pub fn selection_counts(&self) -> Vec<usize> {
        let mut counts = alloc::vec![0; self.num_experts];
        for t in &self.tokens {
            for &j in &t.selected {
                counts[j] += 1;
            }
        }
        counts
    }

    /// Mean routing probability of each expert over tokens.
    pub fn mean_probs(&self) -> Vec<f64> {
        let mut mean = alloc::vec![0.0; self.num_experts];
        for t in &self.tokens {
            for (m, p) in mean.iter_mut().zip(&t.probs) {
                *m += p;
            }
        }
        let n = self.tokens.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// Split a `1×d` node into `d/ℓ` consecutive `1×ℓ` tokens.
pub fn tokenize(g: &mut Graph, v: NodeId, token_len: usize) -> Result<Vec<NodeId>> {
    let (rows, d) = g.shape(v);
    if rows != 1 {
        return Err(Error::Shape {
            op: "tokenize",
            left: (rows, d),
            right: (1, token_len),
        });
    }
    if token_len == 0 || d % token_len != 0 {
        return Err(Error::config(format!(
            "token length {token_len} does not divide feature dim {d}"
        )));
    }
    if token_len == d {
        return Ok(alloc::vec![v]);
    }
    (0..d / token_len)
        .map(|t| g.slice_cols(v, t * token_len, token_len))
        .collect()
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub fn top_k_indices(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `probs = softmax(token · W_router)` and Top-K selection.
pub fn route(g: &mut Graph, token: NodeId, router: NodeId, top_k: usize) -> Result<TokenRoute> {
    let logits_node = g.matmul(token, router)?;
    let probs_node = g.row_softmax(logits_node)?;
    let logits = g.value(logits_node).as_slice().to_vec();
    let probs = g.value(probs_node).as_slice().to_vec();
    if top_k == 0 || top_k > probs.len() {
        return Err(Error::config(format!("top_k {top_k} with {} experts", probs.len())));
    }
    let selected = top_k_indices(&probs, top_k);
    let gates = selected.iter().map(|&j| probs[j]).collect();
    Ok(TokenRoute {
        logits,
        probs,
        selected,
        gates,
        probs_node,
    })
}

/// Outputs of one MoE block.
#[derive(Debug, Clone)]
pub struct MoEOutput {
    /// Concatenated gated routed-expert outputs, `1×d`.
    pub routed: NodeId,
    /// Concatenated shared-expert outputs, `1×d`.
    pub shared: NodeId,
    pub trace: RouterTrace,
    /// Input tokens.
    pub tokens: Vec<NodeId>,
    /// Shared-expert output per token.
    pub shared_tokens: Vec<NodeId>,
}

pub fn moe_forward(g: &mut Graph, bound: &Bound, layer: &MoELayer, v: NodeId) -> Result<MoEOutput> {
    let cfg = layer.config;
    cfg.validate(g.shape(v).1)?;
    let tokens = tokenize(g, v, cfg.token_len)?;
    let router = bound.node(layer.router);

    let mut routed_parts = Vec::with_capacity(tokens.len());
    let mut shared_tokens = Vec::with_capacity(tokens.len());
    let mut routes = Vec::with_capacity(tokens.len());
    for &tok in &tokens {
        let r = route(g, tok, router, cfg.top_k)?;
        let mut acc: Option<NodeId> = None;
        for &j in &r.selected {
            let gate = g.slice_cols(r.probs_node, j, 1)?;
            let out = layer.experts[j].forward(g, bound, tok)?;
            let gated = g.scale_by(out, gate)?;
            acc = Some(match acc {
                None => gated,
                Some(prev) => g.add(prev, gated)?,
            });
        }
        routed_parts.push(acc.expect("top_k >= 1"));
        shared_tokens.push(layer.shared.forward(g, bound, tok)?);
        routes.push(r);
    }
    let routed = g.concat_cols(&routed_parts)?;
    let shared = g.concat_cols(&shared_tokens)?;
    Ok(MoEOutput {
        routed,
        shared,
        trace: RouterTrace {
            num_experts: cfg.num_experts,
            top_k: cfg.top_k,
            tokens: routes,
        },
        tokens,
        shared_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_gradient, max_rel_error};
    use crate::matrix::Matrix;
    use crate::rng;
    use alloc::vec;
    use rand::Rng as _;

    fn row(v: &[f64]) -> Matrix {
        Matrix::row_vector(v.to_vec())
    }

    fn layer(seed: u64, cfg: MoEConfig) -> (ParamStore, MoELayer) {
        let mut r = rng::seeded(seed);
        let mut store = ParamStore::new();
        let l = MoELayer::init(&mut store, "moe", cfg, &mut r);
        (store, l)
    }

    fn random_row(seed: u64, n: usize) -> Matrix {
        let mut r = rng::seeded(seed);
        Matrix::from_fn(1, n, |_, _| r.random_range(-2.0..2.0))
    }

    fn route_logits(logits: &[f64], k: usize) -> TokenRoute {
        // identity router so logits == token
        let n = logits.len();
        let mut g = Graph::new();
        let t = g.leaf(row(logits));
        let w = g.leaf(Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 }));
        route(&mut g, t, w, k).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        let mut g = Graph::new();
        let v = g.leaf(row(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]));
        let one = tokenize(&mut g, v, 8).unwrap();
        assert_eq!(one, vec![v]);
        let four = tokenize(&mut g, v, 2).unwrap();
        assert_eq!(four.len(), 4);
        for (t, id) in four.iter().enumerate() {
            assert_eq!(g.value(*id).as_slice(), &[2.0 * t as f64, 2.0 * t as f64 + 1.0]);
        }
        assert!(matches!(tokenize(&mut g, v, 3), Err(Error::Config(_))));

        let wide = g.leaf(Matrix::zeros(1, 256));
        assert_eq!(tokenize(&mut g, wide, 64).unwrap().len(), 4);
    }

    #[test]
    fn route_examples() {
        let r = route_logits(&[0.5, 0.5, 0.5, 0.5], 1);
        assert_eq!(r.selected, vec![0]);
        assert!((r.gates[0] - 0.25).abs() < 1e-15);

        let r = route_logits(&[2.0, 1.0, 0.0], 1);
        assert_eq!(r.selected, vec![0]);
        assert!((r.gates[0] - 0.6652).abs() < 5e-5);

        let r = route_logits(&[2.0, 1.0, 0.0], 2);
        assert_eq!(r.selected, vec![0, 1]);
        assert!((r.gates[0] - 0.6652).abs() < 5e-5);
        assert!((r.gates[1] - 0.2447).abs() < 5e-5);
    }

    #[test]
    fn single_expert_gate_is_one() {
        let cfg = MoEConfig {
            num_experts: 1,
            top_k: 1,
            token_len: 2,
            expansion: 4,
        };
        let (store, l) = layer(3, cfg);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let v = g.leaf(random_row(4, 6));
        let out = moe_forward(&mut g, &b, &l, v).unwrap();
        assert!(out.trace.tokens.iter().all(|t| t.gates == vec![1.0]));
        let mut expect = Vec::new();
        for &tok in &out.tokens {
            let e = l.experts[0].forward(&mut g, &b, tok).unwrap();
            expect.extend_from_slice(g.value(e).as_slice());
        }
        assert_eq!(g.value(out.routed).as_slice(), expect.as_slice());
        assert_eq!(g.shape(out.routed), (1, 6));
        assert_eq!(g.shape(out.shared), (1, 6));
    }

    #[test]
    fn zero_weights_leave_bias_pattern() {
        let cfg = MoEConfig {
            num_experts: 3,
            top_k: 1,
            token_len: 2,
            expansion: 2,
        };
        let (mut store, l) = layer(5, cfg);
        let experts: Vec<ExpertUnit> = l.experts.iter().cloned().chain([l.shared.clone()]).collect();
        for e in &experts {
            for id in [e.w1, e.w2] {
                store.get_mut(id).as_mut_slice().fill(0.0);
            }
        }
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let v = g.leaf(random_row(6, 4));
        let out = moe_forward(&mut g, &b, &l, v).unwrap();
        let shared_b2 = store.get(l.shared.b2).as_slice();
        assert_eq!(&g.value(out.shared).as_slice()[..2], shared_b2);
        assert_eq!(&g.value(out.shared).as_slice()[2..], shared_b2);
        for (t, r) in out.trace.tokens.iter().enumerate() {
            let b2 = store.get(l.experts[r.selected[0]].b2).as_slice();
            for c in 0..2 {
                let got = g.value(out.routed).as_slice()[t * 2 + c];
                assert!((got - r.gates[0] * b2[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = MoEConfig {
            num_experts: 3,
            top_k: 2,
            token_len: 2,
            expansion: 2,
        };
        for trial in 0..8 {
            let (store, l) = layer(40 + trial, cfg);
            let input = random_row(80 + trial, 6);
            let loss = |s: &ParamStore| -> f64 {
                let mut g = Graph::new();
                let b = s.bind(&mut g);
                let v = g.leaf(input.clone());
                let out = moe_forward(&mut g, &b, &l, v).unwrap();
                g.value(out.routed).sum() + g.value(out.shared).sum()
            };
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let v = g.leaf(input.clone());
            let out = moe_forward(&mut g, &b, &l, v).unwrap();
            let s1 = g.sum(out.routed).unwrap();
            let s2 = g.sum(out.shared).unwrap();
            let total = g.add(s1, s2).unwrap();
            let mut grads = g.backward(total).unwrap();
            let analytic = b.gradients(&mut grads);
            for id in store.ids() {
                let fd = finite_diff_gradient(
                    |m| {
                        let mut s = store.clone();
                        *s.get_mut(id) = m.clone();
                        loss(&s)
                    },
                    store.get(id),
                    1e-5,
                );
                let a = analytic[id.index()]
                    .clone()
                    .unwrap_or_else(|| Matrix::zeros(fd.rows(), fd.cols()));
                assert!(max_rel_error(&a, &fd) < 1e-4, "{} trial {trial}", store.name(id));
            }
        }
    }

    #[test]
    fn unselected_experts_get_no_gradient() {
        let cfg = MoEConfig {
            num_experts: 4,
            top_k: 1,
            token_len: 4,
            expansion: 2,
        };
        let (store, l) = layer(9, cfg);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let v = g.leaf(random_row(10, 4));
        let out = moe_forward(&mut g, &b, &l, v).unwrap();
        let chosen = out.trace.tokens[0].selected[0];
        let s = g.sum(out.routed).unwrap();
        let grads = g.backward(s).unwrap();
        for (j, e) in l.experts.iter().enumerate() {
            let has = grads.get(b.node(e.w1)).is_some();
            assert_eq!(has, j == chosen);
        }
    }

    #[test]
    fn trace_aggregates() {
        let cfg = MoEConfig {
            num_experts: 3,
            top_k: 2,
            token_len: 2,
            expansion: 1,
        };
        let (store, l) = layer(11, cfg);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let v = g.leaf(random_row(12, 10));
        let out = moe_forward(&mut g, &b, &l, v).unwrap();
        let counts = out.trace.selection_counts();
        assert_eq!(counts.iter().sum::<usize>(), 5 * 2);
        assert!((out.trace.mean_probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
