//! The full two-level pipeline: encoders, first-level MoE per modality,
//! first reorganization, bridge projection, second-level MoE, second
//! reorganization and the per-bin hazard head.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::encoder::{encode_bag, EncoderParams};
use crate::error::{Error, Result, StageContext};
use crate::matrix::Matrix;
use crate::moe::{moe_forward, MoEConfig, MoELayer, MoEOutput, RouterTrace};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rfr::{rfr_forward, PermutationCache, RfrDraw, SegmentChoice, SegmentSet};
use crate::rng::Rng;
use crate::tape::{Graph, NodeId};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d1: usize,
    pub d2: usize,
    pub d_att: usize,
    pub num_bins: usize,
    pub level1: MoEConfig,
    pub level2: MoEConfig,
    pub segments: SegmentSet,
}

impl ModelConfig {
    /// d1 = 256, d2 = 512, N = 8, Top-1, token lengths 64 / 32, K = 4.
    pub fn paper(d_in: usize) -> Self {
        ModelConfig {
            d_in,
            d1: 256,
            d2: 512,
            d_att: 128,
            num_bins: 4,
            level1: MoEConfig {
                num_experts: 8,
                top_k: 1,
                token_len: 64,
                expansion: 4,
            },
            level2: MoEConfig {
                num_experts: 8,
                top_k: 1,
                token_len: 32,
                expansion: 4,
            },
            segments: SegmentSet::paper_default(),
        }
    }

    /// Every width of [`ModelConfig::paper`] divided by 8; token counts unchanged.
    pub fn desk(d_in: usize) -> Self {
        let mut c = Self::paper(d_in);
        c.d1 = 32;
        c.d2 = 64;
        c.d_att = 16;
        c.level1.token_len = 8;
        c.level2.token_len = 4;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d1 == 0 || self.d_att == 0 || self.num_bins == 0 {
            return Err(Error::config("d_in, d1, d_att and num_bins must be >= 1"));
        }
        if 2 * self.d1 != self.d2 {
            return Err(Error::config(format!(
                "decoupling loss needs 2*d1 == d2 (d1 = {}, d2 = {})",
                self.d1, self.d2
            )));
        }
        self.level1.validate(self.d1).stage("level-1 MoE")?;
        self.level2.validate(self.d2).stage("level-2 MoE")?;
        for d in [self.d1, self.d2] {
            if self.segments.divisors_of(d).is_empty() {
                return Err(Error::config(format!(
                    "no segment value in {:?} divides {d}",
                    self.segments.values()
                )));
            }
        }
        Ok(())
    }

    pub fn tokens_level1(&self) -> usize {
        self.level1.token_count(self.d1)
    }

    pub fn tokens_level2(&self) -> usize {
        self.level2.token_count(self.d2)
    }
}

/// Per-bin hazards and the quantities derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardPrediction {
    pub hazards: Vec<f64>,
    /// `S(j) = Π_{k≤j}(1 − h_k)` for `j = 1..K`; `S(0) = 1` is implicit.
    pub survival: Vec<f64>,
    pub risk: f64,
}

impl HazardPrediction {
    pub fn from_hazards(hazards: Vec<f64>) -> Self {
        let mut s = 1.0;
        let survival: Vec<f64> = hazards
            .iter()
            .map(|h| {
                s *= 1.0 - h;
                s
            })
            .collect();
        let risk = -survival.iter().sum::<f64>();
        HazardPrediction {
            hazards,
            survival,
            risk,
        }
    }
}

/// Negative expected number of bins survived: `−Σ_j S(j)`.
pub fn risk_score(hazards: &[f64]) -> f64 {
    HazardPrediction::from_hazards(hazards.to_vec()).risk
}

/// Named intermediate vectors of one pass.
#[derive(Debug, Clone, Copy)]
pub struct DecoupledFeatures {
    pub intra_a: NodeId,
    pub share_a: NodeId,
    pub intra_b: NodeId,
    pub share_b: NodeId,
    pub inter: NodeId,
    pub share_3: NodeId,
    /// First reorganization, `1 × 4·d1`.
    pub f1: NodeId,
    /// Bridge projection of `f1`, `1 × d2`.
    pub f1_proj: NodeId,
    /// Second reorganization, `1 × 2·d2`.
    pub f2: NodeId,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `1×K` hazard node.
    pub hazards: NodeId,
    pub prediction: HazardPrediction,
    pub features: DecoupledFeatures,
    pub level1_a: MoEOutput,
    pub level1_b: MoEOutput,
    pub level2: MoEOutput,
    pub draws: [RfrDraw; 2],
}

impl ForwardPass {
    pub fn traces(&self) -> [&RouterTrace; 3] {
        [&self.level1_a.trace, &self.level1_b.trace, &self.level2.trace]
    }

    pub fn into_traces(self) -> [RouterTrace; 3] {
        [self.level1_a.trace, self.level1_b.trace, self.level2.trace]
    }
}

/// Trainable scalar counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterCount {
    pub total: usize,
    /// Top-level submodule name and its count, in parameter order.
    pub groups: Vec<(String, usize)>,
}

impl ParameterCount {
    pub fn group(&self, name: &str) -> Option<usize> {
        self.groups.iter().find(|(n, _)| n == name).map(|&(_, c)| c)
    }
}

#[derive(Debug, Clone)]
pub struct HDMoE {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder_a: EncoderParams,
    pub encoder_b: EncoderParams,
    pub level1_a: MoELayer,
    pub level1_b: MoELayer,
    pub bridge: ParamId,
    pub level2: MoELayer,
    pub head_w: ParamId,
    pub head_b: ParamId,
    cache: PermutationCache,
}

impl HDMoE {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let encoder_a = EncoderParams::init(&mut store, "encoder_a", c.d_in, c.d1, c.d_att, rng);
        let encoder_b = EncoderParams::init(&mut store, "encoder_b", c.d_in, c.d1, c.d_att, rng);
        let level1_a = MoELayer::init(&mut store, "level1_moe_a", c.level1, rng);
        let level1_b = MoELayer::init(&mut store, "level1_moe_b", c.level1, rng);
        let bridge = store.add_uniform("bridge.W", 4 * c.d1, c.d2, 4 * c.d1, rng);
        let level2 = MoELayer::init(&mut store, "level2_moe", c.level2, rng);
        let head_w = store.add_uniform("head.W", 2 * c.d2, c.num_bins, 2 * c.d2, rng);
        let head_b = store.add_uniform("head.b", 1, c.num_bins, 2 * c.d2, rng);
        let cache = PermutationCache::for_shapes(&[(4, c.d1), (2, c.d2)], &c.segments);
        Ok(HDMoE {
            config,
            store,
            encoder_a,
            encoder_b,
            level1_a,
            level1_b,
            bridge,
            level2,
            head_w,
            head_b,
            cache,
        })
    }

    /// Replace every parameter by name. The map must hold exactly the model's
    /// parameter names with matching shapes.
    pub fn load_params(&mut self, values: &BTreeMap<String, Matrix>) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(Error::config(format!(
                "parameter set has {} entries, model expects {}",
                values.len(),
                self.store.len()
            )));
        }
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let name = self.store.name(id);
            let Some(v) = values.get(name) else {
                return Err(Error::config(format!("missing parameter {name}")));
            };
            let expected = self.store.get(id).shape();
            if v.shape() != expected {
                return Err(Error::config(format!(
                    "parameter {name}: shape {:?} does not match model shape {expected:?}",
                    v.shape()
                )));
            }
            if !v.is_finite() {
                return Err(Error::config(format!("parameter {name} has non-finite entries")));
            }
            *self.store.get_mut(id) = v.clone();
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> ParameterCount {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (name, m) in self.store.iter() {
            let head = name.split('.').next().unwrap_or(name);
            match groups.last_mut() {
                Some((g, c)) if g == head => *c += m.len(),
                _ => groups.push((String::from(head), m.len())),
            }
        }
        ParameterCount {
            total: self.store.scalar_count(),
            groups,
        }
    }

    fn check_choice(&self, choice: SegmentChoice) -> Result<()> {
        if let SegmentChoice::Pinned(s) = choice {
            if s == 0 || self.config.d1 % s != 0 || self.config.d2 % s != 0 {
                return Err(Error::config(format!(
                    "pinned segment {s} must divide d1 = {} and d2 = {}",
                    self.config.d1, self.config.d2
                )));
            }
        }
        Ok(())
    }

    /// One differentiable pass on `g`; `bound` must come from `self.store.bind(g)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        bag_a: &Matrix,
        bag_b: &Matrix,
        rng: &mut Rng,
        choice: SegmentChoice,
    ) -> Result<ForwardPass> {
        self.check_choice(choice)?;
        let segs = &self.config.segments;
        let va = encode_bag(g, bound, &self.encoder_a, bag_a).stage("encoder_a")?;
        let vb = encode_bag(g, bound, &self.encoder_b, bag_b).stage("encoder_b")?;
        let level1_a = moe_forward(g, bound, &self.level1_a, va.token).stage("level1_moe_a")?;
        let level1_b = moe_forward(g, bound, &self.level1_b, vb.token).stage("level1_moe_b")?;

        let first = [level1_a.routed, level1_a.shared, level1_b.routed, level1_b.shared];
        let (f1, draw1) = rfr_forward(g, &first, segs, choice, rng, &self.cache).stage("rfr1")?;
        let f1_proj = g.matmul(f1, bound.node(self.bridge)).stage("bridge")?;

        let level2 = moe_forward(g, bound, &self.level2, f1_proj).stage("level2_moe")?;
        let second = [level2.routed, level2.shared];
        let (f2, draw2) = rfr_forward(g, &second, segs, choice, rng, &self.cache).stage("rfr2")?;

        let logits = g.matmul(f2, bound.node(self.head_w)).stage("head")?;
        let logits = g.add(logits, bound.node(self.head_b)).stage("head")?;
        let hazards = g.sigmoid(logits).stage("head")?;
        let prediction = HazardPrediction::from_hazards(g.value(hazards).as_slice().to_vec());

        let features = DecoupledFeatures {
            intra_a: level1_a.routed,
            share_a: level1_a.shared,
            intra_b: level1_b.routed,
            share_b: level1_b.shared,
            inter: level2.routed,
            share_3: level2.shared,
            f1,
            f1_proj,
            f2,
        };
        Ok(ForwardPass {
            hazards,
            prediction,
            features,
            level1_a,
            level1_b,
            level2,
            draws: [draw1, draw2],
        })
    }

    /// Inference pass on a private graph.
    pub fn predict(
        &self,
        bag_a: &Matrix,
        bag_b: &Matrix,
        rng: &mut Rng,
        choice: SegmentChoice,
    ) -> Result<(HazardPrediction, [RouterTrace; 3], [RfrDraw; 2])> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let pass = self.forward(&mut g, &bound, bag_a, bag_b, rng, choice)?;
        let prediction = pass.prediction.clone();
        let draws = pass.draws.clone();
        Ok((prediction, pass.into_traces(), draws))
    }
}
