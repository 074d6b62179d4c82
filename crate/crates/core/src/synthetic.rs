//! Synthetic two-modality cohorts with planted shared/specific structure.
//!
//! Each sample draws three latent blocks: `z_shared` (seen by both
//! modalities), `z_spec_a` and `z_spec_b` (seen by one modality each). Every
//! instance of a modality bag is a fixed linear mix of the latents that
//! modality sees, plus Gaussian noise. A configurable fraction of feature
//! columns are near-copies of other columns. The risk score is a weighted sum
//! of the latents; event times follow a monthly discrete hazard driven by that
//! score, and censoring is independent and uniform.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Rng};

/// Scale of each latent block's contribution to the risk score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskWeights {
    pub shared: f64,
    pub spec_a: f64,
    pub spec_b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub cohort: usize,
    pub d_in: usize,
    /// Inclusive instance-count range of modality A bags.
    pub bag_a: (usize, usize),
    pub bag_b: (usize, usize),
    pub latent_shared: usize,
    pub latent_specific: usize,
    pub noise: f64,
    /// Fraction of the `d_in` columns that duplicate another column.
    pub redundancy: f64,
    pub risk: RiskWeights,
    /// Monthly event probability scale at score 0.
    pub base_hazard: f64,
    /// Censoring times are uniform on `[0, max]`; `None` disables censoring.
    pub censor_max_months: Option<f64>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            cohort: 200,
            d_in: 32,
            bag_a: (4, 12),
            bag_b: (1, 6),
            latent_shared: 4,
            latent_specific: 4,
            noise: 0.3,
            redundancy: 0.25,
            risk: RiskWeights {
                shared: 0.6,
                spec_a: 0.9,
                spec_b: 0.9,
            },
            base_hazard: 0.05,
            censor_max_months: Some(120.0),
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    /// Risk carried only by the modality-specific latents, so a model needs
    /// both bags to recover it.
    pub fn complementary(seed: u64) -> Self {
        SyntheticConfig {
            risk: RiskWeights {
                shared: 0.0,
                spec_a: 1.0,
                spec_b: 1.0,
            },
            seed,
            ..Self::default()
        }
    }

    /// Half the columns are duplicates and the shared latent dominates.
    pub fn high_redundancy(seed: u64) -> Self {
        SyntheticConfig {
            redundancy: 0.5,
            latent_shared: 6,
            latent_specific: 2,
            risk: RiskWeights {
                shared: 1.0,
                spec_a: 0.5,
                spec_b: 0.5,
            },
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.d_in >= 1
            && self.bag_a.0 >= 1
            && self.bag_b.0 >= 1
            && self.bag_a.0 <= self.bag_a.1
            && self.bag_b.0 <= self.bag_b.1
            && self.latent_shared >= 1
            && self.latent_specific >= 1
            && self.noise >= 0.0
            && (0.0..1.0).contains(&self.redundancy)
            && self.base_hazard > 0.0
            && self.base_hazard < 1.0
            && self.censor_max_months.is_none_or(|m| m > 0.0);
        if !ok {
            return Err(Error::config(format!("invalid synthetic config: {self:?}")));
        }
        if self.duplicate_columns() >= self.d_in {
            return Err(Error::config("redundancy leaves no base columns"));
        }
        Ok(())
    }

    /// Number of planted duplicate columns.
    pub fn duplicate_columns(&self) -> usize {
        libm::round(self.redundancy * self.d_in as f64) as usize
    }

    /// For each column, the base column it copies (or itself).
    pub fn column_sources(&self) -> Vec<usize> {
        let base = self.d_in - self.duplicate_columns();
        (0..self.d_in)
            .map(|j| if j < base { j } else { (j - base) % base })
            .collect()
    }
}

/// Latents and true score behind one synthetic sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub sample_id: alloc::string::String,
    pub z_shared: Vec<f64>,
    pub z_spec_a: Vec<f64>,
    pub z_spec_b: Vec<f64>,
    pub true_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub records: Vec<SampleRecord>,
    pub truth: Vec<GroundTruth>,
}

/// Magnitude of the jitter separating a duplicate column from its source.
pub const DUPLICATE_JITTER: f64 = 1e-7;

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

fn mixing(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| normal(rng) * scale).collect();
    Matrix::new(rows, cols, data).expect("mixing shape")
}

struct ModalityMix {
    shared: Matrix,
    specific: Matrix,
}

fn draw_bag(
    rng: &mut Rng,
    mix: &ModalityMix,
    z_shared: &[f64],
    z_spec: &[f64],
    size: (usize, usize),
    config: &SyntheticConfig,
    sources: &[usize],
) -> Matrix {
    let n = rng.random_range(size.0..=size.1);
    let base = mix.shared.cols();
    let signal: Vec<f64> = (0..base)
        .map(|c| {
            let s: f64 = z_shared.iter().enumerate().map(|(r, z)| z * mix.shared.get(r, c)).sum();
            let p: f64 = z_spec.iter().enumerate().map(|(r, z)| z * mix.specific.get(r, c)).sum();
            s + p
        })
        .collect();
    let mut bag = Matrix::zeros(n, config.d_in);
    for i in 0..n {
        for c in 0..base {
            bag.set(i, c, signal[c] + config.noise * normal(rng));
        }
        for (c, &src) in sources.iter().enumerate().skip(base) {
            let jitter = rng.random_range(-DUPLICATE_JITTER..=DUPLICATE_JITTER);
            bag.set(i, c, bag.get(i, src) + jitter);
        }
    }
    bag
}

/// Months until the event under a constant monthly hazard, with a uniform
/// offset inside the event month.
fn event_time(rng: &mut Rng, base_hazard: f64, score: f64) -> f64 {
    let rate = base_hazard * libm::exp(score);
    let p = (1.0 - libm::exp(-rate)).clamp(1e-12, 1.0);
    let u: f64 = rng.random();
    let months = if p >= 1.0 {
        1.0
    } else {
        libm::ceil(libm::log(1.0 - u) / libm::log(1.0 - p)).max(1.0)
    };
    months - 1.0 + rng.random::<f64>()
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticCohort> {
    config.validate()?;
    let mut rng = rng::seeded(config.seed);
    let base = config.d_in - config.duplicate_columns();
    let scale = 1.0 / libm::sqrt((config.latent_shared + config.latent_specific) as f64);
    let mix_a = ModalityMix {
        shared: mixing(&mut rng, config.latent_shared, base, scale),
        specific: mixing(&mut rng, config.latent_specific, base, scale),
    };
    let mix_b = ModalityMix {
        shared: mixing(&mut rng, config.latent_shared, base, scale),
        specific: mixing(&mut rng, config.latent_specific, base, scale),
    };
    let sources = config.column_sources();

    let block = |z: &[f64], w: f64| w * z.iter().sum::<f64>() / libm::sqrt(z.len() as f64);

    let mut records = Vec::with_capacity(config.cohort);
    let mut truth = Vec::with_capacity(config.cohort);
    for i in 0..config.cohort {
        let z_shared = normal_vec(&mut rng, config.latent_shared);
        let z_spec_a = normal_vec(&mut rng, config.latent_specific);
        let z_spec_b = normal_vec(&mut rng, config.latent_specific);
        let score = block(&z_shared, config.risk.shared)
            + block(&z_spec_a, config.risk.spec_a)
            + block(&z_spec_b, config.risk.spec_b);

        let bag_a = draw_bag(&mut rng, &mix_a, &z_shared, &z_spec_a, config.bag_a, config, &sources);
        let bag_b = draw_bag(&mut rng, &mix_b, &z_shared, &z_spec_b, config.bag_b, config, &sources);

        let t_event = event_time(&mut rng, config.base_hazard, score);
        let (time, censored) = match config.censor_max_months {
            Some(max) => {
                let c = rng.random::<f64>() * max;
                if c < t_event {
                    (c, true)
                } else {
                    (t_event, false)
                }
            }
            None => (t_event, false),
        };

        let sample_id = format!("syn{i:05}");
        records.push(SampleRecord::new(sample_id.clone(), bag_a, bag_b, time, censored, 0)?);
        truth.push(GroundTruth {
            sample_id,
            z_shared,
            z_spec_a,
            z_spec_b,
            true_score: score,
        });
    }
    Ok(SyntheticCohort { records, truth })
}
