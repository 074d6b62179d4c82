//! Samples, discrete-time binning and fold assignment.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

/// One patient: two instance bags plus follow-up.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub modality_a: Matrix,
    pub modality_b: Matrix,
    pub time_months: f64,
    /// `true` when the event was not observed during follow-up (c = 1).
    pub censored: bool,
    pub fold: usize,
}

impl SampleRecord {
    pub fn new(
        sample_id: impl Into<String>,
        modality_a: Matrix,
        modality_b: Matrix,
        time_months: f64,
        censored: bool,
        fold: usize,
    ) -> Result<Self> {
        let record = SampleRecord {
            sample_id: sample_id.into(),
            modality_a,
            modality_b,
            time_months,
            censored,
            fold,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modality_a.rows() == 0 || self.modality_b.rows() == 0 {
            return Err(Error::EmptyBag);
        }
        if self.modality_a.cols() != self.modality_b.cols() {
            return Err(Error::Shape {
                op: "SampleRecord",
                left: self.modality_a.shape(),
                right: self.modality_b.shape(),
            });
        }
        if !(self.time_months >= 0.0 && self.time_months.is_finite()) {
            return Err(Error::config(alloc::format!(
                "sample {}: time_months must be finite and >= 0",
                self.sample_id
            )));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.modality_a.cols()
    }

    /// Event indicator δ = 1 − c.
    pub fn event(&self) -> bool {
        !self.censored
    }
}

/// `K − 1` strictly increasing cut points splitting the timeline into `K` bins.
#[derive(Debug, Clone, PartialEq)]
pub struct BinEdges {
    edges: Vec<f64>,
}

impl BinEdges {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.windows(2).any(|w| w[0] >= w[1]) || edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::config("bin edges must be finite and strictly increasing"));
        }
        Ok(BinEdges { edges })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn num_bins(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn assign(&self, time: f64) -> usize {
        assign_bin(time, self)
    }
}

/// Linear-interpolation quantile of an ascending slice.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Edges at the `j/K` quantiles (`j = 1..K−1`) of the uncensored event times.
pub fn compute_bin_edges<'a, I>(records: I, k: usize) -> Result<BinEdges>
where
    I: IntoIterator<Item = &'a SampleRecord>,
{
    if k == 0 {
        return Err(Error::config("number of bins must be >= 1"));
    }
    let mut times: Vec<f64> = records
        .into_iter()
        .filter(|r| !r.censored)
        .map(|r| r.time_months)
        .collect();
    times.sort_by(f64::total_cmp);
    let mut distinct = times.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::InsufficientEvents {
            needed: k,
            found: distinct.len(),
        });
    }
    let edges: Vec<f64> = (1..k)
        .map(|j| quantile_sorted(&times, j as f64 / k as f64))
        .collect();
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        // heavily tied times can collapse neighbouring quantiles
        let mut unique = edges.clone();
        unique.dedup();
        return Err(Error::InsufficientEvents {
            needed: k,
            found: unique.len() + 1,
        });
    }
    BinEdges::new(edges)
}

/// Bin `j` (1-based) such that `time ∈ [t_{j−1}, t_j)`; the last bin is open above.
pub fn assign_bin(time: f64, edges: &BinEdges) -> usize {
    1 + edges.edges.partition_point(|&e| e <= time)
}

/// Seeded random partition of `count` records into `k_folds` near-equal folds.
/// Returns the fold id of each record.
pub fn make_folds(count: usize, k_folds: usize, seed: u64) -> Result<Vec<usize>> {
    if k_folds < 2 {
        return Err(Error::config("k_folds must be >= 2"));
    }
    if count < k_folds {
        return Err(Error::TooFewRecords {
            needed: k_folds,
            got: count,
        });
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut folds = alloc::vec![0; count];
    for (pos, &idx) in order.iter().enumerate() {
        folds[idx] = pos % k_folds;
    }
    Ok(folds)
}
