//! Model diagnostics: expert allocation, shared-expert de-redundancy and
//! stability of held-out concordance under repeated reorganization draws.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::eval::metrics::{c_index, log_rank_test, mean_std, median, median_split, split_by, welch_t_test};
use crate::matrix::Matrix;
use crate::model::HDMoE;
use crate::moe::RouterTrace;
use crate::rfr::SegmentChoice;
use crate::rng::Rng;
use crate::tape::Graph;
use crate::trainer::{predict_fold, InputMode, PredictionRow, TrainConfig, TrainedFold};

/// Held-out metrics of one fold. Test p-values are `None` when the test is
/// degenerate on this fold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldMetrics {
    pub fold: usize,
    pub cindex: f64,
    /// Log-rank between the above-median and at-or-below-median risk groups.
    pub logrank_p: Option<f64>,
    /// Welch test on predicted risk between samples observed past the median
    /// time and the rest.
    pub ttest_p: Option<f64>,
}

fn columns(rows: &[&PredictionRow]) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    (
        rows.iter().map(|r| r.risk).collect(),
        rows.iter().map(|r| r.time_months).collect(),
        rows.iter().map(|r| r.event()).collect(),
    )
}

/// Median-risk split log-rank test on a prediction table.
pub fn risk_stratified_log_rank(rows: &[&PredictionRow]) -> Result<crate::eval::metrics::TestResult> {
    let (risk, time, ev) = columns(rows);
    let high = median_split(&risk);
    let (t_hi, t_lo) = split_by(&time, &high);
    let (e_hi, e_lo) = split_by(&ev, &high);
    log_rank_test(&t_hi, &e_hi, &t_lo, &e_lo)
}

/// Welch test comparing predicted risk of long and short observed times.
pub fn time_stratified_t_test(rows: &[&PredictionRow]) -> Result<crate::eval::metrics::TestResult> {
    let (risk, time, _) = columns(rows);
    let m = median(&time).ok_or(Error::DegenerateTest("empty prediction table"))?;
    let long: Vec<bool> = time.iter().map(|&t| t > m).collect();
    let (r_long, r_short) = split_by(&risk, &long);
    welch_t_test(&r_short, &r_long)
}

pub fn fold_metrics(fold: usize, rows: &[&PredictionRow]) -> Result<FoldMetrics> {
    let (risk, time, ev) = columns(rows);
    Ok(FoldMetrics {
        fold,
        cindex: c_index(&risk, &time, &ev)?,
        logrank_p: risk_stratified_log_rank(rows).ok().map(|r| r.p_value),
        ttest_p: time_stratified_t_test(rows).ok().map(|r| r.p_value),
    })
}

/// Metrics of every fold present in `rows`, ascending by fold id.
pub fn per_fold_metrics(rows: &[PredictionRow]) -> Result<Vec<FoldMetrics>> {
    let mut folds: Vec<usize> = rows.iter().map(|r| r.fold).collect();
    folds.sort_unstable();
    folds.dedup();
    folds
        .into_iter()
        .map(|f| {
            let sub: Vec<&PredictionRow> = rows.iter().filter(|r| r.fold == f).collect();
            fold_metrics(f, &sub)
        })
        .collect()
}

/// Mean and population std of per-fold C-index.
pub fn summarize(metrics: &[FoldMetrics]) -> (f64, f64) {
    let c: Vec<f64> = metrics.iter().map(|m| m.cindex).collect();
    mean_std(&c)
}

/// Total Top-K selections per expert, for each of the three routers.
pub fn expert_histogram<'a, I>(traces: I) -> Result<[Vec<usize>; 3]>
where
    I: IntoIterator<Item = &'a [RouterTrace; 3]>,
{
    let mut out: Option<[Vec<usize>; 3]> = None;
    for set in traces {
        let acc = out.get_or_insert_with(|| [0, 1, 2].map(|k| vec![0; set[k].num_experts]));
        for (a, t) in acc.iter_mut().zip(set) {
            if t.tokens.is_empty() {
                return Err(Error::EmptyTrace);
            }
            for (c, n) in a.iter_mut().zip(t.selection_counts()) {
                *c += n;
            }
        }
    }
    out.ok_or(Error::EmptyTrace)
}

/// Router traces for each record.
pub fn collect_traces(
    model: &HDMoE,
    records: &[&SampleRecord],
    input: InputMode,
    choice: SegmentChoice,
    rng: &mut Rng,
) -> Result<Vec<[RouterTrace; 3]>> {
    records
        .iter()
        .map(|r| {
            let (a, b) = input.bags(r);
            Ok(model.predict(a, b, rng, choice)?.1)
        })
        .collect()
}

/// Absolute Pearson correlation between every pair of equally long vectors.
pub fn token_correlation(tokens: &[&[f64]]) -> Result<Matrix> {
    let n = tokens.len();
    let centered: Vec<(Vec<f64>, f64)> = tokens
        .iter()
        .map(|t| {
            let m = t.iter().sum::<f64>() / t.len() as f64;
            let c: Vec<f64> = t.iter().map(|x| x - m).collect();
            let norm = libm::sqrt(c.iter().map(|x| x * x).sum::<f64>());
            (c, norm)
        })
        .collect();
    if centered.iter().any(|(_, norm)| !(*norm > 0.0)) {
        return Err(Error::DegenerateTest("constant token has no correlation"));
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let (ci, ni) = &centered[i];
            let (cj, nj) = &centered[j];
            let dot: f64 = ci.iter().zip(cj).map(|(a, b)| a * b).sum();
            out.set(i, j, libm::fabs(dot / (ni * nj)).min(1.0));
        }
    }
    Ok(out)
}

pub fn off_diagonal_sum(m: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if i != j {
                s += m.get(i, j);
            }
        }
    }
    s
}

/// Which MoE block to inspect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoeBlock {
    Level1A,
    Level1B,
    Level2,
}

impl MoeBlock {
    pub const ALL: [MoeBlock; 3] = [Self::Level1A, Self::Level1B, Self::Level2];

    pub fn name(self) -> &'static str {
        match self {
            Self::Level1A => "level1_a",
            Self::Level1B => "level1_b",
            Self::Level2 => "level2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RedundancyReport {
    /// Mean absolute token correlation before the shared expert, `T×T`.
    pub pre: Matrix,
    /// The same after the shared expert.
    pub post: Matrix,
    /// `offdiag(pre) − offdiag(post)`; positive when the shared expert
    /// decorrelates tokens.
    pub delta: f64,
}

/// Average token-correlation heatmaps before and after the shared expert.
pub fn redundancy_score(
    model: &HDMoE,
    records: &[&SampleRecord],
    block: MoeBlock,
    input: InputMode,
    choice: SegmentChoice,
    rng: &mut Rng,
) -> Result<RedundancyReport> {
    if records.len() < 2 {
        return Err(Error::TooFewRecords {
            needed: 2,
            got: records.len(),
        });
    }
    let mut pre: Option<Matrix> = None;
    let mut post: Option<Matrix> = None;
    for r in records {
        let (a, b) = input.bags(r);
        let mut g = Graph::new();
        let bound = model.store.bind(&mut g);
        let pass = model.forward(&mut g, &bound, a, b, rng, choice)?;
        let out = match block {
            MoeBlock::Level1A => &pass.level1_a,
            MoeBlock::Level1B => &pass.level1_b,
            MoeBlock::Level2 => &pass.level2,
        };
        let raw: Vec<&[f64]> = out.tokens.iter().map(|&t| g.value(t).as_slice()).collect();
        let shared: Vec<&[f64]> = out.shared_tokens.iter().map(|&t| g.value(t).as_slice()).collect();
        let cp = token_correlation(&raw)?;
        let cs = token_correlation(&shared)?;
        match (&mut pre, &mut post) {
            (Some(p), Some(s)) => {
                p.add_assign(&cp);
                s.add_assign(&cs);
            }
            _ => {
                pre = Some(cp);
                post = Some(cs);
            }
        }
    }
    let n = records.len() as f64;
    let pre = pre.expect("non-empty").scale(1.0 / n);
    let post = post.expect("non-empty").scale(1.0 / n);
    let delta = off_diagonal_sum(&pre) - off_diagonal_sum(&post);
    Ok(RedundancyReport { pre, post, delta })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    /// Mean held-out fold C-index of each repeat.
    pub cindex: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over repeats.
    pub std: f64,
}

/// Re-evaluate frozen folds `repeats` times, each with an independent stream
/// of reorganization draws.
pub fn stability_report(
    folds: &[TrainedFold],
    records: &[SampleRecord],
    config: &TrainConfig,
    repeats: usize,
) -> Result<StabilityReport> {
    if repeats == 0 {
        return Err(Error::config("repeats must be >= 1"));
    }
    let mut cindex = Vec::with_capacity(repeats);
    for rep in 0..repeats {
        let mut rows = Vec::new();
        for f in folds {
            rows.extend(predict_fold(f, records, config, SegmentChoice::Random, rep)?);
        }
        let (mean, _) = summarize(&per_fold_metrics(&rows)?);
        cindex.push(mean);
    }
    let (mean, std) = mean_std(&cindex);
    Ok(StabilityReport { cindex, mean, std })
}
