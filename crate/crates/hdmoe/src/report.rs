//! Text renderings of predictions, metrics, curves and diagnostics.

use std::fmt::Write as _;

use hdmoe_core::eval::analysis::{
    off_diagonal_sum, risk_stratified_log_rank, summarize, time_stratified_t_test, FoldMetrics, MoeBlock,
    RedundancyReport, StabilityReport,
};
use hdmoe_core::eval::metrics::{c_index, km_estimate, median_split, split_by, KmCurve};
use hdmoe_core::losses::LossBreakdown;
use hdmoe_core::trainer::{EpochLoss, PredictionRow, TrainObserver};
use hdmoe_core::Matrix;
use serde_json::{json, Value};

use crate::error::Result;

/// `sample_id,fold,h1..hK,risk,bin,censored,time_months`.
pub fn predictions_csv(rows: &[PredictionRow], num_bins: usize) -> String {
    let mut out = String::from("sample_id,fold");
    for k in 1..=num_bins {
        let _ = write!(out, ",h{k}");
    }
    out.push_str(",risk,bin,censored,time_months\n");
    for r in rows {
        let _ = write!(out, "{},{}", r.sample_id, r.fold);
        for h in &r.hazards {
            let _ = write!(out, ",{h}");
        }
        let _ = writeln!(out, ",{},{},{},{}", r.risk, r.bin, u8::from(r.censored), r.time_months);
    }
    out
}

fn opt(p: Option<f64>) -> Value {
    p.map_or(Value::Null, Value::from)
}

/// Tests over the pooled held-out table; `None` where a test is degenerate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pooled {
    pub cindex: f64,
    pub logrank_p: Option<f64>,
    pub ttest_p: Option<f64>,
}

pub fn pooled(rows: &[PredictionRow]) -> Result<Pooled> {
    let refs: Vec<&PredictionRow> = rows.iter().collect();
    let risk: Vec<f64> = rows.iter().map(|r| r.risk).collect();
    let time: Vec<f64> = rows.iter().map(|r| r.time_months).collect();
    let ev: Vec<bool> = rows.iter().map(|r| r.event()).collect();
    Ok(Pooled {
        cindex: c_index(&risk, &time, &ev)?,
        logrank_p: risk_stratified_log_rank(&refs).ok().map(|t| t.p_value),
        ttest_p: time_stratified_t_test(&refs).ok().map(|t| t.p_value),
    })
}

/// `{fold: {id: {cindex, logrank_p, ttest_p}}, overall: {mean, std}, pooled: {..}}`
pub fn metrics_json(folds: &[FoldMetrics], pooled: &Pooled, stability: Option<&StabilityReport>) -> String {
    let mut per_fold = serde_json::Map::new();
    for f in folds {
        per_fold.insert(
            f.fold.to_string(),
            json!({"cindex": f.cindex, "logrank_p": opt(f.logrank_p), "ttest_p": opt(f.ttest_p)}),
        );
    }
    let (mean, std) = summarize(folds);
    let mut doc = json!({
        "fold": per_fold,
        "overall": {"mean": mean, "std": std},
        "pooled": {
            "cindex": pooled.cindex,
            "logrank_p": opt(pooled.logrank_p),
            "ttest_p": opt(pooled.ttest_p),
        },
    });
    if let Some(s) = stability {
        doc["stability"] = json!({"cindex": s.cindex, "mean": s.mean, "std": s.std});
    }
    serde_json::to_string_pretty(&doc).expect("metrics serialize")
}

/// Kaplan–Meier curves of the above-median (`high`) and other (`low`) risk groups.
pub fn km_groups(rows: &[PredictionRow]) -> Result<Vec<(&'static str, KmCurve)>> {
    let risk: Vec<f64> = rows.iter().map(|r| r.risk).collect();
    let time: Vec<f64> = rows.iter().map(|r| r.time_months).collect();
    let ev: Vec<bool> = rows.iter().map(|r| r.event()).collect();
    let high = median_split(&risk);
    let (t_hi, t_lo) = split_by(&time, &high);
    let (e_hi, e_lo) = split_by(&ev, &high);
    let mut out = Vec::new();
    for (name, t, e) in [("high", t_hi, e_hi), ("low", t_lo, e_lo)] {
        if !t.is_empty() {
            out.push((name, km_estimate(&t, &e)?));
        }
    }
    Ok(out)
}

/// `group,time,survival,at_risk,events`.
pub fn km_csv(groups: &[(&str, KmCurve)]) -> String {
    let mut out = String::from("group,time,survival,at_risk,events\n");
    for (name, c) in groups {
        for i in 0..c.times.len() {
            let _ = writeln!(out, "{name},{},{},{},{}", c.times[i], c.survival[i], c.at_risk[i], c.events[i]);
        }
    }
    out
}

/// Plain numeric matrix, no header.
pub fn matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// `fold,router,expert,count`; routers are `level1_a`, `level1_b`, `level2`.
pub fn histogram_csv(hists: &[(usize, [Vec<usize>; 3])]) -> String {
    let mut out = String::from("fold,router,expert,count\n");
    for (fold, hist) in hists {
        for (block, counts) in MoeBlock::ALL.iter().zip(hist) {
            for (e, c) in counts.iter().enumerate() {
                let _ = writeln!(out, "{fold},{},{e},{c}", block.name());
            }
        }
    }
    out
}

/// `fold,block,pre_offdiag,post_offdiag,delta`.
pub fn redundancy_csv(reports: &[(usize, MoeBlock, RedundancyReport)]) -> String {
    let mut out = String::from("fold,block,pre_offdiag,post_offdiag,delta\n");
    for (fold, block, r) in reports {
        let (pre, post) = (off_diagonal_sum(&r.pre), off_diagonal_sum(&r.post));
        let _ = writeln!(out, "{fold},{},{pre},{post},{}", block.name(), r.delta);
    }
    out
}

/// Collects the training log of one fold as text lines:
/// `step,<step>,<surv>,<dm>,<bl>,<total>`, `rfr,<level>,<step>,<s>` and
/// `epoch,<epoch>,<surv>,<dm>,<bl>,<total>`.
#[derive(Debug, Default, Clone)]
pub struct RunLog {
    pub text: String,
}

impl TrainObserver for RunLog {
    fn on_step(&mut self, _fold: usize, step: usize, l: &LossBreakdown) {
        let _ = writeln!(self.text, "step,{step},{},{},{},{}", l.surv, l.dm, l.bl, l.total);
    }

    fn on_rfr(&mut self, _fold: usize, step: usize, level: usize, segment: usize) {
        let _ = writeln!(self.text, "rfr,{level},{step},{segment}");
    }

    fn on_epoch(&mut self, fold: usize, l: &EpochLoss) {
        log::info!(
            "fold {fold} epoch {}: surv {:.4} dm {:.4} bl {:.4} total {:.4}",
            l.epoch,
            l.surv,
            l.dm,
            l.bl,
            l.total
        );
        let _ = writeln!(self.text, "epoch,{},{},{},{},{}", l.epoch, l.surv, l.dm, l.bl, l.total);
    }
}
