//! The four subcommands. Each validates the whole config before writing.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use hdmoe_core::eval::analysis::{
    collect_traces, expert_histogram, per_fold_metrics, redundancy_score, stability_report, summarize, FoldMetrics,
    MoeBlock, RedundancyReport, StabilityReport,
};
use hdmoe_core::synthetic::generate_synthetic;
use hdmoe_core::trainer::{eval_rng, predict_fold, split_fold, train_fold, PredictionRow, TrainedFold};
use hdmoe_core::{ModelConfig, SampleRecord, TrainConfig};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::{create_dir, load_dataset, write_dataset, write_file};
use crate::report::{self, RunLog};

pub const CONFIG_FILE: &str = "config.json";

fn checkpoint_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold_{fold}.json"))
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_json())
}

/// Generate a synthetic cohort under `out_dir`.
pub fn synth(cfg: &RunConfig) -> Result<()> {
    let sc = cfg.synthetic_config()?;
    if cfg.k_folds < 2 {
        return Err(CliError::config("k_folds must be >= 2"));
    }
    let cohort = generate_synthetic(&sc)?;
    create_dir(&cfg.out_dir)?;
    write_dataset(&cfg.out_dir, &cohort, cfg.k_folds, cfg.seed)?;
    write_resolved(cfg, &cfg.out_dir)?;
    log::info!("wrote {} samples to {}", cohort.records.len(), cfg.out_dir.display());
    Ok(())
}

struct Prepared {
    model: ModelConfig,
    train: TrainConfig,
    records: Vec<SampleRecord>,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let manifest = cfg
        .manifest
        .as_deref()
        .ok_or_else(|| CliError::config("no manifest given (--manifest or config key `manifest`)"))?;
    let records = load_dataset(manifest, cfg.k_folds, cfg.seed, cfg.d_in)?;
    for f in 0..cfg.k_folds {
        let (_, test) = split_fold(&records, f);
        if test.is_empty() {
            return Err(CliError::config(format!("fold {f} has no held-out samples")));
        }
    }
    Ok(Prepared {
        model: cfg.model_config()?,
        train: cfg.train_config()?,
        records,
    })
}

/// Train folds on up to `threads` workers; results come back in fold order.
pub fn train_folds(
    model: &ModelConfig,
    records: &[SampleRecord],
    train: &TrainConfig,
    threads: usize,
) -> Result<Vec<(TrainedFold, RunLog)>> {
    let k = train.k_folds;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<(TrainedFold, RunLog)>>>> = Mutex::new((0..k).map(|_| None).collect());
    let work = || loop {
        let fold = next.fetch_add(1, Ordering::Relaxed);
        if fold >= k {
            break;
        }
        let mut log = RunLog::default();
        let out = train_fold(model, records, fold, train, &mut log)
            .map(|t| (t, log))
            .map_err(CliError::from);
        slots.lock().expect("no worker panicked")[fold] = Some(out);
    };
    let threads = threads.clamp(1, k.max(1));
    if threads == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(work);
            }
        });
    }
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect()
}

fn predict_all(
    folds: &[TrainedFold],
    records: &[SampleRecord],
    cfg: &RunConfig,
    train: &TrainConfig,
) -> Result<Vec<PredictionRow>> {
    let mut rows = Vec::new();
    for f in folds {
        rows.extend(predict_fold(f, records, train, cfg.eval_segment(), 0)?);
    }
    Ok(rows)
}

/// Everything `train` and `eval` report.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub folds: Vec<FoldMetrics>,
    pub mean: f64,
    pub std: f64,
    pub pooled: report::Pooled,
    pub stability: Option<StabilityReport>,
}

fn write_evaluation(
    dir: &Path,
    rows: &[PredictionRow],
    num_bins: usize,
    stability: Option<StabilityReport>,
) -> Result<Evaluation> {
    let folds = per_fold_metrics(rows)?;
    let (mean, std) = summarize(&folds);
    let pooled = report::pooled(rows)?;
    write_file(&dir.join("predictions.csv"), report::predictions_csv(rows, num_bins))?;
    write_file(&dir.join("metrics.json"), report::metrics_json(&folds, &pooled, stability.as_ref()))?;
    write_file(&dir.join("km.csv"), report::km_csv(&report::km_groups(rows)?))?;
    Ok(Evaluation {
        folds,
        mean,
        std,
        pooled,
        stability,
    })
}

pub fn print_evaluation(e: &Evaluation) {
    for f in &e.folds {
        println!("fold {}: C-index {:.4}", f.fold, f.cindex);
    }
    println!("C-index {:.4} ± {:.4}", e.mean, e.std);
    if let Some(p) = e.pooled.logrank_p {
        println!("median-risk log-rank p = {p:.3e}");
    }
    if let Some(s) = &e.stability {
        println!("stability over {} repeats: {:.4} ± {:.4}", s.cindex.len(), s.mean, s.std);
    }
}

/// Train every fold, then write checkpoints, logs, predictions and metrics.
pub fn train(cfg: &RunConfig) -> Result<Evaluation> {
    let p = prepare(cfg)?;
    let trained = train_folds(&p.model, &p.records, &p.train, cfg.parallel_folds)?;

    let out = &cfg.out_dir;
    write_resolved(cfg, out)?;
    let (ck_dir, log_dir) = (out.join("checkpoints"), out.join("logs"));
    create_dir(&ck_dir)?;
    create_dir(&log_dir)?;
    let mut folds = Vec::with_capacity(trained.len());
    for (t, log) in trained {
        Checkpoint::from_fold(&t).write(&checkpoint_path(&ck_dir, t.fold))?;
        write_file(&log_dir.join(format!("fold_{}.log", t.fold)), log.text)?;
        folds.push(t);
    }
    let rows = predict_all(&folds, &p.records, cfg, &p.train)?;
    write_evaluation(out, &rows, p.model.num_bins, None)
}

fn load_folds(dir: &Path, model: &ModelConfig, k_folds: usize) -> Result<Vec<TrainedFold>> {
    (0..k_folds)
        .map(|f| {
            let t = Checkpoint::read(&checkpoint_path(dir, f))?.into_fold(model)?;
            if t.fold != f {
                return Err(CliError::config(format!("checkpoint for fold {f} records fold {}", t.fold)));
            }
            Ok(t)
        })
        .collect()
}

/// Re-evaluate saved checkpoints; writes under `out_dir/eval`.
pub fn eval(cfg: &RunConfig, checkpoints: &Path) -> Result<Evaluation> {
    let p = prepare(cfg)?;
    let folds = load_folds(checkpoints, &p.model, cfg.k_folds)?;
    let rows = predict_all(&folds, &p.records, cfg, &p.train)?;
    let stability = match cfg.repeats {
        0 => None,
        n => Some(stability_report(&folds, &p.records, &p.train, n)?),
    };
    let dir = cfg.out_dir.join("eval");
    write_resolved(cfg, &dir)?;
    write_evaluation(&dir, &rows, p.model.num_bins, stability)
}

/// Expert histograms and redundancy heatmaps per fold; writes `out_dir/analysis`.
pub fn analyze(cfg: &RunConfig, checkpoints: &Path) -> Result<Vec<(usize, MoeBlock, RedundancyReport)>> {
    let p = prepare(cfg)?;
    let folds = load_folds(checkpoints, &p.model, cfg.k_folds)?;
    let dir = cfg.out_dir.join("analysis");
    write_resolved(cfg, &dir)?;
    let choice = cfg.eval_segment();
    let mut hists = Vec::new();
    let mut reports = Vec::new();
    for f in &folds {
        let (_, test) = split_fold(&p.records, f.fold);
        let traces = collect_traces(&f.model, &test, p.train.input, choice, &mut eval_rng(cfg.seed, f.fold, 0))?;
        hists.push((f.fold, expert_histogram(traces.iter())?));
        for block in MoeBlock::ALL {
            let mut rng = eval_rng(cfg.seed, f.fold, 0);
            let r = redundancy_score(&f.model, &test, block, p.train.input, choice, &mut rng)?;
            let stem = format!("fold_{}_{}", f.fold, block.name());
            write_file(&dir.join(format!("{stem}_pre.csv")), report::matrix_csv(&r.pre))?;
            write_file(&dir.join(format!("{stem}_post.csv")), report::matrix_csv(&r.post))?;
            reports.push((f.fold, block, r));
        }
    }
    write_file(&dir.join("histogram.csv"), report::histogram_csv(&hists))?;
    write_file(&dir.join("redundancy.csv"), report::redundancy_csv(&reports))?;
    Ok(reports)
}
