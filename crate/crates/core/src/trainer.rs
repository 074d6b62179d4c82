//! k-fold training with batch size 1 and per-fold prediction.
//!
//! Every random stream is derived from the master seed and the fold id, so
//! folds are independent and can be run in any order or concurrently.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::data::{compute_bin_edges, BinEdges, SampleRecord};
use crate::error::{Error, Result, StageContext};
use crate::losses::{balance_loss, decouple_loss, survival_nll, total_loss_node, DistanceMetric, LossBreakdown, LossWeights};
use crate::matrix::Matrix;
use crate::model::{HDMoE, ModelConfig};
use crate::moe::RouterTrace;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rfr::SegmentChoice;
use crate::rng::{self, Rng};
use crate::tape::Graph;

/// Which bags reach the two encoder slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputMode {
    #[default]
    Both,
    /// Modality A is fed into both slots (single-modality ablation).
    ModalityAOnly,
}

impl InputMode {
    pub fn bags<'a>(self, r: &'a SampleRecord) -> (&'a Matrix, &'a Matrix) {
        match self {
            InputMode::Both => (&r.modality_a, &r.modality_b),
            InputMode::ModalityAOnly => (&r.modality_a, &r.modality_a),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub weights: LossWeights,
    pub metric: DistanceMetric,
    pub seed: u64,
    pub k_folds: usize,
    pub input: InputMode,
    /// Segment policy during training passes.
    pub segment: SegmentChoice,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamConfig::default(),
            epochs: 30,
            weights: LossWeights::default(),
            metric: DistanceMetric::Cos,
            seed: 7,
            k_folds: 5,
            input: InputMode::Both,
            segment: SegmentChoice::Random,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config("lr must be finite and > 0"));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::config("optimizer needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.k_folds < 2 {
            return Err(Error::config("k_folds must be >= 2"));
        }
        if !(self.weights.alpha.is_finite() && self.weights.beta.is_finite()) {
            return Err(Error::config("loss weights must be finite"));
        }
        Ok(())
    }
}

/// Seed of fold `fold`'s private streams.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    rng::derive_seed(seed, 0x464f_4c44_0000 + fold as u64)
}

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_TRAIN_RFR: u64 = 3;
const STREAM_EVAL: u64 = 4;

/// Stream for evaluation repeat `repeat` of a fold.
pub fn eval_rng(seed: u64, fold: usize, repeat: usize) -> Rng {
    rng::derive(rng::derive_seed(fold_seed(seed, fold), STREAM_EVAL), repeat as u64)
}

/// Mean loss components over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub surv: f64,
    pub dm: f64,
    pub bl: f64,
    pub total: f64,
}

/// Hooks for logging; every method defaults to a no-op.
pub trait TrainObserver {
    fn on_step(&mut self, _fold: usize, _step: usize, _loss: &LossBreakdown) {}
    /// `level` is 1 or 2.
    fn on_rfr(&mut self, _fold: usize, _step: usize, _level: usize, _segment: usize) {}
    fn on_epoch(&mut self, _fold: usize, _loss: &EpochLoss) {}
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainedFold {
    pub fold: usize,
    pub model: HDMoE,
    pub bin_edges: BinEdges,
    pub curve: Vec<EpochLoss>,
}

pub fn split_fold(records: &[SampleRecord], fold: usize) -> (Vec<&SampleRecord>, Vec<&SampleRecord>) {
    records.iter().partition(|r| r.fold != fold)
}

/// One optimization step on one sample; returns the loss breakdown and traces.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut HDMoE,
    state: &mut AdamState,
    record: &SampleRecord,
    bin: usize,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<(LossBreakdown, [usize; 2])> {
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g);
    let (bag_a, bag_b) = config.input.bags(record);
    let pass = model.forward(&mut g, &bound, bag_a, bag_b, rng, config.segment)?;
    let surv = survival_nll(&mut g, pass.hazards, bin, record.censored).stage("survival loss")?;
    let dm = decouple_loss(&mut g, config.metric, &pass.features).stage("decoupling loss")?;
    let traces: [&RouterTrace; 3] = pass.traces();
    let bl = balance_loss(&mut g, &traces).stage("balance loss")?;
    let (total, breakdown) = total_loss_node(&mut g, surv, dm, bl, config.weights)?;
    let mut grads = g.backward(total)?;
    let grads = bound.gradients(&mut grads);
    adam_step(&mut model.store, &grads, state, &config.optimizer);
    Ok((breakdown, [pass.draws[0].segment, pass.draws[1].segment]))
}

/// Train a fresh model on every record whose fold differs from `fold`.
pub fn train_fold(
    model_config: &ModelConfig,
    records: &[SampleRecord],
    fold: usize,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainedFold> {
    let (train, _) = split_fold(records, fold);
    if train.is_empty() {
        return Err(Error::TooFewRecords { needed: 1, got: 0 });
    }
    let bin_edges = compute_bin_edges(train.iter().copied(), model_config.num_bins)?;
    let bins: Vec<usize> = train.iter().map(|r| bin_edges.assign(r.time_months)).collect();

    let fs = fold_seed(config.seed, fold);
    let mut model = HDMoE::new(model_config.clone(), &mut rng::derive(fs, STREAM_INIT))?;
    let mut state = AdamState::new(&model.store);
    let mut rfr_rng = rng::derive(fs, STREAM_TRAIN_RFR);
    let shuffle_seed = rng::derive_seed(fs, STREAM_SHUFFLE);

    let mut curve = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::derive(shuffle_seed, epoch as u64));
        let mut acc = EpochLoss {
            epoch,
            surv: 0.0,
            dm: 0.0,
            bl: 0.0,
            total: 0.0,
        };
        for &i in &order {
            let (loss, segments) = train_step(&mut model, &mut state, train[i], bins[i], config, &mut rfr_rng)
                .map_err(|e| if e.is_numerical() { Error::NonFinite { step } } else { e })?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite { step });
            }
            observer.on_step(fold, step, &loss);
            observer.on_rfr(fold, step, 1, segments[0]);
            observer.on_rfr(fold, step, 2, segments[1]);
            acc.surv += loss.surv;
            acc.dm += loss.dm;
            acc.bl += loss.bl;
            acc.total += loss.total;
            step += 1;
        }
        let n = train.len() as f64;
        acc.surv /= n;
        acc.dm /= n;
        acc.bl /= n;
        acc.total /= n;
        observer.on_epoch(fold, &acc);
        curve.push(acc);
    }
    Ok(TrainedFold {
        fold,
        model,
        bin_edges,
        curve,
    })
}

/// One row of the prediction table.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub sample_id: String,
    pub fold: usize,
    pub hazards: Vec<f64>,
    pub risk: f64,
    pub bin: usize,
    pub censored: bool,
    pub time_months: f64,
}

impl PredictionRow {
    pub fn event(&self) -> bool {
        !self.censored
    }
}

/// Predict every record in `records` with a frozen model.
pub fn predict_records(
    model: &HDMoE,
    bin_edges: &BinEdges,
    records: &[&SampleRecord],
    input: InputMode,
    choice: SegmentChoice,
    rng: &mut Rng,
) -> Result<Vec<PredictionRow>> {
    records
        .iter()
        .map(|r| {
            let (a, b) = input.bags(r);
            let (p, ..) = model.predict(a, b, rng, choice).stage("prediction")?;
            Ok(PredictionRow {
                sample_id: r.sample_id.clone(),
                fold: r.fold,
                hazards: p.hazards,
                risk: p.risk,
                bin: bin_edges.assign(r.time_months),
                censored: r.censored,
                time_months: r.time_months,
            })
        })
        .collect()
}

/// Held-out predictions of a trained fold; `repeat` selects an independent
/// stream of reorganization draws.
pub fn predict_fold(
    trained: &TrainedFold,
    records: &[SampleRecord],
    config: &TrainConfig,
    choice: SegmentChoice,
    repeat: usize,
) -> Result<Vec<PredictionRow>> {
    let (_, test) = split_fold(records, trained.fold);
    let mut r = eval_rng(config.seed, trained.fold, repeat);
    predict_records(&trained.model, &trained.bin_edges, &test, config.input, choice, &mut r)
}

/// Output of [`cross_validate`].
#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub folds: Vec<TrainedFold>,
    /// Held-out predictions of all folds, fold by fold.
    pub predictions: Vec<PredictionRow>,
}

/// Sequentially train and predict every fold `0..k_folds`.
pub fn cross_validate(
    model_config: &ModelConfig,
    records: &[SampleRecord],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<CrossValidation> {
    config.validate()?;
    let mut folds = Vec::with_capacity(config.k_folds);
    let mut predictions = Vec::new();
    for fold in 0..config.k_folds {
        let trained = train_fold(model_config, records, fold, config, observer)?;
        predictions.extend(predict_fold(&trained, records, config, SegmentChoice::Random, 0)?);
        folds.push(trained);
    }
    Ok(CrossValidation { folds, predictions })
}
