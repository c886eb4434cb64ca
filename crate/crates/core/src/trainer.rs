//! Training protocols: two-phase model selection for the CNN, recurrent
//! fine-tuning, cross-validated evaluation, and a loss benchmark.
//!
//! Model selection runs in two phases. Phase A holds out a validation
//! split, trains with early stopping on validation DSC, and records the
//! selected model's DSC on its own training subset as the target
//! accuracy. Phase B then folds the validation cases back in and keeps
//! training on everything until the combined set reaches that target
//! (minus a small tolerance) or an epoch cap, so no held-out data is
//! wasted while the stopping point stays honest.

use std::collections::BTreeSet;

use crate::autodiff::{Grads, Graph};
use crate::checkpoint::Model;
use crate::clstm::{attach_clstm, RnnSegNet, DEFAULT_HIDDEN, DEFAULT_WINDOW};
use crate::data::{self, CaseData};
use crate::error::{Error, Result};
use crate::losses::{deep_supervision_loss, LossKind};
use crate::metrics::{self, AggregateReport, CaseScore};
use crate::network::{SegNet, SegNetConfig};
use crate::rng;
use crate::tensor::Tensor;

use rand::seq::SliceRandom;

/// Phase B stops once the combined-set DSC is within this tolerance of
/// the phase A target.
pub const TARGET_TOLERANCE: f64 = 0.005;

/// Knobs shared by every training protocol.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Epoch cap per phase.
    pub max_epochs: usize,
    /// Epochs without monitor improvement before early stop.
    pub patience: usize,
    /// Fraction of training cases held out for phase A validation.
    pub val_fraction: f64,
    pub seed: u64,
    /// Binarization threshold for DSC monitoring.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            loss: LossKind::Jaccard,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 8,
            max_epochs: 40,
            patience: 8,
            val_fraction: 0.25,
            seed: 0,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction must lie in [0, 1)"));
        }
        if !(0.0 < self.threshold && self.threshold < 1.0) {
            return Err(Error::invalid("threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// One logged epoch.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub phase: &'static str,
    pub epoch: usize,
    pub train_loss: f64,
    pub monitor_dsc: f64,
}

/// Training history plus any protocol warnings.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
    pub warnings: Vec<String>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,epoch,train_loss,monitor_dsc\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.phase, row.epoch, row.train_loss, row.monitor_dsc
            ));
        }
        out
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> rand_chacha::ChaCha8Rng {
    rng::seeded(seed.wrapping_add((epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

/// All `(case, slice)` coordinates of a case list.
fn slice_coords(cases: &[CaseData]) -> Vec<(usize, usize)> {
    cases
        .iter()
        .enumerate()
        .flat_map(|(ci, case)| (0..case.images.len()).map(move |t| (ci, t)))
        .collect()
}

/// Case-level DSC: every slice of the case pooled into one mask.
pub fn case_dsc_cnn(net: &SegNet, case: &CaseData, threshold: f64) -> Result<f64> {
    let probs: Vec<Tensor> = case
        .images
        .iter()
        .map(|s| net.infer(s).map(|o| o.fused_prob))
        .collect::<Result<_>>()?;
    pooled_dsc(&probs, &case.labels, threshold)
}

fn pooled_dsc(probs: &[Tensor], labels: &[Tensor], threshold: f64) -> Result<f64> {
    let prob = data::stack_batch(probs)?;
    let truth = data::stack_batch(labels)?;
    metrics::dsc(&metrics::binarize(&prob, threshold), &truth)
}

fn mean_case_dsc_cnn(net: &SegNet, cases: &[CaseData], threshold: f64) -> Result<f64> {
    let mut total = 0.0;
    for case in cases {
        total += case_dsc_cnn(net, case, threshold)?;
    }
    Ok(total / cases.len() as f64)
}

/// Per-slice probability maps for a whole case under either model kind.
pub fn predict_case(model: &Model, images: &[Tensor]) -> Result<Vec<Tensor>> {
    match model {
        Model::Cnn(net) => images
            .iter()
            .map(|s| net.infer(s).map(|o| o.fused_prob))
            .collect(),
        Model::Rnn(rnn) => rnn.run_sequence(images),
    }
}

/// One SGD epoch of deeply supervised training. Returns the mean batch
/// loss.
fn train_epoch_cnn(
    net: &mut SegNet,
    cases: &[CaseData],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let weights = net.config().supervision_weights();
    let mut coords = slice_coords(cases);
    coords.shuffle(&mut epoch_rng(cfg.seed, epoch));

    let mut total_loss = 0.0;
    let mut batches = 0;
    for chunk in coords.chunks(cfg.batch_size) {
        let images: Vec<Tensor> = chunk
            .iter()
            .map(|&(ci, t)| cases[ci].images[t].clone())
            .collect();
        let labels: Vec<Tensor> = chunk
            .iter()
            .map(|&(ci, t)| cases[ci].labels[t].clone())
            .collect();
        let batch = data::stack_batch(&images)?;
        let target = data::stack_batch(&labels)?;

        let mut g = Graph::new();
        let x = g.constant(batch);
        let out = net.forward_graph(&mut g, x, true)?;
        let sides: Vec<Tensor> = out.side_probs.iter().map(|&n| g.value(n).clone()).collect();
        let fused = g.value(out.fused_prob).clone();
        let loss = deep_supervision_loss(&sides, &fused, &target, cfg.loss, &weights)?;
        if !loss.value.is_finite() {
            return Err(Error::Train(format!(
                "loss diverged to {} at epoch {epoch}",
                loss.value
            )));
        }

        let mut seeds: Vec<_> = out
            .side_probs
            .iter()
            .zip(loss.side_grads)
            .map(|(&n, grad)| (n, grad))
            .collect();
        seeds.push((out.fused_prob, loss.fused_grad));
        let grads = g.backward(seeds)?;
        net.params_mut().sgd_step(&grads, cfg.lr, cfg.momentum)?;

        total_loss += loss.value;
        batches += 1;
    }
    Ok(total_loss / batches as f64)
}

/// How a fitting run decides it is done.
enum StopRule {
    /// Early stop after `patience` epochs without improvement; the best
    /// snapshot wins.
    Patience,
    /// Stop once the monitor reaches `target - TARGET_TOLERANCE`.
    Target(f64),
}

struct FitOutcome {
    best_monitor: f64,
    reached_target: bool,
}

/// Trains `net` in place until the stop rule fires. The network is left
/// at its best-monitor snapshot.
fn fit_cnn(
    net: &mut SegNet,
    train: &[CaseData],
    monitor: &[CaseData],
    cfg: &TrainConfig,
    phase: &'static str,
    stop: StopRule,
    log: &mut TrainLog,
) -> Result<FitOutcome> {
    if train.is_empty() || monitor.is_empty() {
        return Err(Error::Train(
            "training and monitor sets must be non-empty".into(),
        ));
    }
    let mut best = net.clone();
    let mut best_monitor = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut reached_target = false;

    for epoch in 0..cfg.max_epochs {
        let train_loss = train_epoch_cnn(net, train, cfg, epoch)?;
        let monitor_dsc = mean_case_dsc_cnn(net, monitor, cfg.threshold)?;
        log.rows.push(EpochRow {
            phase,
            epoch,
            train_loss,
            monitor_dsc,
        });
        if monitor_dsc > best_monitor {
            best_monitor = monitor_dsc;
            best = net.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        match stop {
            StopRule::Patience if since_best >= cfg.patience => break,
            StopRule::Target(target) if best_monitor >= target - TARGET_TOLERANCE => {
                reached_target = true;
                break;
            }
            _ => {}
        }
    }
    if let StopRule::Target(target) = stop {
        if !reached_target {
            log.warnings.push(format!(
                "phase {phase} stopped at DSC {best_monitor:.4} without reaching \
                 the target {target:.4}"
            ));
        }
    }
    *net = best;
    Ok(FitOutcome {
        best_monitor,
        reached_target,
    })
}

/// Result of the two-phase selection protocol.
#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub net: SegNet,
    /// Phase A target accuracy: the selected model's DSC on its own
    /// training subset.
    pub acc_t: f64,
    /// Phase A validation DSC of the selected model.
    pub val_dsc: f64,
    pub reached_target: bool,
    pub log: TrainLog,
}

/// Splits a case list by id with [`data::split_train_val`].
fn split_cases(
    cases: &[CaseData],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<CaseData>, Vec<CaseData>)> {
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let (train_ids, val_ids) = data::split_train_val(&ids, val_fraction, seed)?;
    let pick = |wanted: &[String]| -> Vec<CaseData> {
        cases
            .iter()
            .filter(|c| wanted.contains(&c.id))
            .cloned()
            .collect()
    };
    Ok((pick(&train_ids), pick(&val_ids)))
}

/// Two-phase model selection over one training case pool.
pub fn model_select(
    config: SegNetConfig,
    cases: &[CaseData],
    cfg: &TrainConfig,
) -> Result<SelectionOutcome> {
    cfg.validate()?;
    let (train, val) = split_cases(cases, cfg.val_fraction, cfg.seed)?;
    let mut log = TrainLog::default();
    let mut net = SegNet::build(config, cfg.seed)?;

    let phase_a = fit_cnn(
        &mut net,
        &train,
        &val,
        cfg,
        "a",
        StopRule::Patience,
        &mut log,
    )?;
    let acc_t = mean_case_dsc_cnn(&net, &train, cfg.threshold)?;
    let val_dsc = phase_a.best_monitor;

    net.params_mut().reset_velocity();
    let all: Vec<CaseData> = cases.to_vec();
    let phase_b = fit_cnn(
        &mut net,
        &all,
        &all,
        cfg,
        "b",
        StopRule::Target(acc_t),
        &mut log,
    )?;

    Ok(SelectionOutcome {
        net,
        acc_t,
        val_dsc,
        reached_target: phase_b.reached_target,
        log,
    })
}

fn mean_case_dsc_rnn(rnn: &RnnSegNet, cases: &[CaseData], threshold: f64) -> Result<f64> {
    let mut total = 0.0;
    for case in cases {
        let probs = rnn.run_sequence(&case.images)?;
        total += pooled_dsc(&probs, &case.labels, threshold)?;
    }
    Ok(total / cases.len() as f64)
}

/// The slice window feeding the prediction for slice `t`, in processing
/// order (ending at `t`).
fn window_indices(t: usize, depth: usize, window: usize, reverse: bool) -> Vec<usize> {
    if reverse {
        let end = (t + window).min(depth);
        (t..end).rev().collect()
    } else {
        let start = (t + 1).saturating_sub(window);
        (start..=t).collect()
    }
}

/// One SGD epoch of truncated backpropagation through time. Each
/// training example is the window of slices feeding one prediction;
/// gradients from `batch_size` windows are averaged per step.
fn train_epoch_rnn(
    rnn: &mut RnnSegNet,
    cases: &[CaseData],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut coords = slice_coords(cases);
    coords.shuffle(&mut epoch_rng(cfg.seed ^ 0x5e0, epoch));

    let mut total_loss = 0.0;
    let mut batches = 0;
    for chunk in coords.chunks(cfg.batch_size) {
        let mut grads = Grads::new();
        let mut chunk_loss = 0.0;
        for &(ci, t) in chunk {
            let case = &cases[ci];
            let order = window_indices(t, case.images.len(), rnn.window, rnn.reverse);
            let refs: Vec<&Tensor> = order.iter().map(|&s| &case.images[s]).collect();
            let mut g = Graph::new();
            // Frozen normalization statistics: each unroll step sees a
            // single slice, whose batch statistics are too noisy to
            // normalize by and would corrupt the running buffers the
            // source network converged to.
            let outs = rnn.unroll_graph(&mut g, &refs, false)?;
            let (_, prob) = *outs.last().expect("non-empty window");
            let loss = cfg.loss.compute(g.value(prob), &case.labels[t])?;
            if !loss.value.is_finite() {
                return Err(Error::Train(format!(
                    "loss diverged to {} at epoch {epoch}",
                    loss.value
                )));
            }
            chunk_loss += loss.value;
            grads.merge(g.backward(vec![(prob, loss.grad_map)])?);
        }
        grads.scale(1.0 / chunk.len() as f64);
        rnn.cnn
            .params_mut()
            .sgd_step(&grads, cfg.lr, cfg.momentum)?;
        total_loss += chunk_loss / chunk.len() as f64;
        batches += 1;
    }
    Ok(total_loss / batches as f64)
}

/// Settings for the recurrent extension.
#[derive(Debug, Clone)]
pub struct RnnConfig {
    pub hidden_channels: usize,
    pub window: usize,
    pub reverse: bool,
}

impl Default for RnnConfig {
    fn default() -> RnnConfig {
        RnnConfig {
            hidden_channels: DEFAULT_HIDDEN,
            window: DEFAULT_WINDOW,
            reverse: false,
        }
    }
}

/// Attaches a recurrent cell to a trained CNN and fine-tunes end to
/// end with truncated backpropagation through time. Early stops on
/// monitor DSC; the best snapshot wins. Because the attachment is
/// identity preserving, the starting monitor score equals the CNN's.
pub fn finetune_rnn(
    net: SegNet,
    train: &[CaseData],
    monitor: &[CaseData],
    cfg: &TrainConfig,
    rnn_cfg: &RnnConfig,
) -> Result<(RnnSegNet, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() || monitor.is_empty() {
        return Err(Error::Train(
            "training and monitor sets must be non-empty".into(),
        ));
    }
    if rnn_cfg.window == 0 {
        return Err(Error::invalid("unroll window must be at least 1"));
    }
    let mut rnn = attach_clstm(net, rnn_cfg.hidden_channels, cfg.seed ^ 0xc157)?;
    rnn.window = rnn_cfg.window;
    rnn.reverse = rnn_cfg.reverse;
    rnn.cnn.params_mut().reset_velocity();

    let mut log = TrainLog::default();
    let mut best = rnn.clone();
    let mut best_monitor = mean_case_dsc_rnn(&rnn, monitor, cfg.threshold)?;
    let mut since_best = 0;
    log.rows.push(EpochRow {
        phase: "rnn",
        epoch: 0,
        train_loss: f64::NAN,
        monitor_dsc: best_monitor,
    });

    for epoch in 1..=cfg.max_epochs {
        let train_loss = train_epoch_rnn(&mut rnn, train, cfg, epoch)?;
        let monitor_dsc = mean_case_dsc_rnn(&rnn, monitor, cfg.threshold)?;
        log.rows.push(EpochRow {
            phase: "rnn",
            epoch,
            train_loss,
            monitor_dsc,
        });
        if monitor_dsc > best_monitor {
            best_monitor = monitor_dsc;
            best = rnn.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best, log))
}

/// Scores of one cross-validation fold.
#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub test_ids: Vec<String>,
    pub scores: Vec<CaseScore>,
    pub report: AggregateReport,
}

/// Full cross-validation outcome.
#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub folds: Vec<FoldResult>,
    pub pooled: AggregateReport,
    pub plan_csv: String,
    pub logs: Vec<TrainLog>,
}

/// K-fold cross-validation: per fold, two-phase selection on the other
/// folds and case-level scoring on the held-out one. Training and test
/// ids are re-audited per fold; any overlap aborts the run.
pub fn evaluate_cv(
    config: SegNetConfig,
    cases: &[CaseData],
    k: usize,
    cfg: &TrainConfig,
) -> Result<CvOutcome> {
    cfg.validate()?;
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let folds = data::make_folds(&ids, k, cfg.seed)?;
    let plan_csv = data::fold_plan_csv(&folds);

    let mut results = Vec::with_capacity(k);
    let mut logs = Vec::with_capacity(k);
    let mut all_scores = Vec::new();
    for (fi, test_ids) in folds.iter().enumerate() {
        let test_set: BTreeSet<&String> = test_ids.iter().collect();
        let train_cases: Vec<CaseData> = cases
            .iter()
            .filter(|c| !test_set.contains(&c.id))
            .cloned()
            .collect();
        for case in &train_cases {
            if test_set.contains(&case.id) {
                return Err(Error::Train(format!(
                    "case {} leaked into fold {fi} training data",
                    case.id
                )));
            }
        }

        let selection = model_select(config.clone(), &train_cases, cfg)?;
        let mut scores = Vec::with_capacity(test_ids.len());
        for case in cases.iter().filter(|c| test_set.contains(&c.id)) {
            let probs: Vec<Tensor> = case
                .images
                .iter()
                .map(|s| selection.net.infer(s).map(|o| o.fused_prob))
                .collect::<Result<_>>()?;
            let prob = data::stack_batch(&probs)?;
            let truth = data::stack_batch(&case.labels)?;
            let mask = metrics::binarize(&prob, cfg.threshold);
            scores.push(CaseScore {
                case_id: case.id.clone(),
                threshold: cfg.threshold,
                dsc: metrics::dsc(&mask, &truth)?,
                ji: metrics::jaccard_index(&mask, &truth)?,
            });
        }
        let report = metrics::aggregate(&scores)?;
        all_scores.extend(scores.clone());
        results.push(FoldResult {
            fold: fi,
            test_ids: test_ids.clone(),
            scores,
            report,
        });
        logs.push(selection.log);
    }

    Ok(CvOutcome {
        folds: results,
        pooled: metrics::aggregate(&all_scores)?,
        plan_csv,
        logs,
    })
}

/// Mean case DSC per threshold for one trained model.
#[derive(Debug, Clone)]
pub struct LossCurve {
    pub loss: LossKind,
    /// `(threshold, mean case DSC)` pairs over the standard sweep.
    pub curve: Vec<(f64, f64)>,
    /// Best minus worst mean DSC across the sweep; smaller is flatter.
    pub spread: f64,
}

impl LossCurve {
    pub fn to_csv_rows(&self) -> String {
        let mut out = String::new();
        for &(t, dsc) in &self.curve {
            out.push_str(&format!("{},{},{}\n", self.loss, t, dsc));
        }
        out
    }
}

/// Trains one model per loss kind on a shared holdout split and sweeps
/// the binarization threshold on the held-out cases. Flat curves mean
/// the loss produced calibrated maps whose binarization barely matters.
pub fn benchmark_losses(
    config: SegNetConfig,
    cases: &[CaseData],
    cfg: &TrainConfig,
    kinds: &[LossKind],
) -> Result<Vec<LossCurve>> {
    cfg.validate()?;
    if kinds.is_empty() {
        return Err(Error::invalid("benchmark needs at least one loss"));
    }
    let (train, test) = split_cases(cases, cfg.val_fraction.max(0.2), cfg.seed)?;
    let thresholds = metrics::sweep_thresholds();

    let mut curves = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut run_cfg = cfg.clone();
        run_cfg.loss = kind;
        let selection = model_select(config.clone(), &train, &run_cfg)?;

        let mut curve = Vec::with_capacity(thresholds.len());
        for &t in &thresholds {
            let mut total = 0.0;
            for case in &test {
                total += case_dsc_cnn(&selection.net, case, t)?;
            }
            curve.push((t, total / test.len() as f64));
        }
        let best = curve
            .iter()
            .map(|&(_, d)| d)
            .fold(f64::NEG_INFINITY, f64::max);
        let worst = curve.iter().map(|&(_, d)| d).fold(f64::INFINITY, f64::min);
        curves.push(LossCurve {
            loss: kind,
            curve,
            spread: best - worst,
        });
    }
    Ok(curves)
}

/// Mean per-slice DSC split by the corruption flag, pooled across
/// cases.
#[derive(Debug, Clone, Copy)]
pub struct SliceGroupScores {
    pub clean_mean_dsc: f64,
    pub corrupted_mean_dsc: f64,
    pub clean_slices: usize,
    pub corrupted_slices: usize,
}

/// Scores a model slice by slice, grouping by the degradation flag.
pub fn slice_group_scores(
    model: &Model,
    cases: &[CaseData],
    threshold: f64,
) -> Result<SliceGroupScores> {
    let mut clean = (0.0, 0usize);
    let mut corrupted = (0.0, 0usize);
    for case in cases {
        let probs = predict_case(model, &case.images)?;
        for ((prob, label), &flag) in probs.iter().zip(&case.labels).zip(&case.corrupted) {
            let mask = metrics::binarize(prob, threshold);
            let d = metrics::dsc(&mask, label)?;
            let bucket = if flag { &mut corrupted } else { &mut clean };
            bucket.0 += d;
            bucket.1 += 1;
        }
    }
    Ok(SliceGroupScores {
        clean_mean_dsc: if clean.1 == 0 {
            f64::NAN
        } else {
            clean.0 / clean.1 as f64
        },
        corrupted_mean_dsc: if corrupted.1 == 0 {
            f64::NAN
        } else {
            corrupted.0 / corrupted.1 as f64
        },
        clean_slices: clean.1,
        corrupted_slices: corrupted.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_indices_clamp_at_both_ends() {
        assert_eq!(window_indices(0, 8, 4, false), vec![0]);
        assert_eq!(window_indices(5, 8, 4, false), vec![2, 3, 4, 5]);
        assert_eq!(window_indices(0, 8, 4, true), vec![3, 2, 1, 0]);
        assert_eq!(window_indices(6, 8, 4, true), vec![7, 6]);
        assert_eq!(window_indices(2, 8, 1, false), vec![2]);
        assert_eq!(window_indices(2, 8, 1, true), vec![2]);
    }

    #[test]
    fn config_validation_catches_bad_knobs() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        cfg.lr = 0.1;
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
        cfg.momentum = 0.9;
        cfg.threshold = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn log_csv_has_stable_header() {
        let mut log = TrainLog::default();
        log.rows.push(EpochRow {
            phase: "a",
            epoch: 0,
            train_loss: 0.5,
            monitor_dsc: 0.25,
        });
        let csv = log.to_csv();
        assert!(csv.starts_with("phase,epoch,train_loss,monitor_dsc\n"));
        assert!(csv.contains("a,0,0.5,0.25\n"));
    }
}
