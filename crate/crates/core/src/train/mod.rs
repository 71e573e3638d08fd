//! Training and evaluation: Dice metric and loss, Adam with L2, the epoch
//! loop, 3D evaluation and the cross-validation driver.

mod adam;
mod cv;
mod dice;
mod metrics;

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, Adam, AdamConfig};
pub use cv::{cross_validate, model_config_for, train_fold, CvConfig, CvReport, FoldOutcome};
pub use dice::{argmax_classes, dice_loss, dice_score, one_hot, DICE_SMOOTH};
pub use metrics::{mean_std, metrics_csv, write_metrics, MetricsRow, METRICS_HEADER};

use crate::compression::{ordered_diffs, CompressionConfig};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};
use crate::segnet::{Batch, SegNet};
use crate::tensor::{Graph, Precision, Scalar, Tensor};
use crate::volume::{crop_plane, pad_plane, padded_extent, Sample, Subject, View, ViewPlan, Volume};

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub l2_lambda: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many epochs without a new best loss.
    pub early_stop_patience: Option<usize>,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            l2_lambda: 1e-5,
            max_epochs: 300,
            batch_size: 8,
            seed: 0,
            early_stop_patience: None,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.l2_lambda < 0.0 {
            return Err(Error::Config(format!("L2 coefficient must be non-negative, got {}", self.l2_lambda)));
        }
        Ok(())
    }
}

/// One subject's view, normalized and zero-padded in-plane to the network's
/// input size. Layout `[rows, cols, p]`.
#[derive(Debug, Clone)]
pub struct PreparedView<T> {
    pub plan: ViewPlan,
    pub rows: usize,
    pub cols: usize,
    pub image: Tensor<T>,
    pub labels: Option<Vec<u8>>,
}

impl<T: Scalar> PreparedView<T> {
    /// Pads the in-plane extents up to a multiple of `multiple`.
    pub fn new(volume: &Volume, view: View, multiple: usize) -> Self {
        let plan = ViewPlan::new(volume.dims, view);
        let (rows, cols) = (padded_extent(plan.m, multiple), padded_extent(plan.n, multiple));
        let norm = plan.to_view(&volume.normalized());
        let padded = pad_plane(&norm, plan.m, plan.n, plan.p, rows, cols);
        let image = Tensor::new(
            &[rows, cols, plan.p],
            padded.into_iter().map(|v| T::from_f64_lossy(v as f64)).collect(),
        )
        .expect("padded view size");
        let labels = volume
            .labels
            .as_ref()
            .map(|l| pad_plane(&plan.to_view(l), plan.m, plan.n, plan.p, rows, cols));
        PreparedView {
            plan,
            rows,
            cols,
            image,
            labels,
        }
    }

    pub fn slices(&self) -> usize {
        self.plan.p
    }

    fn image_slice(&self, i: usize) -> impl Iterator<Item = T> + '_ {
        let p = self.plan.p;
        self.image.data().iter().skip(i).step_by(p).copied()
    }

    fn label_slice(&self, i: usize) -> Option<impl Iterator<Item = u8> + '_> {
        let p = self.plan.p;
        self.labels.as_ref().map(|l| l.iter().skip(i).step_by(p).copied())
    }
}

/// Stacks `(view, slice)` pairs into network input; with `num_classes`, also
/// returns one-hot targets `[N, rows, cols, K]`.
pub fn assemble_batch<T: Scalar>(
    items: &[(&PreparedView<T>, usize)],
    compression: Option<&CompressionConfig>,
    num_classes: Option<usize>,
) -> Result<(Batch<T>, Option<Tensor<T>>)> {
    let (rows, cols) = items
        .first()
        .map(|(v, _)| (v.rows, v.cols))
        .ok_or_else(|| Error::Config("empty batch".into()))?;
    if items.iter().any(|(v, _)| (v.rows, v.cols) != (rows, cols)) {
        return Err(Error::shape("batch", "slices in one batch must share their in-plane size"));
    }
    let n = items.len();
    let mut images = Vec::with_capacity(n * rows * cols);
    let mut diffs = compression.map(|c| Vec::with_capacity(n * rows * cols * c.depth()));
    let mut labels = num_classes.map(|_| Vec::with_capacity(n * rows * cols));
    for &(view, i) in items {
        images.extend(view.image_slice(i));
        if let (Some(buf), Some(cfg)) = (diffs.as_mut(), compression) {
            buf.extend_from_slice(ordered_diffs(&view.image, i, cfg)?.data());
        }
        if let Some(buf) = labels.as_mut() {
            let slice = view
                .label_slice(i)
                .ok_or_else(|| Error::Data("training slice has no labels".into()))?;
            buf.extend(slice);
        }
    }
    let batch = Batch {
        images: Tensor::new(&[n, rows, cols, 1], images)?,
        diffs: match (diffs, compression) {
            (Some(d), Some(c)) => Some(Tensor::new(&[n, rows, cols, c.depth()], d)?),
            _ => None,
        },
    };
    let targets = match (labels, num_classes) {
        (Some(l), Some(k)) => Some(one_hot(&l, &[n, rows, cols], k)?),
        _ => None,
    };
    Ok((batch, targets))
}

fn prepare_for<T: Scalar>(model: &SegNet<T>, volume: &Volume, view: View) -> Result<PreparedView<T>> {
    let c = model.config();
    let prepared = PreparedView::new(volume, view, c.spatial_multiple());
    if (prepared.rows, prepared.cols) != (c.height, c.width) {
        return Err(Error::Config(format!(
            "model is bound to {}×{} slices but the {view} view of a {:?} volume pads to {}×{}",
            c.height, c.width, volume.dims, prepared.rows, prepared.cols
        )));
    }
    if let Some(cc) = &c.compression {
        cc.validate(prepared.slices())?;
    }
    Ok(prepared)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (lowest mean training loss).
    pub best_epoch: usize,
    pub best_loss: f64,
    pub stopped_early: bool,
}

/// Trains `model` on `samples` and leaves it holding the parameters of the
/// epoch with the lowest mean Dice loss.
pub fn fit<T: Scalar>(model: &mut SegNet<T>, samples: &[Sample], cfg: &TrainConfig) -> Result<FitReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let classes = model.config().num_classes;
    let compression = model.config().compression;
    let mut views: HashMap<String, (Arc<Volume>, PreparedView<T>)> = HashMap::new();
    for s in samples {
        match views.get(&s.subject) {
            Some((vol, prep)) => {
                if !Arc::ptr_eq(vol, &s.volume) || prep.plan.view != s.view {
                    return Err(Error::Data(format!(
                        "samples of subject '{}' disagree on their volume or view",
                        s.subject
                    )));
                }
            }
            None => {
                s.volume.check_labels(classes)?;
                let prep = prepare_for(model, &s.volume, s.view)?;
                views.insert(s.subject.clone(), (Arc::clone(&s.volume), prep));
            }
        }
    }

    let mut adam = Adam::new(model.params(), AdamConfig::new(cfg.lr, cfg.l2_lambda));
    let mut report = FitReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_loss: f64::INFINITY,
        stopped_early: false,
    };
    let mut best = model.params().clone();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<(&PreparedView<T>, usize)> = chunk
                .iter()
                .map(|&k| (&views[&samples[k].subject].1, samples[k].index))
                .collect();
            let (batch, targets) = assemble_batch(&items, compression.as_ref(), Some(classes))?;
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let seed = derive_seed(cfg.seed, &[DROPOUT_STREAM, epoch as u64, b as u64]);
            let probs = model.forward_graph(&mut g, &bound, &batch, true, seed)?;
            let loss = dice_loss(&mut g, probs, targets.expect("labels requested"))?;
            let value = g.value(loss).data()[0].to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {b}")));
            }
            g.backward(loss)?;
            let grads: Vec<Tensor<T>> = bound
                .iter()
                .zip(model.params().entries())
                .map(|(&v, e)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(e.tensor.shape())))
                .collect();
            if let Some(bad) = grads.iter().position(|t| !t.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of '{}' at epoch {epoch}, batch {b}",
                    model.params().entries()[bad].name
                )));
            }
            adam.step(model.params_mut(), &grads)?;
            total += value;
            batches += 1;
        }
        let loss = total / batches as f64;
        log::info!("epoch {epoch}: loss {loss:.6}");
        report.epochs.push(EpochRecord { epoch, loss });
        if loss < report.best_loss {
            report.best_loss = loss;
            report.best_epoch = epoch;
            best = model.params().clone();
        } else if cfg.early_stop_patience.is_some_and(|p| epoch - report.best_epoch >= p) {
            report.stopped_early = true;
            break;
        }
    }
    *model.params_mut() = best;
    Ok(report)
}

/// Predicted label volume (volume order) from per-slice argmax masks.
pub fn predict_volume<T: Scalar>(model: &SegNet<T>, volume: &Volume, view: View, batch_size: usize) -> Result<Vec<u8>> {
    let prepared = prepare_for(model, volume, view)?;
    let plan = prepared.plan;
    let compression = model.config().compression;
    let mut slices = Vec::with_capacity(plan.p);
    let indices: Vec<usize> = (0..plan.p).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let items: Vec<(&PreparedView<T>, usize)> = chunk.iter().map(|&i| (&prepared, i)).collect();
        let (batch, _) = assemble_batch(&items, compression.as_ref(), None)?;
        let probs = model.forward(&batch, false, 0)?;
        if !probs.is_finite() {
            return Err(Error::NonFinite(format!("prediction for slices {chunk:?}")));
        }
        let labels = argmax_classes(&probs);
        for px in labels.chunks(prepared.rows * prepared.cols) {
            slices.push(crop_plane(px, prepared.rows, prepared.cols, 1, plan.m, plan.n));
        }
    }
    plan.stack_slices(&slices)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectDice {
    pub subject: String,
    /// Dice per class, index 0 is background.
    pub dice: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub view: View,
    pub subjects: Vec<SubjectDice>,
    /// Mean and population std across subjects, per class.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl EvalReport {
    pub fn from_subjects(view: View, subjects: Vec<SubjectDice>) -> Self {
        let k = subjects.first().map_or(0, |s| s.dice.len());
        let (mean, std) = (0..k)
            .map(|c| mean_std(&subjects.iter().map(|s| s.dice[c]).collect::<Vec<_>>()))
            .unzip();
        EvalReport {
            view,
            subjects,
            mean,
            std,
        }
    }

    /// Mean Dice over the foreground classes.
    pub fn foreground_mean(&self) -> f64 {
        let fg = &self.mean[1..];
        fg.iter().sum::<f64>() / fg.len() as f64
    }

    /// One row per foreground class.
    pub fn rows(&self, fold: usize, variant: &str) -> Vec<MetricsRow> {
        (1..self.mean.len())
            .map(|c| MetricsRow {
                fold,
                view: self.view.to_string(),
                variant: variant.to_string(),
                epoch: None,
                class: Some(c),
                dice_mean: Some(self.mean[c]),
                dice_std: Some(self.std[c]),
                loss: None,
            })
            .collect()
    }
}

/// Per-class 3D Dice of a predicted label volume against the truth.
pub fn class_dice(pred: &[u8], truth: &[u8], num_classes: usize) -> Vec<f64> {
    (0..num_classes).map(|c| dice_score(pred, truth, c as u8)).collect()
}

pub fn evaluate<T: Scalar>(model: &SegNet<T>, subjects: &[Subject], view: View, batch_size: usize) -> Result<EvalReport> {
    if subjects.is_empty() {
        return Err(Error::Data("no test subjects".into()));
    }
    let k = model.config().num_classes;
    let mut out = Vec::with_capacity(subjects.len());
    for s in subjects {
        let truth = s.volume.check_labels(k)?;
        let pred = predict_volume(model, &s.volume, view, batch_size)?;
        out.push(SubjectDice {
            subject: s.id.clone(),
            dice: class_dice(&pred, truth, k),
        });
    }
    Ok(EvalReport::from_subjects(view, out))
}
