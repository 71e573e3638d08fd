use serde::{Deserialize, Serialize};

use super::{evaluate, fit, EvalReport, FitReport, MetricsRow, TrainConfig};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::segnet::{ModelConfig, SegNet, Variant};
use crate::tensor::Scalar;
use crate::volume::{kfold_split, make_samples, padded_extent, Fold, Subject, View, ViewPlan};

const MODEL_STREAM: u64 = 10;
const TRAIN_STREAM: u64 = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
    pub view: View,
    pub variants: Vec<Variant>,
    /// Template; variant, height and width are filled in per run.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Worker threads for independent (fold, variant) runs.
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub variant: Variant,
    pub test_subjects: Vec<String>,
    pub fit: FitReport,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    /// Sorted by fold, then by the order of `CvConfig::variants`.
    pub outcomes: Vec<FoldOutcome>,
}

impl CvReport {
    /// Training rows followed by evaluation rows, per outcome.
    pub fn rows(&self, view: View) -> Vec<MetricsRow> {
        let mut rows = Vec::new();
        for o in &self.outcomes {
            rows.extend(o.fit.epochs.iter().map(|e| MetricsRow {
                fold: o.fold,
                view: view.to_string(),
                variant: o.variant.to_string(),
                epoch: Some(e.epoch),
                class: None,
                dice_mean: None,
                dice_std: None,
                loss: Some(e.loss),
            }));
            rows.extend(o.eval.rows(o.fold, o.variant.as_str()));
        }
        rows
    }

    pub fn outcome(&self, fold: usize, variant: Variant) -> Option<&FoldOutcome> {
        self.outcomes.iter().find(|o| o.fold == fold && o.variant == variant)
    }

    /// Mean over folds of each fold's mean foreground Dice.
    pub fn mean_foreground(&self, variant: Variant) -> f64 {
        let v: Vec<f64> = self
            .outcomes
            .iter()
            .filter(|o| o.variant == variant)
            .map(|o| o.eval.foreground_mean())
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Binds a template to a variant and to the padded in-plane size of `view`
/// for volumes of `dims`.
pub fn model_config_for(template: &ModelConfig, variant: Variant, dims: [usize; 3], view: View) -> ModelConfig {
    let plan = ViewPlan::new(dims, view);
    let mult = template.spatial_multiple();
    ModelConfig {
        height: padded_extent(plan.m, mult),
        width: padded_extent(plan.n, mult),
        ..template.with_variant(variant)
    }
}

/// Trains and evaluates one variant on one fold, returning the trained model
/// (best epoch restored) with its outcome. Seeds depend only on `cfg.seed`
/// and the fold index.
pub fn train_fold<T: Scalar>(
    subjects: &[Subject],
    cfg: &CvConfig,
    fold: &Fold,
    variant: Variant,
) -> Result<(SegNet<T>, FoldOutcome)> {
    let pick = |ids: &[String]| -> Vec<Subject> {
        ids.iter()
            .map(|id| subjects.iter().find(|s| &s.id == id).expect("fold ids come from subjects").clone())
            .collect()
    };
    let (train_set, test_set) = (pick(&fold.train), pick(&fold.test));
    let dims = subjects[0].volume.dims;
    let model_cfg = model_config_for(&cfg.model, variant, dims, cfg.view);
    let mut model = SegNet::<T>::build(model_cfg, derive_seed(cfg.seed, &[MODEL_STREAM, fold.index as u64]))?;
    let train_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, &[TRAIN_STREAM, fold.index as u64]),
        ..cfg.train.clone()
    };
    log::info!("fold {} variant {variant}: training on {} subjects", fold.index, train_set.len());
    let fit_report = fit(&mut model, &make_samples(&train_set, cfg.view), &train_cfg)?;
    let eval = evaluate(&model, &test_set, cfg.view, cfg.train.batch_size)?;
    log::info!(
        "fold {} variant {variant}: foreground Dice {:.4}",
        fold.index,
        eval.foreground_mean()
    );
    let outcome = FoldOutcome {
        fold: fold.index,
        variant,
        test_subjects: fold.test.clone(),
        fit: fit_report,
        eval,
    };
    Ok((model, outcome))
}

fn run_one<T: Scalar>(subjects: &[Subject], cfg: &CvConfig, fold: &Fold, variant: Variant) -> Result<FoldOutcome> {
    train_fold::<T>(subjects, cfg, fold, variant).map(|(_, outcome)| outcome)
}

/// Subject-level k-fold cross-validation of every configured variant. Within
/// a fold, all variants start from the same backbone initialization and see
/// the same batch order.
pub fn cross_validate<T: Scalar>(subjects: &[Subject], cfg: &CvConfig) -> Result<CvReport> {
    if cfg.variants.is_empty() {
        return Err(Error::Config("no variants to evaluate".into()));
    }
    let dims = subjects
        .first()
        .ok_or_else(|| Error::Data("no subjects".into()))?
        .volume
        .dims;
    if subjects.iter().any(|s| s.volume.dims != dims) {
        return Err(Error::Data("cross-validation needs subjects of identical dimensions".into()));
    }
    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    let folds = kfold_split(&ids, cfg.folds, cfg.seed)?;
    let tasks: Vec<(usize, Variant)> = folds
        .iter()
        .flat_map(|f| cfg.variants.iter().map(move |&v| (f.index, v)))
        .collect();
    let jobs = cfg.jobs.clamp(1, tasks.len());
    let mut results: Vec<Option<Result<FoldOutcome>>> = (0..tasks.len()).map(|_| None).collect();
    if jobs == 1 {
        for (slot, &(f, v)) in results.iter_mut().zip(&tasks) {
            *slot = Some(run_one::<T>(subjects, cfg, &folds[f], v));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..jobs)
                .map(|w| {
                    let (tasks, folds) = (&tasks, &folds);
                    scope.spawn(move || {
                        (w..tasks.len())
                            .step_by(jobs)
                            .map(|t| (t, run_one::<T>(subjects, cfg, &folds[tasks[t].0], tasks[t].1)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (t, r) in h.join().expect("cross-validation worker panicked") {
                    results[t] = Some(r);
                }
            }
        });
    }
    let outcomes = results
        .into_iter()
        .map(|r| r.expect("every task ran"))
        .collect::<Result<Vec<_>>>()?;
    Ok(CvReport { outcomes })
}
