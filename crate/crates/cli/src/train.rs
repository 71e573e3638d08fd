use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use mdanet_core::segnet::save_checkpoint;
use mdanet_core::train::{cross_validate, train_fold, write_metrics, CvConfig, CvReport};
use mdanet_core::volume::kfold_split;
use mdanet_core::{Precision, Scalar, Subject, Variant, View};

use crate::config::RunConfig;
use crate::dataset::DatasetManifest;

pub const RESOLVED_CONFIG: &str = "config.toml";
pub const CHECKPOINT: &str = "model.ckpt";
pub const METRICS: &str = "metrics.csv";
pub const REPORT: &str = "report.json";

pub struct Overrides {
    pub config: PathBuf,
    pub variant: Option<Variant>,
    pub view: Option<View>,
    pub fold: Option<usize>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub jobs: Option<usize>,
}

pub fn resolve(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&o.config)?;
    if let Some(v) = o.variant {
        cfg.variant = v;
    }
    if let Some(v) = o.view {
        cfg.view = v;
    }
    if o.fold.is_some() {
        cfg.fold = o.fold;
    }
    if let Some(d) = &o.data {
        cfg.data = d.clone();
    }
    if let Some(d) = &o.out {
        cfg.out = d.clone();
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(e) = o.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(j) = o.jobs {
        cfg.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(o: Overrides) -> Result<()> {
    let cfg = resolve(&o)?;
    let manifest = DatasetManifest::read(&cfg.data)?;
    let subjects = manifest.load_labelled(&cfg.data, cfg.model.num_classes)?;

    fs::create_dir_all(&cfg.out).with_context(|| format!("creating run directory {}", cfg.out.display()))?;
    let resolved = cfg.out.join(RESOLVED_CONFIG);
    fs::write(&resolved, cfg.to_toml()?).with_context(|| format!("writing {}", resolved.display()))?;

    match cfg.train.precision {
        Precision::F32 => execute::<f32>(&cfg, &subjects),
        Precision::F64 => execute::<f64>(&cfg, &subjects),
    }
}

fn execute<T: Scalar>(cfg: &RunConfig, subjects: &[Subject]) -> Result<()> {
    let cv = CvConfig {
        folds: cfg.folds,
        seed: cfg.seed,
        view: cfg.view,
        variants: vec![cfg.variant],
        model: cfg.model.template(cfg.variant),
        train: cfg.train.clone(),
        jobs: cfg.jobs,
    };
    let report = match cfg.fold {
        Some(k) => {
            let dims = subjects[0].volume.dims;
            if subjects.iter().any(|s| s.volume.dims != dims) {
                return Err(mdanet_core::Error::Data("all subjects must share one grid size".into()).into());
            }
            let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
            let folds = kfold_split(&ids, cfg.folds, cfg.seed)?;
            let (model, outcome) = train_fold::<T>(subjects, &cv, &folds[k], cfg.variant)?;
            save_checkpoint(&model, &cfg.out.join(CHECKPOINT))?;
            CvReport {
                outcomes: vec![outcome],
            }
        }
        None => cross_validate::<T>(subjects, &cv)?,
    };
    write_metrics(&cfg.out.join(METRICS), &report.rows(cfg.view))?;
    let json = serde_json::to_string_pretty(&report.outcomes)? + "\n";
    fs::write(cfg.out.join(REPORT), json)?;
    for o in &report.outcomes {
        eprintln!(
            "fold {} {}: best epoch {} (loss {:.4}), foreground Dice {:.4}",
            o.fold,
            o.variant,
            o.fit.best_epoch,
            o.fit.best_loss,
            o.eval.foreground_mean()
        );
    }
    Ok(())
}
