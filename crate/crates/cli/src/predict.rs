use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mdanet_core::segnet::{load_checkpoint, read_manifest};
use mdanet_core::train::{class_dice, predict_volume, EvalReport, SubjectDice};
use mdanet_core::volume::{load_volume, save_volume};
use mdanet_core::{Error, SegNet, Variant, View, Volume};

enum Model {
    F32(SegNet<f32>),
    F64(SegNet<f64>),
}

impl Model {
    /// Loads in the checkpoint's own precision, refusing other variants when
    /// `variant` is given.
    fn load(path: &Path, variant: Option<Variant>) -> Result<Self> {
        let manifest = read_manifest(path)?;
        if let Some(want) = variant {
            if manifest.config.variant != want {
                bail!(Error::Data(format!(
                    "checkpoint {} holds a {} model, expected a {want} manifest",
                    path.display(),
                    manifest.config.variant
                )));
            }
        }
        Ok(if manifest.tensors.iter().any(|t| t.dtype == "f64") {
            Model::F64(load_checkpoint(path, None)?)
        } else {
            Model::F32(load_checkpoint(path, None)?)
        })
    }

    fn num_classes(&self) -> usize {
        match self {
            Model::F32(m) => m.config().num_classes,
            Model::F64(m) => m.config().num_classes,
        }
    }

    fn predict(&self, volume: &Volume, view: View, batch: usize) -> Result<Vec<u8>> {
        Ok(match self {
            Model::F32(m) => predict_volume(m, volume, view, batch)?,
            Model::F64(m) => predict_volume(m, volume, view, batch)?,
        })
    }
}

pub struct EvalRequest {
    pub checkpoint: Option<PathBuf>,
    pub prediction: Option<PathBuf>,
    pub volume: PathBuf,
    pub view: View,
    pub variant: Option<Variant>,
    pub out: Option<PathBuf>,
    pub batch_size: usize,
}

fn subject_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| "volume".into(), |s| s.to_string_lossy().into_owned())
}

pub fn eval(req: &EvalRequest) -> Result<()> {
    let truth = load_volume(&req.volume)?;
    let Some(truth_labels) = truth.labels.as_deref() else {
        bail!(Error::Data(format!("{} has no label volume to score against", req.volume.display())));
    };
    let (pred, k) = match (&req.checkpoint, &req.prediction) {
        (Some(ckpt), _) => {
            let model = Model::load(ckpt, req.variant)?;
            let k = model.num_classes();
            truth.check_labels(k)?;
            (model.predict(&truth, req.view, req.batch_size)?, k)
        }
        (None, Some(p)) => {
            let pv = load_volume(p)?;
            if pv.dims != truth.dims {
                bail!(Error::Data(format!(
                    "prediction {} has dims {:?}, truth has {:?}",
                    p.display(),
                    pv.dims,
                    truth.dims
                )));
            }
            let labels = pv
                .labels
                .ok_or_else(|| Error::Data(format!("{} holds no predicted labels", p.display())))?;
            let k = labels.iter().chain(truth_labels).copied().max().unwrap_or(0) as usize + 1;
            (labels, k.max(2))
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    let report = EvalReport::from_subjects(
        req.view,
        vec![SubjectDice {
            subject: subject_id(&req.volume),
            dice: class_dice(&pred, truth_labels, k),
        }],
    );
    println!("{}", format_report(&report));
    if let Some(out) = &req.out {
        fs::write(out, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

pub fn format_report(r: &EvalReport) -> String {
    let mut s = format!("view {}\n", r.view);
    for (c, d) in r.mean.iter().enumerate() {
        s += &format!("class {c} dice {d:.6}\n");
    }
    s + &format!("foreground mean {:.6}", r.foreground_mean())
}

pub fn infer(
    checkpoint: &Path,
    volume_path: &Path,
    view: View,
    variant: Option<Variant>,
    out: &Path,
    batch: usize,
) -> Result<()> {
    let model = Model::load(checkpoint, variant)?;
    let volume = load_volume(volume_path)?;
    let pred = model.predict(&volume, view, batch)?;
    let result = Volume::new(volume.dims, volume.spacing, volume.image.clone())?.with_labels(pred)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_volume(&result, out)?;
    eprintln!("wrote prediction {} ({:?})", out.display(), result.dims);
    Ok(())
}
