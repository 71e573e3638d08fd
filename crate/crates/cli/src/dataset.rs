//! Dataset manifests: a JSON list of subject ids and volume headers.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mdanet_core::rng::derive_seed;
use mdanet_core::volume::{load_volume, read_header, save_volume, synth_phantom_with, PhantomConfig, VolumeHeader};
use mdanet_core::{Subject, Volume};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    /// Header path, relative to the manifest's directory.
    pub header: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomRecipe {
    pub seed: u64,
    pub config: PhantomConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub subjects: Vec<SubjectEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantoms: Option<PhantomRecipe>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading dataset manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing dataset manifest {}", path.display()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    fn header_path(manifest: &Path, entry: &SubjectEntry) -> PathBuf {
        manifest.parent().unwrap_or(Path::new("")).join(&entry.header)
    }

    /// Headers only, without reading payloads.
    pub fn headers(&self, manifest: &Path) -> Result<Vec<VolumeHeader>> {
        self.subjects
            .iter()
            .map(|e| Ok(read_header(&Self::header_path(manifest, e))?))
            .collect()
    }

    /// Loads every subject and checks that each carries labels below
    /// `num_classes`.
    pub fn load_labelled(&self, manifest: &Path, num_classes: usize) -> Result<Vec<Subject>> {
        if self.subjects.is_empty() {
            bail!(mdanet_core::Error::Data(format!("{} lists no subjects", manifest.display())));
        }
        let mut out = Vec::with_capacity(self.subjects.len());
        for e in &self.subjects {
            let path = Self::header_path(manifest, e);
            let volume = load_volume(&path).with_context(|| format!("subject '{}'", e.id))?;
            if volume.labels.is_none() {
                bail!(mdanet_core::Error::Data(format!(
                    "subject '{}' ({}) has no label volume",
                    e.id,
                    path.display()
                )));
            }
            volume.check_labels(num_classes).with_context(|| format!("subject '{}'", e.id))?;
            out.push(Subject::new(e.id.clone(), volume));
        }
        Ok(out)
    }
}

/// Writes `subjects` phantoms into `out` plus a manifest. Subject `i` uses
/// seed `derive_seed(seed, [i])`.
pub fn make_phantoms(out: &Path, subjects: usize, seed: u64, config: &PhantomConfig) -> Result<DatasetManifest> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = DatasetManifest {
        subjects: Vec::with_capacity(subjects),
        phantoms: Some(PhantomRecipe {
            seed,
            config: config.clone(),
        }),
    };
    for i in 0..subjects {
        let id = format!("phantom-{i:03}");
        let volume = synth_phantom_with(derive_seed(seed, &[i as u64]), config)?;
        let header = PathBuf::from(format!("{id}.json"));
        save_volume(&volume, &out.join(&header))?;
        log::info!("wrote {id}");
        manifest.subjects.push(SubjectEntry { id, header });
    }
    manifest.write(&out.join(MANIFEST))?;
    Ok(manifest)
}

/// Copies a volume into dataset `dir` under `id` and registers it in the
/// dataset manifest, creating the manifest if needed.
pub fn import(dir: &Path, id: &str, volume: &Volume) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) {
        bail!(crate::exit::Usage(format!("subject id '{id}' must be a plain file stem")));
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let manifest_path = dir.join(MANIFEST);
    let mut manifest = if manifest_path.exists() {
        DatasetManifest::read(&manifest_path)?
    } else {
        DatasetManifest::default()
    };
    if manifest.subjects.iter().any(|e| e.id == id) {
        bail!(mdanet_core::Error::Data(format!(
            "subject '{id}' is already listed in {}",
            manifest_path.display()
        )));
    }
    let header = PathBuf::from(format!("{id}.json"));
    save_volume(volume, &dir.join(&header))?;
    manifest.subjects.push(SubjectEntry { id: id.to_string(), header });
    manifest.write(&manifest_path)
}

/// Reads a headerless little-endian array of `dims` voxels.
pub fn read_raw_f32(path: &Path, dims: [usize; 3], dtype: &str) -> Result<Vec<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let n: usize = dims.iter().product();
    let width = match dtype {
        "f32" => 4,
        "u8" => 1,
        other => bail!(crate::exit::Usage(format!("unsupported dtype '{other}' (use f32 or u8)"))),
    };
    if bytes.len() != n * width {
        bail!(mdanet_core::Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} bytes, expected {} for {dims:?} {dtype}", bytes.len(), n * width),
        });
    }
    Ok(match width {
        4 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        _ => bytes.iter().map(|&b| b as f32).collect(),
    })
}

pub fn read_raw_u8(path: &Path, dims: [usize; 3]) -> Result<Vec<u8>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let n: usize = dims.iter().product();
    if bytes.len() != n {
        bail!(mdanet_core::Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} label bytes, expected {n}", bytes.len()),
        });
    }
    Ok(bytes)
}
