//! Volumes, anatomical views, samples and subject-level folds.
//!
//! A volume is stored as a JSON header next to a raw little-endian payload
//! with the same stem (`brain.json` + `brain.raw`), axis order d0-major.
//! Labels, when present, live in a separate `u8` file named by the header.
//!
//! View mapping (slice axis → in-plane axes):
//!
//! | view     | slice axis `p` | rows `m` | cols `n` |
//! |----------|----------------|----------|----------|
//! | sagittal | d0             | d1       | d2       |
//! | axial    | d1             | d0       | d2       |
//! | coronal  | d2             | d0       | d1       |

mod phantom;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use phantom::{class_intensity, synth_phantom, synth_phantom_with, PhantomConfig};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoxelType {
    F32,
    U8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: VoxelType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Storage type used when the volume is saved.
    pub dtype: VoxelType,
    pub image: Vec<f32>,
    pub labels: Option<Vec<u8>>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], image: Vec<f32>) -> Result<Self> {
        let numel = dims.iter().product::<usize>();
        if image.len() != numel {
            return Err(Error::Data(format!(
                "image has {} voxels, dims {dims:?} need {numel}",
                image.len()
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("image contains non-finite voxels".into()));
        }
        Ok(Volume {
            dims,
            spacing,
            dtype: VoxelType::F32,
            image,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.numel() {
            return Err(Error::Data(format!(
                "label grid has {} voxels, image has {}",
                labels.len(),
                self.numel()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn index(&self, i0: usize, i1: usize, i2: usize) -> usize {
        (i0 * self.dims[1] + i1) * self.dims[2] + i2
    }

    /// Checks that labels exist and are below `num_classes`.
    pub fn check_labels(&self, num_classes: usize) -> Result<&[u8]> {
        let labels = self
            .labels
            .as_deref()
            .ok_or_else(|| Error::Data("volume has no label grid".into()))?;
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Data(format!("label value {bad} is not below num_classes = {num_classes}")));
        }
        Ok(labels)
    }

    /// Min-max range of the image; `None` for empty volumes.
    pub fn intensity_range(&self) -> Option<(f32, f32)> {
        let mut it = self.image.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    /// Image rescaled to `[0, 1]`; a constant volume maps to all zeros.
    pub fn normalized(&self) -> Vec<f32> {
        match self.intensity_range() {
            Some((lo, hi)) if hi > lo => {
                let inv = 1.0 / (hi - lo);
                self.image.iter().map(|&v| (v - lo) * inv).collect()
            }
            _ => vec![0.0; self.image.len()],
        }
    }
}

fn sibling(header: &Path, file: &str) -> PathBuf {
    header.parent().map_or_else(|| PathBuf::from(file), |d| d.join(file))
}

/// Payload path for a header path (`x.json` → `x.raw`).
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

/// Writes `<stem>.json`, `<stem>.raw` and, with labels, `<stem>_labels.raw`.
pub fn save_volume(volume: &Volume, header_path: &Path) -> Result<()> {
    let stem = header_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config(format!("{} has no usable file stem", header_path.display())))?;
    let label_name = volume.labels.as_ref().map(|_| format!("{stem}_labels.raw"));
    let mut payload = Vec::with_capacity(volume.numel() * 4);
    match volume.dtype {
        VoxelType::F32 => volume.image.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
        VoxelType::U8 => {
            for &v in &volume.image {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::Data(format!("voxel value {v} is not representable as u8")));
                }
                payload.push(v as u8);
            }
        }
    }
    let header = VolumeHeader {
        dims: volume.dims,
        spacing: volume.spacing,
        dtype: volume.dtype,
        labels: label_name.clone(),
    };
    let write = |path: &Path, bytes: &[u8]| fs::write(path, bytes).map_err(|e| Error::io(path, e));
    write(header_path, &serde_json::to_vec_pretty(&header)?)?;
    write(&payload_path(header_path), &payload)?;
    if let (Some(name), Some(labels)) = (label_name, &volume.labels) {
        write(&sibling(header_path, &name), labels)?;
    }
    Ok(())
}

pub fn read_header(header_path: &Path) -> Result<VolumeHeader> {
    let text = fs::read(header_path).map_err(|e| Error::io(header_path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::Format {
        path: header_path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn load_volume(header_path: &Path) -> Result<Volume> {
    let header = read_header(header_path)?;
    let numel: usize = header.dims.iter().product();
    let bad = |path: &Path, detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let payload_file = payload_path(header_path);
    let bytes = fs::read(&payload_file).map_err(|e| Error::io(&payload_file, e))?;
    let width = match header.dtype {
        VoxelType::F32 => 4,
        VoxelType::U8 => 1,
    };
    if bytes.len() != numel * width {
        return Err(bad(
            &payload_file,
            format!(
                "payload holds {} bytes, dims {:?} as {:?} need {}",
                bytes.len(),
                header.dims,
                header.dtype,
                numel * width
            ),
        ));
    }
    let image: Vec<f32> = match header.dtype {
        VoxelType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect(),
        VoxelType::U8 => bytes.iter().map(|&b| b as f32).collect(),
    };
    let mut volume = Volume::new(header.dims, header.spacing, image)?;
    volume.dtype = header.dtype;
    if let Some(name) = &header.labels {
        let label_file = sibling(header_path, name);
        let labels = fs::read(&label_file).map_err(|e| Error::io(&label_file, e))?;
        if labels.len() != numel {
            return Err(bad(
                &label_file,
                format!("label file holds {} voxels, dims need {numel}", labels.len()),
            ));
        }
        volume = volume.with_labels(labels)?;
    }
    Ok(volume)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Sagittal,
    Axial,
    Coronal,
}

impl View {
    pub const ALL: [View; 3] = [View::Sagittal, View::Axial, View::Coronal];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Sagittal => "sagittal",
            View::Axial => "axial",
            View::Coronal => "coronal",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        View::ALL
            .into_iter()
            .find(|v| v.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown view '{s}' (expected sagittal, axial or coronal)")))
    }
}

/// How one view cuts a volume: `p` slices of `m × n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewPlan {
    pub view: View,
    pub slice_axis: usize,
    pub row_axis: usize,
    pub col_axis: usize,
    pub m: usize,
    pub n: usize,
    pub p: usize,
    strides: [usize; 3],
}

impl ViewPlan {
    pub fn new(dims: [usize; 3], view: View) -> Self {
        let (slice_axis, row_axis, col_axis) = match view {
            View::Sagittal => (0, 1, 2),
            View::Axial => (1, 0, 2),
            View::Coronal => (2, 0, 1),
        };
        let vol_strides = [dims[1] * dims[2], dims[2], 1];
        ViewPlan {
            view,
            slice_axis,
            row_axis,
            col_axis,
            m: dims[row_axis],
            n: dims[col_axis],
            p: dims[slice_axis],
            strides: [vol_strides[row_axis], vol_strides[col_axis], vol_strides[slice_axis]],
        }
    }

    /// Volume index of row `a`, column `b` of slice `i`.
    pub fn voxel(&self, a: usize, b: usize, i: usize) -> usize {
        a * self.strides[0] + b * self.strides[1] + i * self.strides[2]
    }

    /// Rearranges a volume-ordered grid into view order `[m, n, p]`.
    pub fn to_view<V: Copy>(&self, grid: &[V]) -> Vec<V> {
        let mut out = Vec::with_capacity(grid.len());
        for a in 0..self.m {
            for b in 0..self.n {
                for i in 0..self.p {
                    out.push(grid[self.voxel(a, b, i)]);
                }
            }
        }
        out
    }

    /// Inverse of [`ViewPlan::to_view`].
    pub fn to_volume<V: Copy + Default>(&self, view: &[V]) -> Vec<V> {
        let mut out = vec![V::default(); view.len()];
        let mut k = 0;
        for a in 0..self.m {
            for b in 0..self.n {
                for i in 0..self.p {
                    out[self.voxel(a, b, i)] = view[k];
                    k += 1;
                }
            }
        }
        out
    }

    /// Places slice-major per-slice grids (`p` slices of `m × n`) back into volume order.
    pub fn stack_slices<V: Copy + Default>(&self, slices: &[Vec<V>]) -> Result<Vec<V>> {
        if slices.len() != self.p || slices.iter().any(|s| s.len() != self.m * self.n) {
            return Err(Error::shape(
                "stack_slices",
                format!("need {} slices of {}×{}", self.p, self.m, self.n),
            ));
        }
        let mut out = vec![V::default(); self.m * self.n * self.p];
        for (i, s) in slices.iter().enumerate() {
            for a in 0..self.m {
                for b in 0..self.n {
                    out[self.voxel(a, b, i)] = s[a * self.n + b];
                }
            }
        }
        Ok(out)
    }
}

/// Normalized image in view order, shape `[m, n, p]`.
pub fn view_tensor<T: Scalar>(volume: &Volume, view: View) -> Tensor<T> {
    let plan = ViewPlan::new(volume.dims, view);
    let data = plan.to_view(&volume.normalized());
    Tensor::new(&[plan.m, plan.n, plan.p], data.into_iter().map(|v| T::from_f64_lossy(v as f64)).collect())
        .expect("view tensor has the volume's element count")
}

/// Normalized slices `(i, [m, n])` in slice order.
pub fn slice_view<T: Scalar>(volume: &Volume, view: View) -> Vec<(usize, Tensor<T>)> {
    let plan = ViewPlan::new(volume.dims, view);
    let norm = volume.normalized();
    (0..plan.p)
        .map(|i| {
            let t = Tensor::from_fn(&[plan.m, plan.n], |k| {
                T::from_f64_lossy(norm[plan.voxel(k / plan.n, k % plan.n, i)] as f64)
            });
            (i, t)
        })
        .collect()
}

/// Smallest multiple of `multiple` that is ≥ `x`.
pub fn padded_extent(x: usize, multiple: usize) -> usize {
    x.div_ceil(multiple) * multiple
}

/// Zero-pads the two leading axes of an `[m, n, k]` grid to `[rows, cols, k]`
/// (trailing edge only, so cropping is a prefix copy).
pub fn pad_plane<V: Copy + Default>(data: &[V], m: usize, n: usize, k: usize, rows: usize, cols: usize) -> Vec<V> {
    assert!(rows >= m && cols >= n && data.len() == m * n * k);
    let mut out = vec![V::default(); rows * cols * k];
    for a in 0..m {
        let src = &data[a * n * k..(a + 1) * n * k];
        out[a * cols * k..a * cols * k + n * k].copy_from_slice(src);
    }
    out
}

/// Inverse of [`pad_plane`].
pub fn crop_plane<V: Copy>(data: &[V], rows: usize, cols: usize, k: usize, m: usize, n: usize) -> Vec<V> {
    assert!(rows >= m && cols >= n && data.len() == rows * cols * k);
    let mut out = Vec::with_capacity(m * n * k);
    for a in 0..m {
        out.extend_from_slice(&data[a * cols * k..a * cols * k + n * k]);
    }
    out
}

#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub volume: Arc<Volume>,
}

impl Subject {
    pub fn new(id: impl Into<String>, volume: Volume) -> Self {
        Subject {
            id: id.into(),
            volume: Arc::new(volume),
        }
    }
}

/// One slice of one subject in one view. Pixel data is read from the shared
/// volume on demand, which also gives access to the slice's neighbourhood.
#[derive(Debug, Clone)]
pub struct Sample {
    pub subject: String,
    pub view: View,
    pub index: usize,
    pub volume: Arc<Volume>,
}

impl Sample {
    pub fn plan(&self) -> ViewPlan {
        ViewPlan::new(self.volume.dims, self.view)
    }

    /// Normalized image slice `[m, n]`.
    pub fn image<T: Scalar>(&self) -> Tensor<T> {
        let plan = self.plan();
        let (lo, hi) = self.volume.intensity_range().unwrap_or((0.0, 0.0));
        let scale = if hi > lo { 1.0 / (hi - lo) } else { 0.0 };
        Tensor::from_fn(&[plan.m, plan.n], |k| {
            let v = self.volume.image[plan.voxel(k / plan.n, k % plan.n, self.index)];
            T::from_f64_lossy(((v - lo) * scale) as f64)
        })
    }

    /// Label slice, row-major `m × n`.
    pub fn labels(&self) -> Option<Vec<u8>> {
        let plan = self.plan();
        let labels = self.volume.labels.as_ref()?;
        Some(
            (0..plan.m * plan.n)
                .map(|k| labels[plan.voxel(k / plan.n, k % plan.n, self.index)])
                .collect(),
        )
    }
}

/// Every slice of every subject, in subject then slice order.
pub fn make_samples(subjects: &[Subject], view: View) -> Vec<Sample> {
    subjects
        .iter()
        .flat_map(|s| {
            let p = ViewPlan::new(s.volume.dims, view).p;
            (0..p).map(move |index| Sample {
                subject: s.id.clone(),
                view,
                index,
                volume: Arc::clone(&s.volume),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded subject-level k-fold partition. Test folds are contiguous chunks
/// of a shuffled order; the first `n mod k` folds get one extra subject.
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || k > ids.len() {
        return Err(Error::Config(format!("cannot split {} subjects into {k} folds", ids.len())));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("subject ids must be unique".into()));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut rng_for(seed, &[0x006b_666f_6c64]));
    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut start = 0;
    Ok((0..k)
        .map(|f| {
            let size = base + usize::from(f < extra);
            let test = order[start..start + size].to_vec();
            let train = order[..start].iter().chain(&order[start + size..]).cloned().collect();
            start += size;
            Fold { index: f, train, test }
        })
        .collect())
}
