//! Slice-wise compression of a slice's neighbourhood.
//!
//! For slice `i` of a view `[m, n, p]` the `2r` difference images
//! `I(i+j) - I(i)`, `j ∈ {-r..-1, 1..r}`, are put in a canonical order by their
//! L1 norm, squeezed to one logit each by an `m`-long and an `n`-long
//! depth-wise filter, and averaged with softmax weights into a single
//! compressed slice. The compressed slice is paired with the original slice as
//! the two-channel network input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::SpatialAxis;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryPolicy {
    /// Reflect about the edge slice without repeating it (`-1 → 1`).
    #[default]
    Mirror,
    /// Repeat the edge slice.
    Clamp,
    /// Treat missing neighbours as all-zero images.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffOrdering {
    /// Largest L1 norm first.
    #[default]
    Descending,
    Ascending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressionConfig {
    /// Neighbourhood radius `r`; `2r` difference images are compressed.
    pub radius: usize,
    pub boundary: BoundaryPolicy,
    pub ordering: DiffOrdering,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            radius: 5,
            boundary: BoundaryPolicy::Mirror,
            ordering: DiffOrdering::Descending,
        }
    }
}

impl CompressionConfig {
    pub fn depth(&self) -> usize {
        2 * self.radius
    }

    /// Checks `r >= 1` and `2r < p` for a view with `slice_count` slices.
    pub fn validate(&self, slice_count: usize) -> Result<()> {
        if self.radius == 0 {
            return Err(Error::Config("compression radius must be at least 1".into()));
        }
        if self.depth() >= slice_count {
            return Err(Error::Config(format!(
                "compression radius {} needs more than {} slices, view has {slice_count}",
                self.radius,
                self.depth()
            )));
        }
        Ok(())
    }

    /// Signed neighbour offsets in visiting order: `-r..=-1, 1..=r`.
    pub fn offsets(&self) -> Vec<isize> {
        let r = self.radius as isize;
        (-r..=r).filter(|&j| j != 0).collect()
    }
}

/// Difference images stored as channels of an `[m, n, k]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffStack<T> {
    pub diffs: Tensor<T>,
    /// Neighbour offset `j` of each channel.
    pub offsets: Vec<isize>,
    /// L1 norm of each channel.
    pub l1: Vec<T>,
    /// Channel permutation applied by [`order_by_l1`] (identity before).
    pub order: Vec<usize>,
}

impl<T: Scalar> DiffStack<T> {
    pub fn depth(&self) -> usize {
        self.offsets.len()
    }

    /// Reorders channels: channel `k` of the result is channel `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> DiffStack<T> {
        let s = self.diffs.shape();
        let k = s[2];
        assert_eq!(perm.len(), k, "permutation length must equal stack depth");
        let src = self.diffs.data();
        let data = Tensor::from_fn(s, |i| src[i - i % k + perm[i % k]]);
        DiffStack {
            diffs: data,
            offsets: perm.iter().map(|&p| self.offsets[p]).collect(),
            l1: perm.iter().map(|&p| self.l1[p]).collect(),
            order: perm.iter().map(|&p| self.order[p]).collect(),
        }
    }
}

fn resolve_neighbor(i: usize, j: isize, p: usize, policy: BoundaryPolicy) -> Option<usize> {
    let t = i as isize + j;
    let last = p as isize - 1;
    if (0..=last).contains(&t) {
        return Some(t as usize);
    }
    match policy {
        BoundaryPolicy::Mirror => {
            let reflected = if t < 0 { -t } else { 2 * last - t };
            Some(reflected.clamp(0, last) as usize)
        }
        BoundaryPolicy::Clamp => Some(t.clamp(0, last) as usize),
        BoundaryPolicy::Zero => None,
    }
}

fn check_view<T: Scalar>(view: &Tensor<T>, i: usize) -> Result<(usize, usize, usize)> {
    let &[m, n, p] = view.shape() else {
        return Err(Error::shape("compression", format!("view must be [m, n, p], got {:?}", view.shape())));
    };
    if i >= p {
        return Err(Error::Data(format!("slice index {i} out of range for {p} slices")));
    }
    Ok((m, n, p))
}

/// Unordered difference stack for slice `i` of a `[m, n, p]` view.
pub fn neighborhood_diffs<T: Scalar>(view: &Tensor<T>, i: usize, cfg: &CompressionConfig) -> Result<DiffStack<T>> {
    let (m, n, p) = check_view(view, i)?;
    cfg.validate(p)?;
    let offsets = cfg.offsets();
    let k = offsets.len();
    let v = view.data();
    let neighbors: Vec<Option<usize>> = offsets
        .iter()
        .map(|&j| resolve_neighbor(i, j, p, cfg.boundary))
        .collect();
    let mut diffs = vec![T::zero(); m * n * k];
    let mut l1 = vec![T::zero(); k];
    for px in 0..m * n {
        let centre = v[px * p + i];
        for (c, nb) in neighbors.iter().enumerate() {
            let other = nb.map_or(T::zero(), |t| v[px * p + t]);
            let d = other - centre;
            diffs[px * k + c] = d;
            l1[c] += d.abs();
        }
    }
    Ok(DiffStack {
        diffs: Tensor::new(&[m, n, k], diffs)?,
        offsets,
        l1,
        order: (0..k).collect(),
    })
}

/// Sorts channels by L1 norm (per `cfg.ordering`), breaking ties by offset `j`
/// ascending so the result is independent of the incoming channel order.
pub fn order_by_l1<T: Scalar>(stack: &DiffStack<T>, cfg: &CompressionConfig) -> DiffStack<T> {
    let mut perm: Vec<usize> = (0..stack.depth()).collect();
    perm.sort_by(|&a, &b| {
        let by_norm = stack.l1[a].partial_cmp(&stack.l1[b]).expect("finite L1 norms");
        let by_norm = match cfg.ordering {
            DiffOrdering::Descending => by_norm.reverse(),
            DiffOrdering::Ascending => by_norm,
        };
        by_norm.then(stack.offsets[a].cmp(&stack.offsets[b]))
    });
    stack.permuted(&perm)
}

/// Ordered `[m, n, 2r]` difference images for slice `i`.
pub fn ordered_diffs<T: Scalar>(view: &Tensor<T>, i: usize, cfg: &CompressionConfig) -> Result<Tensor<T>> {
    Ok(order_by_l1(&neighborhood_diffs(view, i, cfg)?, cfg).diffs)
}

/// Learned squeeze filters, bound to `(m, n, 2r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionParams<T> {
    /// `[m, 2r]`
    pub filter_h: Tensor<T>,
    /// `[n, 2r]`
    pub filter_w: Tensor<T>,
    pub bias_h: Tensor<T>,
    pub bias_w: Tensor<T>,
}

impl<T: Scalar> CompressionParams<T> {
    pub const NAMES: [&'static str; 4] = ["filter_h", "filter_w", "bias_h", "bias_w"];

    /// Mean filters and zero biases: every difference image starts with the
    /// same weight scale, so `z` is initially the per-image mean.
    pub fn init(rows: usize, cols: usize, depth: usize) -> Self {
        CompressionParams {
            filter_h: Tensor::full(&[rows, depth], T::from_f64_lossy(1.0 / rows as f64)),
            filter_w: Tensor::full(&[cols, depth], T::from_f64_lossy(1.0 / cols as f64)),
            bias_h: Tensor::zeros(&[depth]),
            bias_w: Tensor::zeros(&[depth]),
        }
    }

    pub fn random(rows: usize, cols: usize, depth: usize, rng: &mut impl Rng) -> Self {
        CompressionParams {
            filter_h: Tensor::uniform(&[rows, depth], -1.0, 1.0, rng),
            filter_w: Tensor::uniform(&[cols, depth], -1.0, 1.0, rng),
            bias_h: Tensor::uniform(&[depth], -1.0, 1.0, rng),
            bias_w: Tensor::uniform(&[depth], -1.0, 1.0, rng),
        }
    }

    /// `2r·(m+n) + 2·2r`.
    pub fn closed_form_count(rows: usize, cols: usize, depth: usize) -> usize {
        depth * (rows + cols) + 2 * depth
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.filter_h.shape()[0], self.filter_w.shape()[0], self.filter_h.shape()[1])
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 4] {
        [
            (Self::NAMES[0], &self.filter_h),
            (Self::NAMES[1], &self.filter_w),
            (Self::NAMES[2], &self.bias_h),
            (Self::NAMES[3], &self.bias_w),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> CompressionVars {
        let (rows, cols, depth) = self.dims();
        CompressionVars {
            rows,
            cols,
            depth,
            filter_h: g.param(self.filter_h.clone()),
            filter_w: g.param(self.filter_w.clone()),
            bias_h: g.param(self.bias_h.clone()),
            bias_w: g.param(self.bias_w.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CompressionVars {
    pub rows: usize,
    pub cols: usize,
    pub depth: usize,
    pub filter_h: Var,
    pub filter_w: Var,
    pub bias_h: Var,
    pub bias_w: Var,
}

impl CompressionVars {
    /// Softmax weights `[N, 1, 1, 2r]` for ordered diffs `[N, m, n, 2r]`.
    pub fn weights<T: Scalar>(&self, g: &mut Graph<T>, diffs: Var) -> Result<Var> {
        let s = g.shape(diffs);
        if s.len() != 4 || s[1..] != [self.rows, self.cols, self.depth] {
            return Err(Error::shape(
                "compress",
                format!(
                    "parameters bound to m×n×2r = {}×{}×{}, got difference stack {s:?}",
                    self.rows, self.cols, self.depth
                ),
            ));
        }
        let rows = g.depthwise_axis_conv(diffs, SpatialAxis::H, self.filter_h, self.bias_h)?;
        let z = g.depthwise_axis_conv(rows, SpatialAxis::W, self.filter_w, self.bias_w)?;
        g.softmax(z, &[3])
    }

    /// Weighted average of the ordered diffs, `[N, m, n, 1]`.
    pub fn compress<T: Scalar>(&self, g: &mut Graph<T>, diffs: Var) -> Result<Var> {
        let w = self.weights(g, diffs)?;
        let scaled = g.channel_scale(diffs, w)?;
        g.sum_axis(scaled, 3)
    }
}

fn as_batch<T: Scalar>(diffs: Tensor<T>) -> Result<Tensor<T>> {
    let s = diffs.shape().to_vec();
    diffs.reshape(&[1, s[0], s[1], s[2]])
}

/// Softmax weights applied to the ordered diffs of slice `i`.
pub fn compression_weights<T: Scalar>(
    view: &Tensor<T>,
    i: usize,
    params: &CompressionParams<T>,
    cfg: &CompressionConfig,
) -> Result<Vec<T>> {
    let diffs = as_batch(ordered_diffs(view, i, cfg)?)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let d = g.constant(diffs);
    let w = vars.weights(&mut g, d)?;
    Ok(g.value(w).data().to_vec())
}

/// Compressed slice `[m, n]` for slice `i`.
pub fn compress<T: Scalar>(
    view: &Tensor<T>,
    i: usize,
    params: &CompressionParams<T>,
    cfg: &CompressionConfig,
) -> Result<Tensor<T>> {
    let (m, n, _) = check_view(view, i)?;
    let diffs = as_batch(ordered_diffs(view, i, cfg)?)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let d = g.constant(diffs);
    let out = vars.compress(&mut g, d)?;
    g.value(out).clone().reshape(&[m, n])
}

/// Two-channel network input `[m, n, 2]`: the slice itself and its
/// compressed neighbourhood.
pub fn make_input_pair<T: Scalar>(
    view: &Tensor<T>,
    i: usize,
    params: &CompressionParams<T>,
    cfg: &CompressionConfig,
) -> Result<Tensor<T>> {
    let compressed = compress(view, i, params, cfg)?;
    let (m, n, _) = check_view(view, i)?;
    let slice = view_slice(view, i)?;
    let slice = slice.reshape(&[m, n, 1])?;
    Tensor::concat(&[&slice, &compressed.reshape(&[m, n, 1])?], 2)
}

/// Slice `i` of a `[m, n, p]` view as `[m, n]`.
pub fn view_slice<T: Scalar>(view: &Tensor<T>, i: usize) -> Result<Tensor<T>> {
    let (m, n, p) = check_view(view, i)?;
    let v = view.data();
    Tensor::new(&[m, n], (0..m * n).map(|px| v[px * p + i]).collect())
}
