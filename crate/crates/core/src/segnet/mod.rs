//! The four ablation networks and their parameter registry.
//!
//! All variants share one U-Net backbone: per level two 3×3 same convs with
//! ReLU, an attention block (variant-dependent), dropout; 2×2 max-pool on the
//! way down; nearest 2× upsample + 2×2 conv + ReLU on the way up, concatenated
//! with the skip; a 1×1 head with softmax over classes.
//!
//! | variant  | input channels | attention     | compression |
//! |----------|----------------|---------------|-------------|
//! | `plain`  | 1              | none          | no          |
//! | `cscse`  | 1              | sigmoid scSE  | no          |
//! | `mse`    | 1              | softmax MSE   | no          |
//! | `mda`    | 2              | softmax MSE   | yes         |

mod checkpoint;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, TensorRecord, MAGIC};

use crate::attention::{AttentionScale, MseBlockParams, MseVars, ScseBlockParams, ScseVars, SeVars};
use crate::compression::{CompressionConfig, CompressionParams, CompressionVars};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, name_hash, rng_for};
use crate::tensor::kernels::Padding;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Plain,
    Cscse,
    Mse,
    Mda,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Plain, Variant::Cscse, Variant::Mse, Variant::Mda];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Cscse => "cscse",
            Variant::Mse => "mse",
            Variant::Mda => "mda",
        }
    }

    pub fn in_channels(self) -> usize {
        if self == Variant::Mda {
            2
        } else {
            1
        }
    }

    pub fn uses_compression(self) -> bool {
        self == Variant::Mda
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}' (expected plain, cscse, mse or mda)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Encoder levels including the bottleneck.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub attention_scale: AttentionScale,
    /// Present exactly for the `mda` variant.
    pub compression: Option<CompressionConfig>,
    /// Input slice height; attention and compression filters are bound to it.
    pub height: usize,
    pub width: usize,
}

/// In-plane size of an iSeg-shaped sagittal slice (144×256×192 volume).
pub const FULL_SCALE_SLICE: (usize, usize) = (256, 192);

impl ModelConfig {
    /// Defaults: depth 5, base 32, 4 classes, dropout 0.3, literal softmax.
    pub fn new(variant: Variant, height: usize, width: usize) -> Self {
        ModelConfig {
            variant,
            depth: 5,
            base_channels: 32,
            in_channels: variant.in_channels(),
            num_classes: 4,
            dropout_rate: 0.3,
            attention_scale: AttentionScale::None,
            compression: variant.uses_compression().then(CompressionConfig::default),
            height,
            width,
        }
    }

    /// Full-size configuration on iSeg sagittal slices.
    pub fn full_scale(variant: Variant) -> Self {
        Self::new(variant, FULL_SCALE_SLICE.0, FULL_SCALE_SLICE.1)
    }

    /// Same hyperparameters, different variant (input channels and
    /// compression follow the variant).
    pub fn with_variant(&self, variant: Variant) -> Self {
        ModelConfig {
            variant,
            in_channels: variant.in_channels(),
            compression: variant
                .uses_compression()
                .then(|| self.compression.unwrap_or_default()),
            ..self.clone()
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn level_dims(&self, level: usize) -> (usize, usize) {
        (self.height >> level, self.width >> level)
    }

    /// Spatial extents must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.base_channels == 0 || self.height == 0 || self.width == 0 {
            return fail("depth, base_channels, height and width must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if self.in_channels != self.variant.in_channels() {
            return fail(format!(
                "variant {} takes {} input channel(s), config says {}",
                self.variant,
                self.variant.in_channels(),
                self.in_channels
            ));
        }
        if self.compression.is_some() != self.variant.uses_compression() {
            return fail(format!(
                "compression settings must be present for mda and absent otherwise (variant {})",
                self.variant
            ));
        }
        if let Some(c) = &self.compression {
            if c.radius == 0 {
                return fail("compression radius must be at least 1".into());
            }
        }
        let mult = self.spatial_multiple();
        if !self.height.is_multiple_of(mult) || !self.width.is_multiple_of(mult) {
            return fail(format!(
                "input {}×{} is not divisible by 2^(depth-1) = {mult}; pad slices first",
                self.height, self.width
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Attention,
    Compression,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

/// Ordered registry of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ModelParams<T> {
    fn default() -> Self {
        ModelParams {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("parameter '{name}' registered twice")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, group, tensor });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(|i| &mut self.entries[i].tensor)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|e| &mut e.tensor)
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }
}

/// Parameter totals split by module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub backbone: usize,
    pub attention: usize,
    pub compression: usize,
    /// Per-block totals (`enc0.conv1`, `enc2.att`, `compress`, ...) in registry order.
    pub blocks: Vec<(String, usize)>,
}

impl ParamCount {
    pub fn of<T: Scalar>(params: &ModelParams<T>) -> Self {
        let mut count = ParamCount {
            total: 0,
            backbone: 0,
            attention: 0,
            compression: 0,
            blocks: Vec::new(),
        };
        for e in params.entries() {
            let n = e.tensor.numel();
            count.total += n;
            match e.group {
                ParamGroup::Backbone => count.backbone += n,
                ParamGroup::Attention => count.attention += n,
                ParamGroup::Compression => count.compression += n,
            }
            let block = e.name.rsplit_once('.').map_or(e.name.as_str(), |(b, _)| b);
            match count.blocks.last_mut() {
                Some((name, total)) if name == block => *total += n,
                _ => count.blocks.push((block.to_string(), n)),
            }
        }
        count
    }
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "total        {:>12}", self.total)?;
        writeln!(f, "backbone     {:>12}", self.backbone)?;
        writeln!(f, "attention    {:>12}", self.attention)?;
        writeln!(f, "compression  {:>12}", self.compression)?;
        for (name, n) in &self.blocks {
            writeln!(f, "  {name:<18}{n:>10}")?;
        }
        Ok(())
    }
}

/// One batch of network input.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[N, H, W, 1]` slices.
    pub images: Tensor<T>,
    /// `[N, H, W, 2r]` ordered difference images (mda only).
    pub diffs: Option<Tensor<T>>,
}

enum BlockKind {
    None,
    Mse(MseVars),
    Scse(ScseVars),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNet<T> {
    config: ModelConfig,
    params: ModelParams<T>,
}

fn conv_name(prefix: &str, conv: &str) -> (String, String) {
    (format!("{prefix}.{conv}.kernel"), format!("{prefix}.{conv}.bias"))
}

impl<T: Scalar> SegNet<T> {
    /// Builds the network with seeded He-uniform conv kernels and zero biases.
    /// Each tensor's stream is derived from `seed` and its name, so variants
    /// built from the same seed share identical backbone weights.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ModelParams::default();
        let c = &config;

        let conv = |params: &mut ModelParams<T>, prefix: &str, name: &str, k: usize, cin: usize, cout: usize| {
            let (kn, bn) = conv_name(prefix, name);
            let mut rng = rng_for(seed, &[name_hash(&kn)]);
            params.insert(&kn, ParamGroup::Backbone, Tensor::he_uniform(&[k, k, cin, cout], k * k * cin, &mut rng))?;
            params.insert(bn, ParamGroup::Backbone, Tensor::zeros(&[cout]))
        };
        let attention = |params: &mut ModelParams<T>, prefix: &str, level: usize| -> Result<()> {
            let (h, w) = c.level_dims(level);
            let ch = c.channels(level);
            let name = format!("{prefix}.att");
            let mut rng = rng_for(seed, &[name_hash(&name)]);
            match c.variant {
                Variant::Plain => Ok(()),
                Variant::Mse | Variant::Mda => {
                    let block = MseBlockParams::<T>::init(h, w, ch, &mut rng);
                    for (n, t) in block.tensors() {
                        params.insert(format!("{name}.{n}"), ParamGroup::Attention, t.clone())?;
                    }
                    Ok(())
                }
                Variant::Cscse => {
                    let block = ScseBlockParams::<T>::init(ch, &mut rng);
                    for (n, t) in block.tensors() {
                        params.insert(format!("{name}.{n}"), ParamGroup::Attention, t.clone())?;
                    }
                    Ok(())
                }
            }
        };

        if let Some(cc) = &c.compression {
            let block = CompressionParams::<T>::init(c.height, c.width, cc.depth());
            for (n, t) in block.tensors() {
                params.insert(format!("compress.{n}"), ParamGroup::Compression, t.clone())?;
            }
        }
        let mut cin = c.in_channels;
        for level in 0..c.depth {
            let prefix = format!("enc{level}");
            let ch = c.channels(level);
            conv(&mut params, &prefix, "conv1", 3, cin, ch)?;
            conv(&mut params, &prefix, "conv2", 3, ch, ch)?;
            attention(&mut params, &prefix, level)?;
            cin = ch;
        }
        for level in (0..c.depth - 1).rev() {
            let prefix = format!("dec{level}");
            let ch = c.channels(level);
            conv(&mut params, &prefix, "up", 2, c.channels(level + 1), ch)?;
            conv(&mut params, &prefix, "conv1", 3, 2 * ch, ch)?;
            conv(&mut params, &prefix, "conv2", 3, ch, ch)?;
            attention(&mut params, &prefix, level)?;
        }
        conv(&mut params, "head", "conv", 1, c.channels(0), c.num_classes)?;
        Ok(SegNet { config, params })
    }

    /// Reassembles a network from stored parameters, checking that names and
    /// shapes match the manifest the configuration implies.
    pub fn from_parts(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        let skeleton = Self::build(config.clone(), 0)?;
        let expected: Vec<(&str, &[usize])> = skeleton
            .params
            .entries()
            .iter()
            .map(|e| (e.name.as_str(), e.tensor.shape()))
            .collect();
        let got: Vec<(&str, &[usize])> = params
            .entries()
            .iter()
            .map(|e| (e.name.as_str(), e.tensor.shape()))
            .collect();
        if expected != got {
            let listing: Vec<String> = expected.iter().map(|(n, s)| format!("{n}{s:?}")).collect();
            return Err(Error::Config(format!(
                "parameters do not match the {} manifest; expected {} tensors: {}",
                config.variant,
                expected.len(),
                listing.join(", ")
            )));
        }
        Ok(SegNet { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> ParamCount {
        ParamCount::of(&self.params)
    }

    /// Records every parameter as a differentiable leaf, in registry order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.entries().iter().map(|e| g.param(e.tensor.clone())).collect()
    }

    fn var(&self, bound: &[Var], name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| bound[i])
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    fn conv_vars(&self, bound: &[Var], prefix: &str, conv: &str) -> Result<(Var, Var)> {
        let (k, b) = conv_name(prefix, conv);
        Ok((self.var(bound, &k)?, self.var(bound, &b)?))
    }

    fn block_vars(&self, bound: &[Var], prefix: &str, level: usize) -> Result<BlockKind> {
        let p = |n: &str| self.var(bound, &format!("{prefix}.att.{n}"));
        let (h, w) = self.config.level_dims(level);
        Ok(match self.config.variant {
            Variant::Plain => BlockKind::None,
            Variant::Mse | Variant::Mda => BlockKind::Mse(MseVars {
                height: h,
                width: w,
                channels: self.config.channels(level),
                sse_kernel: p("sse_kernel")?,
                sse_bias: p("sse_bias")?,
                cse_filter_h: p("cse_filter_h")?,
                cse_filter_w: p("cse_filter_w")?,
                cse_bias_h: p("cse_bias_h")?,
                cse_bias_w: p("cse_bias_w")?,
            }),
            Variant::Cscse => BlockKind::Scse(ScseVars {
                se: SeVars {
                    channels: self.config.channels(level),
                    fc1_w: p("fc1_w")?,
                    fc1_b: p("fc1_b")?,
                    fc2_w: p("fc2_w")?,
                    fc2_b: p("fc2_b")?,
                },
                sse_kernel: p("sse_kernel")?,
                sse_bias: p("sse_bias")?,
            }),
        })
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<usize> {
        let c = &self.config;
        let [n, h, w, ch] = batch.images.dims4("forward")?;
        if (h, w, ch) != (c.height, c.width, 1) {
            return Err(Error::shape(
                "forward",
                format!("network expects [N,{},{},1] slices, got {:?}", c.height, c.width, batch.images.shape()),
            ));
        }
        if let Some(cc) = &c.compression {
            let d = batch
                .diffs
                .as_ref()
                .ok_or_else(|| Error::Config("mda variant needs difference images".into()))?;
            if d.shape() != [n, h, w, cc.depth()] {
                return Err(Error::shape(
                    "forward",
                    format!("difference images must be [{n},{h},{w},{}], got {:?}", cc.depth(), d.shape()),
                ));
            }
        }
        Ok(n)
    }

    /// Records the forward pass; returns class probabilities `[N, H, W, K]`.
    /// Dropout masks are seeded from `seed` and the layer position.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        batch: &Batch<T>,
        train: bool,
        seed: u64,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let c = &self.config;
        let mut x = g.constant(batch.images.clone());
        if c.variant.uses_compression() {
            let cc = c.compression.as_ref().expect("validated");
            let vars = CompressionVars {
                rows: c.height,
                cols: c.width,
                depth: cc.depth(),
                filter_h: self.var(bound, "compress.filter_h")?,
                filter_w: self.var(bound, "compress.filter_w")?,
                bias_h: self.var(bound, "compress.bias_h")?,
                bias_w: self.var(bound, "compress.bias_w")?,
            };
            let diffs = g.constant(batch.diffs.clone().expect("checked"));
            let compressed = vars.compress(g, diffs)?;
            x = g.concat(&[x, compressed], 3)?;
        }

        let mut layer = 0u64;
        let mut stage = |g: &mut Graph<T>, x: Var, prefix: &str, level: usize| -> Result<Var> {
            let (k1, b1) = self.conv_vars(bound, prefix, "conv1")?;
            let (k2, b2) = self.conv_vars(bound, prefix, "conv2")?;
            let y = g.conv2d(x, k1, b1, Padding::Same, 1)?;
            let y = g.relu(y)?;
            let y = g.conv2d(y, k2, b2, Padding::Same, 1)?;
            let y = g.relu(y)?;
            let y = match self.block_vars(bound, prefix, level)? {
                BlockKind::None => y,
                BlockKind::Mse(v) => v.forward(g, y, c.attention_scale)?,
                BlockKind::Scse(v) => v.forward(g, y)?,
            };
            layer += 1;
            g.dropout(y, c.dropout_rate, train, derive_seed(seed, &[layer]))
        };

        let mut skips = Vec::with_capacity(c.depth);
        for level in 0..c.depth {
            if level > 0 {
                x = g.maxpool2(x)?;
            }
            x = stage(g, x, &format!("enc{level}"), level)?;
            skips.push(x);
        }
        skips.pop();
        for level in (0..c.depth - 1).rev() {
            let prefix = format!("dec{level}");
            let (ku, bu) = self.conv_vars(bound, &prefix, "up")?;
            let up = g.upsample2(x)?;
            let up = g.conv2d(up, ku, bu, Padding::Same, 1)?;
            let up = g.relu(up)?;
            let merged = g.concat(&[skips[level], up], 3)?;
            x = stage(g, merged, &prefix, level)?;
        }
        let (kh, bh) = self.conv_vars(bound, "head", "conv")?;
        let logits = g.conv2d(x, kh, bh, Padding::Same, 1)?;
        g.softmax(logits, &[3])
    }

    /// Class probabilities `[N, H, W, K]`.
    pub fn forward(&self, batch: &Batch<T>, train: bool, seed: u64) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let out = self.forward_graph(&mut g, &bound, batch, train, seed)?;
        Ok(g.value(out).clone())
    }
}

/// Closed-form parameter count of the plain backbone.
pub fn backbone_closed_form(c: &ModelConfig) -> usize {
    let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
    let mut total = 0;
    let mut cin = c.in_channels;
    for level in 0..c.depth {
        let ch = c.channels(level);
        total += conv(3, cin, ch) + conv(3, ch, ch);
        cin = ch;
    }
    for level in 0..c.depth - 1 {
        let ch = c.channels(level);
        total += conv(2, c.channels(level + 1), ch) + conv(3, 2 * ch, ch) + conv(3, ch, ch);
    }
    total + conv(1, c.channels(0), c.num_classes)
}

/// Closed-form attention cost summed over every resolution the blocks visit
/// (each encoder level including the bottleneck, and each decoder level).
pub fn attention_closed_form(c: &ModelConfig) -> usize {
    let levels = (0..c.depth).chain(0..c.depth - 1);
    levels
        .map(|l| {
            let (h, w) = c.level_dims(l);
            let ch = c.channels(l);
            match c.variant {
                Variant::Plain => 0,
                Variant::Mse | Variant::Mda => MseBlockParams::<f64>::closed_form_count(h, w, ch),
                Variant::Cscse => ScseBlockParams::<f64>::closed_form_count(ch),
            }
        })
        .sum()
}
