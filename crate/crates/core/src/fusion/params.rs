//! Layer parameter containers, seeded initialization, and the on-disk
//! parameter bundle (a directory of BTF1 files plus `manifest.json`).

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::btf;
use crate::error::{BevError, Result};
use crate::io;
use crate::tensor::{conv2d, conv2d_vjp, Kernel, Tensor};

/// Number of lane-direction classes (10° each).
pub const DIRECTION_CLASSES: usize = 36;

/// Channel widths of every learned layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    /// RGB plus the sparse-depth channel.
    pub image_channels: usize,
    pub stem_hidden: usize,
    /// `C_F`.
    pub feature_channels: usize,
    pub depth_bins: usize,
    /// Rasterized point-cloud channels fed to the LiDAR stem.
    pub lidar_in: usize,
    /// `C_L`.
    pub lidar_channels: usize,
    /// `C_B`.
    pub bottleneck_channels: usize,
    /// `d_k`.
    pub attn_dim: usize,
    pub value_dim: usize,
    pub reduced_channels: usize,
    pub align_hidden: usize,
    /// Segmentation classes including background.
    pub classes: usize,
    pub embed_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            image_channels: 4,
            stem_hidden: 8,
            feature_channels: 8,
            depth_bins: 88,
            lidar_in: 3,
            lidar_channels: 8,
            bottleneck_channels: 16,
            attn_dim: 8,
            value_dim: 8,
            reduced_channels: 8,
            align_hidden: 16,
            classes: 4,
            embed_dim: 4,
        }
    }
}

impl ModelDims {
    /// Layer widths of the reference architecture tables.
    pub fn full_scale() -> Self {
        ModelDims {
            lidar_channels: 128,
            bottleneck_channels: 256,
            align_hidden: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.image_channels,
            self.stem_hidden,
            self.feature_channels,
            self.depth_bins,
            self.lidar_in,
            self.lidar_channels,
            self.bottleneck_channels,
            self.attn_dim,
            self.value_dim,
            self.reduced_channels,
            self.align_hidden,
            self.classes,
            self.embed_dim,
        ];
        if all.contains(&0) || self.classes < 2 {
            return Err(BevError::Config(format!("invalid model dims {self:?}")));
        }
        Ok(())
    }
}

/// Visits every tensor of a parameter group under a dotted name.
pub trait ParamSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub type ParamGrads = BTreeMap<String, Tensor>;

/// Adds `g` into `grads[name]`.
pub(crate) fn accumulate(grads: &mut ParamGrads, name: String, g: Tensor) {
    match grads.get_mut(&name) {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => {
            grads.insert(name, g);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Kernel,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    /// `size × size` kernel with "same" padding at the given stride.
    pub fn random(size: usize, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let a = (3.0 / (size * size * cin) as f32).sqrt();
        let weight = Tensor::random_uniform(&[size, size, cin, cout], -a, a, rng);
        let bias = Tensor::random_uniform(&[cout], -0.05, 0.05, rng);
        ConvLayer {
            kernel: Kernel { weight, bias },
            stride,
            padding: size / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.bias.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.kernel, self.stride, self.padding)
    }

    /// Returns the input gradient and records parameter gradients.
    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        prefix: &str,
        grads: &mut ParamGrads,
    ) -> Result<Tensor> {
        let mut gp = conv2d_vjp(x, &self.kernel, self.stride, self.padding, grad_out)?;
        let gw = gp.grads.remove("weight").expect("conv weight grad");
        let gb = gp.grads.remove("bias").expect("conv bias grad");
        accumulate(grads, join(prefix, "weight"), gw);
        accumulate(grads, join(prefix, "bias"), gb);
        Ok(gp.grads.remove("input").expect("conv input grad"))
    }

    /// Output extents for an input of `(rows, cols)`.
    pub fn output_shape(&self, rows: usize, cols: usize) -> [usize; 3] {
        let k = self.kernel.weight.shape();
        [
            (rows + 2 * self.padding - k[0]) / self.stride + 1,
            (cols + 2 * self.padding - k[1]) / self.stride + 1,
            self.out_channels(),
        ]
    }
}

impl ParamSet for ConvLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.kernel.weight);
        f(join(prefix, "bias"), &self.kernel.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.kernel.weight);
        f(join(prefix, "bias"), &mut self.kernel.bias);
    }
}

/// Inference-form batch norm: per-channel scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub scale: Tensor,
    pub shift: Tensor,
}

impl Norm {
    pub fn random(c: usize, rng: &mut impl Rng) -> Self {
        Norm {
            scale: Tensor::random_uniform(&[c], 0.8, 1.2, rng),
            shift: Tensor::random_uniform(&[c], -0.05, 0.05, rng),
        }
    }

    pub fn identity(c: usize) -> Self {
        Norm {
            scale: Tensor::full(&[c], 1.0),
            shift: Tensor::zeros(&[c]),
        }
    }
}

impl ParamSet for Norm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "scale"), &self.scale);
        f(join(prefix, "shift"), &self.shift);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "scale"), &mut self.scale);
        f(join(prefix, "shift"), &mut self.shift);
    }
}

/// Fully-connected layer `y = x·W + b` with `W: [in × out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn random(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let a = (3.0 / cin as f32).sqrt();
        Linear {
            weight: Tensor::random_uniform(&[cin, cout], -a, a, rng),
            bias: Tensor::random_uniform(&[cout], -0.05, 0.05, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl ParamSet for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

macro_rules! param_group {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl ParamSet for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
                $( self.$field.visit(&join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
                $( self.$field.visit_mut(&join(prefix, stringify!($field)), f); )*
            }
        }
    };
}

/// Two strided convolutions producing image features and depth logits.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraStem {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}
param_group!(CameraStem { conv1, conv2 });

/// Two same-size convolutions over the rasterized point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct LidarStem {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}
param_group!(LidarStem { conv1, conv2 });

/// LiDAR BEV prediction encoder: conv/norm/relu, pool, conv/norm/relu, pool,
/// conv/norm/relu.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub conv1: ConvLayer,
    pub norm1: Norm,
    pub conv2: ConvLayer,
    pub norm2: Norm,
    pub conv3: ConvLayer,
    pub norm3: Norm,
}
param_group!(EncoderParams { conv1, norm1, conv2, norm2, conv3, norm3 });

/// Query/key/value projections plus the channel-reduce and merge convs.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub reduce: ConvLayer,
    pub merge: ConvLayer,
}
param_group!(AttentionParams { query, key, value, reduce, merge });

/// Decoder: conv/norm/relu, unpool, conv/norm/relu, unpool, conv.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub conv1: ConvLayer,
    pub norm1: Norm,
    pub conv2: ConvLayer,
    pub norm2: Norm,
    pub conv3: ConvLayer,
}
param_group!(DecoderParams { conv1, norm1, conv2, norm2, conv3 });

/// Flow predictor: 1×1 conv/norm/relu then 3×3 conv to two channels.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignParams {
    pub conv1: ConvLayer,
    pub norm1: Norm,
    pub conv2: ConvLayer,
}
param_group!(AlignParams { conv1, norm1, conv2 });

/// Map decoder heads over the fused BEV features.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub seg: ConvLayer,
    pub embed: ConvLayer,
    pub dir: ConvLayer,
}
param_group!(HeadParams { seg, embed, dir });

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub camera_stem: CameraStem,
    pub lidar_stem: LidarStem,
    pub encoder: EncoderParams,
    pub attention: AttentionParams,
    pub decoder: DecoderParams,
    pub align: AlignParams,
    pub heads: HeadParams,
}

impl ParamSet for ModelParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.camera_stem.visit(&join(prefix, "camera_stem"), f);
        self.lidar_stem.visit(&join(prefix, "lidar_stem"), f);
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.attention.visit(&join(prefix, "attention"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.align.visit(&join(prefix, "align"), f);
        self.heads.visit(&join(prefix, "heads"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.camera_stem.visit_mut(&join(prefix, "camera_stem"), f);
        self.lidar_stem.visit_mut(&join(prefix, "lidar_stem"), f);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.align.visit_mut(&join(prefix, "align"), f);
        self.heads.visit_mut(&join(prefix, "heads"), f);
    }
}

impl EncoderParams {
    pub fn random(d: &ModelDims, rng: &mut impl Rng) -> Self {
        let (cl, cb) = (d.lidar_channels, d.bottleneck_channels);
        EncoderParams {
            conv1: ConvLayer::random(3, cl, cb, 1, rng),
            norm1: Norm::random(cb, rng),
            conv2: ConvLayer::random(3, cb, cb, 1, rng),
            norm2: Norm::random(cb, rng),
            conv3: ConvLayer::random(3, cb, cb, 1, rng),
            norm3: Norm::random(cb, rng),
        }
    }
}

impl AttentionParams {
    pub fn random(d: &ModelDims, rng: &mut impl Rng) -> Self {
        let cb = d.bottleneck_channels;
        AttentionParams {
            query: Linear::random(cb, d.attn_dim, rng),
            key: Linear::random(d.feature_channels, d.attn_dim, rng),
            value: Linear::random(d.feature_channels, d.value_dim, rng),
            reduce: ConvLayer::random(1, d.value_dim, d.reduced_channels, 1, rng),
            merge: ConvLayer::random(1, cb + d.reduced_channels, cb, 1, rng),
        }
    }
}

impl DecoderParams {
    pub fn random(d: &ModelDims, rng: &mut impl Rng) -> Self {
        let (cl, cb) = (d.lidar_channels, d.bottleneck_channels);
        DecoderParams {
            conv1: ConvLayer::random(3, cb, cb, 1, rng),
            norm1: Norm::random(cb, rng),
            conv2: ConvLayer::random(3, cb, cb, 1, rng),
            norm2: Norm::random(cb, rng),
            conv3: ConvLayer::random(3, cb, cl, 1, rng),
        }
    }
}

impl AlignParams {
    pub fn random(d: &ModelDims, rng: &mut impl Rng) -> Self {
        AlignParams {
            conv1: ConvLayer::random(1, d.feature_channels + d.lidar_channels, d.align_hidden, 1, rng),
            norm1: Norm::random(d.align_hidden, rng),
            conv2: ConvLayer::random(3, d.align_hidden, 2, 1, rng),
        }
    }
}

impl ModelParams {
    /// Seeded random initialization.
    pub fn random(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = &dims;
        let fused = d.feature_channels + d.lidar_channels;
        Ok(ModelParams {
            dims,
            camera_stem: CameraStem {
                conv1: ConvLayer::random(3, d.image_channels, d.stem_hidden, 2, &mut rng),
                conv2: ConvLayer::random(
                    3,
                    d.stem_hidden,
                    d.feature_channels + d.depth_bins,
                    2,
                    &mut rng,
                ),
            },
            lidar_stem: LidarStem {
                conv1: ConvLayer::random(3, d.lidar_in, d.lidar_channels, 1, &mut rng),
                conv2: ConvLayer::random(3, d.lidar_channels, d.lidar_channels, 1, &mut rng),
            },
            encoder: EncoderParams::random(d, &mut rng),
            attention: AttentionParams::random(d, &mut rng),
            decoder: DecoderParams::random(d, &mut rng),
            align: AlignParams::random(d, &mut rng),
            heads: HeadParams {
                seg: ConvLayer::random(3, fused, d.classes, 1, &mut rng),
                embed: ConvLayer::random(3, fused, d.embed_dim, 1, &mut rng),
                dir: ConvLayer::random(3, fused, DIRECTION_CLASSES, 1, &mut rng),
            },
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t.clone())));
        out
    }

    /// Writes `<name>.btf` per tensor plus `manifest.json`
    /// (`{"dims": {...}, "tensors": {name: {"file", "shape"}}}`).
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for (name, t) in self.named_tensors() {
            let file = format!("{name}.btf");
            btf::write(&dir.join(&file), &t)?;
            tensors.insert(
                name,
                ManifestEntry {
                    file,
                    shape: t.shape().to_vec(),
                },
            );
        }
        io::write_json(
            &dir.join("manifest.json"),
            &Manifest {
                dims: self.dims,
                tensors,
            },
        )
    }

    /// Loads a bundle written by [`ModelParams::save_dir`]; every tensor the
    /// dims imply must be present with the recorded shape.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: Manifest = io::read_json(&manifest_path)?;
        let mut params = ModelParams::random(manifest.dims, 0)?;
        let mut err = None;
        params.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            let res = (|| {
                let entry = manifest.tensors.get(&name).ok_or_else(|| {
                    BevError::format(&manifest_path, format!("missing tensor {name}"))
                })?;
                let path = dir.join(&entry.file);
                let loaded = btf::read(&path)?;
                if loaded.shape() != t.shape() || entry.shape != t.shape() {
                    return Err(BevError::format(
                        &path,
                        format!("shape {:?}, expected {:?}", loaded.shape(), t.shape()),
                    ));
                }
                *t = loaded;
                Ok(())
            })();
            if let Err(e) = res {
                err = Some(e);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(params),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    file: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    dims: ModelDims,
    tensors: BTreeMap<String, ManifestEntry>,
}
