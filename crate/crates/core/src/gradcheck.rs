//! Finite-difference verification of every analytic gradient.
//!
//! Each op is evaluated on random toy instances with inputs in `[-1, 1]`.
//! Tensor-valued ops are reduced to a scalar by a fixed random projection
//! `Σ r·y`. An element whose central difference disagrees with the analytic
//! value is accepted only if it sits on a kink (ReLU, max-pool, hinge): the
//! two one-sided slopes differ and the analytic value matches one of them.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bev::BevConfig;
use crate::camera::{CameraModel, DepthBinning};
use crate::error::{BevError, Result};
use crate::fusion::params::{AlignParams, AttentionParams, ParamSet};
use crate::fusion::{
    bev_decode, bev_decode_backward, bev_encode, bev_encode_backward, cross_attend, cross_attend_backward,
    fuse_bev, fuse_bev_vjp, fusion_backward, fusion_forward, predict_flow, predict_flow_backward, warp_bev,
    warp_bev_vjp, FlowField, FrustumGrid, ModelDims, ModelParams, ParamGrads,
};
use crate::losses::{
    depth_focal_loss, direction_loss, head_losses, instance_loss, seg_loss, HeadOutputs, LossTargets,
    LossWeights, NO_LANE,
};
use crate::par;
use crate::tensor::{
    affine_norm, affine_norm_vjp, conv2d, conv2d_vjp, finite_diff_grad, matmul, matmul_vjp, softmax_lastdim,
    softmax_lastdim_vjp, Kernel, Tensor,
};

pub const STEP: f32 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
pub const INSTANCES: usize = 5;
/// Kinks allowed per checked element.
pub const MAX_KINK_FRACTION: f64 = 0.05;
/// Errors above this fraction of the tolerance get the one-sided kink test.
const KINK_PROBE: f64 = 0.1;

/// Ops in suite order.
pub const OPS: [&str; 17] = [
    "matmul",
    "softmax",
    "conv2d",
    "affine_norm",
    "lift_splat",
    "bev_encode",
    "cross_attend",
    "bev_decode",
    "predict_flow",
    "warp_bev",
    "fuse_bev",
    "seg_loss",
    "instance_loss",
    "direction_loss",
    "depth_focal_loss",
    "total_loss",
    "fusion_chain",
];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Comparison {
    pub checked: usize,
    pub kinks: usize,
    pub max_err: f64,
}

impl Comparison {
    fn merge(&mut self, o: Comparison) {
        self.checked += o.checked;
        self.kinks += o.kinks;
        self.max_err = self.max_err.max(o.max_err);
    }
}

/// Compares an analytic gradient of `f` at `x` against central differences.
pub fn compare(f: impl Fn(&Tensor) -> f64, x: &Tensor, analytic: &Tensor) -> Result<Comparison> {
    if analytic.shape() != x.shape() {
        return Err(BevError::Oracle(format!(
            "analytic gradient {:?} for input {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    let numeric = finite_diff_grad(&f, x, STEP)?;
    let mut out = Comparison {
        checked: x.len(),
        ..Comparison::default()
    };
    let f0 = f(x);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let a = analytic.data()[i] as f64;
        let err = (a - numeric.data()[i] as f64).abs();
        if err < KINK_PROBE * TOLERANCE {
            out.max_err = out.max_err.max(err);
            continue;
        }
        let x0 = x.data()[i];
        let (hi, lo) = (x0 + STEP, x0 - STEP);
        probe.data_mut()[i] = hi;
        let right = (f(&probe) - f0) / (hi as f64 - x0 as f64);
        probe.data_mut()[i] = lo;
        let left = (f0 - f(&probe)) / (x0 as f64 - lo as f64);
        probe.data_mut()[i] = x0;
        let kink = (right - left).abs() > (0.5 * TOLERANCE).max(err) && (a - right).abs().min((a - left).abs()) < TOLERANCE;
        if kink {
            out.kinks += 1;
        } else {
            out.max_err = out.max_err.max(err);
        }
    }
    Ok(out)
}

/// Checks every named parameter of `p` under `prefix` against `grads`.
fn compare_params<P: ParamSet + Clone>(
    p: &P,
    prefix: &str,
    f: impl Fn(&P) -> f64,
    grads: &ParamGrads,
) -> Result<Comparison> {
    let mut tensors = Vec::new();
    p.visit(prefix, &mut |n, t| tensors.push((n, t.clone())));
    let mut acc = Comparison::default();
    for (name, t) in tensors {
        let analytic = grads
            .get(&name)
            .ok_or_else(|| BevError::Oracle(format!("no gradient for parameter {name}")))?;
        let with = |x: &Tensor| {
            let mut q = p.clone();
            q.visit_mut(prefix, &mut |n, t| {
                if n == name {
                    *t = x.clone();
                }
            });
            f(&q)
        };
        acc.merge(compare(with, &t, analytic)?);
    }
    Ok(acc)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::random_uniform(shape, -1.0, 1.0, rng)
}

fn project(y: &Tensor, r: &Tensor) -> f64 {
    y.dot(r).expect("projection matches output shape")
}

fn labels(shape: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0..k) as f32)
}

fn check_matmul(rng: &mut ChaCha8Rng) -> Result<Comparison> {
    let (m, k, n) = (rng.random_range(2..5), rng.random_range(2..5), rng.random_range(2..5));
    let (a, b, r) = (uniform(&[m, k], rng), uniform(&[k, n], rng), uniform(&[m, n], rng));
    let g = matmul_vjp(&a, &b, &r)?;
    let mut c = compare(|x| project(&matmul(x, &b).unwrap(), &r), &a, g.grad("a"))?;
    c.merge(compare(|x| project(&matmul(&a, x).unwrap(), &r), &b, g.grad("b"))?);
    Ok(c)
}

fn check_softmax(rng: &mut ChaCha8Rng) -> Result<Comparison> {
    let shape = [rng.random_range(1..4), rng.random_range(2..7)];
    let x = uniform(&shape, rng).scale(2.0);
    let r = uniform(&shape, rng);
    let g = softmax_lastdim_vjp(&x, &r)?;
    compare(|t| project(&softmax_lastdim(t), &r), &x, g.grad("x"))
}

fn check_conv2d(rng: &mut ChaCha8Rng) -> Result<Comparison> {
    let size = [1, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..3);
    let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
    let x = uniform(&[rng.random_range(3..7), rng.random_range(3..7), cin], rng);
    let k = Kernel::new(uniform(&[size, size, cin, cout], rng), uniform(&[cout], rng))?;
    let pad = size / 2;
    let out = conv2d(&x, &k, stride, pad)?;
    let r = uniform(out.shape(), rng);
    let g = conv2d_vjp(&x, &k, stride, pad, &r)?;
    let mut c = compare(|t| project(&conv2d(t, &k, stride, pad).unwrap(), &r), &x, g.grad("input"))?;
    let with_w = |t: &Tensor| {
        let k2 = Kernel::new(t.clone(), k.bias.clone()).unwrap();
        project(&conv2d(&x, &k2, stride, pad).unwrap(), &r)
    };
    c.merge(compare(with_w, &k.weight, g.grad("weight"))?);
    let with_b = |t: &Tensor| {
        let k2 = Kernel::new(k.weight.clone(), t.clone()).unwrap();
        project(&conv2d(&x, &k2, stride, pad).unwrap(), &r)
    };
    c.merge(compare(with_b, &k.bias, g.grad("bias"))?);
    Ok(c)
}

fn check_affine_norm(rng: &mut ChaCha8Rng) -> Result<Comparison> {
    let ch = rng.random_range(1..5);
    let x = uniform(&[rng.random_range(1..4), rng.random_range(1..4), ch], rng);
    let (scale, shift) = (uniform(&[ch], rng), uniform(&[ch], rng));
    let r = uniform(x.shape(), rng);
    let g = affine_norm_vjp(&x, &scale, &shift, &r)?;
    let mut c = compare(|t| project(&affine_norm(t, &scale, &shift).unwrap(), &r), &x, g.grad("x"))?;
    c.merge(compare(
        |t| project(&affine_norm(&x, t, &shift).unwrap(), &r),
        &scale,
        g.grad("scale"),
    )?);
    c.merge(compare(
        |t| project(&affine_norm(&x, &scale, t).unwrap(), &r),
        &shift,
        g.grad("shift"),
    )?);
    Ok(c)
}

/// 16×8 camera over a 12 m square grid at 1.5 m, three depth bins, 4×4
/// feature map.
pub fn toy_frustum() -> Result<(FrustumGrid, BevConfig)> {
    let cam = CameraModel::forward_facing(16, 8, 90.0, 1.6, 0.0);
    let bev = BevConfig {
        x_min: 0.0,
        x_max: 12.0,
        y_min: -6.0,
        y_max: 6.0,
        resolution: 1.5,
    };
    let bins = DepthBinning {
        d_min: 2.0,
        d_max: 5.0,
        step: 1.0,
    };
    Ok((FrustumGrid::new(&cam, &bev, &bins, 4, 4)?, bev))
}

/// Narrow model for the fusion-chain checks on [`toy_frustum`].
pub fn toy_dims() -> ModelDims {
    ModelDims {
        image_channels: 4,
        stem_hidden: 4,
        feature_channels: 3,
        depth_bins: 3,
        lidar_in: 3,
        lidar_channels: 3,
        bottleneck_channels: 4,
        attn_dim: 3,
        value_dim: 3,
        reduced_channels: 2,
        align_hidden: 4,
        classes: 4,
        embed_dim: 2,
    }
}

fn depth_distribution(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    softmax_lastdim(&uniform(shape, rng).scale(2.0))
}

fn check_lift_splat(rng: &mut ChaCha8Rng) -> Result<Comparison> {
    let (grid, _) = toy_frustum()?;
    let c = rng.random_range(1..4);
    let f = uniform(&[4, 4, c], rng);
    let d = depth_distribution(&[4, 4, grid.bins], rng);
    let out = grid.splat(&f, &d)?;
    let r = uniform(out.shape(), rng);
    let g = grid.splat_vjp(&f, &d, &r)?;
    // Perturbed depth rows are no longer distributions, so probe the
    // unchecked splat.
    let mut cmp = compare(|t| project(&grid.splat(t, &d).unwrap(), &r), &f, g.grad("features"))?;
    cmp.merge(compare(|t| project(&grid.splat(&f, t).unwrap(), &r), &d, g.grad("depth"))?);
    Ok(cmp)
}

fn toy_params(rng: &mut ChaCha8Rng) -> Result<ModelParams> {
    ModelParams::random(toy_dims(), rng.random())
}

fn check_bev_encode(rng: &mut ChaCha8Rng) -> Result<Comparison> {
    let p = toy_params(rng)?;
    let l = uniform(&[8, 8, p.dims.lidar_channels], rng);
    let enc = bev_encode(&l, &p.encoder)?;
    let r = uniform(enc.bottleneck.shape(), rng);
    let mut grads = ParamGrads::new();
    let gl = bev_encode_backward(&enc, &p.encoder, &r, &mut grads)?;
    let mut c = compare(|t| project(&bev_encode(t, &p.encoder).unwrap().bottleneck, &r), &l, &gl)?;
    c.merge(compare_params(
        &p.encoder,
        "encoder",
        |q| project(&bev_encode(&l, q).unwrap().bottleneck, &r),
        &grads,
    )?);
    Ok(c)
}

fn check_cross_attend(rng: &mut ChaCha8Rng) -> Result<Comparison> {
    let p = toy_params(rng)?;
    let d = p.dims;
    let b = uniform(&[rng.random_range(1..4), rng.random_range(1..4), d.bottleneck_channels], rng);
    let f = uniform(&[rng.random_range(1..4), rng.random_range(1..5), d.feature_channels], rng);
    let a = cross_attend(&b, &f, &p.attention)?;
    let r = uniform(a.output.shape(), rng);
    let mut grads = ParamGrads::new();
    let (gb, gf) = cross_attend_backward(&a, &p.attention, &r, &mut grads)?;
    let run = |b: &Tensor, f: &Tensor, q: &AttentionParams| project(&cross_attend(b, f, q).unwrap().output, &r);
    let mut c = compare(|t| run(t, &f, &p.attention), &b, &gb)?;
    c.merge(compare(|t| run(&b, t, &p.attention), &f, &gf)?);
    c.merge(compare_params(&p.attention, "attention", |q| run(&b, &f, q), &grads)?);
    Ok(c)
}

fn check_bev_decode(rng: &mut ChaCha8Rng) -> Result<Comparison> {
    let p = toy_params(rng)?;
    let l = uniform(&[8, 8, p.dims.lidar_channels], rng);
    let enc = bev_encode(&l, &p.encoder)?;
    let b = uniform(enc.bottleneck.shape(), rng);
    let dec = bev_decode(&b, &enc.indices, &p.decoder)?;
    let r = uniform(dec.output.shape(), rng);
    let mut grads = ParamGrads::new();
    let gb = bev_decode_backward(&dec, &enc.indices, &p.decoder, &r, &mut grads)?;
    let mut c = compare(
        |t| project(&bev_decode(t, &enc.indices, &p.decoder).unwrap().output, &r),
        &b,
        &gb,
    )?;
    c.merge(compare_params(
        &p.decoder,
        "decoder",
        |q| project(&bev_decode(&b, &enc.indices, q).unwrap().output, &r),
        &grads,
    )?);
    Ok(c)
}

fn check_predict_flow(rng: &mut ChaCha8Rng) -> Result<Comparison> {
    let p = toy_params(rng)?;
    let (h, w) = (rng.random_range(2..6), rng.random_range(2..6));
    let cam = uniform(&[h, w, p.dims.feature_channels], rng);
    let lid = uniform(&[h, w, p.dims.lidar_channels], rng);
    let pred = predict_flow(&cam, &lid, &p.align)?;
    let r = uniform(pred.flow.delta.shape(), rng);
    let mut grads = ParamGrads::new();
    let (gc, gl) = predict_flow_backward(&pred, &p.align, &r, &mut grads)?;
    let run = |c: &Tensor, l: &Tensor, q: &AlignParams| project(&predict_flow(c, l, q).unwrap().flow.delta, &r);
    let mut c = compare(|t| run(t, &lid, &p.align), &cam, &gc)?;
    c.merge(compare(|t| run(&cam, t, &p.align), &lid, &gl)?);
    c.merge(compare_params(&p.align, "align", |q| run(&cam, &lid, q), &grads)?);
    Ok(c)
}

/// Flow with fractional parts kept away from the integer kinks of the
/// bilinear kernel.
fn fractional_flow(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[h, w, 2], |_| rng.random_range(-2i32..2) as f32 + rng.random_range(0.05..0.95))
}

fn check_warp_bev(rng: &mut ChaCha8Rng) -> Result<Comparison> {
    let (h, w, c) = (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(1..4));
    let f = uniform(&[h, w, c], rng);
    let flow = FlowField::new(fractional_flow(h, w, rng))?;
    let r = uniform(f.shape(), rng);
    let g = warp_bev_vjp(&f, &flow, &r)?;
    let mut cmp = compare(|t| project(&warp_bev(t, &flow).unwrap(), &r), &f, g.grad("features"))?;
    cmp.merge(compare(
        |t| project(&warp_bev(&f, &FlowField { delta: t.clone() }).unwrap(), &r),
        &flow.delta,
        g.grad("delta"),
    )?);
    Ok(cmp)
}

fn check_fuse_bev(rng: &mut ChaCha8Rng) -> Result<Comparison> {
    let (h, w) = (rng.random_range(1..4), rng.random_range(1..4));
    let a = uniform(&[h, w, rng.random_range(1..4)], rng);
    let b = uniform(&[h, w, rng.random_range(1..4)], rng);
    let r = uniform(&[h, w, a.last_dim() + b.last_dim()], rng);
    let g = fuse_bev_vjp(&a, &b, &r)?;
    let mut c = compare(|t| project(&fuse_bev(t, &b).unwrap(), &r), &a, g.grad("camera"))?;
    c.merge(compare(|t| project(&fuse_bev(&a, t).unwrap(), &r), &b, g.grad("lidar"))?);
    Ok(c)
}

fn small_grid(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(2..5), rng.random_range(2..5))
}

fn check_seg_loss(rng: &mut ChaCha8Rng) -> Result<Comparison> {
    let (h, w) = small_grid(rng);
    let k = rng.random_range(2..6);
    let z = uniform(&[h, w, k], rng).scale(2.0);
    let y = labels(&[h, w], k, rng);
    let l = seg_loss(&z, &y)?;
    compare(|t| seg_loss(t, &y).unwrap().value, &z, &l.grad)
}

fn instance_labels(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut y = labels(&[h, w], 4, rng);
    // Guarantee foreground.
    y.data_mut()[0] = 1.0;
    y
}

fn check_instance_loss(rng: &mut ChaCha8Rng) -> Result<Comparison> {
    let (h, w) = small_grid(rng);
    let e = uniform(&[h, w, rng.random_range(1..4)], rng).scale(2.0);
    let y = instance_labels(h, w, rng);
    let wts = LossWeights::default();
    let l = instance_loss(&e, &y, &wts)?;
    compare(|t| instance_loss(t, &y, &wts).unwrap().loss.value, &e, &l.loss.grad)
}

fn direction_labels(h: usize, w: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[h, w], |_| {
        if rng.random_bool(0.4) {
            NO_LANE
        } else {
            rng.random_range(0..k) as f32
        }
    })
}

fn check_direction_loss(rng: &mut ChaCha8Rng) -> Result<Comparison> {
    let (h, w) = small_grid(rng);
    let k = rng.random_range(2..8);
    let z = uniform(&[h, w, k], rng).scale(2.0);
    let y = direction_labels(h, w, k, rng);
    let l = direction_loss(&z, &y)?;
    compare(|t| direction_loss(t, &y).unwrap().value, &z, &l.grad)
}

fn one_hot_targets(h: usize, w: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(&[h, w, k]);
    for cell in t.data_mut().chunks_mut(k) {
        if rng.random_bool(0.7) {
            cell[rng.random_range(0..k)] = 1.0;
        }
    }
    t
}

fn check_depth_focal_loss(rng: &mut ChaCha8Rng) -> Result<Comparison> {
    let (h, w) = small_grid(rng);
    let k = rng.random_range(2..8);
    let z = uniform(&[h, w, k], rng).scale(2.0);
    let y = one_hot_targets(h, w, k, rng);
    let gamma = rng.random_range(0.0..3.0);
    let l = depth_focal_loss(&z, &y, gamma)?;
    compare(|t| depth_focal_loss(t, &y, gamma).unwrap().value, &z, &l.grad)
}

fn check_total_loss(rng: &mut ChaCha8Rng) -> Result<Comparison> {
    let (h, w) = small_grid(rng);
    let (fh, fw) = small_grid(rng);
    let out = HeadOutputs {
        seg_logits: uniform(&[h, w, 4], rng).scale(2.0),
        embeddings: uniform(&[h, w, 2], rng).scale(2.0),
        dir_logits: uniform(&[h, w, 6], rng).scale(2.0),
        depth_logits: uniform(&[fh, fw, 5], rng).scale(2.0),
    };
    let t = LossTargets {
        seg: labels(&[h, w], 4, rng),
        instance: instance_labels(h, w, rng),
        direction: direction_labels(h, w, 6, rng),
        depth_one_hot: one_hot_targets(fh, fw, 5, rng),
    };
    let wts = LossWeights {
        lambda_dep: rng.random_range(0.5..1.5),
        lambda_dir: rng.random_range(0.1..1.0),
        ..LossWeights::default()
    };
    let total = head_losses(&out, &t, &wts)?;
    let run = |o: &HeadOutputs| head_losses(o, &t, &wts).unwrap().report.total;
    let mut c = Comparison::default();
    c.merge(compare(
        |x| run(&HeadOutputs { seg_logits: x.clone(), ..out.clone() }),
        &out.seg_logits,
        &total.grads["seg_logits"],
    )?);
    c.merge(compare(
        |x| run(&HeadOutputs { embeddings: x.clone(), ..out.clone() }),
        &out.embeddings,
        &total.grads["embeddings"],
    )?);
    c.merge(compare(
        |x| run(&HeadOutputs { dir_logits: x.clone(), ..out.clone() }),
        &out.dir_logits,
        &total.grads["dir_logits"],
    )?);
    c.merge(compare(
        |x| run(&HeadOutputs { depth_logits: x.clone(), ..out.clone() }),
        &out.depth_logits,
        &total.grads["depth_logits"],
    )?);
    Ok(c)
}

/// Scalar projection of the fused BEV back to image features, depth
/// distribution and LiDAR BEV. Parameters are covered stage by stage; through
/// the whole chain a bias perturbation crosses too many ReLU and pooling
/// kinks at once for central differences to mean anything.
fn check_fusion_chain(rng: &mut ChaCha8Rng) -> Result<Comparison> {
    let (grid, bev) = toy_frustum()?;
    let p = toy_params(rng)?;
    let d = p.dims;
    let f = uniform(&[4, 4, d.feature_channels], rng);
    let dep = depth_distribution(&[4, 4, grid.bins], rng);
    let l = uniform(&[bev.rows(), bev.cols(), d.lidar_channels], rng);
    let fwd = fusion_forward(&f, &dep, &l, &grid, &p)?;
    let r = uniform(fwd.fused.shape(), rng);
    let g = fusion_backward(&fwd, &f, &dep, &grid, &p, &r)?;
    let run = |f: &Tensor, dep: &Tensor, l: &Tensor| project(&fusion_forward(f, dep, l, &grid, &p).unwrap().fused, &r);
    let mut c = compare(|t| run(t, &dep, &l), &f, &g.features)?;
    c.merge(compare(|t| run(&f, t, &l), &dep, &g.depth)?);
    c.merge(compare(|t| run(&f, &dep, t), &l, &g.lidar)?);
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub checked: usize,
    pub kinks: usize,
    pub max_err: f64,
    pub passed: bool,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl OpReport {
    pub fn line(&self) -> String {
        format!(
            "{} {:<17} instances={} elements={} kinks={} max_err={:.2e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.op,
            self.instances,
            self.checked,
            self.kinks,
            self.max_err
        )
    }
}

fn checker(op: &str) -> Option<fn(&mut ChaCha8Rng) -> Result<Comparison>> {
    Some(match op {
        "matmul" => check_matmul,
        "softmax" => check_softmax,
        "conv2d" => check_conv2d,
        "affine_norm" => check_affine_norm,
        "lift_splat" => check_lift_splat,
        "bev_encode" => check_bev_encode,
        "cross_attend" => check_cross_attend,
        "bev_decode" => check_bev_decode,
        "predict_flow" => check_predict_flow,
        "warp_bev" => check_warp_bev,
        "fuse_bev" => check_fuse_bev,
        "seg_loss" => check_seg_loss,
        "instance_loss" => check_instance_loss,
        "direction_loss" => check_direction_loss,
        "depth_focal_loss" => check_depth_focal_loss,
        "total_loss" => check_total_loss,
        "fusion_chain" => check_fusion_chain,
        _ => return None,
    })
}

/// Runs `instances` random checks of one op.
pub fn check_op(op: &str, seed: u64, instances: usize) -> Result<OpReport> {
    let run = checker(op).ok_or_else(|| BevError::Config(format!("unknown op {op:?}")))?;
    let idx = OPS.iter().position(|&o| o == op).unwrap() as u64;
    let start = Instant::now();
    let mut acc = Comparison::default();
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(idx * 1000 + i as u64));
        acc.merge(run(&mut rng)?);
    }
    let passed = acc.max_err < TOLERANCE && (acc.kinks as f64) <= MAX_KINK_FRACTION * acc.checked as f64;
    Ok(OpReport {
        op: op.to_string(),
        instances,
        checked: acc.checked,
        kinks: acc.kinks,
        max_err: acc.max_err,
        passed,
        elapsed: start.elapsed(),
    })
}

/// Every op in [`OPS`], in parallel.
pub fn run_suite(seed: u64) -> Result<Vec<OpReport>> {
    par::map_slice(&OPS, |op| check_op(op, seed, INSTANCES)).into_iter().collect()
}
