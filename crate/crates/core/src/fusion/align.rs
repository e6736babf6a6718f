//! BEV alignment: a small conv net predicts a per-cell flow field from the
//! camera and LiDAR BEV features, and the camera features are resampled with
//! a bilinear kernel at the displaced positions before fusion.

use crate::error::{BevError, Result};
use crate::par;
use crate::tensor::{GradPair, Tensor};

use super::params::{AlignParams, ParamGrads};
use super::predict::{cnr_backward, cnr_forward, CnrCache};

/// Per-cell displacement in cells, `rows × cols × 2`. Channel 0 moves the
/// sampling position along columns, channel 1 along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub delta: Tensor,
}

impl FlowField {
    pub fn new(delta: Tensor) -> Result<Self> {
        let (_, _, c) = delta.dims3()?;
        if c != 2 {
            return Err(BevError::shape(format!("flow needs 2 channels, got {c}")));
        }
        delta.ensure_finite("flow field")?;
        Ok(FlowField { delta })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        FlowField {
            delta: Tensor::zeros(&[rows, cols, 2]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowPrediction {
    pub flow: FlowField,
    camera_channels: usize,
    hidden: Tensor,
    cache: CnrCache,
}

/// Flow from concatenated camera/LiDAR BEV features.
pub fn predict_flow(camera_bev: &Tensor, lidar_bev: &Tensor, p: &AlignParams) -> Result<FlowPrediction> {
    let concat = camera_bev.concat_channels(lidar_bev)?;
    let (hidden, cache) = cnr_forward(&p.conv1, &p.norm1, &concat)?;
    let delta = p.conv2.forward(&hidden)?;
    Ok(FlowPrediction {
        flow: FlowField::new(delta)?,
        camera_channels: camera_bev.last_dim(),
        hidden,
        cache,
    })
}

/// Returns `(grad_camera_bev, grad_lidar_bev)`.
pub fn predict_flow_backward(
    pred: &FlowPrediction,
    p: &AlignParams,
    grad_flow: &Tensor,
    grads: &mut ParamGrads,
) -> Result<(Tensor, Tensor)> {
    let g = p.conv2.backward(&pred.hidden, grad_flow, "align.conv2", grads)?;
    let g = cnr_backward(&p.conv1, &p.norm1, &pred.cache, &g, ("align", 1), grads)?;
    let cc = pred.camera_channels;
    Ok((g.slice_channels(0, cc)?, g.slice_channels(cc, g.last_dim())?))
}

/// Bilinear taps `(index, weight)` around a continuous coordinate; taps
/// outside `[0, extent)` are dropped.
#[inline]
fn taps(pos: f64, extent: usize) -> [(Option<usize>, f64); 2] {
    let base = pos.floor();
    let frac = pos - base;
    let idx = |i: f64| (i >= 0.0 && i < extent as f64).then_some(i as usize);
    [(idx(base), 1.0 - frac), (idx(base + 1.0), frac)]
}

/// Resamples `features` at `(col + Δ₀, row + Δ₁)` with the bilinear kernel
/// `max(0, 1-|·|)` per axis; positions outside the grid contribute zero.
pub fn warp_bev(features: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let (h, w, c) = features.dims3()?;
    let (fh, fw, _) = flow.delta.dims3()?;
    if (fh, fw) != (h, w) {
        return Err(BevError::shape(format!(
            "flow {fh}x{fw} for features {h}x{w}"
        )));
    }
    let (fd, dd) = (features.data(), flow.delta.data());
    let rows = par::map_range(h, |r| {
        let mut row = vec![0.0f32; w * c];
        let mut acc = vec![0.0f64; c];
        for col in 0..w {
            let d = &dd[(r * w + col) * 2..][..2];
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (ry, wy) in taps(r as f64 + d[1] as f64, h) {
                let Some(ry) = ry else { continue };
                for (cx, wx) in taps(col as f64 + d[0] as f64, w) {
                    let Some(cx) = cx else { continue };
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    for (a, &f) in acc.iter_mut().zip(&fd[(ry * w + cx) * c..][..c]) {
                        *a += wgt * f as f64;
                    }
                }
            }
            for (o, &a) in row[col * c..][..c].iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
        row
    });
    Tensor::new(vec![h, w, c], rows.concat())
}

/// Gradients of [`warp_bev`] w.r.t. `features` and the flow `delta`.
pub fn warp_bev_vjp(features: &Tensor, flow: &FlowField, grad_out: &Tensor) -> Result<GradPair> {
    let value = warp_bev(features, flow)?;
    value.expect_same_shape(grad_out)?;
    let (h, w, c) = features.dims3()?;
    let (fd, dd, gd) = (features.data(), flow.delta.data(), grad_out.data());
    let mut gf = vec![0.0f64; h * w * c];
    let mut gdelta = vec![0.0f32; h * w * 2];
    let at = |r: Option<usize>, col: Option<usize>| -> Option<usize> { Some((r? * w + col?) * c) };
    for r in 0..h {
        for col in 0..w {
            let i = r * w + col;
            let (dx, dy) = (dd[i * 2], dd[i * 2 + 1]);
            let g = &gd[i * c..][..c];
            let [(y0, wy0), (y1, wy1)] = taps(r as f64 + dy as f64, h);
            let [(x0, wx0), (x1, wx1)] = taps(col as f64 + dx as f64, w);
            let corners = [
                (at(y0, x0), wy0 * wx0, -(wy0), -(wx0)),
                (at(y0, x1), wy0 * wx1, wy0, -(wx1)),
                (at(y1, x0), wy1 * wx0, -(wy1), wx0),
                (at(y1, x1), wy1 * wx1, wy1, wx1),
            ];
            // d(weight)/d(dx) = ∓wy, d(weight)/d(dy) = ∓wx.
            let (mut gx, mut gy) = (0.0f64, 0.0f64);
            for (base, wgt, dwdx, dwdy) in corners {
                let Some(base) = base else { continue };
                let mut dot = 0.0f64;
                for k in 0..c {
                    gf[base + k] += wgt * g[k] as f64;
                    dot += fd[base + k] as f64 * g[k] as f64;
                }
                gx += dwdx * dot;
                gy += dwdy * dot;
            }
            gdelta[i * 2] = gx as f32;
            gdelta[i * 2 + 1] = gy as f32;
        }
    }
    Ok(GradPair::new(value)
        .with(
            "features",
            Tensor::new(vec![h, w, c], gf.into_iter().map(|v| v as f32).collect())?,
        )
        .with("delta", Tensor::new(vec![h, w, 2], gdelta)?))
}

/// Channel concatenation, camera channels first.
pub fn fuse_bev(camera_bev: &Tensor, lidar_bev: &Tensor) -> Result<Tensor> {
    camera_bev.concat_channels(lidar_bev)
}

/// Splits the upstream gradient of [`fuse_bev`] back onto its inputs.
pub fn fuse_bev_vjp(camera_bev: &Tensor, lidar_bev: &Tensor, grad_out: &Tensor) -> Result<GradPair> {
    let value = fuse_bev(camera_bev, lidar_bev)?;
    value.expect_same_shape(grad_out)?;
    let cc = camera_bev.last_dim();
    Ok(GradPair::new(value)
        .with("camera", grad_out.slice_channels(0, cc)?)
        .with("lidar", grad_out.slice_channels(cc, grad_out.last_dim())?))
}
