//! The three fusion levels: depth-aware lift-splat of image features into
//! BEV, image-guided completion of the LiDAR BEV, and flow-based alignment
//! of the two BEV maps before concatenation. Also hosts the small fixed
//! stems and map heads that stand in for full backbones.

mod align;
mod lift;
pub mod params;
mod predict;

use crate::bev::BevConfig;
use crate::error::{BevError, Result};
use crate::tensor::{relu, Tensor};

pub use align::{
    fuse_bev, fuse_bev_vjp, predict_flow, predict_flow_backward, warp_bev, warp_bev_vjp,
    FlowField, FlowPrediction,
};
pub use lift::{check_distribution, lift_splat, FrustumGrid, DISTRIBUTION_TOL};
pub use params::{ModelDims, ModelParams, ParamGrads, DIRECTION_CLASSES};
pub use predict::{
    bev_decode, bev_decode_backward, bev_decode_shape, bev_encode, bev_encode_backward,
    bev_encode_shape, cross_attend, cross_attend_backward, Attended, Decoded, Encoded,
};

/// Camera stem: two stride-2 convolutions over RGB + sparse depth, split
/// into image features and depth-bin logits at 1/4 resolution.
pub fn camera_stem(image: &Tensor, p: &ModelParams) -> Result<(Tensor, Tensor)> {
    let s = &p.camera_stem;
    let hidden = relu(&s.conv1.forward(image)?);
    let out = s.conv2.forward(&hidden)?;
    let cf = p.dims.feature_channels;
    Ok((out.slice_channels(0, cf)?, out.slice_channels(cf, out.last_dim())?))
}

/// Point-cloud raster channels: occupancy (saturating at 4 points), max
/// height, mean height. Heights are clamped to `[-1, 3]` m.
pub const LIDAR_RASTER_CHANNELS: usize = 3;

pub fn rasterize_cloud(cloud: &[[f32; 3]], bev: &BevConfig) -> Tensor {
    let (rows, cols) = (bev.rows(), bev.cols());
    let mut count = vec![0u32; rows * cols];
    let mut max_z = vec![f32::NEG_INFINITY; rows * cols];
    let mut sum_z = vec![0.0f64; rows * cols];
    for p in cloud {
        let Some((r, c)) = bev.cell_of(p[0] as f64, p[1] as f64) else { continue };
        let i = r * cols + c;
        let z = p[2].clamp(-1.0, 3.0);
        count[i] += 1;
        max_z[i] = max_z[i].max(z);
        sum_z[i] += z as f64;
    }
    let mut t = Tensor::zeros(&[rows, cols, LIDAR_RASTER_CHANNELS]);
    for (i, px) in t.data_mut().chunks_mut(LIDAR_RASTER_CHANNELS).enumerate() {
        if count[i] == 0 {
            continue;
        }
        px[0] = (count[i] as f32 / 4.0).min(1.0);
        px[1] = max_z[i];
        px[2] = (sum_z[i] / count[i] as f64) as f32;
    }
    t
}

/// LiDAR stem: two 3×3 convolutions with ReLU.
pub fn lidar_stem(raster: &Tensor, p: &ModelParams) -> Result<Tensor> {
    let s = &p.lidar_stem;
    let hidden = relu(&s.conv1.forward(raster)?);
    Ok(relu(&s.conv2.forward(&hidden)?))
}

/// Map decoder heads: `(seg_logits, embeddings, dir_logits)`.
pub fn map_heads(fused: &Tensor, p: &ModelParams) -> Result<(Tensor, Tensor, Tensor)> {
    let h = &p.heads;
    Ok((h.seg.forward(fused)?, h.embed.forward(fused)?, h.dir.forward(fused)?))
}

/// Every intermediate of the fusion chain `(F, D, L) → fused BEV`.
#[derive(Clone, Debug)]
pub struct FusionForward {
    /// `C`, lifted camera BEV.
    pub camera_bev: Tensor,
    pub encoded: Encoded,
    pub attended: Attended,
    pub decoded: Decoded,
    pub flow: FlowPrediction,
    /// `C'`, camera BEV warped onto the LiDAR BEV.
    pub aligned: Tensor,
    pub fused: Tensor,
}

/// Gradients of a scalar on the fused BEV w.r.t. every chain input.
#[derive(Clone, Debug)]
pub struct FusionGrads {
    pub features: Tensor,
    pub depth: Tensor,
    pub lidar: Tensor,
    pub params: ParamGrads,
}

/// Runs lift-splat, BEV prediction and alignment. `depth` is used as given;
/// callers pass a normalized distribution (see [`lift_splat`]).
pub fn fusion_forward(
    features: &Tensor,
    depth: &Tensor,
    lidar: &Tensor,
    grid: &FrustumGrid,
    p: &ModelParams,
) -> Result<FusionForward> {
    let camera_bev = grid.splat(features, depth)?;
    if camera_bev.shape()[..2] != lidar.shape()[..2] {
        return Err(BevError::shape(format!(
            "camera BEV {:?} vs LiDAR BEV {:?}",
            camera_bev.shape(),
            lidar.shape()
        )));
    }
    let encoded = bev_encode(lidar, &p.encoder)?;
    let attended = cross_attend(&encoded.bottleneck, features, &p.attention)?;
    let decoded = bev_decode(&attended.output, &encoded.indices, &p.decoder)?;
    let flow = predict_flow(&camera_bev, &decoded.output, &p.align)?;
    let aligned = warp_bev(&camera_bev, &flow.flow)?;
    let fused = fuse_bev(&aligned, &decoded.output)?;
    Ok(FusionForward {
        camera_bev,
        encoded,
        attended,
        decoded,
        flow,
        aligned,
        fused,
    })
}

pub fn fusion_backward(
    fwd: &FusionForward,
    features: &Tensor,
    depth: &Tensor,
    grid: &FrustumGrid,
    p: &ModelParams,
    grad_fused: &Tensor,
) -> Result<FusionGrads> {
    let mut grads = ParamGrads::new();
    let split = fuse_bev_vjp(&fwd.aligned, &fwd.decoded.output, grad_fused)?;
    let warp = warp_bev_vjp(&fwd.camera_bev, &fwd.flow.flow, split.grad("camera"))?;
    let (g_cam_flow, g_lidar_flow) =
        predict_flow_backward(&fwd.flow, &p.align, warp.grad("delta"), &mut grads)?;
    let g_camera_bev = warp.grad("features").add(&g_cam_flow)?;
    let g_decoded = split.grad("lidar").add(&g_lidar_flow)?;
    let g_bottleneck_prime =
        bev_decode_backward(&fwd.decoded, &fwd.encoded.indices, &p.decoder, &g_decoded, &mut grads)?;
    let (g_bottleneck, g_feat_attn) =
        cross_attend_backward(&fwd.attended, &p.attention, &g_bottleneck_prime, &mut grads)?;
    let g_lidar = bev_encode_backward(&fwd.encoded, &p.encoder, &g_bottleneck, &mut grads)?;
    let lift = grid.splat_vjp(features, depth, &g_camera_bev)?;
    Ok(FusionGrads {
        features: lift.grad("features").add(&g_feat_attn)?,
        depth: lift.grad("depth").clone(),
        lidar: g_lidar,
        params: grads,
    })
}
