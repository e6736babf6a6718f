//! Image-guided LiDAR BEV prediction: an encoder compresses the LiDAR BEV to
//! a bottleneck, cross-attention pulls in front-view image features, and a
//! decoder restores the BEV using the encoder's pooling indices.

use crate::error::{BevError, Result};
use crate::tensor::{
    add_row_bias, affine_norm, affine_norm_vjp, matmul, maxpool2d_with_indices, maxunpool2d, relu,
    relu_vjp, softmax_lastdim, softmax_lastdim_vjp, transpose2, PoolIndices, Tensor,
};

use super::params::{
    accumulate, AttentionParams, ConvLayer, DecoderParams, EncoderParams, Linear, Norm, ParamGrads,
};

/// Conv → norm → relu, keeping intermediates for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct CnrCache {
    input: Tensor,
    conv: Tensor,
    norm: Tensor,
}

pub(crate) fn cnr_forward(conv: &ConvLayer, norm: &Norm, x: &Tensor) -> Result<(Tensor, CnrCache)> {
    let c = conv.forward(x)?;
    let n = affine_norm(&c, &norm.scale, &norm.shift)?;
    let out = relu(&n);
    Ok((
        out,
        CnrCache {
            input: x.clone(),
            conv: c,
            norm: n,
        },
    ))
}

pub(crate) fn cnr_backward(
    conv: &ConvLayer,
    norm: &Norm,
    cache: &CnrCache,
    grad_out: &Tensor,
    (scope, layer): (&str, usize),
    grads: &mut ParamGrads,
) -> Result<Tensor> {
    let g = relu_vjp(&cache.norm, grad_out)?.grads.remove("x").unwrap();
    let mut gn = affine_norm_vjp(&cache.conv, &norm.scale, &norm.shift, &g)?;
    accumulate(grads, format!("{scope}.norm{layer}.scale"), gn.grads.remove("scale").unwrap());
    accumulate(grads, format!("{scope}.norm{layer}.shift"), gn.grads.remove("shift").unwrap());
    let gc = gn.grads.remove("x").unwrap();
    conv.backward(&cache.input, &gc, &format!("{scope}.conv{layer}"), grads)
}

/// Bottleneck features plus what the decoder and backward pass need.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub bottleneck: Tensor,
    /// Pooling indices of the first and second pool.
    pub indices: [PoolIndices; 2],
    caches: [CnrCache; 3],
}

/// `rows × cols × C_L` → `rows/4 × cols/4 × C_B`.
pub fn bev_encode(lidar_bev: &Tensor, p: &EncoderParams) -> Result<Encoded> {
    let (h, w, _) = lidar_bev.dims3()?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(BevError::shape(format!(
            "LiDAR BEV {h}x{w} not divisible by 4"
        )));
    }
    let (x1, c1) = cnr_forward(&p.conv1, &p.norm1, lidar_bev)?;
    let (p1, i1) = maxpool2d_with_indices(&x1, 2, 2)?;
    let (x2, c2) = cnr_forward(&p.conv2, &p.norm2, &p1)?;
    let (p2, i2) = maxpool2d_with_indices(&x2, 2, 2)?;
    let (b, c3) = cnr_forward(&p.conv3, &p.norm3, &p2)?;
    Ok(Encoded {
        bottleneck: b,
        indices: [i1, i2],
        caches: [c1, c2, c3],
    })
}

/// Returns the gradient w.r.t. the LiDAR BEV input.
pub fn bev_encode_backward(
    enc: &Encoded,
    p: &EncoderParams,
    grad_bottleneck: &Tensor,
    grads: &mut ParamGrads,
) -> Result<Tensor> {
    let g = cnr_backward(&p.conv3, &p.norm3, &enc.caches[2], grad_bottleneck, ("encoder", 3), grads)?;
    let g = maxunpool2d(&g, &enc.indices[1])?;
    let g = cnr_backward(&p.conv2, &p.norm2, &enc.caches[1], &g, ("encoder", 2), grads)?;
    let g = maxunpool2d(&g, &enc.indices[0])?;
    cnr_backward(&p.conv1, &p.norm1, &enc.caches[0], &g, ("encoder", 1), grads)
}

/// Output shape of [`bev_encode`] for a given input shape.
pub fn bev_encode_shape(p: &EncoderParams, input: [usize; 3]) -> [usize; 3] {
    let s = p.conv1.output_shape(input[0], input[1]);
    let s = p.conv2.output_shape(s[0] / 2, s[1] / 2);
    p.conv3.output_shape(s[0] / 2, s[1] / 2)
}

fn linear(x: &Tensor, l: &Linear) -> Result<Tensor> {
    add_row_bias(&matmul(x, &l.weight)?, &l.bias)
}

/// Records `W`/`b` gradients and returns the input gradient.
fn linear_backward(
    x: &Tensor,
    l: &Linear,
    grad_out: &Tensor,
    prefix: &str,
    grads: &mut ParamGrads,
) -> Result<Tensor> {
    let gw = matmul(&transpose2(x)?, grad_out)?;
    let n = l.out_dim();
    let mut gb = vec![0.0f64; n];
    for row in grad_out.data().chunks(n) {
        for (a, &g) in gb.iter_mut().zip(row) {
            *a += g as f64;
        }
    }
    accumulate(grads, format!("{prefix}.weight"), gw);
    accumulate(
        grads,
        format!("{prefix}.bias"),
        Tensor::new(vec![n], gb.into_iter().map(|v| v as f32).collect())?,
    );
    matmul(grad_out, &transpose2(&l.weight)?)
}

/// Cross-attention output and intermediates.
#[derive(Clone, Debug)]
pub struct Attended {
    /// `B'`, same shape as the bottleneck.
    pub output: Tensor,
    /// Softmax attention weights, `(h·w) × (H_F·W_F)`.
    pub attention: Tensor,
    bottleneck: Tensor,
    features: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    scores: Tensor,
    aggregated: Tensor,
    concat: Tensor,
}

/// Every bottleneck cell attends over every front-view feature position.
pub fn cross_attend(bottleneck: &Tensor, features: &Tensor, p: &AttentionParams) -> Result<Attended> {
    let (h, w, cb) = bottleneck.dims3()?;
    let (fh, fw, cf) = features.dims3()?;
    if p.query.in_dim() != cb || p.key.in_dim() != cf || p.value.in_dim() != cf {
        return Err(BevError::shape(format!(
            "attention projections expect {}/{} channels, got {cb}/{cf}",
            p.query.in_dim(),
            p.key.in_dim()
        )));
    }
    if p.query.out_dim() != p.key.out_dim() {
        return Err(BevError::shape(format!(
            "query dim {} vs key dim {}",
            p.query.out_dim(),
            p.key.out_dim()
        )));
    }
    let dk = p.query.out_dim();
    let bf = bottleneck.clone().reshape(&[h * w, cb])?;
    let ff = features.clone().reshape(&[fh * fw, cf])?;
    let q = linear(&bf, &p.query)?;
    let k = linear(&ff, &p.key)?;
    let v = linear(&ff, &p.value)?;
    let scores = matmul(&q, &transpose2(&k)?)?.scale(1.0 / (dk as f32).sqrt());
    let attention = softmax_lastdim(&scores);
    let aggregated = matmul(&attention, &v)?.reshape(&[h, w, p.value.out_dim()])?;
    let reduced = p.reduce.forward(&aggregated)?;
    let concat = bottleneck.concat_channels(&reduced)?;
    let output = p.merge.forward(&concat)?;
    if output.shape() != bottleneck.shape() {
        return Err(BevError::shape(format!(
            "merge conv yields {:?}, bottleneck is {:?}",
            output.shape(),
            bottleneck.shape()
        )));
    }
    Ok(Attended {
        output,
        attention,
        bottleneck: bottleneck.clone(),
        features: features.clone(),
        q,
        k,
        v,
        scores,
        aggregated,
        concat,
    })
}

/// Returns `(grad_bottleneck, grad_features)`.
pub fn cross_attend_backward(
    a: &Attended,
    p: &AttentionParams,
    grad_out: &Tensor,
    grads: &mut ParamGrads,
) -> Result<(Tensor, Tensor)> {
    let (h, w, cb) = a.bottleneck.dims3()?;
    let (fh, fw, cf) = a.features.dims3()?;
    let dk = p.query.out_dim();
    let g_concat = p.merge.backward(&a.concat, grad_out, "attention.merge", grads)?;
    let g_b_direct = g_concat.slice_channels(0, cb)?;
    let g_reduced = g_concat.slice_channels(cb, g_concat.last_dim())?;
    let g_agg = p
        .reduce
        .backward(&a.aggregated, &g_reduced, "attention.reduce", grads)?
        .reshape(&[h * w, p.value.out_dim()])?;
    let g_attn = matmul(&g_agg, &transpose2(&a.v)?)?;
    let g_v = matmul(&transpose2(&a.attention)?, &g_agg)?;
    let g_scores = softmax_lastdim_vjp(&a.scores, &g_attn)?
        .grads
        .remove("x")
        .unwrap()
        .scale(1.0 / (dk as f32).sqrt());
    let g_q = matmul(&g_scores, &a.k)?;
    let g_k = matmul(&transpose2(&g_scores)?, &a.q)?;
    let bf = a.bottleneck.clone().reshape(&[h * w, cb])?;
    let ff = a.features.clone().reshape(&[fh * fw, cf])?;
    let g_bf = linear_backward(&bf, &p.query, &g_q, "attention.query", grads)?;
    let g_ff_k = linear_backward(&ff, &p.key, &g_k, "attention.key", grads)?;
    let g_ff_v = linear_backward(&ff, &p.value, &g_v, "attention.value", grads)?;
    let g_b = g_b_direct.add(&g_bf.reshape(&[h, w, cb])?)?;
    let g_f = g_ff_k.add(&g_ff_v)?.reshape(&[fh, fw, cf])?;
    Ok((g_b, g_f))
}

#[derive(Clone, Debug)]
pub struct Decoded {
    /// `L'`, predicted LiDAR BEV features.
    pub output: Tensor,
    caches: [CnrCache; 2],
    unpooled: [Tensor; 2],
}

/// Restores the LiDAR BEV extents from a bottleneck and the encoder's
/// pooling indices.
pub fn bev_decode(bottleneck: &Tensor, indices: &[PoolIndices; 2], p: &DecoderParams) -> Result<Decoded> {
    let (x1, c1) = cnr_forward(&p.conv1, &p.norm1, bottleneck)?;
    let u1 = maxunpool2d(&x1, &indices[1])?;
    let (x2, c2) = cnr_forward(&p.conv2, &p.norm2, &u1)?;
    let u2 = maxunpool2d(&x2, &indices[0])?;
    let output = p.conv3.forward(&u2)?;
    Ok(Decoded {
        output,
        caches: [c1, c2],
        unpooled: [u1, u2],
    })
}

/// Returns the gradient w.r.t. the bottleneck.
pub fn bev_decode_backward(
    dec: &Decoded,
    indices: &[PoolIndices; 2],
    p: &DecoderParams,
    grad_out: &Tensor,
    grads: &mut ParamGrads,
) -> Result<Tensor> {
    let g = p.conv3.backward(&dec.unpooled[1], grad_out, "decoder.conv3", grads)?;
    let g = indices[0].gather(&g)?;
    let g = cnr_backward(&p.conv2, &p.norm2, &dec.caches[1], &g, ("decoder", 2), grads)?;
    let g = indices[1].gather(&g)?;
    cnr_backward(&p.conv1, &p.norm1, &dec.caches[0], &g, ("decoder", 1), grads)
}

/// Output shape of [`bev_decode`] for a bottleneck shape.
pub fn bev_decode_shape(p: &DecoderParams, bottleneck: [usize; 3]) -> [usize; 3] {
    let s = p.conv1.output_shape(bottleneck[0], bottleneck[1]);
    let s = p.conv2.output_shape(s[0] * 2, s[1] * 2);
    p.conv3.output_shape(s[0] * 2, s[1] * 2)
}
