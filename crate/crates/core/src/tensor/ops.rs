use crate::error::{BevError, Result};
use crate::par;

use super::{GradPair, Tensor};

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(BevError::shape(format!(
            "matmul inner extents {k} vs {k2}"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let rows = par::map_range(m, |i| {
        let mut acc = vec![0.0f64; n];
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let av = av as f64;
            for (o, &bv) in acc.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv as f64;
            }
        }
        acc.into_iter().map(|x| x as f32).collect::<Vec<_>>()
    });
    Tensor::new(vec![m, n], rows.concat())
}

pub fn transpose2(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let d = a.data();
    Ok(Tensor::from_fn(&[n, m], |idx| {
        let (j, i) = (idx / m, idx % m);
        d[i * n + j]
    }))
}

/// Gradients of `matmul(a, b)` given the upstream gradient (`m×n`).
pub fn matmul_vjp(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<GradPair> {
    let value = matmul(a, b)?;
    value.expect_same_shape(grad_out)?;
    let ga = matmul(grad_out, &transpose2(b)?)?;
    let gb = matmul(&transpose2(a)?, grad_out)?;
    Ok(GradPair::new(value).with("a", ga).with("b", gb))
}

/// Adds `bias[n]` to every row of `x[m×n]`.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    if bias.len() != n {
        return Err(BevError::shape(format!("bias {} for {n} columns", bias.len())));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = row.iter().map(|&v| ((v - m) as f64).exp()).collect();
    let z: f64 = exps.iter().sum();
    for (v, e) in row.iter_mut().zip(exps) {
        *v = (e / z) as f32;
    }
}

/// Gradient of softmax w.r.t. its logits.
pub fn softmax_lastdim_vjp(x: &Tensor, grad_out: &Tensor) -> Result<GradPair> {
    x.expect_same_shape(grad_out)?;
    let y = softmax_lastdim(x);
    let n = x.last_dim();
    let mut gx = Tensor::zeros(x.shape());
    for ((gi, yi), go) in gx
        .data_mut()
        .chunks_mut(n)
        .zip(y.data().chunks(n))
        .zip(grad_out.data().chunks(n))
    {
        let dot: f64 = yi.iter().zip(go).map(|(&a, &b)| a as f64 * b as f64).sum();
        for ((g, &yv), &gv) in gi.iter_mut().zip(yi).zip(go) {
            *g = (yv as f64 * (gv as f64 - dot)) as f32;
        }
    }
    Ok(GradPair::new(y).with("x", gx))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_vjp(x: &Tensor, grad_out: &Tensor) -> Result<GradPair> {
    let gx = x.zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })?;
    Ok(GradPair::new(relu(x)).with("x", gx))
}

/// Per-channel `x·scale + shift` over the last axis (inference-form batch norm).
pub fn affine_norm(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let c = x.last_dim();
    if scale.len() != c || shift.len() != c {
        return Err(BevError::shape(format!(
            "affine_norm over {c} channels with scale {} / shift {}",
            scale.len(),
            shift.len()
        )));
    }
    let mut out = x.clone();
    for px in out.data_mut().chunks_mut(c) {
        for ((v, &s), &b) in px.iter_mut().zip(scale.data()).zip(shift.data()) {
            *v = *v * s + b;
        }
    }
    Ok(out)
}

pub fn affine_norm_vjp(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    grad_out: &Tensor,
) -> Result<GradPair> {
    let value = affine_norm(x, scale, shift)?;
    value.expect_same_shape(grad_out)?;
    let c = x.last_dim();
    let mut gx = grad_out.clone();
    let mut gs = vec![0.0f64; c];
    let mut gb = vec![0.0f64; c];
    for (g, xv) in gx.data_mut().chunks_mut(c).zip(x.data().chunks(c)) {
        for k in 0..c {
            gs[k] += g[k] as f64 * xv[k] as f64;
            gb[k] += g[k] as f64;
            g[k] *= scale.data()[k];
        }
    }
    let to32 = |v: Vec<f64>| Tensor::new(vec![c], v.into_iter().map(|x| x as f32).collect());
    Ok(GradPair::new(value)
        .with("x", gx)
        .with("scale", to32(gs)?)
        .with("shift", to32(gb)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&i2, &i2).unwrap(), i2);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let ones = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(matmul(&a, &ones).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(BevError::Shape(_))));
    }

    #[test]
    fn softmax_limits() {
        let u = softmax_lastdim(&t(&[3], &[0.0, 0.0, 0.0]));
        for &p in u.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
        let d = softmax_lastdim(&t(&[2], &[100.0, 0.0]));
        assert!(d.data()[0] > 0.999_999 && d.data()[1] < 1e-6);
        let big = softmax_lastdim(&t(&[2], &[1e30, -1e30]));
        assert!(big.is_finite());
    }

    #[test]
    fn affine_norm_cases() {
        let x = t(&[2], &[1.0, 1.0]);
        let one = Tensor::full(&[2], 1.0);
        let zero = Tensor::zeros(&[2]);
        assert_eq!(affine_norm(&x, &one, &zero).unwrap(), x);
        let y = affine_norm(&x, &Tensor::full(&[2], 2.0), &Tensor::full(&[2], -1.0)).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0]);
        assert!(affine_norm(&x, &Tensor::full(&[3], 1.0), &zero).is_err());
    }
}
