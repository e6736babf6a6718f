use crate::error::{BevError, Result};
use crate::par;

use super::{GradPair, Tensor};

/// Convolution weights `[kh × kw × cin × cout]` and bias `[cout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Kernel {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let k = Kernel { weight, bias };
        k.dims()?;
        Ok(k)
    }

    /// `(kh, kw, cin, cout)`.
    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        match self.weight.shape()[..] {
            [kh, kw, ci, co] if self.bias.shape() == [co] => Ok((kh, kw, ci, co)),
            _ => Err(BevError::shape(format!(
                "kernel weight {:?} with bias {:?}",
                self.weight.shape(),
                self.bias.shape()
            ))),
        }
    }

    /// Padding that preserves spatial extents at stride 1 (odd kernels).
    pub fn same_padding(&self) -> usize {
        self.weight.shape()[0] / 2
    }
}

struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(x: &Tensor, k: &Kernel, stride: usize, pad: usize) -> Result<Self> {
        let (h, w, cin) = x.dims3()?;
        let (kh, kw, kcin, cout) = k.dims()?;
        if stride == 0 {
            return Err(BevError::param("conv2d stride must be positive"));
        }
        if pad >= kh.max(kw) {
            return Err(BevError::param(format!(
                "conv2d padding {pad} for a {kh}x{kw} kernel"
            )));
        }
        if kcin != cin {
            return Err(BevError::shape(format!(
                "kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(BevError::param(format!(
                "{kh}x{kw} kernel exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Geometry {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    /// Input coordinate for output `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        (o * self.stride + t).checked_sub(self.pad).filter(|&i| i < extent)
    }
}

/// 2-D convolution over a `rows × cols × cin` tensor.
pub fn conv2d(x: &Tensor, k: &Kernel, stride: usize, padding: usize) -> Result<Tensor> {
    let g = Geometry::new(x, k, stride, padding)?;
    let (xd, wd, bd) = (x.data(), k.weight.data(), k.bias.data());
    let rows = par::map_range(g.oh, |oy| {
        let mut row = Vec::with_capacity(g.ow * g.cout);
        let mut acc = vec![0.0f64; g.cout];
        for ox in 0..g.ow {
            acc.iter_mut().zip(bd).for_each(|(a, &b)| *a = b as f64);
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xp = &xd[(iy * g.w + ix) * g.cin..][..g.cin];
                    let wbase = (ky * g.kw + kx) * g.cin * g.cout;
                    for (ci, &xv) in xp.iter().enumerate() {
                        let xv = xv as f64;
                        let wrow = &wd[wbase + ci * g.cout..][..g.cout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += xv * wv as f64;
                        }
                    }
                }
            }
            row.extend(acc.iter().map(|&a| a as f32));
        }
        row
    });
    Tensor::new(vec![g.oh, g.ow, g.cout], rows.concat())
}

/// Gradients of [`conv2d`] w.r.t. `input`, `weight` and `bias`.
pub fn conv2d_vjp(
    x: &Tensor,
    k: &Kernel,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<GradPair> {
    let g = Geometry::new(x, k, stride, padding)?;
    let value = conv2d(x, k, stride, padding)?;
    value.expect_same_shape(grad_out)?;
    let (xd, wd, gd) = (x.data(), k.weight.data(), grad_out.data());

    // Input gradient, gathered per input row.
    let in_rows = par::map_range(g.h, |iy| {
        let mut row = vec![0.0f32; g.w * g.cin];
        let mut acc = vec![0.0f64; g.cin];
        for ix in 0..g.w {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for ky in 0..g.kh {
                let Some(oy) = out_index(iy, ky, &g, g.oh) else { continue };
                for kx in 0..g.kw {
                    let Some(ox) = out_index(ix, kx, &g, g.ow) else { continue };
                    let gp = &gd[(oy * g.ow + ox) * g.cout..][..g.cout];
                    let wbase = (ky * g.kw + kx) * g.cin * g.cout;
                    for (ci, a) in acc.iter_mut().enumerate() {
                        let wrow = &wd[wbase + ci * g.cout..][..g.cout];
                        *a += wrow
                            .iter()
                            .zip(gp)
                            .map(|(&wv, &gv)| wv as f64 * gv as f64)
                            .sum::<f64>();
                    }
                }
            }
            for (o, &a) in row[ix * g.cin..][..g.cin].iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
        row
    });

    // Weight gradient, one kernel tap per task.
    let taps = par::map_range(g.kh * g.kw, |tap| {
        let (ky, kx) = (tap / g.kw, tap % g.kw);
        let mut acc = vec![0.0f64; g.cin * g.cout];
        for oy in 0..g.oh {
            let Some(iy) = g.src(oy, ky, g.h) else { continue };
            for ox in 0..g.ow {
                let Some(ix) = g.src(ox, kx, g.w) else { continue };
                let xp = &xd[(iy * g.w + ix) * g.cin..][..g.cin];
                let gp = &gd[(oy * g.ow + ox) * g.cout..][..g.cout];
                for (ci, &xv) in xp.iter().enumerate() {
                    let xv = xv as f64;
                    for (a, &gv) in acc[ci * g.cout..][..g.cout].iter_mut().zip(gp) {
                        *a += xv * gv as f64;
                    }
                }
            }
        }
        acc.into_iter().map(|a| a as f32).collect::<Vec<_>>()
    });

    let mut gb = vec![0.0f64; g.cout];
    for gp in gd.chunks(g.cout) {
        for (a, &gv) in gb.iter_mut().zip(gp) {
            *a += gv as f64;
        }
    }

    Ok(GradPair::new(value)
        .with("input", Tensor::new(x.shape().to_vec(), in_rows.concat())?)
        .with("weight", Tensor::new(k.weight.shape().to_vec(), taps.concat())?)
        .with(
            "bias",
            Tensor::new(vec![g.cout], gb.into_iter().map(|a| a as f32).collect())?,
        ))
}

/// Output coordinate that reads input `i` through tap `t`, if any.
#[inline]
fn out_index(i: usize, t: usize, g: &Geometry, extent: usize) -> Option<usize> {
    let p = (i + g.pad).checked_sub(t)?;
    if p % g.stride != 0 {
        return None;
    }
    Some(p / g.stride).filter(|&o| o < extent)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_1x1(c: usize) -> Kernel {
        let w = Tensor::from_fn(&[1, 1, c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        Kernel::new(w, Tensor::zeros(&[c])).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::from_fn(&[4, 5, 3], |i| (i as f32).sin());
        assert_eq!(conv2d(&x, &identity_1x1(3), 1, 0).unwrap(), x);
    }

    #[test]
    fn ones_kernel_spreads_single_hot() {
        let mut x = Tensor::zeros(&[5, 5, 1]);
        x.data_mut()[2 * 5 + 2] = 1.0;
        let k = Kernel::new(Tensor::full(&[3, 3, 1, 1], 1.0), Tensor::zeros(&[1])).unwrap();
        let y = conv2d(&x, &k, 1, 1).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let want = if (1..=3).contains(&r) && (1..=3).contains(&c) { 1.0 } else { 0.0 };
                assert_eq!(y.at3(r, c, 0), want, "({r},{c})");
            }
        }
    }

    #[test]
    fn output_extents_follow_formula() {
        let x = Tensor::zeros(&[7, 9, 2]);
        let k = Kernel::new(Tensor::zeros(&[3, 3, 2, 4]), Tensor::zeros(&[4])).unwrap();
        let y = conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[(7 + 2 - 3) / 2 + 1, (9 + 2 - 3) / 2 + 1, 4]);
    }

    #[test]
    fn invalid_parameters() {
        let x = Tensor::zeros(&[4, 4, 1]);
        let k = Kernel::new(Tensor::zeros(&[3, 3, 1, 1]), Tensor::zeros(&[1])).unwrap();
        assert!(matches!(conv2d(&x, &k, 0, 1), Err(BevError::Param(_))));
        assert!(matches!(conv2d(&x, &k, 1, 3), Err(BevError::Param(_))));
        let big = Kernel::new(Tensor::zeros(&[7, 7, 1, 1]), Tensor::zeros(&[1])).unwrap();
        assert!(matches!(conv2d(&x, &big, 1, 0), Err(BevError::Param(_))));
    }
}
