use crate::error::{BevError, Result};

use super::Tensor;

/// Argmax positions recorded by [`maxpool2d_with_indices`], as flat offsets
/// into the pooled input.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

impl PoolIndices {
    /// Reads `grad` (input-shaped) at the recorded positions; the adjoint of
    /// unpooling.
    pub fn gather(&self, grad: &Tensor) -> Result<Tensor> {
        if grad.shape() != self.input_shape.as_slice() {
            return Err(BevError::Consistency(format!(
                "gather from {:?}, indices recorded on {:?}",
                grad.shape(),
                self.input_shape
            )));
        }
        let d = grad.data();
        Tensor::new(
            self.output_shape.clone(),
            self.argmax.iter().map(|&i| d[i]).collect(),
        )
    }
}

/// Max pooling over `rows × cols × channels`. Ties go to the first
/// position in row-major window order.
pub fn maxpool2d_with_indices(
    x: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Tensor, PoolIndices)> {
    let (h, w, c) = x.dims3()?;
    if window == 0 || stride == 0 {
        return Err(BevError::param("pool window and stride must be positive"));
    }
    if h % stride != 0 || w % stride != 0 || window > h || window > w {
        return Err(BevError::shape(format!(
            "{h}x{w} input not poolable with window {window}, stride {stride}"
        )));
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let d = x.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for k in 0..c {
                let mut best = (oy * stride * w + ox * stride) * c + k;
                for dy in 0..window {
                    for dx in 0..window {
                        let i = ((oy * stride + dy) * w + ox * stride + dx) * c + k;
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
    }
    let output_shape = vec![oh, ow, c];
    Ok((
        Tensor::new(output_shape.clone(), out)?,
        PoolIndices {
            input_shape: x.shape().to_vec(),
            output_shape,
            argmax,
        },
    ))
}

/// Places each pooled value back at its argmax; zeros elsewhere.
pub fn maxunpool2d(y: &Tensor, idx: &PoolIndices) -> Result<Tensor> {
    if y.shape() != idx.output_shape.as_slice() {
        return Err(BevError::Consistency(format!(
            "unpool input {:?}, indices expect {:?}",
            y.shape(),
            idx.output_shape
        )));
    }
    let mut out = Tensor::zeros(&idx.input_shape);
    let od = out.data_mut();
    for (&i, &v) in idx.argmax.iter().zip(y.data()) {
        od[i] += v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_takes_first_index() {
        let x = Tensor::full(&[4, 4, 1], 3.0);
        let (y, idx) = maxpool2d_with_indices(&x, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        assert_eq!(idx.argmax, vec![0, 2, 8, 10]);
    }

    #[test]
    fn block_maxima_and_round_trip() {
        let vals: Vec<f32> = vec![
            1., 5., 2., 0., //
            3., 4., 9., 8., //
            7., 6., 10., 11., //
            12., 13., 15., 14.,
        ];
        let x = Tensor::new(vec![4, 4, 1], vals).unwrap();
        let (y, idx) = maxpool2d_with_indices(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[5., 9., 13., 15.]);
        let u = maxunpool2d(&y, &idx).unwrap();
        assert_eq!(u.data().iter().filter(|&&v| v != 0.0).count(), y.len());
        assert_eq!(u.data()[1], 5.0);
        assert_eq!(u.data()[14], 15.0);
    }

    #[test]
    fn mismatched_indices_rejected() {
        let x = Tensor::zeros(&[4, 4, 2]);
        let (_, idx) = maxpool2d_with_indices(&x, 2, 2).unwrap();
        assert!(matches!(
            maxunpool2d(&Tensor::zeros(&[2, 2, 1]), &idx),
            Err(BevError::Consistency(_))
        ));
        assert!(maxpool2d_with_indices(&Tensor::zeros(&[5, 4, 1]), 2, 2).is_err());
    }
}
