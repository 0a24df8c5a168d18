use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Flat input offsets of each 2x2 window maximum, in output order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Shape,
    argmax: Vec<usize>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.argmax
    }
}

/// 2x2, stride-2 max pooling. Ties go to the first position in row-major
/// order within the window.
pub fn maxpool2_forward<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, PoolIndices)> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::ShapeMismatch {
            op: "maxpool2_forward",
            expected: "even spatial dims".into(),
            found: s.to_string(),
        });
    }
    let out_shape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    let data = input.data();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let top = base + 2 * oy * s.w + 2 * ox;
                    let mut best = top;
                    for cand in [top + 1, top + s.w, top + s.w + 1] {
                        if data[cand] > data[best] {
                            best = cand;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((
        Tensor::new(out_shape, out)?,
        PoolIndices {
            input_shape: s,
            argmax,
        },
    ))
}

/// Routes each output gradient to the input position that won the max.
pub fn maxpool2_backward<S: Scalar>(grad_out: &Tensor<S>, indices: &PoolIndices) -> Result<Tensor<S>> {
    let s = indices.input_shape;
    grad_out.expect_shape("maxpool2_backward", Shape::new(s.n, s.c, s.h / 2, s.w / 2))?;
    let mut grad = Tensor::zeros(s);
    let gi = grad.data_mut();
    for (&idx, &g) in indices.argmax.iter().zip(grad_out.data()) {
        assert!(idx < gi.len(), "pool index {idx} outside input of {} elements", gi.len());
        gi[idx] += g;
    }
    Ok(grad)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let s = input.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, 2 * s.h, 2 * s.w), |n, c, y, x| {
        input.get(n, c, y / 2, x / 2)
    })
}

/// Sums each 2x2 block of output gradients into its source position.
pub fn upsample2_backward<S: Scalar>(grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    let s = grad_out.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::ShapeMismatch {
            op: "upsample2_backward",
            expected: "even spatial dims".into(),
            found: s.to_string(),
        });
    }
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, s.h / 2, s.w / 2), |n, c, y, x| {
        grad_out.get(n, c, 2 * y, 2 * x)
            + grad_out.get(n, c, 2 * y, 2 * x + 1)
            + grad_out.get(n, c, 2 * y + 1, 2 * x)
            + grad_out.get(n, c, 2 * y + 1, 2 * x + 1)
    }))
}
