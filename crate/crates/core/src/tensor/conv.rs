//! 2-D cross-correlation lowered onto a matrix product (im2col).
//!
//! The kernel is *not* flipped: `out[o, y, x] = b[o] + sum_{i, dy, dx}
//! w[o, i, dy, dx] * in[i, y*s + dy - ph, x*s + dx - pw]` with `ph = kh / 2`
//! and `pw = kw / 2`. Out-of-range taps read zero or the reflected sample,
//! depending on [`PaddingMode`].

use serde::{Deserialize, Serialize};

use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar, Stored};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Zero,
    /// Mirror about the edge sample without repeating it (`-1 -> 1`).
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: PaddingMode,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: PaddingMode,
    ) -> Result<Self> {
        let spec = Self {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Square kernel, stride 1, output the size of the input.
    pub fn same(in_channels: usize, out_channels: usize, k: usize, padding: PaddingMode) -> Result<Self> {
        Self::new(in_channels, out_channels, k, k, 1, padding)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h % 2 == 0 || self.kernel_w % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel dims must be odd, got {}x{}",
                self.kernel_h, self.kernel_w
            )));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be at least 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("convolution needs at least one input and output channel"));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (ph, pw) = (self.kernel_h / 2, self.kernel_w / 2);
        (
            (h + 2 * ph - self.kernel_h) / self.stride + 1,
            (w + 2 * pw - self.kernel_w) / self.stride + 1,
        )
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().len() + self.out_channels
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1
    }
}

/// Maps a possibly out-of-range coordinate into `0..len` by mirroring about
/// the edge samples. Coordinates further than one period away are folded
/// repeatedly; a length-1 axis maps everything to 0.
#[inline]
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m >= len as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Source coordinate (or `None` for a zero tap) for every (kernel offset,
/// output coordinate) pair along one axis.
fn axis_map(len: usize, out_len: usize, k: usize, stride: usize, padding: PaddingMode) -> Vec<Option<usize>> {
    let pad = (k / 2) as isize;
    let mut map = Vec::with_capacity(k * out_len);
    for d in 0..k {
        for o in 0..out_len {
            let src = (o * stride + d) as isize - pad;
            map.push(match padding {
                PaddingMode::Zero => (src >= 0 && src < len as isize).then_some(src as usize),
                PaddingMode::Reflect => Some(reflect_index(src, len)),
            });
        }
    }
    map
}

struct Lowering {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
}

impl Lowering {
    fn new(spec: &ConvSpec, h: usize, w: usize) -> Self {
        let (ho, wo) = spec.output_hw(h, w);
        Self {
            h,
            w,
            ho,
            wo,
            rows: axis_map(h, ho, spec.kernel_h, spec.stride, spec.padding),
            cols: axis_map(w, wo, spec.kernel_w, spec.stride, spec.padding),
        }
    }

    fn im2col<S: Scalar>(&self, spec: &ConvSpec, x: &[S], cols: &mut [S]) {
        let (kh, kw) = (spec.kernel_h, spec.kernel_w);
        let out_plane = self.ho * self.wo;
        let in_plane = self.h * self.w;
        for ci in 0..spec.in_channels {
            let src = &x[ci * in_plane..(ci + 1) * in_plane];
            for dy in 0..kh {
                for dx in 0..kw {
                    let row = (ci * kh + dy) * kw + dx;
                    let dst = &mut cols[row * out_plane..(row + 1) * out_plane];
                    let cmap = &self.cols[dx * self.wo..(dx + 1) * self.wo];
                    for oy in 0..self.ho {
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        match self.rows[dy * self.ho + oy] {
                            Some(sy) => {
                                let srow = &src[sy * self.w..(sy + 1) * self.w];
                                for (v, m) in line.iter_mut().zip(cmap) {
                                    *v = m.map_or(S::zero(), |sx| srow[sx]);
                                }
                            }
                            None => line.fill(S::zero()),
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Lowering::im2col`]: scatter-adds columns back onto the
    /// input grid (reflected taps accumulate onto their mirror sample).
    fn col2im<S: Scalar>(&self, spec: &ConvSpec, cols: &[S], gx: &mut [S]) {
        let (kh, kw) = (spec.kernel_h, spec.kernel_w);
        let out_plane = self.ho * self.wo;
        let in_plane = self.h * self.w;
        for ci in 0..spec.in_channels {
            let dst = &mut gx[ci * in_plane..(ci + 1) * in_plane];
            for dy in 0..kh {
                for dx in 0..kw {
                    let row = (ci * kh + dy) * kw + dx;
                    let src = &cols[row * out_plane..(row + 1) * out_plane];
                    let cmap = &self.cols[dx * self.wo..(dx + 1) * self.wo];
                    for oy in 0..self.ho {
                        if let Some(sy) = self.rows[dy * self.ho + oy] {
                            let line = &src[oy * self.wo..(oy + 1) * self.wo];
                            let drow = &mut dst[sy * self.w..(sy + 1) * self.w];
                            for (v, m) in line.iter().zip(cmap) {
                                if let Some(sx) = m {
                                    drow[*sx] += *v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_operands<S: Scalar>(input: &Tensor<S>, weights: &Tensor<S>, spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    if input.shape().c != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: format!("input with {} channels", spec.in_channels),
            found: format!("input {}", input.shape()),
        });
    }
    if weights.shape() != spec.weight_shape() {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: format!("weights {}", spec.weight_shape()),
            found: format!("weights {}", weights.shape()),
        });
    }
    Ok(())
}

/// Cross-correlates `input` with `weights` and adds `bias` per output channel.
pub fn conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &[S],
    spec: &ConvSpec,
) -> Result<Tensor<S>> {
    check_operands(input, weights, spec)?;
    if bias.len() != spec.out_channels {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: format!("bias of length {}", spec.out_channels),
            found: format!("bias of length {}", bias.len()),
        });
    }
    let s = input.shape();
    let low = Lowering::new(spec, s.h, s.w);
    let out_plane = low.ho * low.wo;
    let k = spec.patch_len();
    let mut out = Tensor::zeros(Shape::new(s.n, spec.out_channels, low.ho, low.wo));
    let mut cols = if spec.is_pointwise() { Vec::new() } else { vec![S::zero(); k * out_plane] };

    for n in 0..s.n {
        let x = input.sample(n);
        let lowered: &[S] = if spec.is_pointwise() {
            x
        } else {
            low.im2col(spec, x, &mut cols);
            &cols
        };
        let y = out.sample_mut(n);
        gemm(
            spec.out_channels,
            k,
            out_plane,
            weights.data(),
            Stored::AsIs,
            lowered,
            Stored::AsIs,
            S::zero(),
            y,
        );
        for (o, b) in bias.iter().enumerate() {
            for v in &mut y[o * out_plane..(o + 1) * out_plane] {
                *v += *b;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<S> {
    pub input: Tensor<S>,
    pub weights: Tensor<S>,
    pub bias: Vec<S>,
}

/// Gradients of a scalar objective with respect to the input, weights and
/// bias of [`conv2d_forward`], given its gradient `grad_out` at the output.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    grad_out: &Tensor<S>,
    spec: &ConvSpec,
) -> Result<ConvGrads<S>> {
    check_operands(input, weights, spec)?;
    let s = input.shape();
    let low = Lowering::new(spec, s.h, s.w);
    grad_out.expect_shape(
        "conv2d_backward",
        Shape::new(s.n, spec.out_channels, low.ho, low.wo),
    )?;
    let out_plane = low.ho * low.wo;
    let k = spec.patch_len();

    let mut grad_input = Tensor::zeros(s);
    let mut grad_w = Tensor::zeros(spec.weight_shape());
    let mut grad_b = vec![S::zero(); spec.out_channels];
    let mut cols = vec![S::zero(); k * out_plane];
    let mut grad_cols = vec![S::zero(); k * out_plane];

    for n in 0..s.n {
        let g = grad_out.sample(n);
        for (o, gb) in grad_b.iter_mut().enumerate() {
            *gb += g[o * out_plane..(o + 1) * out_plane].iter().copied().sum::<S>();
        }

        let x = input.sample(n);
        let lowered: &[S] = if spec.is_pointwise() {
            x
        } else {
            low.im2col(spec, x, &mut cols);
            &cols
        };
        // dW (out x k) += G (out x P) * cols^T (P x k)
        gemm(
            spec.out_channels,
            out_plane,
            k,
            g,
            Stored::AsIs,
            lowered,
            Stored::Transposed,
            S::one(),
            grad_w.data_mut(),
        );

        // dcols (k x P) = W^T (k x out) * G (out x P)
        let gx = grad_input.sample_mut(n);
        if spec.is_pointwise() {
            gemm(k, spec.out_channels, out_plane, weights.data(), Stored::Transposed, g, Stored::AsIs, S::zero(), gx);
        } else {
            gemm(
                k,
                spec.out_channels,
                out_plane,
                weights.data(),
                Stored::Transposed,
                g,
                Stored::AsIs,
                S::zero(),
                &mut grad_cols,
            );
            low.col2im(spec, &grad_cols, gx);
        }
    }

    Ok(ConvGrads {
        input: grad_input,
        weights: grad_w,
        bias: grad_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    /// Direct nested-loop evaluation of the documented formula.
    fn direct(input: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], spec: &ConvSpec) -> Tensor<f64> {
        let s = input.shape();
        let (ho, wo) = spec.output_hw(s.h, s.w);
        let (ph, pw) = ((spec.kernel_h / 2) as isize, (spec.kernel_w / 2) as isize);
        Tensor::from_fn(Shape::new(s.n, spec.out_channels, ho, wo), |n, o, y, x| {
            let mut acc = b[o];
            for i in 0..spec.in_channels {
                for dy in 0..spec.kernel_h {
                    for dx in 0..spec.kernel_w {
                        let sy = (y * spec.stride + dy) as isize - ph;
                        let sx = (x * spec.stride + dx) as isize - pw;
                        let v = match spec.padding {
                            PaddingMode::Zero => {
                                if sy < 0 || sx < 0 || sy >= s.h as isize || sx >= s.w as isize {
                                    0.0
                                } else {
                                    input.get(n, i, sy as usize, sx as usize)
                                }
                            }
                            PaddingMode::Reflect => {
                                input.get(n, i, reflect_index(sy, s.h), reflect_index(sx, s.w))
                            }
                        };
                        acc += w.get(o, i, dy, dx) * v;
                    }
                }
            }
            acc
        })
    }

    fn pseudo(shape: Shape, salt: f64) -> Tensor<f64> {
        let mut k = 0.0;
        Tensor::from_fn(shape, |_, _, _, _| {
            k += 1.0;
            ((k * 12.9898 + salt).sin() * 43758.5453).fract()
        })
    }

    #[test]
    fn reflect_index_mirrors_without_repeating_edge() {
        let got: Vec<usize> = (-4..9).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect_index(-3, 1), 0);
    }

    #[test]
    fn hand_summed_center_is_45() {
        let input = Tensor::new(Shape::new(1, 1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let spec = ConvSpec::same(1, 1, 3, PaddingMode::Zero).unwrap();
        let out = conv2d_forward(&input, &w, &[0.0], &spec).unwrap();
        assert_eq!(out.get(0, 0, 1, 1), 45.0);
        // corner sees only 1+2+4+5
        assert_eq!(out.get(0, 0, 0, 0), 12.0);
    }

    #[test]
    fn pointwise_identity_is_bit_exact() {
        let input = pseudo(Shape::new(2, 3, 5, 4), 0.3);
        let spec = ConvSpec::same(3, 3, 1, PaddingMode::Zero).unwrap();
        let w = Tensor::from_fn(spec.weight_shape(), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        let out = conv2d_forward(&input, &w, &[0.0; 3], &spec).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn centered_delta_kernel_is_identity() {
        let input = pseudo(Shape::new(1, 2, 6, 6), 1.1);
        for padding in [PaddingMode::Zero, PaddingMode::Reflect] {
            let spec = ConvSpec::same(2, 2, 3, padding).unwrap();
            let w = Tensor::from_fn(spec.weight_shape(), |o, i, y, x| {
                if o == i && y == 1 && x == 1 { 1.0 } else { 0.0 }
            });
            assert_eq!(conv2d_forward(&input, &w, &[0.0; 2], &spec).unwrap(), input);
        }
    }

    #[test]
    fn zero_input_yields_bias() {
        let spec = ConvSpec::same(2, 3, 3, PaddingMode::Zero).unwrap();
        let input = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let w = pseudo(spec.weight_shape(), 2.0);
        let out = conv2d_forward(&input, &w, &[0.5, -1.0, 2.0], &spec).unwrap();
        for (o, b) in [0.5, -1.0, 2.0].iter().enumerate() {
            assert!(out.plane(0, o).iter().all(|v| v == b));
        }
    }

    #[test]
    fn matches_direct_loops_for_all_paddings_and_strides() {
        for (padding, stride, k) in [
            (PaddingMode::Zero, 1, 3),
            (PaddingMode::Reflect, 1, 5),
            (PaddingMode::Zero, 2, 3),
            (PaddingMode::Reflect, 2, 3),
            (PaddingMode::Reflect, 1, 9),
        ] {
            let spec = ConvSpec::new(2, 3, k, k, stride, padding).unwrap();
            let input = pseudo(Shape::new(2, 2, 7, 6), 0.7);
            let w = pseudo(spec.weight_shape(), 4.0);
            let b = [0.1, 0.2, -0.3];
            let fast = conv2d_forward(&input, &w, &b, &spec).unwrap();
            let slow = direct(&input, &w, &b, &spec);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{padding:?} stride {stride} k {k}");
        }
    }

    #[test]
    fn output_dims_follow_floor_formula() {
        let spec = ConvSpec::new(1, 1, 3, 5, 2, PaddingMode::Zero).unwrap();
        // floor((7 + 2 - 3)/2) + 1 = 4 ; floor((8 + 4 - 5)/2) + 1 = 4
        assert_eq!(spec.output_hw(7, 8), (4, 4));
    }

    #[test]
    fn rejects_bad_specs_and_shapes() {
        assert!(ConvSpec::same(1, 1, 2, PaddingMode::Zero).is_err());
        assert!(ConvSpec::new(1, 1, 3, 3, 0, PaddingMode::Zero).is_err());
        let spec = ConvSpec::same(2, 1, 3, PaddingMode::Zero).unwrap();
        let err = conv2d_forward(
            &Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4)),
            &Tensor::zeros(spec.weight_shape()),
            &[0.0],
            &spec,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2 channels") && msg.contains("(1, 3, 4, 4)"), "{msg}");
    }

    #[test]
    fn scalar_backward_is_symbolic_derivative() {
        let spec = ConvSpec::same(1, 1, 1, PaddingMode::Zero).unwrap();
        let (x, w, g) = (1.5, -0.75, 2.0);
        let input = Tensor::full(Shape::new(1, 1, 1, 1), x);
        let weights = Tensor::full(Shape::new(1, 1, 1, 1), w);
        let grad_out = Tensor::full(Shape::new(1, 1, 1, 1), g);
        let grads = conv2d_backward(&input, &weights, &grad_out, &spec).unwrap();
        assert_eq!(grads.weights.data(), &[g * x]);
        assert_eq!(grads.input.data(), &[g * w]);
        assert_eq!(grads.bias, vec![g]);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let spec = ConvSpec::same(2, 2, 3, PaddingMode::Reflect).unwrap();
        let input = pseudo(Shape::new(1, 2, 5, 5), 0.1);
        let w = pseudo(spec.weight_shape(), 0.2);
        let grads = conv2d_backward(&input, &w, &Tensor::zeros(Shape::new(1, 2, 5, 5)), &spec).unwrap();
        assert!(grads.input.data().iter().all(|v| *v == 0.0));
        assert!(grads.weights.data().iter().all(|v| *v == 0.0));
        assert!(grads.bias.iter().all(|v| *v == 0.0));
    }
}
