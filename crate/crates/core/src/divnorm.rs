//! Generalized divisive normalization with a trainable, spatially windowed
//! interaction kernel.
//!
//! For an input `z` with `C` channels the layer computes
//!
//! ```text
//! D[i, p] = beta[i] + sum_{j, d in window} gamma[i, j, d] * |z[j, p + d]|
//! y[i, p] = z[i, p] / D[i, p]
//! ```
//!
//! i.e. the general form `z / (beta + sum gamma |z|^alpha)^epsilon` with both
//! exponents fixed to one. The pool is dense over channels and convolutional
//! over space: the same `k x k` window of weights is used at every position,
//! with reflect padding at the image border so border pixels are not
//! artificially under-normalized.
//!
//! Gradients with respect to the input, `beta` and `gamma` are exact:
//!
//! ```text
//! dy[i,p]/dz[i,p]       = 1 / D[i,p]                       (direct term)
//! dy[i,p]/dz[j,p']      = -z[i,p] gamma[i,j,p'-p] sign(z[j,p']) / D[i,p]^2
//! dy[i,p]/dbeta[i]      = -z[i,p] / D[i,p]^2
//! dy[i,p]/dgamma[i,j,d] = -z[i,p] |z[j,p+d]| / D[i,p]^2
//! ```
//!
//! with `sign(0) = 0`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv2d_backward, conv2d_forward, reflect_index, ConvSpec, PaddingMode, Shape, Tensor};

/// Lower bound kept on every `beta[i]`; guarantees a positive denominator.
pub const BETA_MIN: f64 = 1e-6;

/// Default spatial extent of the interaction window.
pub const DEFAULT_WINDOW: usize = 5;

const INIT_SELF_GAMMA: f64 = 0.1;
const INIT_CROSS_GAMMA: f64 = 0.01;

/// Parameters of one normalization layer.
///
/// `gamma` has shape `(C, C, k, k)`: `gamma[i, j, dy, dx]` weights the
/// magnitude of channel `j` at offset `(dy - k/2, dx - k/2)` in the pool of
/// channel `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct DnParams<S> {
    pub beta: Vec<S>,
    pub gamma: Tensor<S>,
}

impl<S: Scalar> DnParams<S> {
    pub fn new(beta: Vec<S>, gamma: Tensor<S>) -> Result<Self> {
        let p = Self { beta, gamma };
        p.validate()?;
        Ok(p)
    }

    /// Mild, mostly pointwise starting point: `beta = 1`, self-centre weight
    /// 0.1 and every other weight `0.01 / (C k^2)`.
    pub fn init(channels: usize, window: usize) -> Result<Self> {
        check_geometry(channels, window)?;
        let c = window / 2;
        let cross = S::of(INIT_CROSS_GAMMA / (channels * window * window) as f64);
        let gamma = Tensor::from_fn(Shape::new(channels, channels, window, window), |i, j, y, x| {
            if i == j && y == c && x == c {
                S::of(INIT_SELF_GAMMA)
            } else {
                cross
            }
        });
        Self::new(vec![S::one(); channels], gamma)
    }

    /// `gamma = 0`, `beta = 1`: the layer returns its input unchanged.
    pub fn identity(channels: usize, window: usize) -> Result<Self> {
        check_geometry(channels, window)?;
        Self::new(
            vec![S::one(); channels],
            Tensor::zeros(Shape::new(channels, channels, window, window)),
        )
    }

    pub fn channels(&self) -> usize {
        self.beta.len()
    }

    pub fn window(&self) -> usize {
        self.gamma.shape().h
    }

    /// Exponent on the pooled magnitudes; fixed.
    pub fn alpha(&self) -> S {
        S::one()
    }

    /// Exponent on the denominator; fixed.
    pub fn epsilon(&self) -> S {
        S::one()
    }

    pub fn param_count(channels: usize, window: usize) -> usize {
        channels + channels * channels * window * window
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        check_geometry(c, self.window())?;
        let g = self.gamma.shape();
        if g != Shape::new(c, c, g.h, g.h) {
            return Err(Error::ShapeMismatch {
                op: "DnParams",
                expected: format!("gamma of shape ({c}, {c}, k, k)"),
                found: g.to_string(),
            });
        }
        let beta_min = S::of(BETA_MIN);
        if let Some((i, b)) = self.beta.iter().enumerate().find(|(_, b)| !(**b >= beta_min) || !b.is_finite()) {
            return Err(Error::invalid(format!("beta[{i}] = {b} is below the minimum {BETA_MIN}")));
        }
        if let Some(v) = self.gamma.data().iter().find(|v| !(**v >= S::zero()) || !v.is_finite()) {
            return Err(Error::invalid(format!("gamma entries must be finite and nonnegative, found {v}")));
        }
        Ok(())
    }

    /// Clamps `beta >= BETA_MIN` and `gamma >= 0` in place.
    pub fn project(&mut self) {
        project_beta(&mut self.beta);
        project_gamma(self.gamma.data_mut());
    }

    fn pool_spec(&self) -> ConvSpec {
        let k = self.window();
        ConvSpec {
            in_channels: self.channels(),
            out_channels: self.channels(),
            kernel_h: k,
            kernel_w: k,
            stride: 1,
            padding: PaddingMode::Reflect,
        }
    }
}

pub(crate) fn project_beta<S: Scalar>(beta: &mut [S]) {
    let beta_min = S::of(BETA_MIN);
    for b in beta {
        if !(*b >= beta_min) {
            *b = beta_min;
        }
    }
}

pub(crate) fn project_gamma<S: Scalar>(gamma: &mut [S]) {
    for g in gamma {
        if !(*g >= S::zero()) {
            *g = S::zero();
        }
    }
}

fn check_geometry(channels: usize, window: usize) -> Result<()> {
    if channels == 0 {
        return Err(Error::invalid("divisive normalization needs at least one channel"));
    }
    if window % 2 == 0 {
        return Err(Error::invalid(format!("pool window must be odd, got {window}")));
    }
    Ok(())
}

/// How the pooled magnitudes are accumulated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PoolStrategy {
    /// Direct loops over (output channel, position, input channel, window).
    Naive,
    /// All channels of a window lowered into one matrix product.
    #[default]
    ChannelBlocked,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DnGrads<S> {
    pub input: Tensor<S>,
    pub beta: Vec<S>,
    pub gamma: Tensor<S>,
}

fn check_input<S: Scalar>(op: &'static str, z: &Tensor<S>, params: &DnParams<S>) -> Result<()> {
    params.validate()?;
    if z.shape().c != params.channels() {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("input with {} channels", params.channels()),
            found: z.shape().to_string(),
        });
    }
    if !z.all_finite() {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

/// Normalizes `z`, returning the output and the denominators `D` needed by
/// [`dn_backward`].
pub fn dn_forward<S: Scalar>(z: &Tensor<S>, params: &DnParams<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    dn_forward_with(z, params, PoolStrategy::default())
}

pub fn dn_forward_with<S: Scalar>(
    z: &Tensor<S>,
    params: &DnParams<S>,
    strategy: PoolStrategy,
) -> Result<(Tensor<S>, Tensor<S>)> {
    check_input("dn_forward", z, params)?;
    let magnitude = z.map(|v| v.abs());
    let mut denom = match strategy {
        PoolStrategy::ChannelBlocked => {
            let zeros = vec![S::zero(); params.channels()];
            conv2d_forward(&magnitude, &params.gamma, &zeros, &params.pool_spec())?
        }
        PoolStrategy::Naive => naive_pool(&magnitude, params),
    };
    let plane = z.shape().plane();
    for (k, d) in denom.data_mut().iter_mut().enumerate() {
        let i = (k / plane) % params.channels();
        *d += params.beta[i];
    }
    let y = Tensor::new(
        z.shape(),
        z.data().iter().zip(denom.data()).map(|(&v, &d)| v / d).collect(),
    )?;
    Ok((y, denom))
}

/// Chain-rule contraction of the layer Jacobians with `grad_y`.
pub fn dn_backward<S: Scalar>(
    z: &Tensor<S>,
    params: &DnParams<S>,
    denom: &Tensor<S>,
    grad_y: &Tensor<S>,
) -> Result<DnGrads<S>> {
    dn_backward_with(z, params, denom, grad_y, PoolStrategy::default())
}

pub fn dn_backward_with<S: Scalar>(
    z: &Tensor<S>,
    params: &DnParams<S>,
    denom: &Tensor<S>,
    grad_y: &Tensor<S>,
    strategy: PoolStrategy,
) -> Result<DnGrads<S>> {
    check_input("dn_backward", z, params)?;
    denom.expect_shape("dn_backward (denominator cache)", z.shape())?;
    grad_y.expect_shape("dn_backward (output gradient)", z.shape())?;

    let c = params.channels();
    let plane = z.shape().plane();

    // gradient with respect to the denominator: -g z / D^2
    let grad_denom = Tensor::new(
        z.shape(),
        z.data()
            .iter()
            .zip(denom.data())
            .zip(grad_y.data())
            .map(|((&v, &d), &g)| -g * v / (d * d))
            .collect(),
    )?;

    let mut grad_beta = vec![S::zero(); c];
    for (k, gd) in grad_denom.data().iter().enumerate() {
        grad_beta[(k / plane) % c] += *gd;
    }

    let magnitude = z.map(|v| v.abs());
    let (grad_magnitude, grad_gamma) = match strategy {
        PoolStrategy::ChannelBlocked => {
            let g = conv2d_backward(&magnitude, &params.gamma, &grad_denom, &params.pool_spec())?;
            (g.input, g.weights)
        }
        PoolStrategy::Naive => naive_pool_backward(&magnitude, params, &grad_denom),
    };

    let grad_input = Tensor::new(
        z.shape(),
        z.data()
            .iter()
            .zip(denom.data())
            .zip(grad_y.data())
            .zip(grad_magnitude.data())
            .map(|(((&v, &d), &g), &gm)| g / d + v.sign_or_zero() * gm)
            .collect(),
    )?;

    Ok(DnGrads {
        input: grad_input,
        beta: grad_beta,
        gamma: grad_gamma,
    })
}

fn reflect_table(len: usize, window: usize) -> Vec<usize> {
    let r = (window / 2) as isize;
    (0..len)
        .flat_map(|p| (0..window).map(move |d| reflect_index(p as isize + d as isize - r, len)))
        .collect()
}

fn naive_pool<S: Scalar>(magnitude: &Tensor<S>, params: &DnParams<S>) -> Tensor<S> {
    let s = magnitude.shape();
    let k = params.window();
    let rows = reflect_table(s.h, k);
    let cols = reflect_table(s.w, k);
    Tensor::from_fn(s, |n, i, y, x| {
        let mut acc = S::zero();
        for j in 0..s.c {
            let src = magnitude.plane(n, j);
            for dy in 0..k {
                let sy = rows[y * k + dy];
                for dx in 0..k {
                    let sx = cols[x * k + dx];
                    acc += params.gamma.get(i, j, dy, dx) * src[sy * s.w + sx];
                }
            }
        }
        acc
    })
}

fn naive_pool_backward<S: Scalar>(
    magnitude: &Tensor<S>,
    params: &DnParams<S>,
    grad_denom: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let s = magnitude.shape();
    let k = params.window();
    let rows = reflect_table(s.h, k);
    let cols = reflect_table(s.w, k);
    let mut grad_mag = Tensor::zeros(s);
    let mut grad_gamma = Tensor::zeros(params.gamma.shape());
    for n in 0..s.n {
        for i in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let h = grad_denom.get(n, i, y, x);
                    for j in 0..s.c {
                        for dy in 0..k {
                            let sy = rows[y * k + dy];
                            for dx in 0..k {
                                let sx = cols[x * k + dx];
                                let gi = grad_gamma.offset(i, j, dy, dx);
                                grad_gamma.data_mut()[gi] += h * magnitude.get(n, j, sy, sx);
                                let mi = grad_mag.offset(n, j, sy, sx);
                                grad_mag.data_mut()[mi] += h * params.gamma.get(i, j, dy, dx);
                            }
                        }
                    }
                }
            }
        }
    }
    (grad_mag, grad_gamma)
}
