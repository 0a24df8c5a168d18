//! Miniature U-Net with optional divisive normalization in the encoder.
//!
//! Topology, for encoder widths `[e1, e2, e3]`:
//!
//! ```text
//! input -> [dn1] -> enc1: conv3x3 -> relu -> [dn2] -> maxpool2 ─┐ skip1
//!                   enc2: conv3x3 -> relu -> [dn3] -> maxpool2 ─┤ skip2
//!                   enc3: conv3x3 -> relu -> [dn4] -> maxpool2 ─┤ skip3
//!                   bottleneck: conv3x3 -> relu                 │
//!                   dec1: upsample2 -> concat skip3 -> conv3x3 -> relu
//!                   dec2: upsample2 -> concat skip2 -> conv3x3 -> relu
//!                   dec3: upsample2 -> concat skip1 -> conv3x3 -> relu
//!                   head: conv1x1 -> K raw class scores
//! ```
//!
//! The head starts at zero. With raw scores under an absolute-error loss, a
//! random head pushes most logits toward zero by silencing the last decoder
//! stage, and training then stalls on a constant prediction.
//!
//! The `dn1` variant only has the input site; `dn4` has all four. Skips are
//! taken after the normalization of their stage.

mod io;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::divnorm::{dn_backward, dn_forward, DnParams, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::rng::{substream, STREAM_INIT};
use crate::scalar::Scalar;
use crate::tensor::{
    concat_channels, conv2d_backward, conv2d_forward, maxpool2_backward, maxpool2_forward, relu_backward,
    relu_forward, split_channels, upsample2_backward, upsample2_forward, ConvSpec, PaddingMode, PoolIndices,
    Tensor,
};

pub use io::{load_model, load_model_expecting, save_model, MAGIC};

/// Number of pooling stages; inputs must be a multiple of `2^DEPTH` in size.
pub const DEPTH: usize = 3;
pub const SPATIAL_MULTIPLE: usize = 1 << DEPTH;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DnVariant {
    None,
    Dn1,
    Dn4,
}

impl DnVariant {
    pub const ALL: [DnVariant; 3] = [DnVariant::None, DnVariant::Dn1, DnVariant::Dn4];

    pub fn site_count(self) -> usize {
        match self {
            DnVariant::None => 0,
            DnVariant::Dn1 => 1,
            DnVariant::Dn4 => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DnVariant::None => "none",
            DnVariant::Dn1 => "dn1",
            DnVariant::Dn4 => "dn4",
        }
    }
}

impl fmt::Display for DnVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DnVariant::None),
            "dn1" => Ok(DnVariant::Dn1),
            "dn4" => Ok(DnVariant::Dn4),
            other => Err(Error::invalid(format!("unknown variant {other:?}, expected none|dn1|dn4"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_channels: Vec<usize>,
    pub dn_variant: DnVariant,
    pub dn_window: usize,
    pub seed: u64,
}

impl UNetConfig {
    pub fn new(num_classes: usize, dn_variant: DnVariant, seed: u64) -> Self {
        Self {
            in_channels: 3,
            num_classes,
            encoder_channels: vec![16, 32, 64],
            dn_variant,
            dn_window: DEFAULT_WINDOW,
            seed,
        }
    }

    pub fn with_encoder_channels(mut self, channels: &[usize]) -> Self {
        self.encoder_channels = channels.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.len() != DEPTH {
            return Err(Error::invalid(format!(
                "encoder depth must be {DEPTH}, got {} stages",
                self.encoder_channels.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.in_channels == 0 || self.encoder_channels.contains(&0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.dn_window % 2 == 0 {
            return Err(Error::invalid(format!("dn window must be odd, got {}", self.dn_window)));
        }
        Ok(())
    }

    /// Channel count seen by each normalization site, in site order.
    pub fn dn_site_channels(&self) -> Vec<usize> {
        let all = [self.in_channels, self.encoder_channels[0], self.encoder_channels[1], self.encoder_channels[2]];
        all[..self.dn_variant.site_count()].to_vec()
    }

    /// Closed-form parameter count of the network described by this config.
    pub fn param_count(&self) -> usize {
        let e = &self.encoder_channels;
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let convs = conv(self.in_channels, e[0], 3)
            + conv(e[0], e[1], 3)
            + conv(e[1], e[2], 3)
            + conv(e[2], e[2], 3)
            + conv(2 * e[2], e[2], 3)
            + conv(e[2] + e[1], e[1], 3)
            + conv(e[1] + e[0], e[0], 3)
            + conv(e[0], self.num_classes, 1);
        convs + self.dn_param_count()
    }

    pub fn dn_param_count(&self) -> usize {
        self.dn_site_channels()
            .iter()
            .map(|&c| DnParams::<f64>::param_count(c, self.dn_window))
            .sum()
    }
}

/// Convolution weights and bias together with their geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<S> {
    pub spec: ConvSpec,
    pub weight: Tensor<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Conv2d<S> {
    /// Weights uniform in `+-sqrt(6 / (fan_in + fan_out))`, zero bias.
    fn glorot(spec: ConvSpec, rng: &mut crate::rng::Rng) -> Self {
        let area = spec.kernel_h * spec.kernel_w;
        let limit = (6.0 / ((spec.in_channels + spec.out_channels) * area) as f64).sqrt();
        let weight = Tensor::from_fn(spec.weight_shape(), |_, _, _, _| S::of(rng.gen_range(-limit..limit)));
        Self {
            spec,
            weight,
            bias: vec![S::zero(); spec.out_channels],
        }
    }

    fn zeroed(spec: ConvSpec) -> Self {
        Self {
            spec,
            weight: Tensor::zeros(spec.weight_shape()),
            bias: vec![S::zero(); spec.out_channels],
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        conv2d_forward(x, &self.weight, &self.bias, &self.spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStage<S> {
    pub conv: Conv2d<S>,
    pub dn: Option<DnParams<S>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    DnBeta,
    DnGamma,
}

/// Borrowed view of one named parameter buffer.
#[derive(Clone, Debug)]
pub struct ParamRef<'a, S> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: &'a [S],
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet<S> {
    config: UNetConfig,
    pub input_dn: Option<DnParams<S>>,
    pub encoder: Vec<EncoderStage<S>>,
    pub bottleneck: Conv2d<S>,
    /// Deepest stage first.
    pub decoder: Vec<Conv2d<S>>,
    pub head: Conv2d<S>,
}

/// Deterministically initializes a network from its config.
///
/// Only the convolutions consume the init stream, so variants built from
/// the same seed share identical convolution weights.
pub fn build_model<S: Scalar>(config: &UNetConfig) -> Result<UNet<S>> {
    config.validate()?;
    let mut rng = substream(config.seed, STREAM_INIT);
    let e = &config.encoder_channels;
    let with_dn = config.dn_variant == DnVariant::Dn4;
    let conv3 = |i, o| ConvSpec::same(i, o, 3, PaddingMode::Zero);

    let input_dn = match config.dn_variant {
        DnVariant::None => None,
        _ => Some(DnParams::init(config.in_channels, config.dn_window)?),
    };
    let mut encoder = Vec::with_capacity(DEPTH);
    let mut cin = config.in_channels;
    for &cout in e {
        encoder.push(EncoderStage {
            conv: Conv2d::glorot(conv3(cin, cout)?, &mut rng),
            dn: if with_dn { Some(DnParams::init(cout, config.dn_window)?) } else { None },
        });
        cin = cout;
    }
    let bottleneck = Conv2d::glorot(conv3(e[2], e[2])?, &mut rng);
    let mut decoder = Vec::with_capacity(DEPTH);
    let mut below = e[2];
    for &skip in e.iter().rev() {
        decoder.push(Conv2d::glorot(conv3(below + skip, skip)?, &mut rng));
        below = skip;
    }
    let head = Conv2d::zeroed(ConvSpec::same(e[0], config.num_classes, 1, PaddingMode::Zero)?);

    Ok(UNet {
        config: config.clone(),
        input_dn,
        encoder,
        bottleneck,
        decoder,
        head,
    })
}

impl<S: Scalar> UNet<S> {
    /// Redraws the head weights from the same uniform range as the hidden
    /// convolutions. Used by gradient checks, which need every path live.
    pub fn randomize_head(&mut self, rng: &mut crate::rng::Rng) {
        let spec = self.head.spec;
        self.head.weight = Conv2d::glorot(spec, rng).weight;
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn variant(&self) -> DnVariant {
        self.config.dn_variant
    }

    /// Normalization parameters at `site` (1-based, input site first).
    pub fn dn_site(&self, site: usize) -> Option<&DnParams<S>> {
        match site {
            1 => self.input_dn.as_ref(),
            2..=4 => self.encoder[site - 2].dn.as_ref(),
            _ => None,
        }
    }

    pub fn dn_site_mut(&mut self, site: usize) -> Option<&mut DnParams<S>> {
        match site {
            1 => self.input_dn.as_mut(),
            2..=4 => self.encoder[site - 2].dn.as_mut(),
            _ => None,
        }
    }

    pub fn dn_sites(&self) -> Vec<usize> {
        (1..=4).filter(|&s| self.dn_site(s).is_some()).collect()
    }

    /// Visits every parameter buffer in canonical order.
    pub fn params(&self) -> Vec<ParamRef<'_, S>> {
        fn push_conv<'a, S: Scalar>(out: &mut Vec<ParamRef<'a, S>>, prefix: &str, c: &'a Conv2d<S>) {
            out.push(ParamRef {
                name: format!("{prefix}.weight"),
                kind: ParamKind::ConvWeight,
                shape: c.weight.shape().dims().to_vec(),
                data: c.weight.data(),
            });
            out.push(ParamRef {
                name: format!("{prefix}.bias"),
                kind: ParamKind::ConvBias,
                shape: vec![c.bias.len()],
                data: &c.bias,
            });
        }
        fn push_dn<'a, S: Scalar>(out: &mut Vec<ParamRef<'a, S>>, site: usize, p: &'a DnParams<S>) {
            out.push(ParamRef {
                name: format!("dn{site}.beta"),
                kind: ParamKind::DnBeta,
                shape: vec![p.beta.len()],
                data: &p.beta,
            });
            out.push(ParamRef {
                name: format!("dn{site}.gamma"),
                kind: ParamKind::DnGamma,
                shape: p.gamma.shape().dims().to_vec(),
                data: p.gamma.data(),
            });
        }

        let mut out = Vec::new();
        if let Some(p) = &self.input_dn {
            push_dn(&mut out, 1, p);
        }
        for (i, stage) in self.encoder.iter().enumerate() {
            push_conv(&mut out, &format!("enc{}.conv", i + 1), &stage.conv);
            if let Some(p) = &stage.dn {
                push_dn(&mut out, i + 2, p);
            }
        }
        push_conv(&mut out, "bottleneck", &self.bottleneck);
        for (i, d) in self.decoder.iter().enumerate() {
            push_conv(&mut out, &format!("dec{}", i + 1), d);
        }
        push_conv(&mut out, "head", &self.head);
        out
    }

    /// Mutable buffers in the same order as [`UNet::params`].
    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut [S])> {
        let mut out: Vec<(ParamKind, &mut [S])> = Vec::new();
        if let Some(p) = &mut self.input_dn {
            out.push((ParamKind::DnBeta, &mut p.beta));
            out.push((ParamKind::DnGamma, p.gamma.data_mut()));
        }
        for stage in &mut self.encoder {
            out.push((ParamKind::ConvWeight, stage.conv.weight.data_mut()));
            out.push((ParamKind::ConvBias, &mut stage.conv.bias));
            if let Some(p) = &mut stage.dn {
                out.push((ParamKind::DnBeta, &mut p.beta));
                out.push((ParamKind::DnGamma, p.gamma.data_mut()));
            }
        }
        for c in std::iter::once(&mut self.bottleneck)
            .chain(self.decoder.iter_mut())
            .chain(std::iter::once(&mut self.head))
        {
            out.push((ParamKind::ConvWeight, c.weight.data_mut()));
            out.push((ParamKind::ConvBias, &mut c.bias));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// Share of all parameters that belong to normalization sites.
    pub fn dn_param_fraction(&self) -> f64 {
        let dn: usize = self
            .params()
            .iter()
            .filter(|p| matches!(p.kind, ParamKind::DnBeta | ParamKind::DnGamma))
            .map(|p| p.data.len())
            .sum();
        dn as f64 / self.param_count() as f64
    }

    pub fn validate_dn(&self) -> Result<()> {
        for site in self.dn_sites() {
            self.dn_site(site).expect("listed site").validate()?;
        }
        Ok(())
    }

    /// Copy of the model with every parameter set to zero; used as a
    /// gradient accumulator with the same layout.
    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, buf) in z.params_mut() {
            buf.fill(S::zero());
        }
        z
    }

    pub fn cast<T: Scalar>(&self) -> UNet<T> {
        let conv = |c: &Conv2d<S>| Conv2d {
            spec: c.spec,
            weight: c.weight.cast(),
            bias: c.bias.iter().map(|v| T::of(v.to_f64_lossy())).collect(),
        };
        let dn = |p: &DnParams<S>| DnParams {
            beta: p.beta.iter().map(|v| T::of(v.to_f64_lossy())).collect(),
            gamma: p.gamma.cast(),
        };
        UNet {
            config: self.config.clone(),
            input_dn: self.input_dn.as_ref().map(dn),
            encoder: self
                .encoder
                .iter()
                .map(|s| EncoderStage {
                    conv: conv(&s.conv),
                    dn: s.dn.as_ref().map(dn),
                })
                .collect(),
            bottleneck: conv(&self.bottleneck),
            decoder: self.decoder.iter().map(conv).collect(),
            head: conv(&self.head),
        }
    }

    fn check_input(&self, batch: &Tensor<S>) -> Result<()> {
        let s = batch.shape();
        if s.c != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                expected: format!("{} input channels", self.config.in_channels),
                found: s.to_string(),
            });
        }
        if s.h % SPATIAL_MULTIPLE != 0 || s.w % SPATIAL_MULTIPLE != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                expected: format!("height and width that are positive multiples of {SPATIAL_MULTIPLE}"),
                found: s.to_string(),
            });
        }
        Ok(())
    }
}

/// Activations retained by [`model_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<S> {
    input: Tensor<S>,
    input_denom: Option<Tensor<S>>,
    encoder: Vec<EncoderTrace<S>>,
    bottleneck_in: Tensor<S>,
    bottleneck_pre: Tensor<S>,
    decoder: Vec<DecoderTrace<S>>,
    head_in: Tensor<S>,
}

#[derive(Clone, Debug)]
struct EncoderTrace<S> {
    input: Tensor<S>,
    pre: Tensor<S>,
    act: Tensor<S>,
    denom: Option<Tensor<S>>,
    out: Tensor<S>,
    pool: PoolIndices,
}

#[derive(Clone, Debug)]
struct DecoderTrace<S> {
    up_channels: usize,
    input: Tensor<S>,
    pre: Tensor<S>,
}

impl<S: Scalar> ForwardCache<S> {
    /// Activity entering and leaving normalization site `site`, or `None`
    /// when the model has no such site.
    pub fn site_activity(&self, site: usize) -> Option<(&Tensor<S>, &Tensor<S>)> {
        match site {
            1 => self.input_denom.as_ref().map(|_| (&self.input, &self.encoder[0].input)),
            2..=4 => {
                let t = &self.encoder[site - 2];
                t.denom.as_ref().map(|_| (&t.act, &t.out))
            }
            _ => None,
        }
    }

    /// Signs of every pre-activation and every pooling choice. Two forward
    /// passes with equal patterns lie in the same smooth piece of the
    /// network function.
    pub fn activation_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        let signs = |out: &mut Vec<u64>, t: &Tensor<S>| out.extend(t.data().iter().map(|v| u64::from(*v > S::zero())));
        for e in &self.encoder {
            signs(&mut out, &e.pre);
            out.extend(e.pool.as_slice().iter().map(|&i| i as u64));
        }
        signs(&mut out, &self.bottleneck_pre);
        for d in &self.decoder {
            signs(&mut out, &d.pre);
        }
        out
    }
}

/// Runs the network, returning raw class scores of shape `(n, K, h, w)`.
pub fn model_forward<S: Scalar>(model: &UNet<S>, batch: &Tensor<S>) -> Result<(Tensor<S>, ForwardCache<S>)> {
    model.check_input(batch)?;
    let (mut x, input_denom) = match &model.input_dn {
        Some(p) => {
            let (y, d) = dn_forward(batch, p)?;
            (y, Some(d))
        }
        None => (batch.clone(), None),
    };

    let mut encoder = Vec::with_capacity(DEPTH);
    for stage in &model.encoder {
        let pre = stage.conv.forward(&x)?;
        let act = relu_forward(&pre);
        let (out, denom) = match &stage.dn {
            Some(p) => {
                let (y, d) = dn_forward(&act, p)?;
                (y, Some(d))
            }
            None => (act.clone(), None),
        };
        let (pooled, pool) = maxpool2_forward(&out)?;
        encoder.push(EncoderTrace {
            input: std::mem::replace(&mut x, pooled),
            pre,
            act,
            denom,
            out,
            pool,
        });
    }

    let bottleneck_pre = model.bottleneck.forward(&x)?;
    let bottleneck_in = std::mem::replace(&mut x, relu_forward(&bottleneck_pre));

    let mut decoder = Vec::with_capacity(DEPTH);
    for (conv, skip) in model.decoder.iter().zip(encoder.iter().rev()) {
        let up = upsample2_forward(&x);
        let up_channels = up.shape().c;
        let input = concat_channels(&up, &skip.out)?;
        let pre = conv.forward(&input)?;
        x = relu_forward(&pre);
        decoder.push(DecoderTrace { up_channels, input, pre });
    }

    let logits = model.head.forward(&x)?;
    Ok((
        logits,
        ForwardCache {
            input: batch.clone(),
            input_denom,
            encoder,
            bottleneck_in,
            bottleneck_pre,
            decoder,
            head_in: x,
        },
    ))
}

/// Parameter gradients laid out exactly like the model they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<S>(UNet<S>);

impl<S: Scalar> Gradients<S> {
    /// Zero gradients laid out like `model`.
    pub fn from_model_layout(model: &UNet<S>) -> Self {
        Self(model.zeros_like())
    }

    pub fn fill(&mut self, value: S) {
        for (_, buf) in self.0.params_mut() {
            buf.fill(value);
        }
    }

    /// Buffers in canonical parameter order.
    pub fn params(&self) -> Vec<ParamRef<'_, S>> {
        self.0.params()
    }

    /// Gradient of the normalization parameters at `site`.
    pub fn dn_site(&self, site: usize) -> Option<&DnParams<S>> {
        self.0.dn_site(site)
    }

    pub fn max_abs(&self) -> S {
        self.0
            .params()
            .iter()
            .flat_map(|p| p.data.iter())
            .fold(S::zero(), |m, v| m.max(v.abs()))
    }
}

/// Test and diagnostic hooks for [`model_backward_with`].
#[derive(Clone, Copy, Debug, Default)]
pub struct BackwardOptions {
    /// Drops the gradient arriving at the output of this normalization site.
    pub cut_at_site: Option<usize>,
}

pub fn model_backward<S: Scalar>(model: &UNet<S>, cache: &ForwardCache<S>, grad_logits: &Tensor<S>) -> Result<Gradients<S>> {
    model_backward_with(model, cache, grad_logits, BackwardOptions::default())
}

pub fn model_backward_with<S: Scalar>(
    model: &UNet<S>,
    cache: &ForwardCache<S>,
    grad_logits: &Tensor<S>,
    options: BackwardOptions,
) -> Result<Gradients<S>> {
    let mut grads = model.zeros_like();
    let cut = |g: Tensor<S>, site: usize| {
        if options.cut_at_site == Some(site) {
            Tensor::zeros(g.shape())
        } else {
            g
        }
    };

    let hg = conv2d_backward(&cache.head_in, &model.head.weight, grad_logits, &model.head.spec)?;
    grads.head.weight = hg.weights;
    grads.head.bias = hg.bias;
    let mut g = hg.input;

    let mut skip_grads: Vec<Option<Tensor<S>>> = vec![None; DEPTH];
    for (k, (conv, trace)) in model.decoder.iter().zip(&cache.decoder).enumerate().rev() {
        let gpre = relu_backward(&trace.pre, &g)?;
        let cg = conv2d_backward(&trace.input, &conv.weight, &gpre, &conv.spec)?;
        grads.decoder[k].weight = cg.weights;
        grads.decoder[k].bias = cg.bias;
        let (g_up, g_skip) = split_channels(&cg.input, trace.up_channels)?;
        skip_grads[DEPTH - 1 - k] = Some(g_skip);
        g = upsample2_backward(&g_up)?;
    }

    let gpre = relu_backward(&cache.bottleneck_pre, &g)?;
    let bg = conv2d_backward(&cache.bottleneck_in, &model.bottleneck.weight, &gpre, &model.bottleneck.spec)?;
    grads.bottleneck.weight = bg.weights;
    grads.bottleneck.bias = bg.bias;
    g = bg.input;

    for (i, (stage, trace)) in model.encoder.iter().zip(&cache.encoder).enumerate().rev() {
        let mut g_out = maxpool2_backward(&g, &trace.pool)?;
        let skip = skip_grads[i].take().expect("decoder visits every skip");
        for (a, b) in g_out.data_mut().iter_mut().zip(skip.data()) {
            *a += *b;
        }
        let g_act = match (&stage.dn, &trace.denom) {
            (Some(p), Some(denom)) => {
                let site = i + 2;
                let dg = dn_backward(&trace.act, p, denom, &cut(g_out, site))?;
                let slot = grads.encoder[i].dn.as_mut().expect("gradient layout mirrors model");
                slot.beta = dg.beta;
                slot.gamma = dg.gamma;
                dg.input
            }
            _ => g_out,
        };
        let gpre = relu_backward(&trace.pre, &g_act)?;
        let cg = conv2d_backward(&trace.input, &stage.conv.weight, &gpre, &stage.conv.spec)?;
        grads.encoder[i].conv.weight = cg.weights;
        grads.encoder[i].conv.bias = cg.bias;
        g = cg.input;
    }

    if let (Some(p), Some(denom)) = (&model.input_dn, &cache.input_denom) {
        let dg = dn_backward(&cache.input, p, denom, &cut(g, 1))?;
        let slot = grads.input_dn.as_mut().expect("gradient layout mirrors model");
        slot.beta = dg.beta;
        slot.gamma = dg.gamma;
    }

    Ok(Gradients(grads))
}
