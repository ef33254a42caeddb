//! Layers, model specs, and forward execution (plain and traced).
//!
//! A [`Model`] is a flat list of layers chained shape-compatibly from an
//! NCHW input to `[batch, classes]` logits. The same layer walk backs three
//! call styles:
//!
//! - [`Model::forward`] — value-level, train or eval mode;
//! - [`Model::forward_traced`] — records onto a [`Tape`] for gradients,
//!   with an optional per-layer input hook used to inject activation
//!   quantizers;
//! - span variants over a layer range, which the reconstruction code uses
//!   to run prefixes, blocks, and tails separately.
//!
//! Batch-norm semantics: train mode normalizes with batch statistics and
//! reports them so the caller can fold them into the running stats with
//! `new = (1 - m) * old + m * batch`; eval mode normalizes with running
//! stats and mutates nothing.

use crate::error::{Error, Result};
use crate::par::Parallelism;
use crate::seeds;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{kernels, optim};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::ops::Range;

pub const BN_EPS_DEFAULT: f64 = 1e-5;
pub const BN_MOMENTUM_DEFAULT: f64 = 0.1;

// ── Specs ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize, bias: bool },
    BatchNorm2d { channels: usize },
    Relu,
    GlobalAvgPool,
    Linear { in_features: usize, out_features: usize, bias: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input shape as (channels, height, width).
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelSpec {
    /// Per-layer output shapes (batch dimension omitted). Errors when the
    /// chain is not shape-compatible or does not end in `[classes]`.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = vec![self.input.0, self.input.1, self.input.2];
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, .. } => {
                    if cur.len() != 3 || cur[0] != *in_ch {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {}: conv2d expects {} channels, input is {:?}",
                            i, in_ch, cur
                        )));
                    }
                    if *stride == 0 {
                        return Err(Error::Config(format!("layer {}: stride must be >= 1", i)));
                    }
                    let oh = cur[1] + 2 * padding;
                    if oh < *kernel || cur[2] + 2 * padding < *kernel {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {}: kernel {} larger than padded input {:?}",
                            i, kernel, cur
                        )));
                    }
                    vec![
                        *out_ch,
                        kernels::conv_out_dim(cur[1], *kernel, *stride, *padding),
                        kernels::conv_out_dim(cur[2], *kernel, *stride, *padding),
                    ]
                }
                LayerSpec::BatchNorm2d { channels } => {
                    if cur.is_empty() || cur[0] != *channels {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {}: batch norm over {} channels, input is {:?}",
                            i, channels, cur
                        )));
                    }
                    cur
                }
                LayerSpec::Relu => cur,
                LayerSpec::GlobalAvgPool => {
                    if cur.len() != 3 {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {}: global pool needs a spatial input, got {:?}",
                            i, cur
                        )));
                    }
                    vec![cur[0]]
                }
                LayerSpec::Linear { in_features, out_features, .. } => {
                    if cur.len() != 1 || cur[0] != *in_features {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {}: linear expects [{}], input is {:?}",
                            i, in_features, cur
                        )));
                    }
                    vec![*out_features]
                }
            };
            out.push(cur.clone());
        }
        match out.last() {
            Some(last) if *last == vec![self.classes] => Ok(out),
            Some(last) => Err(Error::ShapeMismatch(format!(
                "model ends in {:?}, expected [{}]",
                last, self.classes
            ))),
            None => Err(Error::Config("model has no layers".into())),
        }
    }
}

// ── Runtime layers ──────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d { weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize },
    BatchNorm2d { gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor },
    Relu,
    GlobalAvgPool,
    Linear { weight: Tensor, bias: Option<Tensor> },
}

impl Layer {
    pub fn is_weighted(&self) -> bool {
        matches!(self, Layer::Conv2d { .. } | Layer::Linear { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct BnBatchUpdate {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
}

impl Model {
    /// Build a model with He-normal weight init (seeded, deterministic).
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.infer_shapes()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.iter().enumerate() {
            let mut rng = seeds::rng_for(seed, "init", i as u64);
            let layer = match ls {
                LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, bias } => {
                    let fan_in = in_ch * kernel * kernel;
                    let std = (2.0 / fan_in as f64).sqrt();
                    Layer::Conv2d {
                        weight: Tensor::rand_normal(&[*out_ch, *in_ch, *kernel, *kernel], 0.0, std, &mut rng),
                        bias: bias.then(|| Tensor::zeros(&[*out_ch])),
                        stride: *stride,
                        padding: *padding,
                    }
                }
                LayerSpec::BatchNorm2d { channels } => Layer::BatchNorm2d {
                    gamma: Tensor::full(&[*channels], 1.0),
                    beta: Tensor::zeros(&[*channels]),
                    running_mean: Tensor::zeros(&[*channels]),
                    running_var: Tensor::full(&[*channels], 1.0),
                },
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
                LayerSpec::Linear { in_features, out_features, bias } => {
                    let std = (2.0 / *in_features as f64).sqrt();
                    Layer::Linear {
                        weight: Tensor::rand_normal(&[*out_features, *in_features], 0.0, std, &mut rng),
                        bias: bias.then(|| Tensor::zeros(&[*out_features])),
                    }
                }
            };
            layers.push(layer);
        }
        Ok(Model { spec, layers })
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Index of the final linear layer (the classifier head).
    pub fn head_index(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| matches!(l, Layer::Linear { .. }))
    }

    // ── Value-level forward ─────────────────────────────────────────

    /// Forward returning `[batch, classes]` logits. Train mode updates BN
    /// running statistics with the spec momentum.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let range = 0..self.layers.len();
        let (out, updates) = forward_span_value(
            &self.layers,
            range,
            x,
            mode,
            self.spec.bn_eps,
            Parallelism::Auto,
            None,
        )?;
        if mode == Mode::Train {
            self.apply_bn_updates(&updates, self.spec.bn_momentum);
        }
        out.assert_finite("logits")?;
        Ok(out)
    }

    /// Pure eval forward: two calls with identical inputs and state are
    /// bit-identical.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let range = 0..self.layers.len();
        let (out, _) = forward_span_value(
            &self.layers,
            range,
            x,
            Mode::Eval,
            self.spec.bn_eps,
            Parallelism::Auto,
            None,
        )?;
        out.assert_finite("logits")?;
        Ok(out)
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnBatchUpdate], momentum: f64) {
        for u in updates {
            if let Layer::BatchNorm2d { running_mean, running_var, .. } = &mut self.layers[u.layer] {
                for (rm, &bm) in running_mean.data_mut().iter_mut().zip(&u.mean) {
                    *rm = (1.0 - momentum) * *rm + momentum * bm;
                }
                for (rv, &bv) in running_var.data_mut().iter_mut().zip(&u.var) {
                    *rv = (1.0 - momentum) * *rv + momentum * bv;
                }
            }
        }
    }

    // ── Traced forward ──────────────────────────────────────────────

    /// Register all parameters as tape leaves. `grad` selects which ones
    /// require gradients.
    pub fn trace<'t>(&self, tape: &'t Tape, grad: GradFilter) -> TracedParams {
        let _ = tape; // vars are tied to this tape
        let mut vars = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let lv = match layer {
                Layer::Conv2d { weight, bias, .. } => LayerVars::Conv {
                    w: tape.leaf(weight.clone(), grad.weights()),
                    b: bias.as_ref().map(|b| tape.leaf(b.clone(), grad.weights())),
                },
                Layer::BatchNorm2d { gamma, beta, .. } => LayerVars::Bn {
                    gamma: tape.leaf(gamma.clone(), grad.bn_affine()),
                    beta: tape.leaf(beta.clone(), grad.bn_affine()),
                },
                Layer::Linear { weight, bias } => LayerVars::Linear {
                    w: tape.leaf(weight.clone(), grad.weights()),
                    b: bias.as_ref().map(|b| tape.leaf(b.clone(), grad.weights())),
                },
                _ => LayerVars::None,
            };
            vars.push(lv);
        }
        TracedParams { vars }
    }

    /// Traced forward over all layers. `input_hook` (if any) transforms the
    /// input of each weighted layer — this is where activation quantizers
    /// plug in.
    pub fn forward_traced(
        &self,
        tape: &Tape,
        params: &TracedParams,
        x: Var,
        mode: Mode,
        input_hook: ActHook<'_>,
    ) -> Result<(Var, Vec<BnBatchUpdate>)> {
        forward_span_traced(
            tape,
            &self.layers,
            &params.vars,
            0..self.layers.len(),
            x,
            mode,
            self.spec.bn_eps,
            input_hook,
        )
    }

    // ── Parameter access ────────────────────────────────────────────

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv2d { weight, bias, .. } | Layer::Linear { weight, bias } => {
                    out.push((format!("layers.{}.weight", i), weight));
                    if let Some(b) = bias {
                        out.push((format!("layers.{}.bias", i), b));
                    }
                }
                Layer::BatchNorm2d { gamma, beta, running_mean, running_var } => {
                    out.push((format!("layers.{}.gamma", i), gamma));
                    out.push((format!("layers.{}.beta", i), beta));
                    out.push((format!("layers.{}.running_mean", i), running_mean));
                    out.push((format!("layers.{}.running_var", i), running_var));
                }
                _ => {}
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over parameter bytes in name order. With `include_bn` false,
    /// batch-norm tensors (affine and running stats) are excluded — this is
    /// the adaptation-confinement fingerprint.
    pub fn params_sha256(&self, include_bn: bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_params() {
            if !include_bn && name.contains("gamma")
                || !include_bn && name.contains("beta")
                || !include_bn && name.contains("running_")
            {
                continue;
            }
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Adam step over an explicit (var, layer-param) pairing.
    pub fn apply_grad_step(
        &mut self,
        pairs: &[(Var, ParamSlot)],
        grads: &crate::tape::Gradients,
        opt: &mut optim::Adam,
        lr: f64,
    ) -> Result<()> {
        let mut tensors: Vec<&mut Tensor> = Vec::with_capacity(pairs.len());
        // Split-borrow dance: collect raw pointers first, validated disjoint
        // by construction (each slot names a distinct tensor).
        let mut grads_vec: Vec<Tensor> = Vec::with_capacity(pairs.len());
        for (var, slot) in pairs {
            let shape = slot.get(self)?.shape().to_vec();
            grads_vec.push(grads.or_zeros(*var, &shape));
        }
        for (_, slot) in pairs {
            let t = slot.get_mut_ptr(self)?;
            // SAFETY: slots are distinct parameters; exclusive access to
            // self guarantees no aliasing with anything else.
            tensors.push(unsafe { &mut *t });
        }
        let grad_refs: Vec<&Tensor> = grads_vec.iter().collect();
        opt.step(&mut tensors, &grad_refs, lr)
    }
}

/// Addresses one parameter tensor inside a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlot {
    ConvWeight(usize),
    ConvBias(usize),
    LinearWeight(usize),
    LinearBias(usize),
    BnGamma(usize),
    BnBeta(usize),
}

impl ParamSlot {
    pub fn get<'m>(&self, m: &'m Model) -> Result<&'m Tensor> {
        let missing = || Error::InvalidArg(format!("param slot {:?} not present", self));
        match *self {
            ParamSlot::ConvWeight(i) => match &m.layers[i] {
                Layer::Conv2d { weight, .. } => Ok(weight),
                _ => Err(missing()),
            },
            ParamSlot::ConvBias(i) => match &m.layers[i] {
                Layer::Conv2d { bias: Some(b), .. } => Ok(b),
                _ => Err(missing()),
            },
            ParamSlot::LinearWeight(i) => match &m.layers[i] {
                Layer::Linear { weight, .. } => Ok(weight),
                _ => Err(missing()),
            },
            ParamSlot::LinearBias(i) => match &m.layers[i] {
                Layer::Linear { bias: Some(b), .. } => Ok(b),
                _ => Err(missing()),
            },
            ParamSlot::BnGamma(i) => match &m.layers[i] {
                Layer::BatchNorm2d { gamma, .. } => Ok(gamma),
                _ => Err(missing()),
            },
            ParamSlot::BnBeta(i) => match &m.layers[i] {
                Layer::BatchNorm2d { beta, .. } => Ok(beta),
                _ => Err(missing()),
            },
        }
    }

    fn get_mut_ptr(&self, m: &mut Model) -> Result<*mut Tensor> {
        let missing = || Error::InvalidArg(format!("param slot {:?} not present", self));
        let ptr: *mut Tensor = match *self {
            ParamSlot::ConvWeight(i) => match &mut m.layers[i] {
                Layer::Conv2d { weight, .. } => weight,
                _ => return Err(missing()),
            },
            ParamSlot::ConvBias(i) => match &mut m.layers[i] {
                Layer::Conv2d { bias: Some(b), .. } => b,
                _ => return Err(missing()),
            },
            ParamSlot::LinearWeight(i) => match &mut m.layers[i] {
                Layer::Linear { weight, .. } => weight,
                _ => return Err(missing()),
            },
            ParamSlot::LinearBias(i) => match &mut m.layers[i] {
                Layer::Linear { bias: Some(b), .. } => b,
                _ => return Err(missing()),
            },
            ParamSlot::BnGamma(i) => match &mut m.layers[i] {
                Layer::BatchNorm2d { gamma, .. } => gamma,
                _ => return Err(missing()),
            },
            ParamSlot::BnBeta(i) => match &mut m.layers[i] {
                Layer::BatchNorm2d { beta, .. } => beta,
                _ => return Err(missing()),
            },
        };
        Ok(ptr)
    }
}

/// Which parameters require gradients when tracing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradFilter {
    All,
    BnAffineOnly,
    NoneGrad,
}

impl GradFilter {
    fn weights(&self) -> bool {
        matches!(self, GradFilter::All)
    }
    fn bn_affine(&self) -> bool {
        matches!(self, GradFilter::All | GradFilter::BnAffineOnly)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum LayerVars {
    Conv { w: Var, b: Option<Var> },
    Bn { gamma: Var, beta: Var },
    Linear { w: Var, b: Option<Var> },
    None,
}

pub struct TracedParams {
    pub vars: Vec<LayerVars>,
}

impl TracedParams {
    /// (var, slot) pairs for the parameters selected by `filter`, in layer
    /// order. Used to route gradients back into the model.
    pub fn grad_pairs(&self, filter: GradFilter) -> Vec<(Var, ParamSlot)> {
        let mut out = Vec::new();
        for (i, lv) in self.vars.iter().enumerate() {
            match lv {
                LayerVars::Conv { w, b } if filter.weights() => {
                    out.push((*w, ParamSlot::ConvWeight(i)));
                    if let Some(b) = b {
                        out.push((*b, ParamSlot::ConvBias(i)));
                    }
                }
                LayerVars::Linear { w, b } if filter.weights() => {
                    out.push((*w, ParamSlot::LinearWeight(i)));
                    if let Some(b) = b {
                        out.push((*b, ParamSlot::LinearBias(i)));
                    }
                }
                LayerVars::Bn { gamma, beta } if filter.bn_affine() => {
                    out.push((*gamma, ParamSlot::BnGamma(i)));
                    out.push((*beta, ParamSlot::BnBeta(i)));
                }
                _ => {}
            }
        }
        out
    }
}

/// Hook applied to the input of each weighted layer during a traced
/// forward; receives the absolute layer index.
pub type ActHook<'a> = Option<&'a dyn Fn(usize, Var, &Tape) -> Result<Var>>;

/// Hook applied to the input of each weighted layer during a value-level
/// forward.
pub type ValueActHook<'a> = Option<&'a dyn Fn(usize, Tensor) -> Result<Tensor>>;

// ── Span execution ──────────────────────────────────────────────────

/// Value-level forward over `layers[range]`. Returns the output and, in
/// train mode, the batch statistics of every BN layer visited.
pub fn forward_span_value(
    layers: &[Layer],
    range: Range<usize>,
    x: &Tensor,
    mode: Mode,
    bn_eps: f64,
    par: Parallelism,
    input_hook: ValueActHook<'_>,
) -> Result<(Tensor, Vec<BnBatchUpdate>)> {
    let mut cur = x.clone();
    let mut updates = Vec::new();
    for i in range {
        let layer = &layers[i];
        if layer.is_weighted() {
            if let Some(hook) = input_hook {
                cur = hook(i, cur)?;
            }
        }
        cur = match layer {
            Layer::Conv2d { weight, bias, stride, padding } => {
                let xs = cur.shape();
                let ws = weight.shape();
                if xs.len() != 4 || xs[1] != ws[1] {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {}: conv input {:?} vs weight {:?}",
                        i, xs, ws
                    )));
                }
                let s = kernels::ConvShape {
                    batch: xs[0],
                    in_ch: xs[1],
                    in_h: xs[2],
                    in_w: xs[3],
                    out_ch: ws[0],
                    kernel: ws[2],
                    stride: *stride,
                    padding: *padding,
                };
                let y = kernels::conv2d_forward(
                    par,
                    cur.data(),
                    weight.data(),
                    bias.as_ref().map(|b| b.data()),
                    &s,
                );
                Tensor::new(vec![s.batch, s.out_ch, s.out_h(), s.out_w()], y)?
            }
            Layer::BatchNorm2d { gamma, beta, running_mean, running_var } => {
                let xs = cur.shape();
                let (n, c, sp) = match xs.len() {
                    2 => (xs[0], xs[1], 1),
                    4 => (xs[0], xs[1], xs[2] * xs[3]),
                    _ => return Err(Error::ShapeMismatch(format!("layer {}: bn rank {:?}", i, xs))),
                };
                let (mean, var) = match mode {
                    Mode::Train => {
                        if n * sp < 2 {
                            return Err(Error::InvalidArg(format!(
                                "layer {}: batch statistics need >= 2 values per channel",
                                i
                            )));
                        }
                        let (m, v) = kernels::bn_batch_stats(par, cur.data(), n, c, sp);
                        updates.push(BnBatchUpdate { layer: i, mean: m.clone(), var: v.clone() });
                        (m, v)
                    }
                    Mode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
                };
                let y = kernels::bn_normalize(
                    par,
                    cur.data(),
                    &mean,
                    &var,
                    gamma.data(),
                    beta.data(),
                    bn_eps,
                    n,
                    c,
                    sp,
                );
                Tensor::new(xs.to_vec(), y)?
            }
            Layer::Relu => cur.map(|v| if v > 0.0 { v } else { 0.0 }),
            Layer::GlobalAvgPool => {
                let xs = cur.shape();
                if xs.len() != 4 {
                    return Err(Error::ShapeMismatch(format!("layer {}: pool rank {:?}", i, xs)));
                }
                let (b, c, sp) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut out = vec![0.0; b * c];
                for j in 0..b * c {
                    let mut acc = 0.0;
                    for k in 0..sp {
                        acc += cur.data()[j * sp + k];
                    }
                    out[j] = acc / sp as f64;
                }
                Tensor::new(vec![b, c], out)?
            }
            Layer::Linear { weight, bias } => {
                let xs = cur.shape();
                let ws = weight.shape();
                if xs.len() != 2 || xs[1] != ws[1] {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {}: linear input {:?} vs weight {:?}",
                        i, xs, ws
                    )));
                }
                let (n, k, o) = (xs[0], xs[1], ws[0]);
                let mut y = kernels::matmul_xwt(par, cur.data(), weight.data(), n, k, o);
                if let Some(b) = bias {
                    for (idx, v) in y.iter_mut().enumerate() {
                        *v += b.data()[idx % o];
                    }
                }
                Tensor::new(vec![n, o], y)?
            }
        };
    }
    Ok((cur, updates))
}

/// Traced forward over `layers[range]` using pre-registered parameter vars.
#[allow(clippy::too_many_arguments)]
pub fn forward_span_traced(
    tape: &Tape,
    layers: &[Layer],
    vars: &[LayerVars],
    range: Range<usize>,
    x: Var,
    mode: Mode,
    bn_eps: f64,
    input_hook: ActHook<'_>,
) -> Result<(Var, Vec<BnBatchUpdate>)> {
    let mut cur = x;
    let mut updates = Vec::new();
    for i in range {
        let layer = &layers[i];
        if layer.is_weighted() {
            if let Some(hook) = input_hook {
                cur = hook(i, cur, tape)?;
            }
        }
        cur = match (layer, &vars[i]) {
            (Layer::Conv2d { stride, padding, .. }, LayerVars::Conv { w, b }) => {
                tape.conv2d(cur, *w, *b, *stride, *padding)?
            }
            (
                Layer::BatchNorm2d { running_mean, running_var, .. },
                LayerVars::Bn { gamma, beta },
            ) => {
                let running = match mode {
                    Mode::Eval => Some((running_mean.data(), running_var.data())),
                    Mode::Train => None,
                };
                let (out, stats) = tape.batch_norm(cur, *gamma, *beta, running, bn_eps)?;
                if let Some((m, v)) = stats {
                    updates.push(BnBatchUpdate { layer: i, mean: m, var: v });
                }
                out
            }
            (Layer::Relu, _) => tape.relu(cur)?,
            (Layer::GlobalAvgPool, _) => tape.global_avg_pool(cur)?,
            (Layer::Linear { .. }, LayerVars::Linear { w, b }) => {
                let y = tape.linear(cur, *w)?;
                match b {
                    Some(b) => tape.add_channel_bias(y, *b)?,
                    None => y,
                }
            }
            _ => {
                return Err(Error::InvalidArg(format!(
                    "layer {}: traced vars do not match layer kind",
                    i
                )))
            }
        };
    }
    Ok((cur, updates))
}

// ── Prediction helpers ──────────────────────────────────────────────

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::ShapeMismatch(format!("argmax_rows: {:?}", s)));
    }
    let (n, c) = (s[0], s[1]);
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        let row = &logits.data()[r * c..(r + 1) * c];
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Fraction of rows (in percent) whose argmax differs from the label.
pub fn error_rate(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let preds = argmax_rows(logits)?;
    if preds.len() != labels.len() {
        return Err(Error::ShapeMismatch("error_rate: label count".into()));
    }
    let wrong = preds.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(100.0 * wrong as f64 / labels.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_model(weight: Vec<f64>, in_f: usize, out_f: usize) -> Model {
        let spec = ModelSpec {
            input: (in_f, 1, 1),
            classes: out_f,
            layers: vec![
                LayerSpec::GlobalAvgPool,
                LayerSpec::Linear { in_features: in_f, out_features: out_f, bias: false },
            ],
            bn_momentum: BN_MOMENTUM_DEFAULT,
            bn_eps: BN_EPS_DEFAULT,
        };
        let mut m = Model::init(spec, 0).unwrap();
        if let Layer::Linear { weight: w, .. } = &mut m.layers[1] {
            *w = Tensor::new(vec![out_f, in_f], weight).unwrap();
        }
        m
    }

    #[test]
    fn identity_linear_forward() {
        let mut m = linear_model(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let x = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let y = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_weight_model_gives_zero_logits() {
        let mut m = linear_model(vec![0.0; 4], 2, 2);
        let x = Tensor::new(vec![1, 2, 1, 1], vec![0.3, -0.7]).unwrap();
        let y = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn eval_forward_is_pure_and_bit_identical() {
        let spec = ModelSpec {
            input: (2, 6, 6),
            classes: 3,
            layers: vec![
                LayerSpec::Conv2d { in_ch: 2, out_ch: 4, kernel: 3, stride: 1, padding: 1, bias: false },
                LayerSpec::BatchNorm2d { channels: 4 },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Linear { in_features: 4, out_features: 3, bias: true },
            ],
            bn_momentum: 0.1,
            bn_eps: BN_EPS_DEFAULT,
        };
        let model = Model::init(spec, 42).unwrap();
        let mut rng = seeds::rng_for(1, "nn-test", 0);
        let x = Tensor::rand_uniform(&[3, 2, 6, 6], 0.0, 1.0, &mut rng);
        let a = model.forward_eval(&x).unwrap();
        let b = model.forward_eval(&x).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn train_mode_bn_update_matches_formula() {
        let spec = ModelSpec {
            input: (2, 4, 4),
            classes: 2,
            layers: vec![
                LayerSpec::BatchNorm2d { channels: 2 },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Linear { in_features: 2, out_features: 2, bias: false },
            ],
            bn_momentum: 0.1,
            bn_eps: BN_EPS_DEFAULT,
        };
        let mut model = Model::init(spec, 3).unwrap();
        let mut rng = seeds::rng_for(2, "nn-test", 0);
        let x = Tensor::rand_uniform(&[4, 2, 4, 4], -1.0, 2.0, &mut rng);

        let (old_mean, old_var) = match &model.layers[0] {
            Layer::BatchNorm2d { running_mean, running_var, .. } => {
                (running_mean.clone(), running_var.clone())
            }
            _ => unreachable!(),
        };
        let (bm, bv) = kernels::bn_batch_stats(Parallelism::Auto, x.data(), 4, 2, 16);
        model.forward(&x, Mode::Train).unwrap();
        match &model.layers[0] {
            Layer::BatchNorm2d { running_mean, running_var, .. } => {
                for c in 0..2 {
                    let want_m = 0.9 * old_mean.data()[c] + 0.1 * bm[c];
                    let want_v = 0.9 * old_var.data()[c] + 0.1 * bv[c];
                    assert!((running_mean.data()[c] - want_m).abs() < 1e-6);
                    assert!((running_var.data()[c] - want_v).abs() < 1e-6);
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn argmax_tie_takes_lowest_index() {
        let logits = Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.5]).unwrap();
        assert_eq!(argmax_rows(&logits).unwrap(), vec![1, 0]);
    }
}
