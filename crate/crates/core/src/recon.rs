//! Block-wise reconstruction of quantization parameters.
//!
//! The model is split into blocks (one conv/linear plus its trailing
//! norm/activation layers by default). Blocks are reconstructed first to
//! last: weight scales come from an MSE grid search and stay fixed, while
//! per-weight soft rounding offsets and the per-tensor input activation
//! scale are learned by gradient descent. The objective combines
//!
//! - the local block-output MSE against the full-precision block,
//! - a global distance between full-precision logits and the logits the
//!   frozen full-precision tail produces from the quantized block output,
//!   for both the original and a perturbed version of the block input,
//! - a KL consistency term between those two predictions.
//!
//! The perturbation mixes full-precision features back in elementwise with
//! probability `drop_prob` and adds Gaussian noise scaled to the feature
//! std. Rounding offsets are annealed toward {0, 1} and hardened on exit;
//! if the hardened result does not improve on the nearest-rounding
//! baseline, the block reverts to that baseline, so a finished block is
//! never worse than its starting point.

use crate::error::{Error, Result};
use crate::nn::{forward_span_value, Layer, LayerVars, Mode, Model};
use crate::optim::Adam;
use crate::par::Parallelism;
use crate::quant::{
    calibrate_minmax, dequantize, fake_quantize, quantize, search_scale_mse, Granularity,
    PemConfig, PemReport, QuantParams,
};
use crate::seeds;
use crate::tape::{RectSigmoid, Tape, Var};
use crate::tensor::Tensor;
use crate::{kernels, quant};
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ops::Range;

// ── Partition ───────────────────────────────────────────────────────

/// Contiguous layer spans covering the model exactly once, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    pub blocks: Vec<Range<usize>>,
}

impl BlockPartition {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }
    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Default partition: one block per conv/linear layer, each extending over
/// the following norm/activation/pool layers.
pub fn partition_blocks(model: &Model) -> Result<BlockPartition> {
    partition_blocks_grouped(model, 1)
}

/// Partition with `group` weighted layers per block.
pub fn partition_blocks_grouped(model: &Model, group: usize) -> Result<BlockPartition> {
    if group == 0 {
        return Err(Error::Config("block group size must be >= 1".into()));
    }
    let weighted: Vec<usize> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_weighted())
        .map(|(i, _)| i)
        .collect();
    if weighted.is_empty() {
        return Err(Error::InvalidArg("model has no quantizable layers to partition".into()));
    }
    let mut starts: Vec<usize> = weighted.iter().step_by(group).copied().collect();
    starts[0] = 0; // leading non-weighted layers join the first block
    let mut blocks = Vec::with_capacity(starts.len());
    for (i, &s) in starts.iter().enumerate() {
        let end = starts.get(i + 1).copied().unwrap_or(model.layers.len());
        blocks.push(s..end);
    }
    Ok(BlockPartition { blocks })
}

// ── Perturbation ────────────────────────────────────────────────────

/// Random perturbation applied to the quantized block input during
/// reconstruction: probabilistic replacement by the full-precision feature,
/// plus additive Gaussian noise scaled to the feature std.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbPolicy {
    pub drop_prob: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PerturbPolicy {
    fn default() -> Self {
        PerturbPolicy { drop_prob: 0.5, noise_std: 0.05, seed: 0 }
    }
}

impl PerturbPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::Config(format!("drop_prob {} outside [0, 1]", self.drop_prob)));
        }
        // Aggressive perturbations break the consistency constraint; cap at 0.2.
        if !(0.0..=0.2).contains(&self.noise_std) {
            return Err(Error::Config(format!("noise_std {} outside [0, 0.2]", self.noise_std)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.drop_prob == 0.0 && self.noise_std == 0.0
    }
}

/// Elementwise: with probability `drop_prob` take the full-precision
/// element, otherwise the quantized one; then add `N(0, (noise_std *
/// std(xf))^2)`. Deterministic under `(policy.seed, step)`; the identity
/// policy returns `xq` bit-exactly.
pub fn perturb_features(
    xq: &Tensor,
    xf: &Tensor,
    policy: &PerturbPolicy,
    step: u64,
) -> Result<Tensor> {
    policy.validate()?;
    if xq.shape() != xf.shape() {
        return Err(Error::ShapeMismatch(format!(
            "perturb_features: {:?} vs {:?}",
            xq.shape(),
            xf.shape()
        )));
    }
    if policy.is_identity() {
        return Ok(xq.clone());
    }
    let mut rng = seeds::rng_for(policy.seed, "perturb", step);
    let sigma = if policy.noise_std > 0.0 {
        let mean = xf.mean();
        let var = xf.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>()
            / xf.numel().max(1) as f64;
        policy.noise_std * var.sqrt()
    } else {
        0.0
    };
    use rand::Rng;
    let mut out = xq.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        if policy.drop_prob > 0.0 {
            let u: f64 = rng.gen();
            if u < policy.drop_prob {
                *o = xf.data()[i];
            }
        }
        if sigma > 0.0 {
            let n: f64 = rand_distr::StandardNormal.sample(&mut rng);
            *o += sigma * n;
        }
    }
    Ok(out)
}

// ── Config ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitsDistance {
    /// KL between softmax distributions (default).
    Kl,
    /// Plain MSE on raw logits.
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda_local: f64,
    pub lambda_logits: f64,
    pub lambda_kl: f64,
    pub logits_distance: LogitsDistance,
    pub drop_prob: f64,
    pub noise_std: f64,
    /// Grid sizes for the weight-scale and activation-scale searches.
    pub weight_grid: usize,
    pub act_grid: usize,
    /// Calibration batches used for the activation-scale init sweep.
    pub act_init_batches: usize,
    pub round_reg_weight: f64,
    pub round_beta_start: f64,
    pub round_beta_end: f64,
    /// Fraction of iterations before the rounding regularizer kicks in.
    pub round_warmup: f64,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            iterations: 200,
            lr: 4e-3,
            batch_size: 16,
            lambda_local: 1.0,
            lambda_logits: 0.2,
            lambda_kl: 1.0,
            logits_distance: LogitsDistance::Kl,
            drop_prob: 0.5,
            noise_std: 0.05,
            weight_grid: 100,
            act_grid: 64,
            act_init_batches: 4,
            round_reg_weight: 0.01,
            round_beta_start: 20.0,
            round_beta_end: 2.0,
            round_warmup: 0.2,
            seed: 0,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("recon lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("recon batch size must be positive".into()));
        }
        if self.lambda_local < 0.0 || self.lambda_logits < 0.0 || self.lambda_kl < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.weight_grid < 2 || self.act_grid < 2 {
            return Err(Error::Config("scale grids need at least 2 candidates".into()));
        }
        if !(0.0..=1.0).contains(&self.round_warmup) {
            return Err(Error::Config("round_warmup outside [0, 1]".into()));
        }
        self.policy().validate()
    }

    pub fn policy(&self) -> PerturbPolicy {
        PerturbPolicy { drop_prob: self.drop_prob, noise_std: self.noise_std, seed: self.seed }
    }
}

// ── Quantized model ─────────────────────────────────────────────────

/// Quantizers finalized for one weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuant {
    pub weight: QuantParams,
    /// Hardened integer codes for the weight: the baked weight is exactly
    /// `scale * (code - z) + offset` with per-row `offset` (zero unless the
    /// moment-matched regularization folded a mean back in).
    pub weight_codes: Vec<u8>,
    /// Per-output-channel additive offsets restored at dequant; empty when
    /// none apply.
    pub weight_offset: Vec<f64>,
    pub act: QuantParams,
}

/// A model whose weights are baked to the quantization grid, plus the
/// per-layer activation quantizers applied to weighted-layer inputs.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub model: Model,
    pub quants: BTreeMap<usize, LayerQuant>,
    pub weight_bits: u8,
    pub act_bits: u8,
}

impl QuantizedModel {
    /// Full-precision passthrough (bit-width 32 simulation): no quantizers.
    pub fn bypass(model: Model) -> Self {
        QuantizedModel { model, quants: BTreeMap::new(), weight_bits: 32, act_bits: 32 }
    }

    pub fn is_bypass(&self) -> bool {
        self.quants.is_empty()
    }

    /// Eval forward with activation quantizers applied.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let hook = |layer: usize, t: Tensor| -> Result<Tensor> {
            match self.quants.get(&layer) {
                Some(lq) => fake_quantize(&t, &lq.act),
                None => Ok(t),
            }
        };
        let (out, _) = forward_span_value(
            &self.model.layers,
            0..self.model.layers.len(),
            x,
            Mode::Eval,
            self.model.spec.bn_eps,
            Parallelism::Auto,
            Some(&hook),
        )?;
        out.assert_finite("quantized logits")?;
        Ok(out)
    }

    /// Classification error (%) over a labeled set, eval mode.
    pub fn eval_error(&self, images: &Tensor, labels: &[usize], batch: usize) -> Result<f64> {
        let n = labels.len();
        if n == 0 {
            return Ok(0.0);
        }
        let per: usize = images.numel() / n;
        let mut wrong = 0usize;
        let mut i = 0;
        while i < n {
            let end = (i + batch).min(n);
            let mut data = Vec::with_capacity((end - i) * per);
            data.extend_from_slice(&images.data()[i * per..end * per]);
            let mut shape = images.shape().to_vec();
            shape[0] = end - i;
            let logits = self.forward_eval(&Tensor::new(shape, data)?)?;
            let preds = crate::nn::argmax_rows(&logits)?;
            wrong += preds.iter().zip(&labels[i..end]).filter(|(p, l)| p != l).count();
            i = end;
        }
        Ok(100.0 * wrong as f64 / n as f64)
    }
}

// ── Calibration cache ───────────────────────────────────────────────

/// Cached features for one block: full-precision inputs/outputs, inputs
/// reproduced through the already-quantized prefix, and the full-precision
/// final logits, batch-aligned.
#[derive(Debug, Clone)]
pub struct CalibCache {
    pub block: usize,
    pub fp_in: Vec<Tensor>,
    pub q_in: Vec<Tensor>,
    pub fp_out: Vec<Tensor>,
    pub fp_logits: Vec<Tensor>,
}

impl CalibCache {
    pub fn batches(&self) -> usize {
        self.fp_in.len()
    }
}

// ── Loss pieces (value level) ───────────────────────────────────────

/// Mean squared error between block outputs (the local objective).
pub fn recon_loss_local(xf: &Tensor, xq: &Tensor) -> Result<f64> {
    xf.mse(xq)
}

fn kl_value(p_logits: &Tensor, q_logits: &Tensor) -> Result<f64> {
    if p_logits.shape() != q_logits.shape() || p_logits.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "kl: {:?} vs {:?}",
            p_logits.shape(),
            q_logits.shape()
        )));
    }
    let (n, c) = (p_logits.shape()[0], p_logits.shape()[1]);
    let lp = kernels::log_softmax_rows(p_logits.data(), n, c);
    let lq = kernels::log_softmax_rows(q_logits.data(), n, c);
    let mut total = 0.0;
    for i in 0..n * c {
        let p = lp[i].exp();
        total += p * (lp[i] - lq[i]);
    }
    Ok(total / n as f64)
}

/// Distance between full-precision and quantized logits (the global
/// objective). KL of softmax distributions by default, MSE as alternative.
pub fn logits_loss(fp_logits: &Tensor, q_logits: &Tensor, distance: LogitsDistance) -> Result<f64> {
    match distance {
        LogitsDistance::Kl => kl_value(fp_logits, q_logits),
        LogitsDistance::Mse => fp_logits.mse(q_logits),
    }
}

/// Breakdown of one reconstruction loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcrComponents {
    pub local: f64,
    pub logits_orig: f64,
    pub logits_pert: f64,
    pub kl: f64,
    pub total: f64,
}

// ── Live block state ────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct LiveWeight {
    layer: usize,
    wbits: u8,
    abits: u8,
    /// Weights as seen by the quantizer (standardized when the
    /// moment-matched regularization is active, plain otherwise).
    w_std: Tensor,
    /// Per-output-channel quant scales in the (possibly standardized)
    /// weight space; fixed after the grid search.
    scales: Vec<f64>,
    zps: Vec<f64>,
    qmax: f64,
    /// Per-row affine restoring dequantized values to weight space:
    /// `baked = out_scale * (q - z) + out_offset`.
    out_scales: Vec<f64>,
    out_offsets: Vec<f64>,
    /// Soft rounding variables, same shape as the weight.
    v: Tensor,
    /// Per-tensor input activation quant; scale is learned, zero point fixed.
    act_scale: f64,
    act_zp: f64,
    act_qmax: f64,
}

/// Learnable state of the block currently under reconstruction.
#[derive(Debug, Clone)]
pub struct LiveBlockState {
    block: usize,
    span: Range<usize>,
    weights: Vec<LiveWeight>,
    rect: RectSigmoid,
}

impl LiveBlockState {
    pub fn block_index(&self) -> usize {
        self.block
    }
    pub fn weighted_layers(&self) -> Vec<usize> {
        self.weights.iter().map(|w| w.layer).collect()
    }
    pub fn act_scale(&self, idx: usize) -> f64 {
        self.weights[idx].act_scale
    }
    pub fn set_act_scale(&mut self, idx: usize, s: f64) {
        self.weights[idx].act_scale = s;
    }
    pub fn rounding_vars(&self, idx: usize) -> &Tensor {
        &self.weights[idx].v
    }
    pub fn set_rounding_vars(&mut self, idx: usize, v: Tensor) {
        self.weights[idx].v = v;
    }
}

struct LiveVars {
    per_weight: Vec<(Var, Var)>, // (rounding vars, activation scale)
}

// ── Reconstruction driver ───────────────────────────────────────────

/// Per-block record emitted into the reconstruction report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    pub iters: usize,
    pub loss_start: f64,
    pub loss_end: f64,
    pub scale_final: f64,
    pub reverted: bool,
}

/// Inputs to a reconstruction run.
pub struct ReconJob<'a> {
    pub model: &'a Model,
    pub calib: &'a [Tensor],
    pub recon: &'a ReconConfig,
    pub weight_bits: u8,
    pub act_bits: u8,
    /// Keep first and last weighted layers at 8 bits.
    pub first_last_8bit: bool,
    /// Moment-matched weight regularization folded into the quantizers.
    pub pem: Option<PemConfig>,
    pub partition: BlockPartition,
}

pub struct Reconstructor<'a> {
    fp_model: &'a Model,
    qmodel: QuantizedModel,
    partition: BlockPartition,
    cfg: &'a ReconConfig,
    weight_bits: u8,
    act_bits: u8,
    first_last_8bit: bool,
    pem: Option<PemConfig>,
    first_weighted: usize,
    last_weighted: usize,
    calib: Vec<Tensor>,
    fp_logits: Vec<Tensor>,
}

impl<'a> Reconstructor<'a> {
    /// The full-precision reference stays frozen; the quantized copy starts
    /// identical and gets weights baked block by block.
    pub fn new(job: ReconJob<'a>) -> Result<Self> {
        job.recon.validate()?;
        if job.calib.is_empty() {
            return Err(Error::InvalidArg("calibration set is empty".into()));
        }
        let weighted: Vec<usize> = job
            .model
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_weighted())
            .map(|(i, _)| i)
            .collect();
        let (first_weighted, last_weighted) = match (weighted.first(), weighted.last()) {
            (Some(&f), Some(&l)) => (f, l),
            _ => return Err(Error::InvalidArg("model has no quantizable layers".into())),
        };
        let fp_logits =
            job.calib.iter().map(|b| job.model.forward_eval(b)).collect::<Result<Vec<_>>>()?;
        Ok(Reconstructor {
            fp_model: job.model,
            qmodel: QuantizedModel {
                model: job.model.clone(),
                quants: BTreeMap::new(),
                weight_bits: job.weight_bits,
                act_bits: job.act_bits,
            },
            partition: job.partition,
            cfg: job.recon,
            weight_bits: job.weight_bits,
            act_bits: job.act_bits,
            first_last_8bit: job.first_last_8bit,
            pem: job.pem,
            first_weighted,
            last_weighted,
            calib: job.calib.to_vec(),
            fp_logits,
        })
    }

    /// Effective (weight, activation) bits for one weighted layer.
    fn bits_for(&self, layer: usize) -> (u8, u8) {
        if self.first_last_8bit && layer == self.first_weighted {
            (8, 8)
        } else if self.first_last_8bit && layer == self.last_weighted && layer != self.first_weighted
        {
            (8, self.act_bits)
        } else {
            (self.weight_bits, self.act_bits)
        }
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn quantized_model(&self) -> &QuantizedModel {
        &self.qmodel
    }

    fn span_value(
        &self,
        layers: &[Layer],
        range: Range<usize>,
        x: &Tensor,
        quantized: bool,
    ) -> Result<Tensor> {
        let hook = |layer: usize, t: Tensor| -> Result<Tensor> {
            match self.qmodel.quants.get(&layer) {
                Some(lq) => fake_quantize(&t, &lq.act),
                None => Ok(t),
            }
        };
        let (out, _) = forward_span_value(
            layers,
            range,
            x,
            Mode::Eval,
            self.fp_model.spec.bn_eps,
            Parallelism::Auto,
            if quantized { Some(&hook) } else { None },
        )?;
        Ok(out)
    }

    /// Rebuild the cache for `block`: full-precision features from the
    /// reference model, quantized inputs through the finalized prefix.
    pub fn collect_calibration(&self, block: usize) -> Result<CalibCache> {
        let span = self.partition.blocks[block].clone();
        let mut fp_in = Vec::with_capacity(self.calib.len());
        let mut q_in = Vec::with_capacity(self.calib.len());
        let mut fp_out = Vec::with_capacity(self.calib.len());
        for batch in &self.calib {
            let f_in = self.span_value(&self.fp_model.layers, 0..span.start, batch, false)?;
            let q = self.span_value(&self.qmodel.model.layers, 0..span.start, batch, true)?;
            let f_out = self.span_value(&self.fp_model.layers, span.clone(), &f_in, false)?;
            fp_in.push(f_in);
            q_in.push(q);
            fp_out.push(f_out);
        }
        Ok(CalibCache { block, fp_in, q_in, fp_out, fp_logits: self.fp_logits.clone() })
    }

    // ── Block init ──────────────────────────────────────────────────

    /// Initialize live state: weight scales by per-channel MSE grid search,
    /// rounding vars at the fractional residual (soft output equals the
    /// full-precision weight), activation scale by an output-aware sweep
    /// over fractions of the min-max scale.
    pub fn init_block(&self, block: usize, cache: &CalibCache) -> Result<LiveBlockState> {
        let span = self.partition.blocks[block].clone();
        let rect = RectSigmoid::default();
        let mut weights = Vec::new();

        for i in span.clone() {
            let (w, is_linear) = match &self.fp_model.layers[i] {
                Layer::Conv2d { weight, .. } => (weight.clone(), false),
                Layer::Linear { weight, .. } => (weight.clone(), true),
                _ => continue,
            };
            let (wbits, abits) = self.bits_for(i);
            let rows = w.shape()[0];
            let per = w.numel() / rows;

            // Moment-matched regularization: the quantizer sees the
            // standardized weights; the per-row restore affine is folded
            // into dequantization so the FP function is untouched.
            let pem_active = self
                .pem
                .map(|p| p.enabled && !(p.conv_only && is_linear))
                .unwrap_or(false);
            let (w_std, restore_scale, restore_offset) = if pem_active {
                let fold = quant::pem_fold(&w, &self.pem.expect("pem checked").alpha)?;
                (fold.w_std, fold.restore_scale, fold.restore_offset)
            } else {
                (w.clone(), vec![1.0; rows], vec![0.0; rows])
            };

            let flat = w_std.reshape(&[rows, per])?;
            let wp = search_scale_mse(
                &flat,
                wbits,
                self.cfg.weight_grid,
                Granularity::PerOutputChannel,
            )?;
            let mut v = Tensor::zeros(w.shape());
            for (j, vv) in v.data_mut().iter_mut().enumerate() {
                let s = wp.scale[j / per];
                let frac = w_std.data()[j] / s - (w_std.data()[j] / s).floor();
                *vv = rect.inverse(frac);
            }
            let out_scales: Vec<f64> =
                wp.scale.iter().zip(&restore_scale).map(|(s, r)| s * r).collect();
            weights.push(LiveWeight {
                layer: i,
                wbits,
                abits,
                w_std,
                scales: wp.scale,
                zps: wp.zero_point,
                qmax: ((1u32 << wbits) - 1) as f64,
                out_scales,
                out_offsets: restore_offset,
                v,
                act_scale: 1.0, // placeholder until the sweep below
                act_zp: 0.0,
                act_qmax: ((1u32 << abits) - 1) as f64,
            });
        }
        if weights.is_empty() {
            return Err(Error::InvalidArg(format!("block {} has no quantizable layer", block)));
        }

        let mut state = LiveBlockState { block, span, weights, rect };

        // Activation scales, one weighted layer at a time: propagate the
        // init-subset inputs to the layer, min-max calibrate, then sweep
        // candidate scales against the block-output MSE.
        let n_init = self.cfg.act_init_batches.min(cache.batches()).max(1);
        for widx in 0..state.weights.len() {
            let feats = self.features_at_weight(&state, cache, widx, n_init)?;
            let mut all = Vec::new();
            for f in &feats {
                all.extend_from_slice(f.data());
            }
            let flat = Tensor::from_vec(all);
            let mm = calibrate_minmax(&flat, state.weights[widx].abits, Granularity::PerTensor)?;
            let lo = flat.min().min(0.0);
            let s_mm = mm.scale[0];
            let aqmax = state.weights[widx].act_qmax;
            let hardened = self.hardened_block_layers(&state)?;
            let mut best = (f64::INFINITY, s_mm, mm.zero_point[0]);
            for g in 0..self.cfg.act_grid {
                let fr = 0.5 + 0.7 * g as f64 / (self.cfg.act_grid - 1) as f64;
                let s = fr * s_mm;
                let z = (-lo / s).round().clamp(0.0, aqmax);
                state.weights[widx].act_scale = s;
                state.weights[widx].act_zp = z;
                let mut err = 0.0;
                for b in 0..n_init {
                    // Quantizers up to and including the swept layer are live.
                    let out = self.live_span_value(
                        &state,
                        &hardened,
                        state.span.clone(),
                        cache.q_in[b].clone(),
                        widx + 1,
                    )?;
                    err += out.mse(&cache.fp_out[b])?;
                }
                if err < best.0 {
                    best = (err, s, z);
                }
            }
            state.weights[widx].act_scale = best.1;
            state.weights[widx].act_zp = best.2;
        }
        Ok(state)
    }

    /// Inputs reaching weighted layer `widx` of the live block for the
    /// first `n` cache batches, with earlier in-block layers hardened.
    fn features_at_weight(
        &self,
        state: &LiveBlockState,
        cache: &CalibCache,
        widx: usize,
        n: usize,
    ) -> Result<Vec<Tensor>> {
        let until = state.weights[widx].layer;
        let mut out = Vec::with_capacity(n);
        for b in 0..n {
            let mut cur = cache.q_in[b].clone();
            if until > state.span.start {
                let layers = self.hardened_block_layers(state)?;
                cur = self.live_span_value(state, &layers, state.span.start..until, cur, widx)?;
            }
            out.push(cur);
        }
        Ok(out)
    }

    /// Block layers with weights baked at the current hardened rounding.
    fn hardened_block_layers(&self, state: &LiveBlockState) -> Result<Vec<Layer>> {
        let mut layers: Vec<Layer> = self.fp_model.layers[state.span.clone()].to_vec();
        for lw in &state.weights {
            let baked = self.bake_weight(state, lw)?;
            match &mut layers[lw.layer - state.span.start] {
                Layer::Conv2d { weight, .. } | Layer::Linear { weight, .. } => *weight = baked.0,
                _ => unreachable!(),
            }
        }
        Ok(layers)
    }

    /// Hardened weight for a live layer: offset = 1 where h(v) >= 0.5.
    /// Returns the baked tensor and the integer codes.
    fn bake_weight(&self, state: &LiveBlockState, lw: &LiveWeight) -> Result<(Tensor, Vec<u8>)> {
        let rows = lw.scales.len();
        let per = lw.w_std.numel() / rows;
        let mut baked = lw.w_std.clone();
        let mut codes = Vec::with_capacity(lw.w_std.numel());
        for (j, out) in baked.data_mut().iter_mut().enumerate() {
            let row = j / per;
            let (s, z) = (lw.scales[row], lw.zps[row]);
            let (h, _) = state.rect.eval(lw.v.data()[j]);
            let offset = if h >= 0.5 { 1.0 } else { 0.0 };
            let code = ((lw.w_std.data()[j] / s).floor() + offset + z).clamp(0.0, lw.qmax);
            codes.push(code as u8);
            *out = lw.out_scales[row] * (code - z) + lw.out_offsets[row];
        }
        Ok((baked, codes))
    }

    /// Value forward through block layers with hardened weights; applies
    /// the activation quantizer of each weighted layer (`active_acts` caps
    /// how many act quantizers are live, for the init sweep).
    fn live_span_value(
        &self,
        state: &LiveBlockState,
        hardened: &[Layer],
        range: Range<usize>,
        x: Tensor,
        active_acts: usize,
    ) -> Result<Tensor> {
        let span_start = state.span.start;
        let hook = move |local_idx: usize, t: Tensor| -> Result<Tensor> {
            let layer = local_idx + span_start;
            for (k, lw) in state.weights.iter().enumerate() {
                if lw.layer == layer && k < active_acts {
                    let p = QuantParams {
                        bits: lw.abits,
                        granularity: Granularity::PerTensor,
                        scale: vec![lw.act_scale],
                        zero_point: vec![lw.act_zp],
                    };
                    return fake_quantize(&t, &p);
                }
            }
            Ok(t)
        };
        let local = (range.start - span_start)..(range.end - span_start);
        let (out, _) = forward_span_value(
            hardened,
            local,
            &x,
            Mode::Eval,
            self.fp_model.spec.bn_eps,
            Parallelism::Auto,
            Some(&hook),
        )?;
        Ok(out)
    }

    /// Hardened block output for one batch (all act quantizers active).
    fn block_value_hardened(&self, state: &LiveBlockState, x: &Tensor) -> Result<Tensor> {
        let layers = self.hardened_block_layers(state)?;
        self.live_span_value(state, &layers, state.span.clone(), x.clone(), state.weights.len())
    }

    // ── Traced loss ─────────────────────────────────────────────────

    fn make_vars(&self, tape: &Tape, state: &LiveBlockState, learn: bool) -> LiveVars {
        let per_weight = state
            .weights
            .iter()
            .map(|lw| {
                (tape.leaf(lw.v.clone(), learn), tape.leaf(Tensor::scalar(lw.act_scale), learn))
            })
            .collect();
        LiveVars { per_weight }
    }

    /// Soft-rounded block forward on the tape.
    fn trace_block(
        &self,
        tape: &Tape,
        state: &LiveBlockState,
        vars: &LiveVars,
        mut x: Var,
    ) -> Result<Var> {
        let mut widx = 0;
        for i in state.span.clone() {
            let layer = &self.fp_model.layers[i];
            x = match layer {
                Layer::Conv2d { bias, stride, padding, .. } => {
                    let lw = &state.weights[widx];
                    let (v_var, s_var) = vars.per_weight[widx];
                    widx += 1;
                    let xq =
                        tape.fake_quant(x, lw.act_scale, Some(s_var), lw.act_zp, lw.act_qmax)?;
                    let wq = tape.soft_quant_weight(
                        &lw.w_std,
                        v_var,
                        &lw.scales,
                        &lw.zps,
                        lw.qmax,
                        state.rect,
                        Some(&lw.out_scales),
                        Some(&lw.out_offsets),
                    )?;
                    let b = bias.as_ref().map(|b| tape.constant(b.clone()));
                    tape.conv2d(xq, wq, b, *stride, *padding)?
                }
                Layer::Linear { bias, .. } => {
                    let lw = &state.weights[widx];
                    let (v_var, s_var) = vars.per_weight[widx];
                    widx += 1;
                    let xq =
                        tape.fake_quant(x, lw.act_scale, Some(s_var), lw.act_zp, lw.act_qmax)?;
                    let wq = tape.soft_quant_weight(
                        &lw.w_std,
                        v_var,
                        &lw.scales,
                        &lw.zps,
                        lw.qmax,
                        state.rect,
                        Some(&lw.out_scales),
                        Some(&lw.out_offsets),
                    )?;
                    let y = tape.linear(xq, wq)?;
                    match bias {
                        Some(b) => {
                            let bv = tape.constant(b.clone());
                            tape.add_channel_bias(y, bv)?
                        }
                        None => y,
                    }
                }
                Layer::BatchNorm2d { gamma, beta, running_mean, running_var } => {
                    let g = tape.constant(gamma.clone());
                    let bt = tape.constant(beta.clone());
                    let (out, _) = tape.batch_norm(
                        x,
                        g,
                        bt,
                        Some((running_mean.data(), running_var.data())),
                        self.fp_model.spec.bn_eps,
                    )?;
                    out
                }
                Layer::Relu => tape.relu(x)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
            };
        }
        Ok(x)
    }

    /// Frozen full-precision tail after the block, on the tape.
    fn trace_tail(&self, tape: &Tape, state: &LiveBlockState, x: Var) -> Result<Var> {
        let tail = state.span.end..self.fp_model.layers.len();
        if tail.is_empty() {
            return Ok(x);
        }
        let mut vars: Vec<LayerVars> = Vec::with_capacity(self.fp_model.layers.len());
        for (i, layer) in self.fp_model.layers.iter().enumerate() {
            if !tail.contains(&i) {
                vars.push(LayerVars::None);
                continue;
            }
            vars.push(match layer {
                Layer::Conv2d { weight, bias, .. } => LayerVars::Conv {
                    w: tape.constant(weight.clone()),
                    b: bias.as_ref().map(|b| tape.constant(b.clone())),
                },
                Layer::Linear { weight, bias } => LayerVars::Linear {
                    w: tape.constant(weight.clone()),
                    b: bias.as_ref().map(|b| tape.constant(b.clone())),
                },
                Layer::BatchNorm2d { gamma, beta, .. } => LayerVars::Bn {
                    gamma: tape.constant(gamma.clone()),
                    beta: tape.constant(beta.clone()),
                },
                _ => LayerVars::None,
            });
        }
        let (out, _) = crate::nn::forward_span_traced(
            tape,
            &self.fp_model.layers,
            &vars,
            tail,
            x,
            Mode::Eval,
            self.fp_model.spec.bn_eps,
            None,
        )?;
        Ok(out)
    }

    fn logits_distance_traced(&self, tape: &Tape, fp: Var, q: Var) -> Result<Var> {
        match self.cfg.logits_distance {
            LogitsDistance::Kl => tape.kl_divergence(fp, q),
            LogitsDistance::Mse => tape.mse_loss(fp, q),
        }
    }

    /// Build the full reconstruction loss for one batch on a tape.
    #[allow(clippy::too_many_arguments)]
    fn pcr_traced(
        &self,
        tape: &Tape,
        state: &LiveBlockState,
        cache: &CalibCache,
        batch: usize,
        policy: &PerturbPolicy,
        step: u64,
        learn: bool,
        round_reg: Option<(f64, f64)>,
    ) -> Result<(Var, PcrComponents, LiveVars)> {
        let vars = self.make_vars(tape, state, learn);
        let xq = tape.constant(cache.q_in[batch].clone());
        let xhat_t = perturb_features(&cache.q_in[batch], &cache.fp_in[batch], policy, step)?;
        let xhat = tape.constant(xhat_t);
        let fp_logits = tape.constant(cache.fp_logits[batch].clone());
        let fp_out = tape.constant(cache.fp_out[batch].clone());

        let out_q = self.trace_block(tape, state, &vars, xq)?;
        let out_hat = self.trace_block(tape, state, &vars, xhat)?;
        let logits_q = self.trace_tail(tape, state, out_q)?;
        let logits_hat = self.trace_tail(tape, state, out_hat)?;

        let l_local = tape.mse_loss(out_q, fp_out)?;
        let l_logits_q = self.logits_distance_traced(tape, fp_logits, logits_q)?;
        let l_logits_hat = self.logits_distance_traced(tape, fp_logits, logits_hat)?;
        let l_kl = tape.kl_divergence(logits_q, logits_hat)?;

        let half = tape.add(l_logits_q, l_logits_hat)?;
        let half = tape.scale(half, 0.5 * self.cfg.lambda_logits)?;
        let kl_w = tape.scale(l_kl, self.cfg.lambda_kl)?;
        let loc_w = tape.scale(l_local, self.cfg.lambda_local)?;
        let mut total = tape.add(half, kl_w)?;
        total = tape.add(total, loc_w)?;
        if let Some((weight, beta)) = round_reg {
            if weight > 0.0 {
                for (v_var, _) in &vars.per_weight {
                    let reg = tape.rounding_reg(*v_var, state.rect, beta)?;
                    let reg = tape.scale(reg, weight)?;
                    total = tape.add(total, reg)?;
                }
            }
        }
        let comps = PcrComponents {
            local: tape.scalar_value(l_local)?,
            logits_orig: tape.scalar_value(l_logits_q)?,
            logits_pert: tape.scalar_value(l_logits_hat)?,
            kl: tape.scalar_value(l_kl)?,
            total: tape.scalar_value(total)?,
        };
        Ok((total, comps, vars))
    }

    /// Loss components for one batch without gradients (soft rounding, live
    /// scales).
    pub fn pcr_components(
        &self,
        state: &LiveBlockState,
        cache: &CalibCache,
        batch: usize,
        policy: &PerturbPolicy,
        step: u64,
    ) -> Result<PcrComponents> {
        let tape = Tape::new();
        let (_, comps, _) = self.pcr_traced(&tape, state, cache, batch, policy, step, false, None)?;
        Ok(comps)
    }

    /// Loss and gradients w.r.t. the learnables of one batch: per weighted
    /// layer, (d/d rounding vars, d/d activation scale).
    pub fn pcr_grads(
        &self,
        state: &LiveBlockState,
        cache: &CalibCache,
        batch: usize,
        policy: &PerturbPolicy,
        step: u64,
    ) -> Result<(PcrComponents, Vec<(Tensor, f64)>)> {
        let tape = Tape::new();
        let (total, comps, vars) =
            self.pcr_traced(&tape, state, cache, batch, policy, step, true, None)?;
        let grads = tape.backward(total)?;
        let mut out = Vec::with_capacity(vars.per_weight.len());
        for (k, (v_var, s_var)) in vars.per_weight.iter().enumerate() {
            let dv = grads.or_zeros(*v_var, state.weights[k].v.shape());
            let ds = grads.or_zeros(*s_var, &[1]).data()[0];
            out.push((dv, ds));
        }
        Ok((comps, out))
    }

    /// Mean hardened loss over all calibration batches, perturbation off.
    /// The `loss_end <= loss_start` contract is stated on this quantity.
    pub fn measure_hardened(&self, state: &LiveBlockState, cache: &CalibCache) -> Result<f64> {
        let mut total = 0.0;
        for b in 0..cache.batches() {
            let out_q = self.block_value_hardened(state, &cache.q_in[b])?;
            let l_local = out_q.mse(&cache.fp_out[b])?;
            let logits_q = if state.span.end < self.fp_model.layers.len() {
                self.span_value(
                    &self.fp_model.layers,
                    state.span.end..self.fp_model.layers.len(),
                    &out_q,
                    false,
                )?
            } else {
                out_q.clone()
            };
            let l_logits = logits_loss(&cache.fp_logits[b], &logits_q, self.cfg.logits_distance)?;
            total += self.cfg.lambda_logits * l_logits + self.cfg.lambda_local * l_local;
        }
        Ok(total / cache.batches() as f64)
    }

    // ── The optimization loop ───────────────────────────────────────

    /// Reconstruct one block: learn rounding offsets and activation scale,
    /// harden, and bake into the quantized model. Reverts to the
    /// nearest-rounding init if optimization did not improve the hardened
    /// loss.
    pub fn reconstruct_block(&mut self, block: usize) -> Result<BlockReport> {
        let cache = self.collect_calibration(block)?;
        let mut state = self.init_block(block, &cache)?;
        let init_state = state.clone();
        let loss_start = self.measure_hardened(&state, &cache)?;

        let policy = self.cfg.policy();
        let mut opt = Adam::new();
        let iters = self.cfg.iterations;
        for it in 0..iters {
            let batch = it % cache.batches();
            let frac = it as f64 / iters.max(1) as f64;
            let round_reg = if frac >= self.cfg.round_warmup && self.cfg.round_reg_weight > 0.0 {
                let t = ((frac - self.cfg.round_warmup) / (1.0 - self.cfg.round_warmup).max(1e-9))
                    .clamp(0.0, 1.0);
                let beta = self.cfg.round_beta_start
                    + (self.cfg.round_beta_end - self.cfg.round_beta_start) * t;
                Some((self.cfg.round_reg_weight, beta))
            } else {
                None
            };
            let tape = Tape::new();
            let (total, comps, vars) =
                self.pcr_traced(&tape, &state, &cache, batch, &policy, it as u64, true, round_reg)?;
            if !comps.total.is_finite() {
                return Err(Error::Diverged(format!(
                    "block {} iteration {}: non-finite loss {:?}",
                    block, it, comps
                )));
            }
            let grads = tape.backward(total)?;

            // Stable parameter order: per weighted layer, v then scale.
            let mut params: Vec<Tensor> = Vec::new();
            let mut gs: Vec<Tensor> = Vec::new();
            for (k, (v_var, s_var)) in vars.per_weight.iter().enumerate() {
                params.push(state.weights[k].v.clone());
                gs.push(grads.or_zeros(*v_var, state.weights[k].v.shape()));
                params.push(Tensor::scalar(state.weights[k].act_scale));
                gs.push(grads.or_zeros(*s_var, &[1]));
            }
            {
                let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
                let grefs: Vec<&Tensor> = gs.iter().collect();
                opt.step(&mut refs, &grefs, self.cfg.lr)?;
            }
            for (k, lw) in state.weights.iter_mut().enumerate() {
                lw.v = params[2 * k].clone();
                lw.act_scale = params[2 * k + 1].data()[0].max(1e-9);
            }
        }

        let loss_end = self.measure_hardened(&state, &cache)?;
        let reverted = loss_end > loss_start;
        let (final_state, final_loss) =
            if reverted { (init_state, loss_start) } else { (state, loss_end) };

        // Bake into the quantized model.
        for lw in &final_state.weights {
            let (baked, codes) = self.bake_weight(&final_state, lw)?;
            match &mut self.qmodel.model.layers[lw.layer] {
                Layer::Conv2d { weight, .. } | Layer::Linear { weight, .. } => *weight = baked,
                _ => unreachable!(),
            }
            let has_offset = lw.out_offsets.iter().any(|&o| o != 0.0);
            self.qmodel.quants.insert(
                lw.layer,
                LayerQuant {
                    weight: QuantParams {
                        bits: lw.wbits,
                        granularity: Granularity::PerOutputChannel,
                        scale: lw.out_scales.clone(),
                        zero_point: lw.zps.clone(),
                    },
                    weight_codes: codes,
                    weight_offset: if has_offset { lw.out_offsets.clone() } else { vec![] },
                    act: QuantParams {
                        bits: lw.abits,
                        granularity: Granularity::PerTensor,
                        scale: vec![lw.act_scale],
                        zero_point: vec![lw.act_zp],
                    },
                },
            );
        }
        Ok(BlockReport {
            block,
            iters,
            loss_start,
            loss_end: final_loss,
            scale_final: final_state.weights[0].act_scale,
            reverted,
        })
    }

    pub fn finish(self) -> QuantizedModel {
        self.qmodel
    }
}

// ── Top-level PTQ entry ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PtqConfig {
    /// 32 bypasses quantization entirely.
    pub weight_bits: u8,
    pub act_bits: u8,
    /// Keep the first and last weighted layers at 8 bits (the usual
    /// convention for networks without residual paths).
    pub first_last_8bit: bool,
    pub pem: PemConfig,
    pub recon: ReconConfig,
    /// Weighted layers per reconstruction block.
    pub group_size: usize,
}

impl Default for PtqConfig {
    fn default() -> Self {
        PtqConfig {
            weight_bits: 2,
            act_bits: 4,
            first_last_8bit: true,
            pem: PemConfig::default(),
            recon: ReconConfig::default(),
            group_size: 1,
        }
    }
}

impl PtqConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: u8| (2..=8).contains(&b) || b == 32;
        if !ok(self.weight_bits) || !ok(self.act_bits) {
            return Err(Error::Config(format!(
                "bit widths ({}, {}) must be in [2, 8] or 32",
                self.weight_bits, self.act_bits
            )));
        }
        if (self.weight_bits == 32) != (self.act_bits == 32) {
            return Err(Error::Config("bypass requires both bit widths = 32".into()));
        }
        self.pem.validate()?;
        self.recon.validate()
    }

    pub fn is_bypass(&self) -> bool {
        self.weight_bits == 32
    }
}

#[derive(Debug, Clone)]
pub struct PtqOutput {
    pub qmodel: QuantizedModel,
    pub reports: Vec<BlockReport>,
    pub pem: Option<PemReport>,
}

/// Full PTQ pipeline: weight regularization per its configured mode, then
/// block-by-block reconstruction in order. With 32-bit config the
/// quantizers are bypassed and the model passes through bit-identically.
pub fn run_ptq(model: &Model, calib: &[Tensor], cfg: &PtqConfig) -> Result<PtqOutput> {
    cfg.validate()?;
    if cfg.is_bypass() {
        return Ok(PtqOutput {
            qmodel: QuantizedModel::bypass(model.clone()),
            reports: vec![],
            pem: None,
        });
    }
    let mut work = model.clone();
    let mut pem_report = None;
    let mut fold_pem = None;
    if cfg.pem.enabled {
        match cfg.pem.mode {
            quant::PemMode::Replace => {
                pem_report = Some(quant::apply_pem_to_model(&mut work, &cfg.pem, calib)?);
            }
            quant::PemMode::Reparam => fold_pem = Some(cfg.pem),
        }
    }
    let partition = partition_blocks_grouped(&work, cfg.group_size)?;
    let mut recon = Reconstructor::new(ReconJob {
        model: &work,
        calib,
        recon: &cfg.recon,
        weight_bits: cfg.weight_bits,
        act_bits: cfg.act_bits,
        first_last_8bit: cfg.first_last_8bit,
        pem: fold_pem,
        partition,
    })?;
    let mut reports = Vec::new();
    for b in 0..recon.partition().len() {
        let report = recon.reconstruct_block(b)?;
        log::info!(
            "block {}: loss {:.6} -> {:.6}{}",
            report.block,
            report.loss_start,
            report.loss_end,
            if report.reverted { " (reverted)" } else { "" }
        );
        reports.push(report);
    }
    Ok(PtqOutput { qmodel: recon.finish(), reports, pem: pem_report })
}

// ── Quant params file (external interface) ──────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QParamsEntry {
    pub layer: usize,
    pub name: String,
    pub role: String,
    pub granularity: Granularity,
    pub bits: u8,
    pub scale: Vec<f64>,
    pub zero_point: Vec<f64>,
    /// Per-channel dequant offsets from the moment-matched weight
    /// regularization; empty when unused.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QParamsFile {
    pub format: String,
    pub weight_bits: u8,
    pub act_bits: u8,
    pub layers: Vec<QParamsEntry>,
}

impl QuantizedModel {
    pub fn qparams_file(&self) -> QParamsFile {
        let mut layers = Vec::new();
        for (&idx, lq) in &self.quants {
            let name = format!("layers.{}", idx);
            layers.push(QParamsEntry {
                layer: idx,
                name: name.clone(),
                role: "weight".into(),
                granularity: lq.weight.granularity,
                bits: lq.weight.bits,
                scale: lq.weight.scale.clone(),
                zero_point: lq.weight.zero_point.clone(),
                offset: lq.weight_offset.clone(),
            });
            layers.push(QParamsEntry {
                layer: idx,
                name,
                role: "activation".into(),
                granularity: lq.act.granularity,
                bits: lq.act.bits,
                scale: lq.act.scale.clone(),
                zero_point: lq.act.zero_point.clone(),
                offset: vec![],
            });
        }
        QParamsFile {
            format: crate::io::QPARAMS_FORMAT.into(),
            weight_bits: self.weight_bits,
            act_bits: self.act_bits,
            layers,
        }
    }

    /// Rebuild from a baked checkpoint plus its qparams file. Codes are
    /// recovered exactly because baked weights sit on the quant grid.
    pub fn from_parts(model: Model, file: &QParamsFile) -> Result<Self> {
        if file.format != crate::io::QPARAMS_FORMAT {
            return Err(Error::Format(format!(
                "unsupported qparams format '{}', expected '{}'",
                file.format,
                crate::io::QPARAMS_FORMAT
            )));
        }
        if file.weight_bits == 32 {
            return Ok(QuantizedModel::bypass(model));
        }
        let mut quants: BTreeMap<usize, LayerQuant> = BTreeMap::new();
        let mut weights: BTreeMap<usize, (QuantParams, Vec<f64>)> = BTreeMap::new();
        let mut acts: BTreeMap<usize, QuantParams> = BTreeMap::new();
        for e in &file.layers {
            let p = QuantParams {
                bits: e.bits,
                granularity: e.granularity,
                scale: e.scale.clone(),
                zero_point: e.zero_point.clone(),
            };
            match e.role.as_str() {
                "weight" => {
                    weights.insert(e.layer, (p, e.offset.clone()));
                }
                "activation" => {
                    acts.insert(e.layer, p);
                }
                other => return Err(Error::Format(format!("unknown qparams role '{}'", other))),
            }
        }
        for (idx, (wp, offset)) in weights {
            let act = acts
                .remove(&idx)
                .ok_or_else(|| Error::Format(format!("layer {} missing activation params", idx)))?;
            let w = match &model.layers[idx] {
                Layer::Conv2d { weight, .. } | Layer::Linear { weight, .. } => weight,
                _ => return Err(Error::Format(format!("layer {} is not weighted", idx))),
            };
            let rows = wp.scale.len();
            if !offset.is_empty() && offset.len() != rows {
                return Err(Error::Format(format!("layer {} offset length mismatch", idx)));
            }
            let per = w.numel() / rows;
            // Strip the per-row offsets before checking grid membership.
            let mut flat = w.reshape(&[rows, per])?;
            if !offset.is_empty() {
                for (j, v) in flat.data_mut().iter_mut().enumerate() {
                    *v -= offset[j / per];
                }
            }
            let codes = quantize(&flat, &wp)?;
            let back = dequantize(&codes)?;
            if back.max_abs_diff(&flat)? > 1e-9 {
                return Err(Error::Format(format!(
                    "layer {} weights are off the quant grid described by the qparams file",
                    idx
                )));
            }
            quants.insert(
                idx,
                LayerQuant { weight: wp, weight_codes: codes.q, weight_offset: offset, act },
            );
        }
        Ok(QuantizedModel { model, quants, weight_bits: file.weight_bits, act_bits: file.act_bits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, ModelSpec, BN_EPS_DEFAULT, BN_MOMENTUM_DEFAULT};

    fn two_conv_one_linear() -> Model {
        let spec = ModelSpec {
            input: (2, 8, 8),
            classes: 4,
            layers: vec![
                LayerSpec::Conv2d { in_ch: 2, out_ch: 4, kernel: 3, stride: 1, padding: 1, bias: false },
                LayerSpec::BatchNorm2d { channels: 4 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_ch: 4, out_ch: 6, kernel: 3, stride: 2, padding: 1, bias: false },
                LayerSpec::BatchNorm2d { channels: 6 },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Linear { in_features: 6, out_features: 4, bias: true },
            ],
            bn_momentum: BN_MOMENTUM_DEFAULT,
            bn_eps: BN_EPS_DEFAULT,
        };
        Model::init(spec, 77).unwrap()
    }

    fn calib_batches(model: &Model, n: usize, batch: usize, seed: u64) -> Vec<Tensor> {
        let (c, h, w) = (model.spec.input.0, model.spec.input.1, model.spec.input.2);
        (0..n)
            .map(|i| {
                let mut rng = seeds::rng_for(seed, "calib", i as u64);
                Tensor::rand_uniform(&[batch, c, h, w], 0.0, 1.0, &mut rng)
            })
            .collect()
    }

    #[test]
    fn partition_counts_blocks_per_weighted_layer() {
        let model = two_conv_one_linear();
        let p = partition_blocks(&model).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.blocks[0], 0..3);
        assert_eq!(p.blocks[1], 3..7);
        assert_eq!(p.blocks[2], 7..8);
    }

    #[test]
    fn partition_rejects_model_without_weighted_layers() {
        let spec = ModelSpec {
            input: (2, 4, 4),
            classes: 2,
            layers: vec![LayerSpec::Relu],
            bn_momentum: BN_MOMENTUM_DEFAULT,
            bn_eps: BN_EPS_DEFAULT,
        };
        let model = Model { spec, layers: vec![Layer::Relu] };
        assert!(partition_blocks(&model).is_err());
    }

    #[test]
    fn block_spans_compose_to_full_forward() {
        let model = two_conv_one_linear();
        let p = partition_blocks(&model).unwrap();
        let x = calib_batches(&model, 1, 3, 5).pop().unwrap();
        let full = model.forward_eval(&x).unwrap();
        let mut cur = x;
        for span in &p.blocks {
            let (out, _) = forward_span_value(
                &model.layers,
                span.clone(),
                &cur,
                Mode::Eval,
                model.spec.bn_eps,
                Parallelism::Auto,
                None,
            )
            .unwrap();
            cur = out;
        }
        assert!(cur.max_abs_diff(&full).unwrap() < 1e-6);
    }

    #[test]
    fn perturb_identity_and_full_swap() {
        let xq = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let xf = Tensor::from_vec(vec![4.0, 5.0, 6.0]);
        let id = PerturbPolicy { drop_prob: 0.0, noise_std: 0.0, seed: 1 };
        assert!(perturb_features(&xq, &xf, &id, 0).unwrap().bitwise_eq(&xq));
        let swap = PerturbPolicy { drop_prob: 1.0, noise_std: 0.0, seed: 1 };
        assert!(perturb_features(&xq, &xf, &swap, 0).unwrap().bitwise_eq(&xf));
    }

    #[test]
    fn perturb_half_mixes_about_half() {
        let n = 100_000;
        let xq = Tensor::zeros(&[n]);
        let xf = Tensor::full(&[n], 1.0);
        let p = PerturbPolicy { drop_prob: 0.5, noise_std: 0.0, seed: 3 };
        let out = perturb_features(&xq, &xf, &p, 7).unwrap();
        let frac = out.data().iter().sum::<f64>() / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "fraction {}", frac);
    }

    #[test]
    fn perturb_rejects_shape_mismatch_and_bad_policy() {
        let a = Tensor::zeros(&[3]);
        let b = Tensor::zeros(&[4]);
        let p = PerturbPolicy::default();
        assert!(perturb_features(&a, &b, &p, 0).is_err());
        let bad = PerturbPolicy { drop_prob: 0.5, noise_std: 0.5, seed: 0 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn local_loss_examples() {
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        assert_eq!(recon_loss_local(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 3.0);
        assert!((recon_loss_local(&a, &b).unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn logits_loss_matches_kl_op_and_is_nonnegative() {
        let mut rng = seeds::rng_for(8, "recon-test", 0);
        for _ in 0..100 {
            let p = Tensor::rand_normal(&[4, 5], 0.0, 2.0, &mut rng);
            let q = Tensor::rand_normal(&[4, 5], 0.0, 2.0, &mut rng);
            let l = logits_loss(&p, &q, LogitsDistance::Kl).unwrap();
            assert!(l >= -1e-9);
            let tape = Tape::new();
            let pv = tape.constant(p.clone());
            let qv = tape.constant(q.clone());
            let kl = tape.kl_divergence(pv, qv).unwrap();
            assert!((l - tape.scalar_value(kl).unwrap()).abs() < 1e-12);
        }
        let p = Tensor::zeros(&[2, 3]);
        assert_eq!(logits_loss(&p, &p, LogitsDistance::Kl).unwrap(), 0.0);
    }

    #[test]
    fn collect_calibration_unquantized_prefix_matches_fp() {
        let model = two_conv_one_linear();
        let calib = calib_batches(&model, 2, 4, 6);
        let cfg = ReconConfig::default();
        let recon =
            Reconstructor::new(ReconJob { model: &model, calib: &calib, recon: &cfg, weight_bits: 2, act_bits: 4, first_last_8bit: false, pem: None, partition: partition_blocks(&model).unwrap() })
                .unwrap();
        let cache = recon.collect_calibration(1).unwrap();
        for (f, q) in cache.fp_in.iter().zip(&cache.q_in) {
            assert!(f.bitwise_eq(q));
        }
        let cache2 = recon.collect_calibration(1).unwrap();
        for (a, b) in cache.fp_in.iter().zip(&cache2.fp_in) {
            assert!(a.bitwise_eq(b));
        }
    }

    #[test]
    fn pcr_collapse_identity_under_identity_policy() {
        let model = two_conv_one_linear();
        let calib = calib_batches(&model, 2, 4, 9);
        let cfg = ReconConfig { lambda_logits: 1.0, lambda_kl: 1.0, ..Default::default() };
        let recon =
            Reconstructor::new(ReconJob { model: &model, calib: &calib, recon: &cfg, weight_bits: 4, act_bits: 4, first_last_8bit: false, pem: None, partition: partition_blocks(&model).unwrap() })
                .unwrap();
        let cache = recon.collect_calibration(0).unwrap();
        let state = recon.init_block(0, &cache).unwrap();
        let id = PerturbPolicy { drop_prob: 0.0, noise_std: 0.0, seed: 0 };
        let comps = recon.pcr_components(&state, &cache, 0, &id, 0).unwrap();
        assert_eq!(comps.kl, 0.0);
        assert_eq!(comps.logits_orig, comps.logits_pert);
        let expected = comps.logits_orig + cfg.lambda_local * comps.local;
        assert!((comps.total - expected).abs() < 1e-6);
    }

    #[test]
    fn reconstruct_improves_and_is_deterministic() {
        let model = two_conv_one_linear();
        let calib = calib_batches(&model, 4, 8, 10);
        let cfg = ReconConfig { iterations: 40, batch_size: 8, ..Default::default() };
        let run = || {
            let mut recon = Reconstructor::new(ReconJob {
                model: &model,
                calib: &calib,
                recon: &cfg,
                weight_bits: 2,
                act_bits: 4,
                first_last_8bit: false,
                pem: None,
                partition: partition_blocks(&model).unwrap(),
            })
            .unwrap();
            let mut reports = Vec::new();
            for b in 0..recon.partition().len() {
                reports.push(recon.reconstruct_block(b).unwrap());
            }
            (recon.finish(), reports)
        };
        let (qa, ra) = run();
        let (qb, rb) = run();
        for (a, b) in ra.iter().zip(&rb) {
            assert_eq!(a.loss_end.to_bits(), b.loss_end.to_bits());
            assert!(a.loss_end <= a.loss_start + 1e-12);
        }
        for (la, lb) in qa.model.layers.iter().zip(&qb.model.layers) {
            match (la, lb) {
                (Layer::Conv2d { weight: wa, .. }, Layer::Conv2d { weight: wb, .. })
                | (Layer::Linear { weight: wa, .. }, Layer::Linear { weight: wb, .. }) => {
                    assert!(wa.bitwise_eq(wb));
                }
                _ => {}
            }
        }
    }

    #[test]
    fn zero_iterations_keeps_init_params() {
        let model = two_conv_one_linear();
        let calib = calib_batches(&model, 2, 4, 11);
        let cfg = ReconConfig { iterations: 0, ..Default::default() };
        let mut recon =
            Reconstructor::new(ReconJob { model: &model, calib: &calib, recon: &cfg, weight_bits: 4, act_bits: 4, first_last_8bit: false, pem: None, partition: partition_blocks(&model).unwrap() })
                .unwrap();
        let cache = recon.collect_calibration(0).unwrap();
        let init = recon.init_block(0, &cache).unwrap();
        let report = recon.reconstruct_block(0).unwrap();
        assert_eq!(report.scale_final, init.act_scale(0));
        assert_eq!(report.loss_start, report.loss_end);
    }

    #[test]
    fn reconstruction_leaves_other_blocks_untouched() {
        let model = two_conv_one_linear();
        let calib = calib_batches(&model, 2, 4, 12);
        let cfg = ReconConfig { iterations: 10, ..Default::default() };
        let mut recon =
            Reconstructor::new(ReconJob { model: &model, calib: &calib, recon: &cfg, weight_bits: 2, act_bits: 4, first_last_8bit: false, pem: None, partition: partition_blocks(&model).unwrap() })
                .unwrap();
        let before: Vec<(String, Tensor)> = recon
            .quantized_model()
            .model
            .named_params()
            .iter()
            .map(|(n, t)| (n.clone(), (*t).clone()))
            .collect();
        recon.reconstruct_block(0).unwrap();
        let qm = recon.finish();
        for ((name, before_t), (after_name, after_t)) in
            before.iter().zip(qm.model.named_params())
        {
            assert_eq!(name, &after_name);
            if name.starts_with("layers.0.") {
                continue; // the reconstructed block's weight
            }
            assert!(after_t.bitwise_eq(before_t), "{} changed outside the block", name);
        }
    }

    #[test]
    fn bypass_is_bit_identical_to_fp() {
        let model = two_conv_one_linear();
        let calib = calib_batches(&model, 2, 4, 13);
        let cfg = PtqConfig { weight_bits: 32, act_bits: 32, ..Default::default() };
        let out = run_ptq(&model, &calib, &cfg).unwrap();
        let x = &calib[0];
        let fp = model.forward_eval(x).unwrap();
        let q = out.qmodel.forward_eval(x).unwrap();
        assert!(fp.bitwise_eq(&q));
    }

    #[test]
    fn hardened_weights_sit_exactly_on_grid() {
        let model = two_conv_one_linear();
        let calib = calib_batches(&model, 2, 8, 14);
        let mut cfg = PtqConfig { weight_bits: 2, act_bits: 4, ..Default::default() };
        cfg.recon.iterations = 20;
        cfg.pem.enabled = false;
        let out = run_ptq(&model, &calib, &cfg).unwrap();
        assert!(!out.qmodel.quants.is_empty());
        for (idx, lq) in &out.qmodel.quants {
            let w = match &out.qmodel.model.layers[*idx] {
                Layer::Conv2d { weight, .. } | Layer::Linear { weight, .. } => weight,
                _ => unreachable!(),
            };
            let rows = lq.weight.scale.len();
            let per = w.numel() / rows;
            for (j, &v) in w.data().iter().enumerate() {
                let row = j / per;
                let code = lq.weight_codes[j] as f64;
                let offset = lq.weight_offset.get(row).copied().unwrap_or(0.0);
                let want = lq.weight.scale[row] * (code - lq.weight.zero_point[row]) + offset;
                assert_eq!(v.to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn qparams_roundtrip_reconstructs_quantizers() {
        let model = two_conv_one_linear();
        let calib = calib_batches(&model, 2, 8, 15);
        let mut cfg = PtqConfig { weight_bits: 3, act_bits: 4, ..Default::default() };
        cfg.recon.iterations = 10;
        let out = run_ptq(&model, &calib, &cfg).unwrap();
        let file = out.qmodel.qparams_file();
        assert_eq!(file.format, crate::io::QPARAMS_FORMAT);
        let rebuilt = QuantizedModel::from_parts(out.qmodel.model.clone(), &file).unwrap();
        for (idx, lq) in &out.qmodel.quants {
            let r = &rebuilt.quants[idx];
            assert_eq!(lq.weight_codes, r.weight_codes);
            assert_eq!(lq.act, r.act);
        }
        let x = &calib[0];
        assert!(out
            .qmodel
            .forward_eval(x)
            .unwrap()
            .bitwise_eq(&rebuilt.forward_eval(x).unwrap()));
    }
}
