//! Affine quantization: calibration, quant/dequant, MSE scale search, and
//! per-channel weight regularization (PEM).
//!
//! Conventions, used consistently by code and tests:
//! - rounding is round-half-away-from-zero (`f64::round`);
//! - quantized codes live in `[0, 2^b - 1]`;
//! - calibration extends the observed range to include zero before deriving
//!   scale and zero-point, which keeps the zero-point representable in
//!   `[0, 2^b - 1]` for ranges that do not straddle zero (constant tensors
//!   included);
//! - a degenerate range (max == min) is widened by a symmetric 1e-8 epsilon;
//! - weights are quantized per output channel, activations per tensor.

use crate::error::{Error, Result};
use crate::nn::{forward_span_value, BnBatchUpdate, Layer, Mode, Model};
use crate::par::Parallelism;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const RANGE_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerOutputChannel,
}

/// Affine quantization descriptor. `scale`/`zero_point` hold one entry for
/// per-tensor granularity, one per output channel otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u8,
    pub granularity: Granularity,
    pub scale: Vec<f64>,
    pub zero_point: Vec<f64>,
}

impl QuantParams {
    pub fn qmax(&self) -> f64 {
        ((1u32 << self.bits) - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::InvalidArg(format!("bits {} outside [2, 8]", self.bits)));
        }
        if self.scale.len() != self.zero_point.len() || self.scale.is_empty() {
            return Err(Error::InvalidArg("scale/zero_point length mismatch".into()));
        }
        let qmax = self.qmax();
        for (&s, &z) in self.scale.iter().zip(&self.zero_point) {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArg(format!("scale {} must be positive", s)));
            }
            if !(0.0..=qmax).contains(&z) || z.fract() != 0.0 {
                return Err(Error::InvalidArg(format!("zero point {} outside [0, {}]", z, qmax)));
            }
        }
        Ok(())
    }

    /// Channel count this descriptor distributes over.
    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// Integer codes plus the params that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub q: Vec<u8>,
    pub params: QuantParams,
    pub shape: Vec<usize>,
}

fn range_for_slice(xs: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in xs {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    // Zero-inclusion keeps the zero point inside [0, qmax]; epsilon widening
    // handles constant tensors.
    lo = lo.min(0.0);
    hi = hi.max(0.0);
    if hi - lo < RANGE_EPSILON {
        lo -= RANGE_EPSILON;
        hi += RANGE_EPSILON;
    }
    (lo, hi)
}

fn params_from_range(lo: f64, hi: f64, bits: u8) -> (f64, f64) {
    let qmax = ((1u32 << bits) - 1) as f64;
    let scale = (hi - lo) / qmax;
    let zp = (-lo / scale).round().clamp(0.0, qmax);
    (scale, zp)
}

/// Min-max calibration: `s = (max - min) / (2^b - 1)`, `z = round(-min / s)`
/// clamped into range. Per-channel granularity treats the leading dim as
/// channels.
pub fn calibrate_minmax(x: &Tensor, bits: u8, granularity: Granularity) -> Result<QuantParams> {
    if x.numel() == 0 {
        return Err(Error::InvalidArg("calibrate_minmax: empty tensor".into()));
    }
    if !(2..=8).contains(&bits) {
        return Err(Error::InvalidArg(format!("bits {} outside [2, 8]", bits)));
    }
    let (scale, zero_point) = match granularity {
        Granularity::PerTensor => {
            let (lo, hi) = range_for_slice(x.data());
            let (s, z) = params_from_range(lo, hi, bits);
            (vec![s], vec![z])
        }
        Granularity::PerOutputChannel => {
            let channels = x.shape().first().copied().unwrap_or(0);
            if channels == 0 || x.numel() % channels != 0 {
                return Err(Error::InvalidArg("per-channel calibration needs a channel dim".into()));
            }
            let per = x.numel() / channels;
            let mut scales = Vec::with_capacity(channels);
            let mut zps = Vec::with_capacity(channels);
            for c in 0..channels {
                let (lo, hi) = range_for_slice(&x.data()[c * per..(c + 1) * per]);
                let (s, z) = params_from_range(lo, hi, bits);
                scales.push(s);
                zps.push(z);
            }
            (scales, zps)
        }
    };
    let params = QuantParams { bits, granularity, scale, zero_point };
    params.validate()?;
    Ok(params)
}

#[inline]
fn channel_of(i: usize, per_channel: usize, channels: usize) -> usize {
    if channels == 1 {
        0
    } else {
        i / per_channel
    }
}

/// `q = clamp(round(x / s) + z, 0, 2^b - 1)`.
pub fn quantize(x: &Tensor, params: &QuantParams) -> Result<QuantizedTensor> {
    params.validate()?;
    let channels = params.channels();
    if channels > 1 {
        let lead = x.shape().first().copied().unwrap_or(0);
        if lead != channels {
            return Err(Error::ShapeMismatch(format!(
                "per-channel params for {} channels vs tensor {:?}",
                channels,
                x.shape()
            )));
        }
    }
    let per = x.numel() / channels.max(1);
    let qmax = params.qmax();
    let q = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = channel_of(i, per, channels);
            let code = ((v / params.scale[c]).round() + params.zero_point[c]).clamp(0.0, qmax);
            code as u8
        })
        .collect();
    Ok(QuantizedTensor { q, params: params.clone(), shape: x.shape().to_vec() })
}

/// `dq = s * (q - z)`.
pub fn dequantize(qx: &QuantizedTensor) -> Result<Tensor> {
    let channels = qx.params.channels();
    let per = qx.q.len() / channels.max(1);
    let data = qx
        .q
        .iter()
        .enumerate()
        .map(|(i, &code)| {
            let c = channel_of(i, per, channels);
            qx.params.scale[c] * (code as f64 - qx.params.zero_point[c])
        })
        .collect();
    Tensor::new(qx.shape.clone(), data)
}

/// Value-level fake quantization: `dequantize(quantize(x))` exactly.
pub fn fake_quantize(x: &Tensor, params: &QuantParams) -> Result<Tensor> {
    dequantize(&quantize(x, params)?)
}

/// The straight-through pass mask: true where `x/s + z` lands strictly
/// inside `(0, 2^b - 1)` before clamping.
pub fn ste_mask(x: &Tensor, params: &QuantParams) -> Result<Vec<bool>> {
    params.validate()?;
    let channels = params.channels();
    let per = x.numel() / channels.max(1);
    let qmax = params.qmax();
    Ok(x.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = channel_of(i, per, channels);
            let pre = v / params.scale[c] + params.zero_point[c];
            pre > 0.0 && pre < qmax
        })
        .collect())
}

/// Grid search over candidate scales (fractions 0.5..=1.2 of the min-max
/// scale) minimizing quant-dequant MSE; ties break toward the smaller
/// scale. The zero point is re-derived for each candidate from the
/// zero-included data minimum.
pub fn search_scale_mse(
    x: &Tensor,
    bits: u8,
    grid_size: usize,
    granularity: Granularity,
) -> Result<QuantParams> {
    if x.numel() == 0 {
        return Err(Error::InvalidArg("search_scale_mse: empty tensor".into()));
    }
    if grid_size < 2 {
        return Err(Error::InvalidArg("search_scale_mse: grid_size must be >= 2".into()));
    }
    let base = calibrate_minmax(x, bits, granularity)?;
    let channels = base.channels();
    let per = x.numel() / channels;
    let qmax = base.qmax();

    let mut scale = Vec::with_capacity(channels);
    let mut zero_point = Vec::with_capacity(channels);
    for c in 0..channels {
        let slice = match granularity {
            Granularity::PerTensor => x.data(),
            Granularity::PerOutputChannel => &x.data()[c * per..(c + 1) * per],
        };
        let (lo, _hi) = range_for_slice(slice);
        let s_mm = base.scale[c];
        let mut best = (f64::INFINITY, s_mm, base.zero_point[c]);
        for g in 0..grid_size {
            let frac = 0.5 + 0.7 * g as f64 / (grid_size - 1) as f64;
            let s = frac * s_mm;
            let z = (-lo / s).round().clamp(0.0, qmax);
            let mut err = 0.0;
            for &v in slice {
                let code = ((v / s).round() + z).clamp(0.0, qmax);
                let dq = s * (code - z);
                err += (dq - v) * (dq - v);
            }
            // Strict `<` keeps the first (smallest) candidate on ties.
            if err < best.0 {
                best = (err, s, z);
            }
        }
        scale.push(best.1);
        zero_point.push(best.2);
    }
    let params = QuantParams { bits, granularity, scale, zero_point };
    params.validate()?;
    Ok(params)
}

// ── SNR diagnostic ──────────────────────────────────────────────────

/// `E[(y_hat - y)^2] / E[y^2]` over all elements. Diagnostic only.
pub fn snr_output(y_ref: &Tensor, y_hat: &Tensor) -> Result<f64> {
    if y_ref.shape() != y_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "snr_output: {:?} vs {:?}",
            y_ref.shape(),
            y_hat.shape()
        )));
    }
    let energy: f64 =
        y_ref.data().iter().map(|&v| v * v).sum::<f64>() / y_ref.numel().max(1) as f64;
    if energy <= 0.0 {
        return Err(Error::InvalidArg("snr_output: zero-energy reference".into()));
    }
    let noise: f64 = y_ref
        .data()
        .iter()
        .zip(y_hat.data())
        .map(|(&a, &b)| (b - a) * (b - a))
        .sum::<f64>()
        / y_ref.numel() as f64;
    Ok(noise / energy)
}

// ── Perturbation Error Mitigation ───────────────────────────────────

/// Choice of the regularization magnitude per output channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum PemAlpha {
    /// Per-row RMS of the original weights (preserves row energy).
    PerRowRms,
    /// One fixed constant for every row.
    Constant(f64),
}

/// How the standardization enters the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PemMode {
    /// Moment-matched weight quantization: quantizers operate on the
    /// standardized weights and the transform is folded back at dequant,
    /// so the full-precision function is preserved exactly. Default.
    Reparam,
    /// Replace the weights by their standardized form and re-estimate BN
    /// running statistics on the calibration set.
    Replace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PemConfig {
    pub enabled: bool,
    pub alpha: PemAlpha,
    pub mode: PemMode,
    /// Restrict regularization to conv layers (the linear head is left
    /// plain).
    pub conv_only: bool,
}

impl Default for PemConfig {
    fn default() -> Self {
        PemConfig {
            enabled: true,
            alpha: PemAlpha::PerRowRms,
            mode: PemMode::Reparam,
            conv_only: false,
        }
    }
}

impl PemConfig {
    pub fn validate(&self) -> Result<()> {
        if let PemAlpha::Constant(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("pem alpha {} must be positive", a)));
            }
        }
        Ok(())
    }
}

/// Standardization folds for moment-matched weight quantization: the
/// quantizer sees `w_std = alpha * (w - mu) / sigma` per row and the
/// dequantized value is restored through `restore_scale * q + restore
/// offset`, so `restore_scale * w_std + restore_offset == w` exactly
/// (zero-variance rows fold to identity).
#[derive(Debug, Clone)]
pub struct PemFold {
    pub w_std: Tensor,
    pub restore_scale: Vec<f64>,
    pub restore_offset: Vec<f64>,
    pub skipped_rows: Vec<usize>,
}

pub fn pem_fold(w: &Tensor, alpha: &PemAlpha) -> Result<PemFold> {
    let rows = *w
        .shape()
        .first()
        .ok_or_else(|| Error::InvalidArg("pem_fold: scalar weight".into()))?;
    if rows == 0 || w.numel() % rows != 0 {
        return Err(Error::InvalidArg("pem_fold: bad row structure".into()));
    }
    let per = w.numel() / rows;
    let mut w_std = w.clone();
    let mut restore_scale = vec![1.0; rows];
    let mut restore_offset = vec![0.0; rows];
    let mut skipped_rows = Vec::new();
    for r in 0..rows {
        let row = &w.data()[r * per..(r + 1) * per];
        let n = per as f64;
        let mean = row.iter().sum::<f64>() / n;
        let ms = row.iter().map(|&v| v * v).sum::<f64>() / n;
        let var = ms - mean * mean;
        if var <= 0.0 {
            skipped_rows.push(r);
            continue;
        }
        let sigma = var.sqrt();
        let a = match alpha {
            PemAlpha::PerRowRms => ms.sqrt(),
            PemAlpha::Constant(a) => *a,
        };
        if !(a > 0.0) {
            skipped_rows.push(r);
            continue;
        }
        for (dst, &src) in w_std.data_mut()[r * per..(r + 1) * per].iter_mut().zip(row) {
            *dst = a * (src - mean) / sigma;
        }
        restore_scale[r] = sigma / a;
        restore_offset[r] = mean;
    }
    Ok(PemFold { w_std, restore_scale, restore_offset, skipped_rows })
}

/// Standardize each output-channel row to zero mean and mean-square
/// `alpha^2` (population moments). Zero-variance rows are left untouched
/// and reported back.
pub fn pem_regularize(w: &Tensor, alpha: &PemAlpha) -> Result<(Tensor, Vec<usize>)> {
    let rows = *w
        .shape()
        .first()
        .ok_or_else(|| Error::InvalidArg("pem_regularize: scalar weight".into()))?;
    if rows == 0 || w.numel() % rows != 0 {
        return Err(Error::InvalidArg("pem_regularize: bad row structure".into()));
    }
    let per = w.numel() / rows;
    if per < 2 {
        return Err(Error::InvalidArg("pem_regularize: rows need >= 2 entries".into()));
    }
    let mut out = w.clone();
    let mut skipped = Vec::new();
    for r in 0..rows {
        let row = &w.data()[r * per..(r + 1) * per];
        let n = per as f64;
        let mean = row.iter().sum::<f64>() / n;
        let ms = row.iter().map(|&v| v * v).sum::<f64>() / n;
        let var = ms - mean * mean;
        if var <= 0.0 {
            log::warn!("pem: row {} has zero variance, left unregularized", r);
            skipped.push(r);
            continue;
        }
        let sigma = var.sqrt();
        let a = match alpha {
            PemAlpha::PerRowRms => ms.sqrt(),
            PemAlpha::Constant(a) => *a,
        };
        if !(a > 0.0) {
            skipped.push(r);
            continue;
        }
        for (dst, &src) in out.data_mut()[r * per..(r + 1) * per].iter_mut().zip(row) {
            *dst = a * (src - mean) / sigma;
        }
    }
    Ok((out, skipped))
}

/// Report of one PEM application.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PemReport {
    /// Layers whose weights were standardized.
    pub regularized_layers: Vec<usize>,
    /// Weighted layers skipped because no batch-norm follows them.
    pub skipped_no_bn: Vec<usize>,
    /// (layer, row) pairs skipped for zero variance.
    pub skipped_rows: Vec<(usize, usize)>,
}

fn has_trailing_bn(model: &Model, layer_idx: usize) -> bool {
    model.layers[layer_idx + 1..]
        .iter()
        .take_while(|l| !l.is_weighted())
        .any(|l| matches!(l, Layer::BatchNorm2d { .. }))
}

/// Apply PEM to every conv/linear layer that is followed by a batch norm,
/// then re-estimate all BN running statistics on the calibration batches
/// (the standardization changes per-channel output distributions; the BN
/// refresh absorbs that shift).
pub fn apply_pem_to_model(
    model: &mut Model,
    cfg: &PemConfig,
    calib_batches: &[Tensor],
) -> Result<PemReport> {
    cfg.validate()?;
    let mut report = PemReport::default();
    if !cfg.enabled {
        return Ok(report);
    }
    if calib_batches.is_empty() {
        return Err(Error::InvalidArg("apply_pem_to_model: no calibration batches".into()));
    }
    for i in 0..model.layers.len() {
        if !model.layers[i].is_weighted() {
            continue;
        }
        if cfg.conv_only && matches!(model.layers[i], Layer::Linear { .. }) {
            continue;
        }
        if !has_trailing_bn(model, i) {
            log::info!("pem: layer {} has no trailing batch norm, skipped", i);
            report.skipped_no_bn.push(i);
            continue;
        }
        let weight = match &model.layers[i] {
            Layer::Conv2d { weight, .. } | Layer::Linear { weight, .. } => weight.clone(),
            _ => unreachable!(),
        };
        let (new_w, rows) = pem_regularize(&weight, &cfg.alpha)?;
        for r in rows {
            report.skipped_rows.push((i, r));
        }
        match &mut model.layers[i] {
            Layer::Conv2d { weight, .. } | Layer::Linear { weight, .. } => *weight = new_w,
            _ => unreachable!(),
        }
        report.regularized_layers.push(i);
    }
    refresh_bn_stats(model, calib_batches)?;
    Ok(report)
}

/// Re-estimate BN running statistics as the plain average of per-batch
/// statistics over the calibration set (train-mode normalization upstream,
/// so each layer sees the distribution it will see at inference after
/// earlier BNs adapt).
pub fn refresh_bn_stats(model: &mut Model, batches: &[Tensor]) -> Result<()> {
    if batches.is_empty() {
        return Err(Error::InvalidArg("refresh_bn_stats: no batches".into()));
    }
    let mut acc: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; model.layers.len()];
    for batch in batches {
        let (_, updates) = forward_span_value(
            &model.layers,
            0..model.layers.len(),
            batch,
            Mode::Train,
            model.spec.bn_eps,
            Parallelism::Auto,
            None,
        )?;
        for BnBatchUpdate { layer, mean, var } in updates {
            match &mut acc[layer] {
                Some((am, av)) => {
                    for (a, b) in am.iter_mut().zip(&mean) {
                        *a += b;
                    }
                    for (a, b) in av.iter_mut().zip(&var) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some((mean, var)),
            }
        }
    }
    let n = batches.len() as f64;
    for (i, entry) in acc.into_iter().enumerate() {
        if let Some((mean, var)) = entry {
            if let Layer::BatchNorm2d { running_mean, running_var, .. } = &mut model.layers[i] {
                for (dst, v) in running_mean.data_mut().iter_mut().zip(&mean) {
                    *dst = v / n;
                }
                for (dst, v) in running_var.data_mut().iter_mut().zip(&var) {
                    *dst = (v / n).max(1e-12);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    #[test]
    fn minmax_examples() {
        // x = 0..=15, b=4 -> s=1, z=0
        let x = Tensor::from_vec((0..16).map(|i| i as f64).collect());
        let p = calibrate_minmax(&x, 4, Granularity::PerTensor).unwrap();
        assert!((p.scale[0] - 1.0).abs() < 1e-12);
        assert_eq!(p.zero_point[0], 0.0);

        // x = {-1, 1}, b=2 -> s=2/3, z=round(1.5)=2 (round half away from zero)
        let x = Tensor::from_vec(vec![-1.0, 1.0]);
        let p = calibrate_minmax(&x, 2, Granularity::PerTensor).unwrap();
        assert!((p.scale[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(p.zero_point[0], 2.0);
    }

    #[test]
    fn constant_tensor_dequantizes_within_epsilon() {
        for &c in &[0.0, 5.0, -3.0, 0.25] {
            let x = Tensor::full(&[16], c);
            let p = calibrate_minmax(&x, 8, Granularity::PerTensor).unwrap();
            let dq = fake_quantize(&x, &p).unwrap();
            let err = dq.max_abs_diff(&x).unwrap();
            assert!(err < 1e-6, "constant {} roundtrip error {}", c, err);
        }
    }

    #[test]
    fn quantize_examples() {
        let p = QuantParams {
            bits: 8,
            granularity: Granularity::PerTensor,
            scale: vec![0.1],
            zero_point: vec![5.0],
        };
        let q = quantize(&Tensor::from_vec(vec![0.0]), &p).unwrap();
        assert_eq!(q.q, vec![5]);
        assert_eq!(dequantize(&q).unwrap().data(), &[0.0]);

        // Saturation far above range.
        let q = quantize(&Tensor::from_vec(vec![1e9]), &p).unwrap();
        assert_eq!(q.q, vec![255]);
    }

    #[test]
    fn roundtrip_bound_over_random_sweep() {
        use rand::Rng;
        let mut rng = seeds::rng_for(11, "quant-test", 0);
        for &bits in &[2u8, 4, 8] {
            let x = Tensor::from_vec((0..100_000).map(|_| rng.gen_range(-3.0..5.0)).collect());
            let p = calibrate_minmax(&x, bits, Granularity::PerTensor).unwrap();
            let dq = fake_quantize(&x, &p).unwrap();
            let bound = p.scale[0] / 2.0 + 1e-6;
            assert!(dq.max_abs_diff(&x).unwrap() <= bound);
        }
    }

    #[test]
    fn quantize_is_idempotent_through_dequantize() {
        use rand::Rng;
        let mut rng = seeds::rng_for(12, "quant-test", 0);
        let x = Tensor::from_vec((0..512).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let p = calibrate_minmax(&x, 4, Granularity::PerTensor).unwrap();
        let q1 = quantize(&x, &p).unwrap();
        let q2 = quantize(&dequantize(&q1).unwrap(), &p).unwrap();
        assert_eq!(q1.q, q2.q);
    }

    #[test]
    fn scale_search_prefers_clipping_on_gaussian_tails() {
        let mut rng = seeds::rng_for(13, "quant-test", 0);
        let x = Tensor::rand_normal(&[4096], 0.0, 1.0, &mut rng).map(|v| v.clamp(-3.0, 3.0));
        let mm = calibrate_minmax(&x, 4, Granularity::PerTensor).unwrap();
        let searched = search_scale_mse(&x, 4, 64, Granularity::PerTensor).unwrap();
        assert!(searched.scale[0] <= mm.scale[0] + 1e-12);
    }

    #[test]
    fn scale_search_two_point_tensor_keeps_minmax() {
        // Endpoints of {0, 1} sit exactly on the min-max grid, so the
        // min-max scale has zero error and every other candidate loses.
        let x = Tensor::from_vec(vec![0.0, 1.0]);
        let mm = calibrate_minmax(&x, 2, Granularity::PerTensor).unwrap();
        let searched = search_scale_mse(&x, 2, 8, Granularity::PerTensor).unwrap();
        assert!((searched.scale[0] - mm.scale[0]).abs() < 1e-12);
    }

    #[test]
    fn scale_search_tie_breaks_to_smaller_scale() {
        // All-zero tensor: every candidate has zero error, smallest wins.
        let x = Tensor::zeros(&[8]);
        let mm = calibrate_minmax(&x, 4, Granularity::PerTensor).unwrap();
        let searched = search_scale_mse(&x, 4, 8, Granularity::PerTensor).unwrap();
        assert!((searched.scale[0] - 0.5 * mm.scale[0]).abs() < 1e-15);
    }

    #[test]
    fn snr_examples() {
        let y = Tensor::from_vec(vec![1.0, 1.0]);
        assert_eq!(snr_output(&y, &y).unwrap(), 0.0);
        let yhat = Tensor::from_vec(vec![2.0, 0.0]);
        assert!((snr_output(&y, &yhat).unwrap() - 1.0).abs() < 1e-12);
        // Scale invariance of the ratio.
        let c = -3.7;
        let ys = y.map(|v| v * c);
        let yh = yhat.map(|v| v * c);
        assert!((snr_output(&ys, &yh).unwrap() - 1.0).abs() < 1e-12);
        assert!(snr_output(&Tensor::zeros(&[4]), &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn pem_row_example_and_idempotence() {
        let w = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let (out, skipped) = pem_regularize(&w, &PemAlpha::Constant(1.0)).unwrap();
        assert!(skipped.is_empty());
        let want = [-1.224745, 0.0, 1.224745];
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }
        // Already standardized rows stay put.
        let (again, _) = pem_regularize(&out, &PemAlpha::Constant(1.0)).unwrap();
        assert!(again.max_abs_diff(&out).unwrap() < 1e-6);
    }

    #[test]
    fn pem_moments_on_random_matrix() {
        let mut rng = seeds::rng_for(14, "quant-test", 0);
        let w = Tensor::rand_normal(&[64, 128], 0.3, 1.7, &mut rng);
        let alpha = 0.5;
        let (out, _) = pem_regularize(&w, &PemAlpha::Constant(alpha)).unwrap();
        for r in 0..64 {
            let row = &out.data()[r * 128..(r + 1) * 128];
            let mean = row.iter().sum::<f64>() / 128.0;
            let ms = row.iter().map(|&v| v * v).sum::<f64>() / 128.0;
            assert!(mean.abs() < 1e-5);
            assert!((ms - alpha * alpha).abs() < 1e-5);
        }
    }

    #[test]
    fn pem_zero_variance_row_left_alone() {
        let w = Tensor::new(vec![2, 3], vec![0.5, 0.5, 0.5, 1.0, 2.0, 3.0]).unwrap();
        let (out, skipped) = pem_regularize(&w, &PemAlpha::PerRowRms).unwrap();
        assert_eq!(skipped, vec![0]);
        assert_eq!(&out.data()[..3], &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn pem_rms_alpha_preserves_row_energy() {
        let mut rng = seeds::rng_for(15, "quant-test", 0);
        let w = Tensor::rand_normal(&[8, 32], 0.2, 0.9, &mut rng);
        let (out, _) = pem_regularize(&w, &PemAlpha::PerRowRms).unwrap();
        for r in 0..8 {
            let rms = |t: &Tensor| {
                (t.data()[r * 32..(r + 1) * 32].iter().map(|&v| v * v).sum::<f64>() / 32.0).sqrt()
            };
            assert!((rms(&w) - rms(&out)).abs() < 1e-5);
        }
    }
}
