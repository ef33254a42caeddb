//! Online continual test-time adaptation of the quantized model.
//!
//! The protocol is predict-then-adapt: each incoming batch is classified by
//! the forward pass the adaptation gradient is computed on, so an update
//! only ever affects future batches. Adaptation touches batch-norm layers
//! only — affine parameters by gradient steps, running statistics by the
//! usual momentum update — every other parameter stays bit-identical.
//!
//! Two objectives: plain entropy minimization, and the adaptive balanced
//! loss, which is cross entropy against pseudo-labels on logits shifted by
//! `log pi` per class. The prior `pi` is a momentum-tracked product of
//! pseudo-label frequency and accumulated per-class gradient norms of the
//! classifier head under cross entropy.

use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{argmax_rows, forward_span_value, GradFilter, Mode, Model};
use crate::optim::Adam;
use crate::par::Parallelism;
use crate::quant::fake_quantize;
use crate::recon::QuantizedModel;
use crate::data::DomainStream;
use crate::tape::Tape;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

// ── Stream state ────────────────────────────────────────────────────

/// Momentum-tracked class statistics driving the balanced loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamState {
    /// Class prior, kept normalized.
    pub pi: Vec<f64>,
    /// Accumulated per-class gradient norms of the head under CE.
    pub phi: Vec<f64>,
    /// Accumulated pseudo-label counts.
    pub counts: Vec<u64>,
    pub momentum: f64,
    pub prior_floor: f64,
    /// Read the frequency factor literally as counts / C instead of
    /// counts / total. Both renormalize afterwards; they differ only in how
    /// much weight the floor carries.
    pub literal_freq: bool,
    pub step: u64,
}

impl StreamState {
    pub fn new(classes: usize, momentum: f64, prior_floor: f64, literal_freq: bool) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidArg("stream state needs at least one class".into()));
        }
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::Config(format!("prior momentum {} outside (0, 1]", momentum)));
        }
        if !(prior_floor > 0.0) {
            return Err(Error::Config("prior floor must be positive".into()));
        }
        Ok(StreamState {
            pi: vec![1.0 / classes as f64; classes],
            phi: vec![0.0; classes],
            counts: vec![0; classes],
            momentum,
            prior_floor,
            literal_freq,
            step: 0,
        })
    }

    pub fn classes(&self) -> usize {
        self.pi.len()
    }

    /// Prior with the floor applied, strictly positive.
    pub fn floored_pi(&self) -> Vec<f64> {
        self.pi.iter().map(|&p| p.max(self.prior_floor)).collect()
    }
}

/// Fold one batch into the prior: counts and gradient norms accumulate,
/// then `raw_i = freq_i * phi_i / sum(phi)` is floored, normalized, and
/// blended in with momentum.
pub fn update_class_prior(
    state: &mut StreamState,
    pseudo_labels: &[usize],
    grad_norms: &[f64],
) -> Result<()> {
    let c = state.classes();
    if grad_norms.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "grad_norms has {} entries for {} classes",
            grad_norms.len(),
            c
        )));
    }
    if let Some(&bad) = pseudo_labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArg(format!("pseudo label {} out of range", bad)));
    }
    if grad_norms.iter().any(|&g| g < 0.0 || !g.is_finite()) {
        return Err(Error::InvalidArg("gradient norms must be finite and nonnegative".into()));
    }
    for &l in pseudo_labels {
        state.counts[l] += 1;
    }
    for (p, &g) in state.phi.iter_mut().zip(grad_norms) {
        *p += g;
    }
    let total_counts: u64 = state.counts.iter().sum();
    let total_phi: f64 = state.phi.iter().sum();
    let mut raw = vec![0.0; c];
    for i in 0..c {
        let freq = if state.literal_freq {
            state.counts[i] as f64 / c as f64
        } else if total_counts > 0 {
            state.counts[i] as f64 / total_counts as f64
        } else {
            1.0 / c as f64
        };
        let grad_factor = if total_phi > 0.0 { state.phi[i] / total_phi } else { 1.0 / c as f64 };
        raw[i] = freq * grad_factor + state.prior_floor;
    }
    let raw_sum: f64 = raw.iter().sum();
    let m = state.momentum;
    let mut norm = 0.0;
    for i in 0..c {
        state.pi[i] = (1.0 - m) * state.pi[i] + m * raw[i] / raw_sum;
        norm += state.pi[i];
    }
    for p in state.pi.iter_mut() {
        *p /= norm;
    }
    state.step += 1;
    Ok(())
}

// ── Losses and labels (value level) ─────────────────────────────────

/// Mean softmax entropy of the logit rows, in `[0, ln C]`.
pub fn entropy_loss(logits: &Tensor) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::ShapeMismatch(format!("entropy_loss: {:?}", s)));
    }
    let (n, c) = (s[0], s[1]);
    let lp = kernels::log_softmax_rows(logits.data(), n, c);
    let mut total = 0.0;
    for i in 0..n * c {
        let p = lp[i].exp();
        if p > 0.0 {
            total -= p * lp[i];
        }
    }
    Ok(total / n as f64)
}

/// Argmax per row; ties resolve to the lowest index.
pub fn pseudo_label(logits: &Tensor) -> Result<Vec<usize>> {
    argmax_rows(logits)
}

/// Cross entropy on logits shifted by `log pi` per class. `pi` must be
/// strictly positive (apply the floor first).
pub fn abl_loss(logits: &Tensor, labels: &[usize], pi: &[f64]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[1] != pi.len() || s[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "abl_loss: logits {:?}, {} labels, {} priors",
            s,
            labels.len(),
            pi.len()
        )));
    }
    if let Some(&p) = pi.iter().find(|&&p| p <= 0.0) {
        return Err(Error::InvalidArg(format!("prior entry {} must be positive", p)));
    }
    let (n, c) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArg(format!("label {} out of range", bad)));
    }
    let log_pi: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
    let adjusted: Vec<f64> = logits
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + log_pi[i % c])
        .collect();
    let lsm = kernels::log_softmax_rows(&adjusted, n, c);
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        total -= lsm[r * c + l];
    }
    Ok(total / n as f64)
}

// ── Batch-norm statistic refresh (NORM-style baseline op) ───────────

/// Move every BN layer's running stats toward the current batch statistics
/// with the spec momentum. No other parameter changes. Returns false (and
/// warns) when the batch has fewer than 2 samples.
pub fn update_bn_stats(model: &mut Model, batch: &Tensor) -> Result<bool> {
    if batch.shape().first().copied().unwrap_or(0) < 2 {
        log::warn!("update_bn_stats: batch of {} skipped", batch.shape().first().unwrap_or(&0));
        return Ok(false);
    }
    let (_, updates) = forward_span_value(
        &model.layers,
        0..model.layers.len(),
        batch,
        Mode::Train,
        model.spec.bn_eps,
        Parallelism::Auto,
        None,
    )?;
    let momentum = model.spec.bn_momentum;
    model.apply_bn_updates(&updates, momentum);
    Ok(true)
}

// ── Adaptation ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Entropy,
    Abl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub objective: Objective,
    pub lr: f64,
    /// Gradient-update BN affine parameters.
    pub adapt_affine: bool,
    /// Normalize with batch statistics and momentum-update running stats.
    pub adapt_stats: bool,
    pub prior_momentum: f64,
    pub prior_floor: f64,
    pub literal_freq: bool,
    /// Optional entropy term added on top of the balanced loss.
    pub entropy_weight: f64,
    /// Record a prior snapshot every K batches in the stream trace.
    pub trace_pi_every: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            objective: Objective::Abl,
            lr: 1e-3,
            adapt_affine: true,
            adapt_stats: true,
            prior_momentum: 0.1,
            prior_floor: 1e-4,
            literal_freq: false,
            entropy_weight: 0.0,
            trace_pi_every: 4,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(Error::Config("adapt lr must be nonnegative".into()));
        }
        if !(self.prior_momentum > 0.0 && self.prior_momentum <= 1.0) {
            return Err(Error::Config("prior momentum outside (0, 1]".into()));
        }
        if self.prior_floor <= 0.0 {
            return Err(Error::Config("prior floor must be positive".into()));
        }
        if self.entropy_weight < 0.0 {
            return Err(Error::Config("entropy weight must be nonnegative".into()));
        }
        if self.trace_pi_every == 0 {
            return Err(Error::Config("trace_pi_every must be positive".into()));
        }
        Ok(())
    }
}

/// Bundles the mutable pieces adapted over a stream.
pub struct Adapter {
    pub qmodel: QuantizedModel,
    pub state: StreamState,
    pub config: AdaptConfig,
    opt: Adam,
}

#[derive(Debug, Clone)]
pub struct AdaptStepOutput {
    pub predictions: Vec<usize>,
    pub loss: f64,
    /// True when a non-finite loss made the step skip its update.
    pub skipped: bool,
}

impl Adapter {
    pub fn new(qmodel: QuantizedModel, config: AdaptConfig) -> Result<Self> {
        config.validate()?;
        let state = StreamState::new(
            qmodel.model.classes(),
            config.prior_momentum,
            config.prior_floor,
            config.literal_freq,
        )?;
        Ok(Adapter { qmodel, state, config, opt: Adam::new() })
    }

    /// One predict-then-adapt step. Predictions come from the same forward
    /// pass the gradient is computed on; the update lands after they are
    /// extracted, so it only affects future batches.
    pub fn adapt_step(&mut self, images: &Tensor) -> Result<AdaptStepOutput> {
        let cfg = self.config.clone();
        let tape = Tape::new();
        let grad_filter =
            if cfg.adapt_affine && cfg.lr > 0.0 { GradFilter::BnAffineOnly } else { GradFilter::NoneGrad };
        let traced = self.qmodel.model.trace(&tape, grad_filter);
        let quants = &self.qmodel.quants;
        let hook = move |layer: usize, x: crate::tape::Var, t: &Tape| -> Result<crate::tape::Var> {
            match quants.get(&layer) {
                Some(lq) => {
                    t.fake_quant(x, lq.act.scale[0], None, lq.act.zero_point[0], lq.act.qmax())
                }
                None => Ok(x),
            }
        };
        let x = tape.constant(images.clone());
        let mode = if cfg.adapt_stats { Mode::Train } else { Mode::Eval };
        let (logits_var, bn_updates) =
            self.qmodel.model.forward_traced(&tape, &traced, x, mode, Some(&hook))?;
        let logits = tape.value(logits_var);
        logits.assert_finite("adaptation logits")?;
        let predictions = argmax_rows(&logits)?;

        let loss_var = match cfg.objective {
            Objective::Entropy => tape.entropy(logits_var)?,
            Objective::Abl => {
                let log_pi: Vec<f64> =
                    self.state.floored_pi().iter().map(|p| p.ln()).collect();
                let adjusted = tape.add_row_const(logits_var, &log_pi)?;
                let ce = tape.cross_entropy(adjusted, &predictions)?;
                if cfg.entropy_weight > 0.0 {
                    let h = tape.entropy(logits_var)?;
                    let hw = tape.scale(h, cfg.entropy_weight)?;
                    tape.add(ce, hw)?
                } else {
                    ce
                }
            }
        };
        let loss = tape.scalar_value(loss_var)?;
        if !loss.is_finite() {
            log::warn!("adapt_step: non-finite loss, skipping update");
            return Ok(AdaptStepOutput { predictions, loss, skipped: true });
        }

        if cfg.adapt_affine && cfg.lr > 0.0 {
            let grads = tape.backward(loss_var)?;
            let pairs = traced.grad_pairs(GradFilter::BnAffineOnly);
            self.qmodel.model.apply_grad_step(&pairs, &grads, &mut self.opt, cfg.lr)?;
        }
        if cfg.adapt_stats {
            let momentum = self.qmodel.model.spec.bn_momentum;
            self.qmodel.model.apply_bn_updates(&bn_updates, momentum);
        }

        if cfg.objective == Objective::Abl {
            let norms = self.head_ce_grad_norms(images, &logits, &predictions)?;
            update_class_prior(&mut self.state, &predictions, &norms)?;
        }

        Ok(AdaptStepOutput { predictions, loss, skipped: false })
    }

    /// Per-class L2 norms of the classifier head's weight-row gradients
    /// under CE against the pseudo-labels: `g_c = (1/B) sum_i (p_ic -
    /// 1[y_i=c]) h_i` with `h` the (quantized) head input.
    fn head_ce_grad_norms(
        &self,
        images: &Tensor,
        logits: &Tensor,
        pseudo: &[usize],
    ) -> Result<Vec<f64>> {
        let c = self.qmodel.model.classes();
        let head = self
            .qmodel
            .model
            .head_index()
            .ok_or_else(|| Error::InvalidArg("model has no linear head".into()))?;
        let hook = |layer: usize, t: Tensor| -> Result<Tensor> {
            match self.qmodel.quants.get(&layer) {
                Some(lq) => fake_quantize(&t, &lq.act),
                None => Ok(t),
            }
        };
        let mode = if self.config.adapt_stats { Mode::Train } else { Mode::Eval };
        let (feats, _) = forward_span_value(
            &self.qmodel.model.layers,
            0..head,
            images,
            mode,
            self.qmodel.model.spec.bn_eps,
            Parallelism::Auto,
            Some(&hook),
        )?;
        // The head sees its input after its own activation quantizer.
        let feats = hook(head, feats)?;
        let (n, f) = (feats.shape()[0], feats.shape()[1]);
        let probs = kernels::softmax_rows(logits.data(), n, c);
        let mut norms = vec![0.0; c];
        for class in 0..c {
            let mut row = vec![0.0; f];
            for i in 0..n {
                let coef =
                    (probs[i * c + class] - if pseudo[i] == class { 1.0 } else { 0.0 }) / n as f64;
                if coef == 0.0 {
                    continue;
                }
                for (rj, &fj) in row.iter_mut().zip(&feats.data()[i * f..(i + 1) * f]) {
                    *rj += coef * fj;
                }
            }
            norms[class] = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        Ok(norms)
    }
}

// ── Stream evaluation ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchTrace {
    pub domain: String,
    pub batch: usize,
    pub error: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainResult {
    pub kind: String,
    pub severity: u8,
    pub error: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamReport {
    pub domains: Vec<DomainResult>,
    pub mean_error: f64,
    pub per_class_total: Vec<usize>,
    pub per_class_correct: Vec<usize>,
    pub trace: Vec<BatchTrace>,
    pub final_pi: Vec<f64>,
    pub final_phi: Vec<f64>,
}

impl StreamReport {
    /// Mean recall (%) over the given classes.
    pub fn recall_over(&self, classes: &[usize]) -> f64 {
        let mut acc = 0.0;
        let mut n = 0;
        for &c in classes {
            if self.per_class_total[c] > 0 {
                acc += self.per_class_correct[c] as f64 / self.per_class_total[c] as f64;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            100.0 * acc / n as f64
        }
    }
}

/// Single pass over the stream, adapting online and scoring each batch with
/// the prediction that preceded its update.
pub fn evaluate_stream(
    qmodel: QuantizedModel,
    stream: &DomainStream,
    config: &AdaptConfig,
) -> Result<(StreamReport, QuantizedModel)> {
    let classes = qmodel.model.classes();
    let mut adapter = Adapter::new(qmodel, config.clone())?;
    let mut domains = Vec::with_capacity(stream.segments.len());
    let mut trace = Vec::new();
    let mut per_class_total = vec![0usize; classes];
    let mut per_class_correct = vec![0usize; classes];
    let mut global_batch = 0usize;
    for segment in &stream.segments {
        let mut wrong = 0usize;
        let mut total = 0usize;
        for (bi, batch) in segment.batches.iter().enumerate() {
            let out = adapter.adapt_step(&batch.images)?;
            let mut batch_wrong = 0usize;
            for (p, &l) in out.predictions.iter().zip(&batch.labels) {
                per_class_total[l] += 1;
                if *p == l {
                    per_class_correct[l] += 1;
                } else {
                    batch_wrong += 1;
                }
            }
            wrong += batch_wrong;
            total += batch.labels.len();
            let pi = if global_batch % config.trace_pi_every == 0 {
                Some(adapter.state.pi.clone())
            } else {
                None
            };
            trace.push(BatchTrace {
                domain: segment.spec.kind.name().to_string(),
                batch: bi,
                error: 100.0 * batch_wrong as f64 / batch.labels.len().max(1) as f64,
                loss: out.loss,
                pi,
            });
            global_batch += 1;
        }
        domains.push(DomainResult {
            kind: segment.spec.kind.name().to_string(),
            severity: segment.spec.severity,
            error: 100.0 * wrong as f64 / total.max(1) as f64,
            samples: total,
        });
    }
    let mean_error = domains.iter().map(|d| d.error).sum::<f64>() / domains.len().max(1) as f64;
    let report = StreamReport {
        domains,
        mean_error,
        per_class_total,
        per_class_correct,
        trace,
        final_pi: adapter.state.pi.clone(),
        final_phi: adapter.state.phi.clone(),
    };
    Ok((report, adapter.qmodel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, LayerSpec, ModelSpec, BN_EPS_DEFAULT, BN_MOMENTUM_DEFAULT};
    use crate::seeds;

    fn small_qmodel(seed: u64) -> QuantizedModel {
        let spec = ModelSpec {
            input: (2, 8, 8),
            classes: 4,
            layers: vec![
                LayerSpec::Conv2d { in_ch: 2, out_ch: 4, kernel: 3, stride: 1, padding: 1, bias: false },
                LayerSpec::BatchNorm2d { channels: 4 },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Linear { in_features: 4, out_features: 4, bias: true },
            ],
            bn_momentum: BN_MOMENTUM_DEFAULT,
            bn_eps: BN_EPS_DEFAULT,
        };
        let model = Model::init(spec, seed).unwrap();
        let calib: Vec<Tensor> = (0..2)
            .map(|i| {
                let mut rng = seeds::rng_for(seed, "tta-calib", i);
                Tensor::rand_uniform(&[8, 2, 8, 8], 0.0, 1.0, &mut rng)
            })
            .collect();
        let mut cfg = crate::recon::PtqConfig { weight_bits: 4, act_bits: 4, ..Default::default() };
        cfg.recon.iterations = 5;
        crate::recon::run_ptq(&model, &calib, &cfg).unwrap().qmodel
    }

    fn batch(seed: u64) -> Tensor {
        let mut rng = seeds::rng_for(seed, "tta-batch", 0);
        Tensor::rand_uniform(&[8, 2, 8, 8], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn entropy_loss_bounds() {
        let uniform = Tensor::zeros(&[3, 4]);
        assert!((entropy_loss(&uniform).unwrap() - (4.0f64).ln()).abs() < 1e-12);
        let confident = Tensor::new(vec![1, 4], vec![40.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(entropy_loss(&confident).unwrap() < 1e-9);
    }

    #[test]
    fn pseudo_label_ties_take_lowest() {
        let logits = Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(pseudo_label(&logits).unwrap(), vec![1, 0]);
    }

    #[test]
    fn abl_matches_ce_under_uniform_prior() {
        let mut rng = seeds::rng_for(1, "tta-test", 0);
        for _ in 0..100 {
            let logits = Tensor::rand_normal(&[6, 5], 0.0, 2.0, &mut rng);
            let labels: Vec<usize> = (0..6).map(|i| i % 5).collect();
            let pi = vec![0.2; 5];
            let a = abl_loss(&logits, &labels, &pi).unwrap();
            // Cross entropy via the tape op.
            let tape = Tape::new();
            let lv = tape.constant(logits.clone());
            let ce = tape.cross_entropy(lv, &labels).unwrap();
            let b = tape.scalar_value(ce).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn abl_scalar_example_and_shift_invariance() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let l = abl_loss(&logits, &[0], &[0.75, 0.25]).unwrap();
        assert!((l + 0.75f64.ln()).abs() < 1e-9, "got {}", l);

        let mut rng = seeds::rng_for(2, "tta-test", 0);
        let logits = Tensor::rand_normal(&[4, 3], 0.0, 1.0, &mut rng);
        let shifted = logits.map(|v| v + 13.7);
        let labels = vec![0, 1, 2, 1];
        let pi = vec![0.5, 0.3, 0.2];
        let a = abl_loss(&logits, &labels, &pi).unwrap();
        let b = abl_loss(&shifted, &labels, &pi).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn prior_update_worked_example() {
        // counts [3,1], phi [1,3], fresh state, momentum 1 -> pi = [0.5, 0.5]
        let mut state = StreamState::new(2, 1.0, 1e-4, false).unwrap();
        update_class_prior(&mut state, &[0, 0, 0, 1], &[1.0, 3.0]).unwrap();
        assert!((state.pi[0] - 0.5).abs() < 1e-9);
        assert!((state.pi[1] - 0.5).abs() < 1e-9);
        assert!((state.pi.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn prior_uniform_under_uniform_stats_and_frozen_at_zero_momentum() {
        let mut state = StreamState::new(4, 0.3, 1e-4, false).unwrap();
        update_class_prior(&mut state, &[0, 1, 2, 3], &[0.5; 4]).unwrap();
        for &p in &state.pi {
            assert!((p - 0.25).abs() < 1e-9);
        }
        // Momentum ~ 0 is rejected by the constructor; emulate via a direct
        // blend check instead: momentum 1 fully replaces.
        let mut s2 = StreamState::new(2, 1.0, 1e-4, false).unwrap();
        let before = s2.pi.clone();
        update_class_prior(&mut s2, &[0, 1], &[1.0, 1.0]).unwrap();
        assert_eq!(before, s2.pi); // uniform stays uniform
    }

    #[test]
    fn prior_handles_zero_grad_norms() {
        let mut state = StreamState::new(2, 1.0, 1e-4, false).unwrap();
        update_class_prior(&mut state, &[0, 0, 1], &[0.0, 0.0]).unwrap();
        // Gradient factor uniform; frequency dominates.
        assert!(state.pi[0] > state.pi[1]);
        assert!((state.pi.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn phi_and_counts_are_monotone() {
        let mut state = StreamState::new(3, 0.5, 1e-4, false).unwrap();
        let mut last_phi = state.phi.clone();
        let mut last_counts = state.counts.clone();
        for step in 0..5 {
            update_class_prior(&mut state, &[step % 3], &[0.1, 0.2, 0.3]).unwrap();
            for c in 0..3 {
                assert!(state.phi[c] >= last_phi[c]);
                assert!(state.counts[c] >= last_counts[c]);
            }
            last_phi = state.phi.clone();
            last_counts = state.counts.clone();
        }
    }

    #[test]
    fn update_bn_stats_examples() {
        let qm = small_qmodel(5);
        let mut model = qm.model.clone();
        // Batch of 1 skipped.
        let single = Tensor::zeros(&[1, 2, 8, 8]);
        assert!(!update_bn_stats(&mut model, &single).unwrap());

        // Momentum-1 model: running stats equal batch stats afterwards.
        let mut m1 = qm.model.clone();
        m1.spec.bn_momentum = 1.0;
        let b = batch(3);
        let (bm, bv) = {
            // Stats of the BN input (after conv), matching the layer walk.
            let (pre_bn, _) = forward_span_value(
                &m1.layers,
                0..1,
                &b,
                Mode::Eval,
                m1.spec.bn_eps,
                Parallelism::Auto,
                None,
            )
            .unwrap();
            kernels::bn_batch_stats(Parallelism::Auto, pre_bn.data(), 8, 4, 64)
        };
        update_bn_stats(&mut m1, &b).unwrap();
        match &m1.layers[1] {
            Layer::BatchNorm2d { running_mean, running_var, .. } => {
                for c in 0..4 {
                    assert!((running_mean.data()[c] - bm[c]).abs() < 1e-9);
                    assert!((running_var.data()[c] - bv[c]).abs() < 1e-9);
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn adapt_step_zero_lr_keeps_model_bitwise() {
        let qm = small_qmodel(7);
        let cfg = AdaptConfig { lr: 0.0, adapt_stats: false, ..Default::default() };
        let before = qm.model.params_sha256(true);
        let mut adapter = Adapter::new(qm, cfg).unwrap();
        let out = adapter.adapt_step(&batch(11)).unwrap();
        assert_eq!(out.predictions.len(), 8);
        assert_eq!(adapter.qmodel.model.params_sha256(true), before);
    }

    #[test]
    fn adapt_step_confines_updates_to_bn() {
        let qm = small_qmodel(9);
        let non_bn_before = qm.model.params_sha256(false);
        let cfg = AdaptConfig { lr: 5e-3, ..Default::default() };
        let mut adapter = Adapter::new(qm, cfg).unwrap();
        for i in 0..20 {
            adapter.adapt_step(&batch(100 + i)).unwrap();
        }
        assert_eq!(adapter.qmodel.model.params_sha256(false), non_bn_before);
        // And BN affine actually moved.
        assert_ne!(
            adapter.qmodel.model.params_sha256(true),
            non_bn_before,
            "BN params should have changed"
        );
    }

    #[test]
    fn entropy_objective_reduces_entropy_on_repeated_batch() {
        let qm = small_qmodel(13);
        let cfg = AdaptConfig {
            objective: Objective::Entropy,
            lr: 1e-2,
            adapt_stats: false,
            ..Default::default()
        };
        let b = batch(21);
        let before_logits = qm.forward_eval(&b).unwrap();
        let before = entropy_loss(&before_logits).unwrap();
        let mut adapter = Adapter::new(qm, cfg).unwrap();
        adapter.adapt_step(&b).unwrap();
        let after_logits = adapter.qmodel.forward_eval(&b).unwrap();
        let after = entropy_loss(&after_logits).unwrap();
        assert!(after <= before + 1e-9, "entropy {} -> {}", before, after);
    }

    #[test]
    fn predictions_precede_update() {
        // The prediction for batch t must match a clone adapted only
        // through batch t-1.
        let qm = small_qmodel(17);
        let cfg = AdaptConfig { lr: 5e-3, ..Default::default() };
        let batches: Vec<Tensor> = (0..4).map(|i| batch(200 + i)).collect();

        let mut main = Adapter::new(qm.clone(), cfg.clone()).unwrap();
        let mut lagged = Adapter::new(qm, cfg).unwrap();
        for (t, b) in batches.iter().enumerate() {
            let main_out = main.adapt_step(b).unwrap();
            // The lagged clone has seen batches 0..t; its forward on batch
            // t (same BN mode, no update applied yet) must agree.
            let tape = Tape::new();
            let traced = lagged.qmodel.model.trace(&tape, GradFilter::NoneGrad);
            let quants = &lagged.qmodel.quants;
            let hook = move |layer: usize,
                             x: crate::tape::Var,
                             tp: &Tape|
                  -> Result<crate::tape::Var> {
                match quants.get(&layer) {
                    Some(lq) => tp.fake_quant(
                        x,
                        lq.act.scale[0],
                        None,
                        lq.act.zero_point[0],
                        lq.act.qmax(),
                    ),
                    None => Ok(x),
                }
            };
            let xv = tape.constant(b.clone());
            let (lv, _) = lagged
                .qmodel
                .model
                .forward_traced(&tape, &traced, xv, Mode::Train, Some(&hook))
                .unwrap();
            let lagged_preds = argmax_rows(&tape.value(lv)).unwrap();
            assert_eq!(main_out.predictions, lagged_preds, "diverged at batch {}", t);
            lagged.adapt_step(b).unwrap();
        }
    }
}
