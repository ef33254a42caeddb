//! Reverse-mode automatic differentiation over tensor operations.
//!
//! A [`Tape`] records coarse tensor ops (conv, batch norm, fused losses,
//! quantizer ops) in construction order, which is already topological.
//! [`Tape::backward`] walks the nodes in reverse exactly once and returns a
//! [`Gradients`] map. Ops whose gradient is cheap to express at forward
//! time (losses, quantizers) precompute it and store it on the node.
//!
//! Gradient conventions for the quantizer ops:
//! - fake-quant w.r.t. its input is the straight-through estimator: identity
//!   where `x/s + z` lands strictly inside `(0, 2^b - 1)`, zero outside;
//! - fake-quant w.r.t. a learnable scale is `q - z` per element (the exact
//!   local derivative away from rounding boundaries);
//! - soft weight rounding passes gradient to the rounding variable through
//!   the rectified sigmoid, masked to the unclamped region.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvShape};
use crate::par::Parallelism;
use crate::tensor::Tensor;
use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnStatsMode {
    /// Normalize with the current batch statistics (training / adaptation).
    Batch,
    /// Normalize with provided running statistics (inference).
    Running,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    AddRowConst(Var),
    AddChannelBias { x: Var, bias: Var, channels: usize, spatial: usize },
    Linear { x: Var, w: Var },
    Conv2d { x: Var, w: Var, bias: Option<Var>, shape: ConvShape },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
        mode: BnStatsMode,
        dims: (usize, usize, usize),
    },
    Relu(Var),
    GlobalAvgPool { x: Var, dims: (usize, usize, usize) },
    Reshape(Var),
    FakeQuant { x: Var, scale: Option<Var>, mask: Vec<bool>, q_minus_z: Vec<f64> },
    SoftQuantWeight { v: Var, dval_dv: Vec<f64> },
    PrecomputedUnary { x: Var, grad: Vec<f64> },
    PrecomputedBinary { a: Var, b: Var, grad_a: Vec<f64>, grad_b: Vec<f64> },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Recording tape. Construction order is the topological order used by the
/// backward pass.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    par: Parallelism,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            par: Parallelism::Auto,
        }
    }

    pub fn with_parallelism(par: Parallelism) -> Self {
        Tape { par, ..Self::new() }
    }

    fn push(&self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, needs_grad, op });
        Var { idx: nodes.len() - 1, tape: self.id }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id {
            return Err(Error::InvalidArg("variable belongs to a different tape".into()));
        }
        if v.idx >= self.nodes.borrow().len() {
            return Err(Error::InvalidArg("variable index out of range".into()));
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.idx].needs_grad
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.idx].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.idx].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let t = &nodes[v.idx].value;
        if t.numel() != 1 {
            return Err(Error::InvalidArg(format!("expected scalar, got shape {:?}", t.shape())));
        }
        Ok(t.data()[0])
    }

    fn with_value<T>(&self, v: Var, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.nodes.borrow()[v.idx].value)
    }

    // ── Node constructors ───────────────────────────────────────────

    /// Register an input tensor. Gradients are tracked only when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Constant input (never receives a gradient).
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.with_value(a, |ta| self.with_value(b, |tb| ta.zip_map(tb, |x, y| x + y)))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Add(a, b)))
    }

    pub fn scale(&self, x: Var, alpha: f64) -> Result<Var> {
        self.check(x)?;
        let value = self.with_value(x, |t| t.map(|v| v * alpha));
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::Scale(x, alpha)))
    }

    /// Adds a constant row vector to every row of a `[rows, cols]` tensor.
    pub fn add_row_const(&self, x: Var, row: &[f64]) -> Result<Var> {
        self.check(x)?;
        let value = self.with_value(x, |t| -> Result<Tensor> {
            let shape = t.shape().to_vec();
            if shape.len() != 2 || shape[1] != row.len() {
                return Err(Error::ShapeMismatch(format!(
                    "add_row_const: tensor {:?} vs row of {}",
                    shape,
                    row.len()
                )));
            }
            let cols = shape[1];
            let data = t
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + row[i % cols])
                .collect();
            Tensor::new(shape, data)
        })?;
        Ok(self.push(value, self.needs(x), Op::AddRowConst(x)))
    }

    /// `x` viewed as `[n, channels, spatial]` plus per-channel bias.
    pub fn add_channel_bias(&self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (value, channels, spatial) = self.with_value(x, |tx| {
            self.with_value(bias, |tb| -> Result<(Tensor, usize, usize)> {
                let xs = tx.shape();
                let c = tb.numel();
                let (channels, spatial) = match xs.len() {
                    2 => (xs[1], 1),
                    4 => (xs[1], xs[2] * xs[3]),
                    _ => {
                        return Err(Error::ShapeMismatch(format!(
                            "add_channel_bias: unsupported rank {:?}",
                            xs
                        )))
                    }
                };
                if channels != c {
                    return Err(Error::ShapeMismatch(format!(
                        "bias has {} channels, tensor {:?}",
                        c, xs
                    )));
                }
                let mut out = tx.clone();
                let b = tb.data();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    let ch = (i / spatial) % channels;
                    *v += b[ch];
                }
                Ok((out, channels, spatial))
            })
        })?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, needs, Op::AddChannelBias { x, bias, channels, spatial }))
    }

    /// `y = x · wᵀ` with `x: [n, k]`, `w: [o, k]`.
    pub fn linear(&self, x: Var, w: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let value = self.with_value(x, |tx| {
            self.with_value(w, |tw| -> Result<Tensor> {
                let (xs, ws) = (tx.shape(), tw.shape());
                if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
                    return Err(Error::ShapeMismatch(format!("linear: x {:?} w {:?}", xs, ws)));
                }
                let (n, k, o) = (xs[0], xs[1], ws[0]);
                let y = kernels::matmul_xwt(self.par, tx.data(), tw.data(), n, k, o);
                Tensor::new(vec![n, o], y)
            })
        })?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(value, needs, Op::Linear { x, w }))
    }

    /// 2-D convolution; `w` shaped `[out_ch, in_ch, k, k]`.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let (value, shape) = self.with_value(x, |tx| {
            self.with_value(w, |tw| -> Result<(Tensor, ConvShape)> {
                let (xs, ws) = (tx.shape(), tw.shape());
                if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || xs[1] != ws[1] {
                    return Err(Error::ShapeMismatch(format!("conv2d: x {:?} w {:?}", xs, ws)));
                }
                let s = ConvShape {
                    batch: xs[0],
                    in_ch: xs[1],
                    in_h: xs[2],
                    in_w: xs[3],
                    out_ch: ws[0],
                    kernel: ws[2],
                    stride,
                    padding,
                };
                if s.in_h + 2 * padding < s.kernel || s.in_w + 2 * padding < s.kernel {
                    return Err(Error::ShapeMismatch("conv2d: kernel larger than input".into()));
                }
                let bias_data = match bias {
                    Some(b) => Some(self.with_value(b, |tb| tb.data().to_vec())),
                    None => None,
                };
                let y = kernels::conv2d_forward(self.par, tx.data(), tw.data(), bias_data.as_deref(), &s);
                let t = Tensor::new(vec![s.batch, s.out_ch, s.out_h(), s.out_w()], y)?;
                Ok((t, s))
            })
        })?;
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(value, needs, Op::Conv2d { x, w, bias, shape }))
    }

    /// Batch norm over `[n, c]` or `[n, c, h, w]`. When `mode` is `Batch`,
    /// returns the batch statistics so the caller can update running stats.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let dims = self.with_value(x, |t| -> Result<(usize, usize, usize)> {
            let s = t.shape();
            match s.len() {
                2 => Ok((s[0], s[1], 1)),
                4 => Ok((s[0], s[1], s[2] * s[3])),
                _ => Err(Error::ShapeMismatch(format!("batch_norm: rank {:?}", s))),
            }
        })?;
        let (n, c, sp) = dims;
        let gshape = self.shape_of(gamma);
        if gshape != [c] || self.shape_of(beta) != [c] {
            return Err(Error::ShapeMismatch(format!(
                "batch_norm: affine params {:?} vs {} channels",
                gshape, c
            )));
        }
        let (mode, mean, var) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::ShapeMismatch("batch_norm: running stats length".into()));
                }
                (BnStatsMode::Running, rm.to_vec(), rv.to_vec())
            }
            None => {
                if n * sp < 2 {
                    return Err(Error::InvalidArg(
                        "batch_norm: batch statistics need at least 2 values per channel".into(),
                    ));
                }
                let (m, v) = self.with_value(x, |t| kernels::bn_batch_stats(self.par, t.data(), n, c, sp));
                (BnStatsMode::Batch, m, v)
            }
        };
        let value = self.with_value(x, |tx| {
            self.with_value(gamma, |tg| {
                self.with_value(beta, |tb| {
                    let y = kernels::bn_normalize(
                        self.par,
                        tx.data(),
                        &mean,
                        &var,
                        tg.data(),
                        tb.data(),
                        eps,
                        n,
                        c,
                        sp,
                    );
                    Tensor::new(self.shape_of(x), y)
                })
            })
        })?;
        let stats = match mode {
            BnStatsMode::Batch => Some((mean.clone(), var.clone())),
            BnStatsMode::Running => None,
        };
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = self.push(
            value,
            needs,
            Op::BatchNorm { x, gamma, beta, eps, mean, var, mode, dims },
        );
        Ok((out, stats))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.with_value(x, |t| t.map(|v| if v > 0.0 { v } else { 0.0 }));
        Ok(self.push(value, self.needs(x), Op::Relu(x)))
    }

    /// `[b, c, h, w] -> [b, c]` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (value, dims) = self.with_value(x, |t| -> Result<(Tensor, (usize, usize, usize))> {
            let s = t.shape();
            if s.len() != 4 {
                return Err(Error::ShapeMismatch(format!("global_avg_pool: rank {:?}", s)));
            }
            let (b, c, sp) = (s[0], s[1], s[2] * s[3]);
            let mut out = vec![0.0; b * c];
            let data = t.data();
            for i in 0..b * c {
                let mut acc = 0.0;
                for j in 0..sp {
                    acc += data[i * sp + j];
                }
                out[i] = acc / sp as f64;
            }
            Ok((Tensor::new(vec![b, c], out)?, (b, c, sp)))
        })?;
        Ok(self.push(value, self.needs(x), Op::GlobalAvgPool { x, dims }))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.with_value(x, |t| t.reshape(shape))?;
        Ok(self.push(value, self.needs(x), Op::Reshape(x)))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.with_value(x, |t| t.sum());
        let n = self.with_value(x, |t| t.numel());
        let grad = vec![1.0; n];
        Ok(self.push(Tensor::scalar(v), self.needs(x), Op::PrecomputedUnary { x, grad }))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (v, n) = self.with_value(x, |t| (t.mean(), t.numel()));
        let grad = vec![1.0 / n as f64; n];
        Ok(self.push(Tensor::scalar(v), self.needs(x), Op::PrecomputedUnary { x, grad }))
    }

    // ── Quantizer ops ───────────────────────────────────────────────

    /// Per-tensor fake quantization `dequant(quant(x))` with straight-through
    /// gradients. `scale_var`, when given, must be a scalar node holding the
    /// scale; otherwise `scale` is used as a constant.
    pub fn fake_quant(
        &self,
        x: Var,
        scale: f64,
        scale_var: Option<Var>,
        zero_point: f64,
        qmax: f64,
    ) -> Result<Var> {
        self.check(x)?;
        let s = match scale_var {
            Some(sv) => {
                self.check(sv)?;
                self.scalar_value(sv)?
            }
            None => scale,
        };
        if s <= 0.0 || !s.is_finite() {
            return Err(Error::InvalidArg(format!("fake_quant: scale {} must be positive", s)));
        }
        let (value, mask, q_minus_z) = self.with_value(x, |t| {
            let n = t.numel();
            let mut out = vec![0.0; n];
            let mut mask = vec![false; n];
            let mut qmz = vec![0.0; n];
            for (i, &v) in t.data().iter().enumerate() {
                let pre = v / s + zero_point;
                let q = (v / s).round() + zero_point;
                let qc = q.clamp(0.0, qmax);
                out[i] = s * (qc - zero_point);
                mask[i] = pre > 0.0 && pre < qmax;
                qmz[i] = qc - zero_point;
            }
            (Tensor::new(t.shape().to_vec(), out).expect("same shape"), mask, qmz)
        });
        let needs = self.needs(x) || scale_var.map(|v| self.needs(v)).unwrap_or(false);
        Ok(self.push(value, needs, Op::FakeQuant { x, scale: scale_var, mask, q_minus_z }))
    }

    /// Soft-rounded weight quantization for reconstruction. The weight `w`
    /// and per-row quant params are constants; the rounding variable `v`
    /// (same shape as `w`) is the differentiable input. `rows` indexes the
    /// per-output-channel scale/zero-point arrays. `out_scales` /
    /// `out_offsets`, when given, apply a per-row affine to the dequantized
    /// value (`out_scale * (q - z) + out_offset`), which implements
    /// moment-matched quantization of standardized weights.
    #[allow(clippy::too_many_arguments)]
    pub fn soft_quant_weight(
        &self,
        w: &Tensor,
        v: Var,
        scales: &[f64],
        zero_points: &[f64],
        qmax: f64,
        rect: RectSigmoid,
        out_scales: Option<&[f64]>,
        out_offsets: Option<&[f64]>,
    ) -> Result<Var> {
        self.check(v)?;
        let vshape = self.shape_of(v);
        if vshape != w.shape() {
            return Err(Error::ShapeMismatch(format!(
                "soft_quant_weight: v {:?} vs w {:?}",
                vshape,
                w.shape()
            )));
        }
        let rows = scales.len();
        let n = w.numel();
        if rows == 0 || n % rows != 0 {
            return Err(Error::ShapeMismatch("soft_quant_weight: rows must divide numel".into()));
        }
        if let Some(os) = out_scales {
            if os.len() != rows {
                return Err(Error::ShapeMismatch("soft_quant_weight: out_scales length".into()));
            }
        }
        if let Some(oo) = out_offsets {
            if oo.len() != rows {
                return Err(Error::ShapeMismatch("soft_quant_weight: out_offsets length".into()));
            }
        }
        let per_row = n / rows;
        let (value, dval) = self.with_value(v, |tv| {
            let mut out = vec![0.0; n];
            let mut dval = vec![0.0; n];
            for i in 0..n {
                let row = i / per_row;
                let (s, z) = (scales[row], zero_points[row]);
                let os = out_scales.map_or(s, |v| v[row]);
                let oo = out_offsets.map_or(0.0, |v| v[row]);
                let (h, hp) = rect.eval(tv.data()[i]);
                let u = (w.data()[i] / s).floor() + z + h;
                let uc = u.clamp(0.0, qmax);
                out[i] = os * (uc - z) + oo;
                dval[i] = if u > 0.0 && u < qmax { os * hp } else { 0.0 };
            }
            (Tensor::new(w.shape().to_vec(), out).expect("same shape"), dval)
        });
        Ok(self.push(value, self.needs(v), Op::SoftQuantWeight { v, dval_dv: dval }))
    }

    /// Rounding regularizer `sum(1 - |2 h(v) - 1|^beta)` pushing soft
    /// offsets toward {0, 1}.
    pub fn rounding_reg(&self, v: Var, rect: RectSigmoid, beta: f64) -> Result<Var> {
        self.check(v)?;
        let (value, grad) = self.with_value(v, |tv| {
            let mut acc = 0.0;
            let mut grad = vec![0.0; tv.numel()];
            for (i, &vi) in tv.data().iter().enumerate() {
                let (h, hp) = rect.eval(vi);
                let t = 2.0 * h - 1.0;
                let a = t.abs();
                acc += 1.0 - a.powf(beta);
                if a > 0.0 {
                    grad[i] = -beta * a.powf(beta - 1.0) * t.signum() * 2.0 * hp;
                }
            }
            (acc, grad)
        });
        Ok(self.push(Tensor::scalar(value), self.needs(v), Op::PrecomputedUnary { x: v, grad }))
    }

    // ── Fused losses ────────────────────────────────────────────────

    /// Mean cross entropy of `logits` `[n, c]` against integer labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let (value, grad) = self.with_value(logits, |t| -> Result<(f64, Vec<f64>)> {
            let s = t.shape();
            if s.len() != 2 || s[0] != labels.len() {
                return Err(Error::ShapeMismatch(format!(
                    "cross_entropy: logits {:?} vs {} labels",
                    s,
                    labels.len()
                )));
            }
            let (n, c) = (s[0], s[1]);
            if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::InvalidArg(format!("label {} out of range [0, {})", bad, c)));
            }
            let lsm = kernels::log_softmax_rows(t.data(), n, c);
            let mut loss = 0.0;
            let mut grad = vec![0.0; n * c];
            for r in 0..n {
                loss -= lsm[r * c + labels[r]];
                for j in 0..c {
                    let p = lsm[r * c + j].exp();
                    grad[r * c + j] =
                        (p - if j == labels[r] { 1.0 } else { 0.0 }) / n as f64;
                }
            }
            Ok((loss / n as f64, grad))
        })?;
        Ok(self.push(
            Tensor::scalar(value),
            self.needs(logits),
            Op::PrecomputedUnary { x: logits, grad },
        ))
    }

    /// Mean over rows of `KL(softmax(p) || softmax(q))`. Differentiable in
    /// both arguments.
    pub fn kl_divergence(&self, p_logits: Var, q_logits: Var) -> Result<Var> {
        self.check(p_logits)?;
        self.check(q_logits)?;
        let ps = self.shape_of(p_logits);
        let qs = self.shape_of(q_logits);
        if ps != qs || ps.len() != 2 {
            return Err(Error::ShapeMismatch(format!("kl_divergence: {:?} vs {:?}", ps, qs)));
        }
        let (n, c) = (ps[0], ps[1]);
        let (value, grad_p, grad_q) = self.with_value(p_logits, |tp| {
            self.with_value(q_logits, |tq| {
                let lp = kernels::log_softmax_rows(tp.data(), n, c);
                let lq = kernels::log_softmax_rows(tq.data(), n, c);
                let mut total = 0.0;
                let mut gp = vec![0.0; n * c];
                let mut gq = vec![0.0; n * c];
                for r in 0..n {
                    let mut row_kl = 0.0;
                    for j in 0..c {
                        let pj = lp[r * c + j].exp();
                        row_kl += pj * (lp[r * c + j] - lq[r * c + j]);
                    }
                    total += row_kl;
                    for j in 0..c {
                        let pj = lp[r * c + j].exp();
                        let qj = lq[r * c + j].exp();
                        gp[r * c + j] =
                            pj * ((lp[r * c + j] - lq[r * c + j]) - row_kl) / n as f64;
                        gq[r * c + j] = (qj - pj) / n as f64;
                    }
                }
                (total / n as f64, gp, gq)
            })
        });
        let needs = self.needs(p_logits) || self.needs(q_logits);
        Ok(self.push(
            Tensor::scalar(value),
            needs,
            Op::PrecomputedBinary { a: p_logits, b: q_logits, grad_a: grad_p, grad_b: grad_q },
        ))
    }

    /// Mean Shannon entropy of the softmax rows, in `[0, ln C]`.
    pub fn entropy(&self, logits: Var) -> Result<Var> {
        self.check(logits)?;
        let s = self.shape_of(logits);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("entropy: logits {:?}", s)));
        }
        let (n, c) = (s[0], s[1]);
        let (value, grad) = self.with_value(logits, |t| {
            let lp = kernels::log_softmax_rows(t.data(), n, c);
            let mut total = 0.0;
            let mut grad = vec![0.0; n * c];
            for r in 0..n {
                let mut h = 0.0;
                for j in 0..c {
                    let p = lp[r * c + j].exp();
                    if p > 0.0 {
                        h -= p * lp[r * c + j];
                    }
                }
                total += h;
                for j in 0..c {
                    let p = lp[r * c + j].exp();
                    grad[r * c + j] = -p * (lp[r * c + j] + h) / n as f64;
                }
            }
            (total / n as f64, grad)
        });
        Ok(self.push(
            Tensor::scalar(value),
            self.needs(logits),
            Op::PrecomputedUnary { x: logits, grad },
        ))
    }

    /// Mean squared error between two tensors of identical shape.
    pub fn mse_loss(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (value, ga, gb) = self.with_value(a, |ta| {
            self.with_value(b, |tb| -> Result<(f64, Vec<f64>, Vec<f64>)> {
                if ta.shape() != tb.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "mse_loss: {:?} vs {:?}",
                        ta.shape(),
                        tb.shape()
                    )));
                }
                let n = ta.numel() as f64;
                let mut total = 0.0;
                let mut ga = vec![0.0; ta.numel()];
                let mut gb = vec![0.0; ta.numel()];
                for i in 0..ta.numel() {
                    let d = ta.data()[i] - tb.data()[i];
                    total += d * d;
                    ga[i] = 2.0 * d / n;
                    gb[i] = -2.0 * d / n;
                }
                Ok((total / n, ga, gb))
            })
        })?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::scalar(value),
            needs,
            Op::PrecomputedBinary { a, b, grad_a: ga, grad_b: gb },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every node
    /// that required them; query by `Var`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[loss.idx].value.numel() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.idx].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.idx).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&nodes, &mut grads, *a, || g.clone());
                    accumulate(&nodes, &mut grads, *b, || g.clone());
                }
                Op::Scale(x, alpha) => {
                    let alpha = *alpha;
                    accumulate(&nodes, &mut grads, *x, || g.map(|v| v * alpha));
                }
                Op::AddRowConst(x) => {
                    accumulate(&nodes, &mut grads, *x, || g.clone());
                }
                Op::AddChannelBias { x, bias, channels, spatial } => {
                    accumulate(&nodes, &mut grads, *x, || g.clone());
                    if nodes[bias.idx].needs_grad {
                        let mut db = vec![0.0; *channels];
                        for (idx, &v) in g.data().iter().enumerate() {
                            db[(idx / spatial) % channels] += v;
                        }
                        accumulate(&nodes, &mut grads, *bias, || {
                            Tensor::new(vec![*channels], db.clone()).expect("bias shape")
                        });
                    }
                }
                Op::Linear { x, w } => {
                    let (n, k) = {
                        let xs = nodes[x.idx].value.shape();
                        (xs[0], xs[1])
                    };
                    let o = nodes[w.idx].value.shape()[0];
                    if nodes[x.idx].needs_grad {
                        let dx = kernels::matmul_dy_w(
                            self.par,
                            g.data(),
                            nodes[w.idx].value.data(),
                            n,
                            k,
                            o,
                        );
                        accumulate(&nodes, &mut grads, *x, || {
                            Tensor::new(vec![n, k], dx.clone()).expect("dx shape")
                        });
                    }
                    if nodes[w.idx].needs_grad {
                        let dw = kernels::matmul_dyt_x(
                            self.par,
                            g.data(),
                            nodes[x.idx].value.data(),
                            n,
                            k,
                            o,
                        );
                        accumulate(&nodes, &mut grads, *w, || {
                            Tensor::new(vec![o, k], dw.clone()).expect("dw shape")
                        });
                    }
                }
                Op::Conv2d { x, w, bias, shape } => {
                    let need_dx = nodes[x.idx].needs_grad;
                    let need_dw = nodes[w.idx].needs_grad;
                    let (dx, dw, db) = kernels::conv2d_backward(
                        self.par,
                        nodes[x.idx].value.data(),
                        nodes[w.idx].value.data(),
                        g.data(),
                        shape,
                        need_dx,
                        need_dw,
                    );
                    if let (true, Some(dx)) = (need_dx, dx) {
                        let xs = nodes[x.idx].value.shape().to_vec();
                        accumulate(&nodes, &mut grads, *x, || {
                            Tensor::new(xs.clone(), dx.clone()).expect("dx shape")
                        });
                    }
                    if let (true, Some(dw)) = (need_dw, dw) {
                        let ws = nodes[w.idx].value.shape().to_vec();
                        accumulate(&nodes, &mut grads, *w, || {
                            Tensor::new(ws.clone(), dw.clone()).expect("dw shape")
                        });
                    }
                    if let Some(b) = bias {
                        if nodes[b.idx].needs_grad {
                            accumulate(&nodes, &mut grads, *b, || {
                                Tensor::new(vec![shape.out_ch], db.clone()).expect("db shape")
                            });
                        }
                    }
                }
                Op::BatchNorm { x, gamma, beta, eps, mean, var, mode, dims } => {
                    let (n, c, sp) = *dims;
                    let (dx, dgamma, dbeta) = match mode {
                        BnStatsMode::Batch => kernels::bn_backward_batch(
                            self.par,
                            nodes[x.idx].value.data(),
                            g.data(),
                            mean,
                            var,
                            nodes[gamma.idx].value.data(),
                            *eps,
                            n,
                            c,
                            sp,
                        ),
                        BnStatsMode::Running => kernels::bn_backward_eval(
                            self.par,
                            nodes[x.idx].value.data(),
                            g.data(),
                            mean,
                            var,
                            nodes[gamma.idx].value.data(),
                            *eps,
                            n,
                            c,
                            sp,
                        ),
                    };
                    if nodes[x.idx].needs_grad {
                        let xs = nodes[x.idx].value.shape().to_vec();
                        accumulate(&nodes, &mut grads, *x, || {
                            Tensor::new(xs.clone(), dx.clone()).expect("dx shape")
                        });
                    }
                    accumulate(&nodes, &mut grads, *gamma, || {
                        Tensor::new(vec![c], dgamma.clone()).expect("dgamma shape")
                    });
                    accumulate(&nodes, &mut grads, *beta, || {
                        Tensor::new(vec![c], dbeta.clone()).expect("dbeta shape")
                    });
                }
                Op::Relu(x) => {
                    let xv = &nodes[x.idx].value;
                    let mut dx = g.clone();
                    for (gi, &xi) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if xi <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                    accumulate(&nodes, &mut grads, *x, || dx.clone());
                }
                Op::GlobalAvgPool { x, dims } => {
                    let (b, c, sp) = *dims;
                    let mut dx = vec![0.0; b * c * sp];
                    for i in 0..b * c {
                        let v = g.data()[i] / sp as f64;
                        for j in 0..sp {
                            dx[i * sp + j] = v;
                        }
                    }
                    let xs = nodes[x.idx].value.shape().to_vec();
                    accumulate(&nodes, &mut grads, *x, || {
                        Tensor::new(xs.clone(), dx.clone()).expect("dx shape")
                    });
                }
                Op::Reshape(x) => {
                    let xs = nodes[x.idx].value.shape().to_vec();
                    accumulate(&nodes, &mut grads, *x, || {
                        g.reshape(&xs).expect("reshape grad")
                    });
                }
                Op::FakeQuant { x, scale, mask, q_minus_z } => {
                    if nodes[x.idx].needs_grad {
                        let mut dx = g.clone();
                        for (gi, &m) in dx.data_mut().iter_mut().zip(mask.iter()) {
                            if !m {
                                *gi = 0.0;
                            }
                        }
                        accumulate(&nodes, &mut grads, *x, || dx.clone());
                    }
                    if let Some(sv) = scale {
                        if nodes[sv.idx].needs_grad {
                            let mut acc = 0.0;
                            for (gi, qmz) in g.data().iter().zip(q_minus_z.iter()) {
                                acc += gi * qmz;
                            }
                            accumulate(&nodes, &mut grads, *sv, || Tensor::scalar(acc));
                        }
                    }
                }
                Op::SoftQuantWeight { v, dval_dv } => {
                    let mut dv = g.clone();
                    for (gi, &d) in dv.data_mut().iter_mut().zip(dval_dv.iter()) {
                        *gi *= d;
                    }
                    let vs = nodes[v.idx].value.shape().to_vec();
                    accumulate(&nodes, &mut grads, *v, || {
                        dv.reshape(&vs).expect("dv shape")
                    });
                }
                Op::PrecomputedUnary { x, grad } => {
                    let up = g.data()[0];
                    let xs = nodes[x.idx].value.shape().to_vec();
                    accumulate(&nodes, &mut grads, *x, || {
                        Tensor::new(xs.clone(), grad.iter().map(|&v| v * up).collect())
                            .expect("grad shape")
                    });
                }
                Op::PrecomputedBinary { a, b, grad_a, grad_b } => {
                    let up = g.data()[0];
                    if nodes[a.idx].needs_grad {
                        let ashape = nodes[a.idx].value.shape().to_vec();
                        accumulate(&nodes, &mut grads, *a, || {
                            Tensor::new(ashape.clone(), grad_a.iter().map(|&v| v * up).collect())
                                .expect("grad shape")
                        });
                    }
                    if nodes[b.idx].needs_grad {
                        let bshape = nodes[b.idx].value.shape().to_vec();
                        accumulate(&nodes, &mut grads, *b, || {
                            Tensor::new(bshape.clone(), grad_b.iter().map(|&v| v * up).collect())
                                .expect("grad shape")
                        });
                    }
                }
            }
        }

        Ok(Gradients { tape: self.id, grads })
    }
}

/// Rectified sigmoid used by the soft rounding offset: maps an unconstrained
/// variable to `[0, 1]` with nonzero slope on a stretched interval.
#[derive(Debug, Clone, Copy)]
pub struct RectSigmoid {
    pub zeta: f64,
    pub gamma: f64,
}

impl Default for RectSigmoid {
    fn default() -> Self {
        RectSigmoid { zeta: 1.1, gamma: -0.1 }
    }
}

impl RectSigmoid {
    /// Returns `(h(v), h'(v))`.
    pub fn eval(&self, v: f64) -> (f64, f64) {
        let sig = 1.0 / (1.0 + (-v).exp());
        let raw = sig * (self.zeta - self.gamma) + self.gamma;
        if raw <= 0.0 {
            (0.0, 0.0)
        } else if raw >= 1.0 {
            (1.0, 0.0)
        } else {
            (raw, (self.zeta - self.gamma) * sig * (1.0 - sig))
        }
    }

    /// Inverse of the unclipped mapping; `h` must lie in `(gamma, zeta)`.
    pub fn inverse(&self, h: f64) -> f64 {
        let u = ((h - self.gamma) / (self.zeta - self.gamma)).clamp(1e-9, 1.0 - 1e-9);
        (u / (1.0 - u)).ln()
    }
}

fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    target: Var,
    make: impl Fn() -> Tensor,
) {
    if !nodes[target.idx].needs_grad {
        return;
    }
    let contribution = make();
    match &mut grads[target.idx] {
        Some(existing) => {
            existing.axpy(1.0, &contribution).expect("gradient shapes agree");
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Gradient map produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of the given shape when `v` did not
    /// participate in the loss.
    pub fn or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]), true);
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_square_norm_gradient_is_x() {
        let tape = Tape::new();
        let xv = vec![0.5, -1.5, 2.0, 0.0];
        let x = tape.leaf(Tensor::from_vec(xv.clone()), true);
        let zeros = tape.constant(Tensor::zeros(&[4]));
        // 0.5 * ||x||^2 = mse(x, 0) * n / 2
        let mse = tape.mse_loss(x, zeros).unwrap();
        let loss = tape.scale(mse, 4.0 / 2.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap();
        for (gi, xi) in g.data().iter().zip(&xv) {
            assert!((gi - xi).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn cross_tape_vars_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(Tensor::scalar(1.0), true);
        let b = t2.leaf(Tensor::scalar(2.0), true);
        assert!(t1.add(a, b).is_err());
    }

    #[test]
    fn non_participating_leaf_gets_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let y = tape.leaf(Tensor::from_vec(vec![3.0]), true);
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.or_zeros(y, &[1]).data(), &[0.0]);
    }

    #[test]
    fn kl_of_identical_logits_is_exactly_zero() {
        let tape = Tape::new();
        let l = Tensor::new(vec![2, 3], vec![0.3, -0.2, 1.0, 0.0, 0.5, -1.0]).unwrap();
        let p = tape.leaf(l.clone(), true);
        let q = tape.leaf(l, true);
        let kl = tape.kl_divergence(p, q).unwrap();
        assert_eq!(tape.scalar_value(kl).unwrap(), 0.0);
    }
}
