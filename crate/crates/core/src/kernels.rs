//! Dense compute kernels behind the tape ops.
//!
//! Layout conventions: activations are NCHW, linear/conv weights are
//! `[out, in]` / `[out_ch, in_ch * kh * kw]` row-major. Each kernel exists
//! in a single implementation parameterized by [`Parallelism`]; parallel
//! splits are over disjoint output regions with fixed-order inner
//! accumulation, so sequential and parallel runs are bit-identical.

use crate::par::{for_each_chunk_mut, map_indexed, Parallelism};

// ── Matmul family ───────────────────────────────────────────────────

/// `y[n, o] = sum_k x[n, k] * w[o, k]` — linear forward with `w` stored
/// `[out, in]`.
pub fn matmul_xwt(par: Parallelism, x: &[f64], w: &[f64], n: usize, k: usize, o: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), o * k);
    let mut y = vec![0.0; n * o];
    for_each_chunk_mut(par, &mut y, o, |row, out_row| {
        let xr = &x[row * k..(row + 1) * k];
        for (j, slot) in out_row.iter_mut().enumerate() {
            let wr = &w[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += xr[p] * wr[p];
            }
            *slot = acc;
        }
    });
    y
}

/// `dx[n, k] = sum_o dy[n, o] * w[o, k]`.
pub fn matmul_dy_w(par: Parallelism, dy: &[f64], w: &[f64], n: usize, k: usize, o: usize) -> Vec<f64> {
    let mut dx = vec![0.0; n * k];
    for_each_chunk_mut(par, &mut dx, k, |row, out_row| {
        let dyr = &dy[row * o..(row + 1) * o];
        for j in 0..o {
            let g = dyr[j];
            if g == 0.0 {
                continue;
            }
            let wr = &w[j * k..(j + 1) * k];
            for p in 0..k {
                out_row[p] += g * wr[p];
            }
        }
    });
    dx
}

/// `dw[o, k] = sum_n dy[n, o] * x[n, k]`.
pub fn matmul_dyt_x(par: Parallelism, dy: &[f64], x: &[f64], n: usize, k: usize, o: usize) -> Vec<f64> {
    let mut dw = vec![0.0; o * k];
    for_each_chunk_mut(par, &mut dw, k, |j, out_row| {
        for row in 0..n {
            let g = dy[row * o + j];
            if g == 0.0 {
                continue;
            }
            let xr = &x[row * k..(row + 1) * k];
            for p in 0..k {
                out_row[p] += g * xr[p];
            }
        }
    });
    dw
}

// ── Conv2d ──────────────────────────────────────────────────────────

/// Output spatial size for a conv dimension.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        conv_out_dim(self.in_h, self.kernel, self.stride, self.padding)
    }
    pub fn out_w(&self) -> usize {
        conv_out_dim(self.in_w, self.kernel, self.stride, self.padding)
    }
    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

/// Gather the conv patch for output position (oy, ox) of sample `b` into
/// `patch` (zero-padded borders).
fn fill_patch(x: &[f64], s: &ConvShape, b: usize, oy: usize, ox: usize, patch: &mut [f64]) {
    let (ih, iw, k) = (s.in_h, s.in_w, s.kernel);
    let mut idx = 0;
    for c in 0..s.in_ch {
        let base = (b * s.in_ch + c) * ih * iw;
        for ky in 0..k {
            let y = (oy * s.stride + ky) as isize - s.padding as isize;
            if y < 0 || y >= ih as isize {
                for _ in 0..k {
                    patch[idx] = 0.0;
                    idx += 1;
                }
                continue;
            }
            let row = base + y as usize * iw;
            for kx in 0..k {
                let xcol = (ox * s.stride + kx) as isize - s.padding as isize;
                patch[idx] = if xcol < 0 || xcol >= iw as isize {
                    0.0
                } else {
                    x[row + xcol as usize]
                };
                idx += 1;
            }
        }
    }
}

/// Conv2d forward. `w` is `[out_ch, in_ch*k*k]`, `bias` optional `[out_ch]`.
/// Returns NCHW output.
pub fn conv2d_forward(
    par: Parallelism,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    s: &ConvShape,
) -> Vec<f64> {
    let (oh, ow) = (s.out_h(), s.out_w());
    let plen = s.patch_len();
    let per_sample = s.out_ch * oh * ow;
    let mut out = vec![0.0; s.batch * per_sample];
    for_each_chunk_mut(par, &mut out, per_sample, |b, sample_out| {
        let mut patch = vec![0.0; plen];
        for oy in 0..oh {
            for ox in 0..ow {
                fill_patch(x, s, b, oy, ox, &mut patch);
                for oc in 0..s.out_ch {
                    let wr = &w[oc * plen..(oc + 1) * plen];
                    let mut acc = match bias {
                        Some(bv) => bv[oc],
                        None => 0.0,
                    };
                    for p in 0..plen {
                        acc += patch[p] * wr[p];
                    }
                    sample_out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
    });
    out
}

/// Scatter-add one column-gradient patch back into a sample's dx.
fn scatter_patch(dxs: &mut [f64], s: &ConvShape, oy: usize, ox: usize, dcol: &[f64]) {
    let (ih, iw, k) = (s.in_h, s.in_w, s.kernel);
    let mut idx = 0;
    for c in 0..s.in_ch {
        for ky in 0..k {
            let y = (oy * s.stride + ky) as isize - s.padding as isize;
            if y < 0 || y >= ih as isize {
                idx += k;
                continue;
            }
            let row = (c * ih + y as usize) * iw;
            for kx in 0..k {
                let xc = (ox * s.stride + kx) as isize - s.padding as isize;
                if xc >= 0 && xc < iw as isize {
                    dxs[row + xc as usize] += dcol[idx];
                }
                idx += 1;
            }
        }
    }
}

/// Conv2d backward. Returns `(dx, dw, dbias)`. Per-sample partials keep
/// both outputs deterministic: each sample's work happens in a fixed order
/// and the cross-sample reduction is sequential.
pub fn conv2d_backward(
    par: Parallelism,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    s: &ConvShape,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let plen = s.patch_len();
    let per_sample_in = s.in_ch * s.in_h * s.in_w;

    // dbias[oc] = sum over batch and spatial of dy.
    let mut dbias = vec![0.0; s.out_ch];
    for b in 0..s.batch {
        for oc in 0..s.out_ch {
            let base = (b * s.out_ch + oc) * oh * ow;
            let mut acc = 0.0;
            for i in 0..oh * ow {
                acc += dy[base + i];
            }
            dbias[oc] += acc;
        }
    }

    // dx: per output position, dcol = sum_oc g * w[oc]; scatter once.
    let dx = if need_dx {
        let mut dx = vec![0.0; s.batch * per_sample_in];
        for_each_chunk_mut(par, &mut dx, per_sample_in, |b, dxs| {
            let mut dcol = vec![0.0; plen];
            for oy in 0..oh {
                for ox in 0..ow {
                    dcol.iter_mut().for_each(|v| *v = 0.0);
                    let mut any = false;
                    for oc in 0..s.out_ch {
                        let g = dy[((b * s.out_ch + oc) * oh + oy) * ow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        any = true;
                        let wr = &w[oc * plen..(oc + 1) * plen];
                        for p in 0..plen {
                            dcol[p] += g * wr[p];
                        }
                    }
                    if any {
                        scatter_patch(dxs, s, oy, ox, &dcol);
                    }
                }
            }
        });
        Some(dx)
    } else {
        None
    };

    // dw: per-sample partials (one patch fill per position, all oc rows),
    // then a fixed-order reduction over the batch.
    let dw = if need_dw {
        let partials = map_indexed(par, s.batch, |b| {
            let mut local = vec![0.0; s.out_ch * plen];
            let mut patch = vec![0.0; plen];
            for oy in 0..oh {
                for ox in 0..ow {
                    fill_patch(x, s, b, oy, ox, &mut patch);
                    for oc in 0..s.out_ch {
                        let g = dy[((b * s.out_ch + oc) * oh + oy) * ow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        let row = &mut local[oc * plen..(oc + 1) * plen];
                        for p in 0..plen {
                            row[p] += g * patch[p];
                        }
                    }
                }
            }
            local
        });
        let mut dw = vec![0.0; s.out_ch * plen];
        for local in partials {
            for (acc, v) in dw.iter_mut().zip(local) {
                *acc += v;
            }
        }
        Some(dw)
    } else {
        None
    };

    (dx, dw, dbias)
}

// ── Batch norm ──────────────────────────────────────────────────────

/// Per-channel mean and population variance over `[N, C, S]` (`S` = spatial
/// size, 1 for linear features).
pub fn bn_batch_stats(par: Parallelism, x: &[f64], n: usize, c: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * s) as f64;
    let stats = map_indexed(par, c, |ch| {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * s;
            for i in 0..s {
                let v = x[base + i];
                sum += v;
                sumsq += v * v;
            }
        }
        let mean = sum / count;
        let var = sumsq / count - mean * mean;
        (mean, var.max(0.0))
    });
    let mean = stats.iter().map(|t| t.0).collect();
    let var = stats.iter().map(|t| t.1).collect();
    (mean, var)
}

/// Normalize with the provided per-channel stats and affine params.
pub fn bn_normalize(
    par: Parallelism,
    x: &[f64],
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    _n: usize,
    c: usize,
    s: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for_each_chunk_mut(par, &mut out, c * s, |b, sample| {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            let (g, bt, m) = (gamma[ch], beta[ch], mean[ch]);
            let xin = &x[(b * c + ch) * s..(b * c + ch + 1) * s];
            let o = &mut sample[ch * s..(ch + 1) * s];
            for i in 0..s {
                o[i] = (xin[i] - m) * inv * g + bt;
            }
        }
    });
    out
}

/// Batch-stat normalization backward (gradients flow through mean/var).
/// Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn bn_backward_batch(
    par: Parallelism,
    x: &[f64],
    dy: &[f64],
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    eps: f64,
    n: usize,
    c: usize,
    s: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let count = (n * s) as f64;
    // Channel reductions first: sum(dy), sum(dy * xhat).
    let sums = map_indexed(par, c, |ch| {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let m = mean[ch];
        let mut sdy = 0.0;
        let mut sdyx = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * s;
            for i in 0..s {
                let g = dy[base + i];
                sdy += g;
                sdyx += g * (x[base + i] - m) * inv;
            }
        }
        (sdy, sdyx)
    });
    let dbeta: Vec<f64> = sums.iter().map(|t| t.0).collect();
    let dgamma: Vec<f64> = sums.iter().map(|t| t.1).collect();

    let mut dx = vec![0.0; x.len()];
    for_each_chunk_mut(par, &mut dx, c * s, |b, sample| {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            let m = mean[ch];
            let g = gamma[ch];
            let (sdy, sdyx) = sums[ch];
            let xin = &x[(b * c + ch) * s..(b * c + ch + 1) * s];
            let dyin = &dy[(b * c + ch) * s..(b * c + ch + 1) * s];
            let o = &mut sample[ch * s..(ch + 1) * s];
            for i in 0..s {
                let xhat = (xin[i] - m) * inv;
                o[i] = g * inv * (dyin[i] - sdy / count - xhat * sdyx / count);
            }
        }
    });
    (dx, dgamma, dbeta)
}

/// Running-stat normalization backward (stats are constants).
#[allow(clippy::too_many_arguments)]
pub fn bn_backward_eval(
    par: Parallelism,
    x: &[f64],
    dy: &[f64],
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    eps: f64,
    n: usize,
    c: usize,
    s: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let sums = map_indexed(par, c, |ch| {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let m = mean[ch];
        let mut sdy = 0.0;
        let mut sdyx = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * s;
            for i in 0..s {
                let g = dy[base + i];
                sdy += g;
                sdyx += g * (x[base + i] - m) * inv;
            }
        }
        (sdy, sdyx)
    });
    let dbeta: Vec<f64> = sums.iter().map(|t| t.0).collect();
    let dgamma: Vec<f64> = sums.iter().map(|t| t.1).collect();

    let mut dx = vec![0.0; x.len()];
    for_each_chunk_mut(par, &mut dx, c * s, |b, sample| {
        for ch in 0..c {
            let scale = gamma[ch] / (var[ch] + eps).sqrt();
            let dyin = &dy[(b * c + ch) * s..(b * c + ch + 1) * s];
            let o = &mut sample[ch * s..(ch + 1) * s];
            for i in 0..s {
                o[i] = dyin[i] * scale;
            }
        }
    });
    (dx, dgamma, dbeta)
}

// ── Softmax helpers ─────────────────────────────────────────────────

/// Row-wise log-softmax with max subtraction; `rows x cols`.
pub fn log_softmax_rows(logits: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
        for j in 0..cols {
            out[r * cols + j] = row[j] - lse;
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = log_softmax_rows(logits, rows, cols);
    for v in out.iter_mut() {
        *v = v.exp();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::Parallelism as P;

    fn naive_conv(x: &[f64], w: &[f64], bias: Option<&[f64]>, s: &ConvShape) -> Vec<f64> {
        let (oh, ow) = (s.out_h(), s.out_w());
        let mut out = vec![0.0; s.batch * s.out_ch * oh * ow];
        for b in 0..s.batch {
            for oc in 0..s.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map_or(0.0, |bv| bv[oc]);
                        for ic in 0..s.in_ch {
                            for ky in 0..s.kernel {
                                for kx in 0..s.kernel {
                                    let y = (oy * s.stride + ky) as isize - s.padding as isize;
                                    let xx = (ox * s.stride + kx) as isize - s.padding as isize;
                                    if y >= 0
                                        && y < s.in_h as isize
                                        && xx >= 0
                                        && xx < s.in_w as isize
                                    {
                                        let xi = ((b * s.in_ch + ic) * s.in_h + y as usize)
                                            * s.in_w
                                            + xx as usize;
                                        let wi = (oc * s.in_ch + ic) * s.kernel * s.kernel
                                            + ky * s.kernel
                                            + kx;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[((b * s.out_ch + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_reference() {
        use rand::Rng;
        let mut rng = crate::seeds::rng_for(0, "kernel-test", 0);
        for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let s = ConvShape {
                batch: 2,
                in_ch: 3,
                in_h: 7,
                in_w: 7,
                out_ch: 4,
                kernel: 3,
                stride,
                padding,
            };
            let x: Vec<f64> = (0..s.batch * s.in_ch * s.in_h * s.in_w)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let w: Vec<f64> = (0..s.out_ch * s.in_ch * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..s.out_ch).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let got = conv2d_forward(P::Auto, &x, &w, Some(&b), &s);
            let want = naive_conv(&x, &w, Some(&b), &s);
            for (g, wv) in got.iter().zip(&want) {
                assert!((g - wv).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        use rand::Rng;
        let mut rng = crate::seeds::rng_for(1, "kernel-test", 0);
        let s = ConvShape {
            batch: 3,
            in_ch: 4,
            in_h: 9,
            in_w: 9,
            out_ch: 5,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x: Vec<f64> =
            (0..s.batch * s.in_ch * 81).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..s.out_ch * s.in_ch * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = conv2d_forward(P::Auto, &x, &w, None, &s);
        let b = conv2d_forward(P::Sequential, &x, &w, None, &s);
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0];
        let p = softmax_rows(&logits, 2, 3);
        for r in 0..2 {
            let s: f64 = p[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
