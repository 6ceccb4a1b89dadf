//! Forward and backward kernels on raw channel-major buffers.
//!
//! These functions know nothing about the graph; [`super::Graph`] wires them
//! together. A sequence buffer of `c` channels and `t` steps stores element
//! `(channel, step)` at `channel * t + step`.

use super::gemm::{gemm, View, ViewMut};

/// Unfolds `[c_in × t]` into `[(c_in·k) × t]` with symmetric zero padding of `k/2`.
pub fn im2col(input: &[f32], c_in: usize, t: usize, k: usize) -> Vec<f32> {
    let half = k / 2;
    let mut cols = vec![0.0; c_in * k * t];
    for ci in 0..c_in {
        let src = &input[ci * t..(ci + 1) * t];
        for kk in 0..k {
            let dst = &mut cols[(ci * k + kk) * t..(ci * k + kk + 1) * t];
            // dst[s] = src[s + kk - half]
            let lo = half.saturating_sub(kk);
            let hi = (t + half).saturating_sub(kk).min(t);
            if lo < hi {
                let start = lo + kk - half;
                dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
            }
        }
    }
    cols
}

/// Folds `[(c_in·k) × t]` column gradients back onto the unpadded input.
pub fn col2im(cols: &[f32], c_in: usize, t: usize, k: usize) -> Vec<f32> {
    let half = k / 2;
    let mut out = vec![0.0; c_in * t];
    for ci in 0..c_in {
        let dst = &mut out[ci * t..(ci + 1) * t];
        for kk in 0..k {
            let src = &cols[(ci * k + kk) * t..(ci * k + kk + 1) * t];
            let lo = half.saturating_sub(kk);
            let hi = (t + half).saturating_sub(kk).min(t);
            for s in lo..hi {
                dst[s + kk - half] += src[s];
            }
        }
    }
    out
}

/// Same-padded 1-D convolution. Returns the output and the unfolded input
/// needed by the backward pass.
pub fn conv1d_forward(
    input: &[f32],
    c_in: usize,
    t: usize,
    weight: &[f32],
    c_out: usize,
    k: usize,
    bias: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let cols = im2col(input, c_in, t, k);
    let mut out = vec![0.0; c_out * t];
    for (row, b) in out.chunks_exact_mut(t).zip(bias) {
        row.fill(*b);
    }
    gemm(
        View::new(weight, c_out, c_in * k),
        View::new(&cols, c_in * k, t),
        ViewMut::new(&mut out, c_out, t),
        true,
    );
    (out, cols)
}

pub struct Conv1dGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    grad_out: &[f32],
    cols: &[f32],
    weight: &[f32],
    c_in: usize,
    c_out: usize,
    t: usize,
    k: usize,
    want_input: bool,
) -> Conv1dGrads {
    let ck = c_in * k;
    let mut dweight = vec![0.0; c_out * ck];
    gemm(
        View::new(grad_out, c_out, t),
        View::new(cols, ck, t).t(),
        ViewMut::new(&mut dweight, c_out, ck),
        false,
    );
    let dbias = grad_out.chunks_exact(t).map(|r| r.iter().sum()).collect();
    let dinput = want_input.then(|| {
        let mut dcols = vec![0.0; ck * t];
        gemm(
            View::new(weight, c_out, ck).t(),
            View::new(grad_out, c_out, t),
            ViewMut::new(&mut dcols, ck, t),
            false,
        );
        col2im(&dcols, c_in, t, k)
    });
    Conv1dGrads {
        input: dinput,
        weight: dweight,
        bias: dbias,
    }
}

/// Width-2, stride-2 max pooling. Ties pick the lower index.
pub fn maxpool2_forward(input: &[f32], c: usize, t: usize) -> (Vec<f32>, Vec<u32>) {
    let half = t / 2;
    let mut out = Vec::with_capacity(c * half);
    let mut argmax = Vec::with_capacity(c * half);
    for ch in 0..c {
        for s in 0..half {
            let i = ch * t + 2 * s;
            let (a, b) = (input[i], input[i + 1]);
            if b > a {
                out.push(b);
                argmax.push((i + 1) as u32);
            } else {
                out.push(a);
                argmax.push(i as u32);
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward(grad_out: &[f32], argmax: &[u32], input_len: usize) -> Vec<f32> {
    let mut dinput = vec![0.0; input_len];
    for (g, &i) in grad_out.iter().zip(argmax) {
        dinput[i as usize] += g;
    }
    dinput
}

/// Transposed convolution with kernel 2 and stride 2; `weight` is `[c_in × c_out × 2]`.
pub fn upsample2_forward(input: &[f32], c_in: usize, t: usize, weight: &[f32], c_out: usize) -> Vec<f32> {
    let mut out = vec![0.0; c_out * 2 * t];
    for phase in 0..2 {
        // out[c, 2s + phase] = Σ_ci weight[ci, c, phase] · input[ci, s]
        gemm(
            View::strided(weight, phase, c_out, c_in, 2, 2 * c_out),
            View::new(input, c_in, t),
            ViewMut::strided(&mut out, phase, c_out, t, 2 * t, 2),
            false,
        );
    }
    out
}

pub fn upsample2_backward(
    grad_out: &[f32],
    input: &[f32],
    c_in: usize,
    t: usize,
    weight: &[f32],
    c_out: usize,
) -> (Vec<f32>, Vec<f32>) {
    let mut dinput = vec![0.0; c_in * t];
    let mut dweight = vec![0.0; c_in * c_out * 2];
    for phase in 0..2 {
        let g = View::strided(grad_out, phase, c_out, t, 2 * t, 2);
        gemm(
            View::strided(weight, phase, c_in, c_out, 2 * c_out, 2),
            g,
            ViewMut::new(&mut dinput, c_in, t),
            true,
        );
        gemm(
            View::new(input, c_in, t),
            g.t(),
            ViewMut::strided(&mut dweight, phase, c_in, c_out, 2 * c_out, 2),
            false,
        );
    }
    (dinput, dweight)
}

/// Per-step linear map `w · x[:, t]` followed by a max-shifted softmax over classes.
pub fn softmax_head_forward(x: &[f32], c: usize, t: usize, w: &[f32], classes: usize) -> Vec<f32> {
    let mut logits = vec![0.0; classes * t];
    gemm(
        View::new(w, classes, c),
        View::new(x, c, t),
        ViewMut::new(&mut logits, classes, t),
        false,
    );
    softmax_columns(&mut logits, classes, t);
    logits
}

/// In-place softmax over each column of a `[rows × cols]` buffer.
pub fn softmax_columns(buf: &mut [f32], rows: usize, cols: usize) {
    for s in 0..cols {
        let max = (0..rows).map(|r| buf[r * cols + s]).fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0;
        for r in 0..rows {
            let e = (buf[r * cols + s] - max).exp();
            buf[r * cols + s] = e;
            total += e;
        }
        for r in 0..rows {
            buf[r * cols + s] /= total;
        }
    }
}

pub fn softmax_head_backward(
    grad_probs: &[f32],
    probs: &[f32],
    x: &[f32],
    c: usize,
    t: usize,
    w: &[f32],
    classes: usize,
) -> (Vec<f32>, Vec<f32>) {
    let mut dlogits = vec![0.0; classes * t];
    for s in 0..t {
        let dot: f32 = (0..classes).map(|r| probs[r * t + s] * grad_probs[r * t + s]).sum();
        for r in 0..classes {
            dlogits[r * t + s] = probs[r * t + s] * (grad_probs[r * t + s] - dot);
        }
    }
    let mut dx = vec![0.0; c * t];
    gemm(
        View::new(w, classes, c).t(),
        View::new(&dlogits, classes, t),
        ViewMut::new(&mut dx, c, t),
        false,
    );
    let mut dw = vec![0.0; classes * c];
    gemm(
        View::new(&dlogits, classes, t),
        View::new(x, c, t).t(),
        ViewMut::new(&mut dw, classes, c),
        false,
    );
    (dx, dw)
}

/// Probabilities below this floor are clamped before taking the log.
pub const PROB_FLOOR: f32 = 1e-12;

/// Mean negative log-likelihood over unpadded steps. `None` when every step is padding.
pub fn masked_nll_forward(probs: &[f32], t: usize, labels: &[u8], pad: &[u8]) -> Option<f32> {
    let valid = pad.iter().filter(|&&p| p != 0).count();
    if valid == 0 {
        return None;
    }
    let total: f32 = (0..t)
        .filter(|&s| pad[s] != 0)
        .map(|s| -probs[labels[s] as usize * t + s].max(PROB_FLOOR).ln())
        .sum();
    Some(total / valid as f32)
}

pub fn masked_nll_backward(probs: &[f32], t: usize, labels: &[u8], pad: &[u8], upstream: f32) -> Vec<f32> {
    let valid = pad.iter().filter(|&&p| p != 0).count().max(1) as f32;
    let mut d = vec![0.0; probs.len()];
    for s in (0..t).filter(|&s| pad[s] != 0) {
        let i = labels[s] as usize * t + s;
        d[i] = -upstream / (valid * probs[i].max(PROB_FLOOR));
    }
    d
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Applies gate activations in place to a pre-activation vector laid out as
/// `[input, forget, candidate, output]` blocks of `h` each.
pub fn lstm_activate(z: &mut [f32], h: usize) {
    for (i, v) in z.iter_mut().enumerate() {
        *v = if (2 * h..3 * h).contains(&i) {
            v.tanh()
        } else {
            sigmoid(*v)
        };
    }
}

/// New cell and hidden state from activated gates.
pub fn lstm_state(gates: &[f32], c_prev: &[f32], h: usize, c_new: &mut [f32], h_new: &mut [f32]) {
    for j in 0..h {
        let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
        c_new[j] = f * c_prev[j] + i * g;
        h_new[j] = o * c_new[j].tanh();
    }
}

/// Gradient w.r.t. gate pre-activations and the previous cell state, given
/// gradients flowing into the new hidden and cell states.
#[allow(clippy::too_many_arguments)]
pub fn lstm_cell_backward(
    gates: &[f32],
    c_prev: &[f32],
    c_new: &[f32],
    dh: &[f32],
    dc: &[f32],
    h: usize,
    dz: &mut [f32],
    dc_prev: &mut [f32],
) {
    for j in 0..h {
        let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
        let tc = c_new[j].tanh();
        let dct = dc[j] + dh[j] * o * (1.0 - tc * tc);
        dz[j] = dct * g * i * (1.0 - i);
        dz[h + j] = dct * c_prev[j] * f * (1.0 - f);
        dz[2 * h + j] = dct * i * (1.0 - g * g);
        dz[3 * h + j] = dh[j] * tc * o * (1.0 - o);
        dc_prev[j] = dct * f;
    }
}

/// `y = a · x` (+= when `accumulate`) for a row-major `[rows × cols]` matrix.
pub fn matvec(a: &[f32], rows: usize, cols: usize, x: &[f32], y: &mut [f32], accumulate: bool) {
    for (r, out) in y.iter_mut().enumerate().take(rows) {
        let dot: f32 = a[r * cols..(r + 1) * cols].iter().zip(x).map(|(w, v)| w * v).sum();
        if accumulate {
            *out += dot;
        } else {
            *out = dot;
        }
    }
}

/// `y += aᵀ · x` for a row-major `[rows × cols]` matrix.
pub fn matvec_t(a: &[f32], rows: usize, cols: usize, x: &[f32], y: &mut [f32]) {
    for r in 0..rows {
        let xr = x[r];
        if xr == 0.0 {
            continue;
        }
        for (out, w) in y.iter_mut().zip(&a[r * cols..(r + 1) * cols]) {
            *out += w * xr;
        }
    }
}

/// Forward caches of a full LSTM pass over one direction of a sequence.
#[derive(Debug, Clone)]
pub struct LstmSeqCache {
    /// Activated gates, step-major `[t × 4h]` in processing order.
    pub gates: Vec<f32>,
    /// Cell states, `[t × h]` in processing order.
    pub cells: Vec<f32>,
    /// Hidden states, `[t × h]` in processing order.
    pub hidden: Vec<f32>,
}

/// Runs an LSTM over `input` `[n_in × t]`, starting from zero state. When
/// `reverse`, steps are processed from last to first. Returns the hidden
/// states laid out as `[h × t]` at their original positions.
#[allow(clippy::too_many_arguments)]
pub fn lstm_seq_forward(
    input: &[f32],
    n_in: usize,
    t: usize,
    w_ih: &[f32],
    w_hh: &[f32],
    bias: &[f32],
    h: usize,
    reverse: bool,
) -> (Vec<f32>, LstmSeqCache) {
    let g4 = 4 * h;
    // zx[s, :] = w_ih · input[:, s] + bias, step-major
    let mut zx = vec![0.0; t * g4];
    for row in zx.chunks_exact_mut(g4) {
        row.copy_from_slice(bias);
    }
    gemm(
        View::new(input, n_in, t).t(),
        View::new(w_ih, g4, n_in).t(),
        ViewMut::new(&mut zx, t, g4),
        true,
    );
    let mut cache = LstmSeqCache {
        gates: vec![0.0; t * g4],
        cells: vec![0.0; t * h],
        hidden: vec![0.0; t * h],
    };
    let zero = vec![0.0; h];
    for k in 0..t {
        let s = if reverse { t - 1 - k } else { k };
        let (prev_h, cur_h) = cache.hidden.split_at_mut(k * h);
        let (prev_c, cur_c) = cache.cells.split_at_mut(k * h);
        let (h_prev, c_prev) = if k == 0 {
            (&zero[..], &zero[..])
        } else {
            (&prev_h[(k - 1) * h..], &prev_c[(k - 1) * h..])
        };
        let gates = &mut cache.gates[k * g4..(k + 1) * g4];
        gates.copy_from_slice(&zx[s * g4..(s + 1) * g4]);
        matvec(w_hh, g4, h, h_prev, gates, true);
        lstm_activate(gates, h);
        lstm_state(gates, c_prev, h, &mut cur_c[..h], &mut cur_h[..h]);
    }
    let mut out = vec![0.0; h * t];
    for k in 0..t {
        let s = if reverse { t - 1 - k } else { k };
        for j in 0..h {
            out[j * t + s] = cache.hidden[k * h + j];
        }
    }
    (out, cache)
}

pub struct LstmSeqGrads {
    pub input: Vec<f32>,
    pub w_ih: Vec<f32>,
    pub w_hh: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Backpropagation through time for [`lstm_seq_forward`]; `grad_out` is `[h × t]`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_seq_backward(
    grad_out: &[f32],
    cache: &LstmSeqCache,
    input: &[f32],
    n_in: usize,
    t: usize,
    w_ih: &[f32],
    w_hh: &[f32],
    h: usize,
    reverse: bool,
) -> LstmSeqGrads {
    let g4 = 4 * h;
    let zero = vec![0.0; h];
    // dz in processing order, step-major [t × 4h]
    let mut dz_all = vec![0.0; t * g4];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dh = vec![0.0; h];
    let mut dc_prev = vec![0.0; h];
    for k in (0..t).rev() {
        let s = if reverse { t - 1 - k } else { k };
        for j in 0..h {
            dh[j] = grad_out[j * t + s] + dh_next[j];
        }
        let c_prev = if k == 0 {
            &zero[..]
        } else {
            &cache.cells[(k - 1) * h..k * h]
        };
        let dz = &mut dz_all[k * g4..(k + 1) * g4];
        lstm_cell_backward(
            &cache.gates[k * g4..(k + 1) * g4],
            c_prev,
            &cache.cells[k * h..(k + 1) * h],
            &dh,
            &dc_next,
            h,
            dz,
            &mut dc_prev,
        );
        dh_next.fill(0.0);
        matvec_t(w_hh, g4, h, dz, &mut dh_next);
        std::mem::swap(&mut dc_next, &mut dc_prev);
    }

    // dw_hh = Σ_k dz_k · h_{k-1}ᵀ; h_{-1} = 0 so step 0 drops out.
    let mut dw_hh = vec![0.0; g4 * h];
    if t > 1 {
        gemm(
            View::new(&dz_all[g4..], t - 1, g4).t(),
            View::new(&cache.hidden[..(t - 1) * h], t - 1, h),
            ViewMut::new(&mut dw_hh, g4, h),
            false,
        );
    }
    let mut bias = vec![0.0; g4];
    for row in dz_all.chunks_exact(g4) {
        for (b, d) in bias.iter_mut().zip(row) {
            *b += d;
        }
    }

    // Reorder dz into original step positions so it lines up with the input.
    let dz_orig = if reverse {
        let mut v = vec![0.0; t * g4];
        for k in 0..t {
            let s = t - 1 - k;
            v[s * g4..(s + 1) * g4].copy_from_slice(&dz_all[k * g4..(k + 1) * g4]);
        }
        v
    } else {
        dz_all
    };
    let mut dw_ih = vec![0.0; g4 * n_in];
    gemm(
        View::new(&dz_orig, t, g4).t(),
        View::new(input, n_in, t).t(),
        ViewMut::new(&mut dw_ih, g4, n_in),
        false,
    );
    let mut dinput = vec![0.0; n_in * t];
    gemm(
        View::new(w_ih, g4, n_in).t(),
        View::new(&dz_orig, t, g4).t(),
        ViewMut::new(&mut dinput, n_in, t),
        false,
    );
    LstmSeqGrads {
        input: dinput,
        w_ih: dw_ih,
        w_hh: dw_hh,
        bias,
    }
}
