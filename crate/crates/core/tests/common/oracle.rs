//! Straightforward f64 reference implementations, written independently of the
//! library kernels. Layouts match the library: `[channels × steps]`, row-major.

pub fn conv1d(x: &[f64], c_in: usize, t: usize, w: &[f64], c_out: usize, k: usize, b: &[f64]) -> Vec<f64> {
    let half = (k / 2) as isize;
    let mut y = vec![0.0; c_out * t];
    for o in 0..c_out {
        for s in 0..t {
            let mut acc = b[o];
            for i in 0..c_in {
                for j in 0..k {
                    let src = s as isize + j as isize - half;
                    if src >= 0 && (src as usize) < t {
                        acc += w[(o * c_in + i) * k + j] * x[i * t + src as usize];
                    }
                }
            }
            y[o * t + s] = acc;
        }
    }
    y
}

pub fn maxpool2(x: &[f64], c: usize, t: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(c * t / 2);
    for ch in 0..c {
        for s in 0..t / 2 {
            y.push(x[ch * t + 2 * s].max(x[ch * t + 2 * s + 1]));
        }
    }
    y
}

/// Transposed convolution, kernel 2, stride 2, weight `[c_in × c_out × 2]`.
pub fn upsample2(x: &[f64], c_in: usize, t: usize, w: &[f64], c_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; c_out * 2 * t];
    for i in 0..c_in {
        for s in 0..t {
            for o in 0..c_out {
                for p in 0..2 {
                    y[o * 2 * t + 2 * s + p] += w[(i * c_out + o) * 2 + p] * x[i * t + s];
                }
            }
        }
    }
    y
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn softmax_head(x: &[f64], c: usize, t: usize, w: &[f64], classes: usize) -> Vec<f64> {
    let mut p = vec![0.0; classes * t];
    for s in 0..t {
        let logits: Vec<f64> = (0..classes)
            .map(|r| (0..c).map(|i| w[r * c + i] * x[i * t + s]).sum())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for r in 0..classes {
            p[r * t + s] = logits[r].exp() / z;
        }
    }
    p
}

pub fn masked_nll(p: &[f64], t: usize, labels: &[u8], pad: &[u8]) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for s in 0..t {
        if pad[s] == 1 {
            total -= p[labels[s] as usize * t + s].ln();
            n += 1.0;
        }
    }
    total / n
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// One LSTM step with gates ordered input, forget, candidate, output. Returns `(h, c)`.
pub fn lstm_cell(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    b: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let hd = h_prev.len();
    let n = x.len();
    let pre = |row: usize| -> f64 {
        b[row]
            + (0..n).map(|j| w_ih[row * n + j] * x[j]).sum::<f64>()
            + (0..hd).map(|j| w_hh[row * hd + j] * h_prev[j]).sum::<f64>()
    };
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    for u in 0..hd {
        let i = sigmoid(pre(u));
        let f = sigmoid(pre(hd + u));
        let g = pre(2 * hd + u).tanh();
        let o = sigmoid(pre(3 * hd + u));
        c[u] = f * c_prev[u] + i * g;
        h[u] = o * c[u].tanh();
    }
    (h, c)
}

/// One LSTM direction over `[n × t]` from zero state; hidden states `[h × t]` at original positions.
pub fn lstm_sequence(x: &[f64], n: usize, t: usize, w_ih: &[f64], w_hh: &[f64], b: &[f64], reverse: bool) -> Vec<f64> {
    let hd = b.len() / 4;
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    let mut out = vec![0.0; hd * t];
    let steps: Vec<usize> = if reverse {
        (0..t).rev().collect()
    } else {
        (0..t).collect()
    };
    for s in steps {
        let col: Vec<f64> = (0..n).map(|i| x[i * t + s]).collect();
        let (h2, c2) = lstm_cell(&col, &h, &c, w_ih, w_hh, b);
        h = h2;
        c = c2;
        for u in 0..hd {
            out[u * t + s] = h[u];
        }
    }
    out
}

/// Precision/recall/F1/accuracy over unpadded positions, counted one token at a time.
pub fn prf(pred: &[u8], truth: &[u8], pad: &[u8]) -> (f64, f64, f64, f64) {
    let (mut tp, mut fp, mut fn_, mut n, mut correct) = (0u64, 0u64, 0u64, 0u64, 0u64);
    for i in 0..pred.len() {
        if pad[i] == 0 {
            continue;
        }
        n += 1;
        if pred[i] == truth[i] {
            correct += 1;
        }
        if pred[i] == 1 && truth[i] == 1 {
            tp += 1;
        }
        if pred[i] == 1 && truth[i] == 0 {
            fp += 1;
        }
        if pred[i] == 0 && truth[i] == 1 {
            fn_ += 1;
        }
    }
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    let acc = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
    (p, r, f1, acc)
}
