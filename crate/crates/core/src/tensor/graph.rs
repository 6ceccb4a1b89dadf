use rand::Rng;

use super::kernels::{self, LstmSeqCache};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters of one LSTM direction: `w_ih` is `[4h × n_in]`, `w_hh` is
/// `[4h × h]`, `bias` is `[4h]`, gates ordered input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        cols: Vec<f32>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: Var,
        weight: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Relu {
        input: Var,
    },
    Dropout {
        input: Var,
        scale: Vec<f32>,
    },
    SoftmaxHead {
        x: Var,
        w: Var,
    },
    MaskedNll {
        probs: Var,
        labels: Vec<u8>,
        pad: Vec<u8>,
    },
    LstmCell {
        x: Var,
        h: Var,
        c: Var,
        w: LstmWeights,
        gates: Vec<f32>,
    },
    SelectRow {
        input: Var,
        row: usize,
    },
    LstmSeq {
        input: Var,
        w: LstmWeights,
        reverse: bool,
        cache: LstmSeqCache,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations. Nodes are appended as ops run, so
/// every node's inputs precede it and a reverse sweep is a valid topological
/// order for the backward pass.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an owned leaf. It receives a gradient if `requires_grad` is set.
    pub fn input(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(Value::Owned(tensor), Op::Leaf, needs_grad)
    }

    /// Records a borrowed leaf, typically a model parameter.
    pub fn param(&mut self, tensor: &'p Tensor) -> Var {
        self.push(Value::Borrowed(tensor), Op::Leaf, tensor.requires_grad())
    }

    pub fn value(&self, var: Var) -> &Tensor {
        self.nodes[var.0].value.get()
    }

    fn push(&mut self, value: Value<'p>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn owned(&mut self, shape: &[usize], data: Vec<f32>, op: Op, inputs: &[Var]) -> Var {
        let needs = self.needs(inputs);
        let op = if needs { op } else { Op::Leaf };
        let tensor = Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: needs,
        };
        self.push(Value::Owned(tensor), op, needs)
    }

    /// Same-padded 1-D convolution of `[c_in × t]` by `[c_out × c_in × k]` plus `[c_out]` bias.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (c_in, t) = self.value(input).dims2()?;
        let (c_out, wc_in, k) = match self.value(weight).shape()[..] {
            [a, b, c] => (a, b, c),
            ref s => return Err(Error::dim(format!("conv weight must be rank 3, got {s:?}"))),
        };
        if k % 2 == 0 {
            return Err(Error::config(format!(
                "conv kernel width {k} is even; same padding is undefined"
            )));
        }
        if wc_in != c_in {
            return Err(Error::dim(format!(
                "conv weight expects {wc_in} input channels, input has {c_in}"
            )));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(Error::dim(format!(
                "conv bias shape {:?}, expected [{c_out}]",
                self.value(bias).shape()
            )));
        }
        let (out, cols) = kernels::conv1d_forward(
            self.value(input).data(),
            c_in,
            t,
            self.value(weight).data(),
            c_out,
            k,
            self.value(bias).data(),
        );
        Ok(self.owned(
            &[c_out, t],
            out,
            Op::Conv1d {
                input,
                weight,
                bias,
                cols,
            },
            &[input, weight, bias],
        ))
    }

    /// Width-2 stride-2 max pooling over steps.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (c, t) = self.value(input).dims2()?;
        if t % 2 != 0 {
            return Err(Error::dim(format!("max pooling needs an even length, got {t}")));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(input).data(), c, t);
        Ok(self.owned(&[c, t / 2], out, Op::MaxPool { input, argmax }, &[input]))
    }

    /// Transposed convolution (kernel 2, stride 2) by `[c_in × c_out × 2]`; doubles the length.
    pub fn upsample2(&mut self, input: Var, weight: Var) -> Result<Var> {
        let (c_in, t) = self.value(input).dims2()?;
        let c_out = match self.value(weight).shape()[..] {
            [a, b, 2] if a == c_in => b,
            ref s => {
                return Err(Error::dim(format!(
                    "upsample weight {s:?} does not fit {c_in} input channels"
                )))
            }
        };
        let out = kernels::upsample2_forward(self.value(input).data(), c_in, t, self.value(weight).data(), c_out);
        Ok(self.owned(&[c_out, 2 * t], out, Op::Upsample2 { input, weight }, &[input, weight]))
    }

    /// Channels of `a` followed by channels of `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ta) = self.value(a).dims2()?;
        let (cb, tb) = self.value(b).dims2()?;
        if ta != tb {
            return Err(Error::dim(format!("cannot concatenate lengths {ta} and {tb}")));
        }
        let mut data = Vec::with_capacity((ca + cb) * ta);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        Ok(self.owned(&[ca + cb, ta], data, Op::Concat { a, b }, &[a, b]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        self.owned(&shape, data, Op::Relu { input }, &[input])
    }

    /// Inverted dropout. Identity when not training or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f32, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - p);
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let scale: Vec<f32> = (0..x.len())
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        Ok(self.owned(&shape, data, Op::Dropout { input, scale }, &[input]))
    }

    /// Per-step class probabilities `softmax(w · x[:, t])` for `x` `[c × t]`, `w` `[classes × c]`.
    pub fn token_softmax_head(&mut self, x: Var, w: Var) -> Result<Var> {
        let (c, t) = self.value(x).dims2()?;
        let (classes, wc) = self.value(w).dims2()?;
        if wc != c {
            return Err(Error::dim(format!("head expects {wc} channels, features have {c}")));
        }
        let probs = kernels::softmax_head_forward(self.value(x).data(), c, t, self.value(w).data(), classes);
        Ok(self.owned(&[classes, t], probs, Op::SoftmaxHead { x, w }, &[x, w]))
    }

    /// Mean negative log-likelihood of `labels` over positions where `pad` is 1.
    pub fn masked_cross_entropy(&mut self, probs: Var, labels: &[u8], pad: &[u8]) -> Result<Var> {
        let (classes, t) = self.value(probs).dims2()?;
        if labels.len() != t || pad.len() != t {
            return Err(Error::dim(format!(
                "{} labels and {} pad flags for {t} steps",
                labels.len(),
                pad.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::dim(format!("label {bad} outside {classes} classes")));
        }
        let loss =
            kernels::masked_nll_forward(self.value(probs).data(), t, labels, pad).ok_or(Error::DegenerateBatch)?;
        Ok(self.owned(
            &[1],
            vec![loss],
            Op::MaskedNll {
                probs,
                labels: labels.to_vec(),
                pad: pad.to_vec(),
            },
            &[probs],
        ))
    }

    fn lstm_dims(&self, w: &LstmWeights) -> Result<(usize, usize)> {
        let (g4, n_in) = self.value(w.w_ih).dims2()?;
        if g4 % 4 != 0 {
            return Err(Error::dim(format!("LSTM gate rows {g4} not a multiple of 4")));
        }
        let h = g4 / 4;
        if self.value(w.w_hh).shape() != [g4, h] || self.value(w.bias).shape() != [g4] {
            return Err(Error::dim(format!(
                "LSTM recurrent weight {:?} / bias {:?} do not match hidden size {h}",
                self.value(w.w_hh).shape(),
                self.value(w.bias).shape()
            )));
        }
        Ok((n_in, h))
    }

    /// One LSTM step. Returns `(h_t, c_t)`.
    pub fn lstm_cell(&mut self, x: Var, h_prev: Var, c_prev: Var, w: LstmWeights) -> Result<(Var, Var)> {
        let (n_in, h) = self.lstm_dims(&w)?;
        if self.value(x).shape() != [n_in] || self.value(h_prev).shape() != [h] || self.value(c_prev).shape() != [h] {
            return Err(Error::dim(format!(
                "LSTM cell wants x [{n_in}], h/c [{h}]; got {:?}, {:?}, {:?}",
                self.value(x).shape(),
                self.value(h_prev).shape(),
                self.value(c_prev).shape()
            )));
        }
        let mut gates = self.value(w.bias).data().to_vec();
        kernels::matvec(
            self.value(w.w_ih).data(),
            4 * h,
            n_in,
            self.value(x).data(),
            &mut gates,
            true,
        );
        kernels::matvec(
            self.value(w.w_hh).data(),
            4 * h,
            h,
            self.value(h_prev).data(),
            &mut gates,
            true,
        );
        kernels::lstm_activate(&mut gates, h);
        let mut state = vec![0.0; 2 * h];
        let (h_new, c_new) = state.split_at_mut(h);
        kernels::lstm_state(&gates, self.value(c_prev).data(), h, c_new, h_new);
        let inputs = [x, h_prev, c_prev, w.w_ih, w.w_hh, w.bias];
        let both = self.owned(
            &[2, h],
            state,
            Op::LstmCell {
                x,
                h: h_prev,
                c: c_prev,
                w,
                gates,
            },
            &inputs,
        );
        Ok((self.select_row(both, 0)?, self.select_row(both, 1)?))
    }

    /// Row `row` of a rank-2 tensor as a rank-1 tensor.
    pub fn select_row(&mut self, input: Var, row: usize) -> Result<Var> {
        let (rows, cols) = self.value(input).dims2()?;
        if row >= rows {
            return Err(Error::dim(format!("row {row} of {rows}")));
        }
        let data = self.value(input).row(row).to_vec();
        Ok(self.owned(&[cols], data, Op::SelectRow { input, row }, &[input]))
    }

    /// Runs one LSTM direction over a `[n_in × t]` sequence from zero state,
    /// returning hidden states `[h × t]` at their original positions.
    pub fn lstm_sequence(&mut self, input: Var, w: LstmWeights, reverse: bool) -> Result<Var> {
        let (n_in, h) = self.lstm_dims(&w)?;
        let (c, t) = self.value(input).dims2()?;
        if c != n_in {
            return Err(Error::dim(format!("LSTM expects {n_in} input channels, got {c}")));
        }
        let (out, cache) = kernels::lstm_seq_forward(
            self.value(input).data(),
            n_in,
            t,
            self.value(w.w_ih).data(),
            self.value(w.w_hh).data(),
            self.value(w.bias).data(),
            h,
            reverse,
        );
        Ok(self.owned(
            &[h, t],
            out,
            Op::LstmSeq {
                input,
                w,
                reverse,
                cache,
            },
            &[input, w.w_ih, w.w_hh, w.bias],
        ))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_with(loss, &[1.0])
    }

    /// Backpropagates `seed` as the gradient of `out`.
    pub fn backward_with(&self, out: Var, seed: &[f32]) -> Result<Gradients> {
        if seed.len() != self.value(out).len() {
            return Err(Error::dim("seed gradient length does not match output"));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed.to_vec());
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'_>, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let mut acc = |var: Var, delta: Vec<f32>| {
            if !self.nodes[var.0].needs_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                weight,
                bias,
                cols,
            } => {
                let (c_in, t) = (self.value(*input).shape()[0], self.value(*input).shape()[1]);
                let ws = self.value(*weight).shape();
                let (c_out, k) = (ws[0], ws[2]);
                let r = kernels::conv1d_backward(
                    g,
                    cols,
                    self.value(*weight).data(),
                    c_in,
                    c_out,
                    t,
                    k,
                    self.nodes[input.0].needs_grad,
                );
                if let Some(di) = r.input {
                    acc(*input, di);
                }
                acc(*weight, r.weight);
                acc(*bias, r.bias);
            }
            Op::MaxPool { input, argmax } => {
                acc(*input, kernels::maxpool2_backward(g, argmax, self.value(*input).len()));
            }
            Op::Upsample2 { input, weight } => {
                let x = self.value(*input);
                let (c_in, t) = (x.shape()[0], x.shape()[1]);
                let c_out = self.value(*weight).shape()[1];
                let (di, dw) = kernels::upsample2_backward(g, x.data(), c_in, t, self.value(*weight).data(), c_out);
                acc(*input, di);
                acc(*weight, dw);
            }
            Op::Concat { a, b } => {
                let split = self.value(*a).len();
                acc(*a, g[..split].to_vec());
                acc(*b, g[split..].to_vec());
            }
            Op::Relu { input } => {
                let out = node.value.get().data();
                acc(
                    *input,
                    g.iter()
                        .zip(out)
                        .map(|(d, &y)| if y > 0.0 { *d } else { 0.0 })
                        .collect(),
                );
            }
            Op::Dropout { input, scale } => {
                acc(*input, g.iter().zip(scale).map(|(d, s)| d * s).collect());
            }
            Op::SoftmaxHead { x, w } => {
                let xv = self.value(*x);
                let (c, t) = (xv.shape()[0], xv.shape()[1]);
                let classes = self.value(*w).shape()[0];
                let (dx, dw) = kernels::softmax_head_backward(
                    g,
                    node.value.get().data(),
                    xv.data(),
                    c,
                    t,
                    self.value(*w).data(),
                    classes,
                );
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::MaskedNll { probs, labels, pad } => {
                let p = self.value(*probs);
                let t = p.shape()[1];
                acc(*probs, kernels::masked_nll_backward(p.data(), t, labels, pad, g[0]));
            }
            Op::LstmCell { x, h, c, w, gates } => {
                let hs = self.value(*h).len();
                let n_in = self.value(*x).len();
                let state = node.value.get().data();
                let (dh, dc) = g.split_at(hs);
                let mut dz = vec![0.0; 4 * hs];
                let mut dc_prev = vec![0.0; hs];
                kernels::lstm_cell_backward(
                    gates,
                    self.value(*c).data(),
                    &state[hs..],
                    dh,
                    dc,
                    hs,
                    &mut dz,
                    &mut dc_prev,
                );
                let mut dx = vec![0.0; n_in];
                kernels::matvec_t(self.value(w.w_ih).data(), 4 * hs, n_in, &dz, &mut dx);
                let mut dh_prev = vec![0.0; hs];
                kernels::matvec_t(self.value(w.w_hh).data(), 4 * hs, hs, &dz, &mut dh_prev);
                let outer =
                    |v: &[f32]| -> Vec<f32> { dz.iter().flat_map(|&d| v.iter().map(move |&u| d * u)).collect() };
                let dw_ih = outer(self.value(*x).data());
                let dw_hh = outer(self.value(*h).data());
                acc(*x, dx);
                acc(*h, dh_prev);
                acc(*c, dc_prev);
                acc(w.w_ih, dw_ih);
                acc(w.w_hh, dw_hh);
                acc(w.bias, dz);
            }
            Op::SelectRow { input, row } => {
                let cols = g.len();
                let mut d = vec![0.0; self.value(*input).len()];
                d[row * cols..(row + 1) * cols].copy_from_slice(g);
                acc(*input, d);
            }
            Op::LstmSeq {
                input,
                w,
                reverse,
                cache,
            } => {
                let x = self.value(*input);
                let (n_in, t) = (x.shape()[0], x.shape()[1]);
                let h = self.value(w.w_hh).shape()[1];
                let r = kernels::lstm_seq_backward(
                    g,
                    cache,
                    x.data(),
                    n_in,
                    t,
                    self.value(w.w_ih).data(),
                    self.value(w.w_hh).data(),
                    h,
                    *reverse,
                );
                acc(*input, r.input);
                acc(w.w_ih, r.w_ih);
                acc(w.w_hh, r.w_hh);
                acc(w.bias, r.bias);
            }
        }
    }
}
