//! Model definitions: the token-wise U-Net, its two ablations, and the
//! stacked BiLSTM baseline. All share the per-token softmax head.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{Channels, ModelConfig, Variant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, LstmWeights, Tensor, Var};

/// Named parameter tensors of one model, in a fixed order derived from the config.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<(String, Tensor)>,
}

enum Init {
    HeUniform { fan_in: usize },
    Uniform { bound: f32 },
    Zero,
}

/// Parameter names, shapes, and initialisers for `config`.
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let ch = &config.channels;
    let m = config.input_channels;
    let mut out = Vec::new();
    let mut conv = |name: &str, c_out: usize, c_in: usize, k: usize| {
        out.push((
            format!("{name}.weight"),
            vec![c_out, c_in, k],
            Init::HeUniform { fan_in: c_in * k },
        ));
        out.push((format!("{name}.bias"), vec![c_out], Init::Zero));
    };
    let head_in = match config.variant {
        Variant::FullUnet => {
            conv("conv1", ch.conv1, m, 5);
            conv("conv2", ch.conv2, ch.conv1, 3);
            conv("conv3", ch.conv3, ch.conv2, 3);
            conv("conv4", ch.conv4, ch.conv3, 3);
            conv("conv5", ch.conv5, ch.conv2 + ch.deconv, 3);
            conv("conv6", ch.conv6, ch.conv5, 3);
            conv("conv7", ch.conv7, ch.conv6, 1);
            out.push((
                "deconv.weight".into(),
                vec![ch.conv4, ch.deconv, 2],
                Init::HeUniform { fan_in: ch.conv4 },
            ));
            ch.conv7
        }
        Variant::NoConv245 => {
            conv("conv1", ch.conv1, m, 5);
            conv("conv3", ch.conv3, ch.conv1, 3);
            conv("conv6", ch.conv6, ch.conv1 + ch.deconv, 3);
            conv("conv7", ch.conv7, ch.conv6, 1);
            out.push((
                "deconv.weight".into(),
                vec![ch.conv3, ch.deconv, 2],
                Init::HeUniform { fan_in: ch.conv3 },
            ));
            ch.conv7
        }
        Variant::NoPoolBlock => {
            conv("conv1", ch.conv1, m, 5);
            conv("conv2", ch.conv2, ch.conv1, 3);
            conv("conv3", ch.conv3, ch.conv2, 3);
            conv("conv6", ch.conv6, ch.conv3, 3);
            conv("conv7", ch.conv7, ch.conv6, 1);
            ch.conv7
        }
        Variant::Bilstm => {
            let h = config.lstm_hidden;
            let bound = 1.0 / (h as f32).sqrt();
            for layer in 0..config.lstm_layers {
                let n_in = if layer == 0 { m } else { 2 * h };
                for dir in ["fwd", "bwd"] {
                    let p = format!("lstm{layer}.{dir}");
                    out.push((format!("{p}.w_ih"), vec![4 * h, n_in], Init::Uniform { bound }));
                    out.push((format!("{p}.w_hh"), vec![4 * h, h], Init::Uniform { bound }));
                    out.push((format!("{p}.bias"), vec![4 * h], Init::Uniform { bound }));
                }
            }
            2 * h
        }
    };
    out.push((
        "head.weight".into(),
        vec![config.head_classes, head_in],
        Init::HeUniform { fan_in: head_in },
    ));
    out
}

/// Allocates and initialises parameters for `config`; identical seeds give identical parameters.
pub fn build(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = layout(config)
        .into_iter()
        .map(|(name, shape, init)| {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = match init {
                Init::Zero => vec![0.0; n],
                Init::HeUniform { fan_in } => {
                    let b = (6.0 / fan_in as f32).sqrt();
                    (0..n).map(|_| rng.random_range(-b..b)).collect()
                }
                Init::Uniform { bound } => (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
            };
            let t = Tensor::new(&shape, data)?.with_requires_grad(true);
            Ok((name, t))
        })
        .collect::<Result<_>>()?;
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

impl ModelParams {
    /// Assembles parameters loaded from storage, checking names and shapes against `config`.
    pub fn from_parts(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != tensors.len() {
            return Err(Error::Format(format!(
                "{} tensors stored, {} expected for {}",
                tensors.len(),
                expected.len(),
                config.variant
            )));
        }
        for ((name, shape, _), (got_name, t)) in expected.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "expected {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        let tensors = tensors
            .into_iter()
            .map(|(n, t)| (n, t.with_requires_grad(true)))
            .collect();
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut().map(|(_, t)| t)
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    fn attach<'p>(&'p self, g: &mut Graph<'p>) -> Attached<'p> {
        Attached {
            names: &self.tensors,
            vars: self.tensors.iter().map(|(_, t)| g.param(t)).collect(),
        }
    }
}

struct Attached<'p> {
    names: &'p [(String, Tensor)],
    vars: Vec<Var>,
}

impl Attached<'_> {
    fn get(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("parameter {name} missing from layout"));
        self.vars[i]
    }

    fn lstm(&self, layer: usize, dir: &str) -> LstmWeights {
        LstmWeights {
            w_ih: self.get(&format!("lstm{layer}.{dir}.w_ih")),
            w_hh: self.get(&format!("lstm{layer}.{dir}.w_hh")),
            bias: self.get(&format!("lstm{layer}.{dir}.bias")),
        }
    }
}

fn conv_relu(g: &mut Graph<'_>, p: &Attached<'_>, name: &str, x: Var) -> Result<Var> {
    let y = g.conv1d(x, p.get(&format!("{name}.weight")), p.get(&format!("{name}.bias")))?;
    Ok(g.relu(y))
}

/// Records the forward pass on `g` and returns the `[classes × T]` probabilities.
/// `trace`, when given, receives the sequence length after each stage.
fn forward_on<'p, R: Rng + ?Sized>(
    params: &'p ModelParams,
    g: &mut Graph<'p>,
    features: Var,
    training: bool,
    rng: &mut R,
    mut trace: Option<&mut Vec<(&'static str, usize)>>,
) -> Result<(Var, Vec<Var>)> {
    let cfg = &params.config;
    let shape = g.value(features).shape().to_vec();
    if shape != [cfg.input_channels, cfg.seq_len] {
        return Err(Error::dim(format!(
            "features {shape:?}, model expects [{}, {}]",
            cfg.input_channels, cfg.seq_len
        )));
    }
    let p = params.attach(g);
    let mut mark = |g: &Graph<'_>, stage: &'static str, v: Var| {
        if let Some(t) = trace.as_deref_mut() {
            t.push((stage, g.value(v).shape()[1]));
        }
    };
    mark(g, "input", features);
    let top = match cfg.variant {
        Variant::FullUnet => {
            let x = conv_relu(g, &p, "conv1", features)?;
            let skip = conv_relu(g, &p, "conv2", x)?;
            mark(g, "block1", skip);
            let x = g.maxpool2(skip)?;
            mark(g, "pool", x);
            let x = conv_relu(g, &p, "conv3", x)?;
            let x = conv_relu(g, &p, "conv4", x)?;
            mark(g, "block2", x);
            let x = g.upsample2(x, p.get("deconv.weight"))?;
            mark(g, "upsample", x);
            let x = g.concat_channels(skip, x)?;
            let x = conv_relu(g, &p, "conv5", x)?;
            let x = conv_relu(g, &p, "conv6", x)?;
            let x = conv_relu(g, &p, "conv7", x)?;
            mark(g, "block3", x);
            x
        }
        Variant::NoConv245 => {
            let skip = conv_relu(g, &p, "conv1", features)?;
            mark(g, "block1", skip);
            let x = g.maxpool2(skip)?;
            mark(g, "pool", x);
            let x = conv_relu(g, &p, "conv3", x)?;
            mark(g, "block2", x);
            let x = g.upsample2(x, p.get("deconv.weight"))?;
            mark(g, "upsample", x);
            let x = g.concat_channels(skip, x)?;
            let x = conv_relu(g, &p, "conv6", x)?;
            let x = conv_relu(g, &p, "conv7", x)?;
            mark(g, "block3", x);
            x
        }
        Variant::NoPoolBlock => {
            let x = conv_relu(g, &p, "conv1", features)?;
            let x = conv_relu(g, &p, "conv2", x)?;
            mark(g, "block1", x);
            let x = conv_relu(g, &p, "conv3", x)?;
            mark(g, "block2", x);
            let x = conv_relu(g, &p, "conv6", x)?;
            let x = conv_relu(g, &p, "conv7", x)?;
            mark(g, "block3", x);
            x
        }
        Variant::Bilstm => {
            let mut x = features;
            for layer in 0..cfg.lstm_layers {
                if layer > 0 {
                    x = g.dropout(x, cfg.dropout_p, training, rng)?;
                }
                let fwd = g.lstm_sequence(x, p.lstm(layer, "fwd"), false)?;
                let bwd = g.lstm_sequence(x, p.lstm(layer, "bwd"), true)?;
                x = g.concat_channels(fwd, bwd)?;
                mark(g, "bilstm", x);
            }
            x
        }
    };
    let probs = g.token_softmax_head(top, p.get("head.weight"))?;
    mark(g, "head", probs);
    Ok((probs, p.vars))
}

fn features_leaf(features: &Tensor) -> Tensor {
    features.clone().with_requires_grad(false)
}

/// Inference forward pass of a U-Net variant.
pub fn forward_unet(params: &ModelParams, features: &Tensor) -> Result<Tensor> {
    if params.config.variant == Variant::Bilstm {
        return Err(Error::config("forward_unet called with BiLSTM parameters"));
    }
    forward(params, features, false, &mut ChaCha8Rng::seed_from_u64(0))
}

/// BiLSTM forward pass; dropout between layers is active only when `training`.
pub fn forward_bilstm<R: Rng + ?Sized>(
    params: &ModelParams,
    features: &Tensor,
    training: bool,
    rng: &mut R,
) -> Result<Tensor> {
    if params.config.variant != Variant::Bilstm {
        return Err(Error::config("forward_bilstm called with U-Net parameters"));
    }
    forward(params, features, training, rng)
}

/// Forward pass for any variant, returning `[classes × T]` probabilities.
pub fn forward<R: Rng + ?Sized>(
    params: &ModelParams,
    features: &Tensor,
    training: bool,
    rng: &mut R,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(features_leaf(features));
    let (probs, _) = forward_on(params, &mut g, x, training, rng, None)?;
    Ok(g.value(probs).clone().with_requires_grad(false))
}

/// Sequence length after each stage of an inference pass.
pub fn length_trace(params: &ModelParams, features: &Tensor) -> Result<Vec<(&'static str, usize)>> {
    let mut g = Graph::new();
    let x = g.input(features_leaf(features));
    let mut trace = Vec::new();
    forward_on(
        params,
        &mut g,
        x,
        false,
        &mut ChaCha8Rng::seed_from_u64(0),
        Some(&mut trace),
    )?;
    Ok(trace)
}

/// Loss and per-parameter gradients for one example.
#[derive(Debug)]
pub struct ExampleGrads {
    pub loss: f32,
    /// In parameter order; parameters the loss does not touch get zeros.
    pub grads: Vec<Vec<f32>>,
}

/// Masked token cross-entropy of one example and its gradient w.r.t. every parameter.
pub fn loss_and_grads<R: Rng + ?Sized>(
    params: &ModelParams,
    features: &Tensor,
    labels: &[u8],
    pad: &[u8],
    training: bool,
    rng: &mut R,
) -> Result<ExampleGrads> {
    let mut g = Graph::new();
    let x = g.input(features_leaf(features));
    let (probs, vars) = forward_on(params, &mut g, x, training, rng, None)?;
    let loss = g.masked_cross_entropy(probs, labels, pad)?;
    let mut grads = g.backward(loss)?;
    let out = params
        .tensors
        .iter()
        .zip(vars)
        .map(|((_, t), v)| grads.take(v).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok(ExampleGrads {
        loss: g.value(loss).data()[0],
        grads: out,
    })
}

/// Mean masked cross-entropy of one example without building gradients.
pub fn example_loss(params: &ModelParams, features: &Tensor, labels: &[u8], pad: &[u8]) -> Result<(f32, Tensor)> {
    let probs = forward(params, features, false, &mut ChaCha8Rng::seed_from_u64(0))?;
    let (_, t) = probs.dims2()?;
    let loss =
        crate::tensor::kernels::masked_nll_forward(probs.data(), t, labels, pad).ok_or(Error::DegenerateBatch)?;
    Ok((loss, probs))
}

/// Arg-max retention mask. Padded positions are always 0; an exact tie retains.
pub fn predict_mask(probs: &Tensor, pad: &[u8]) -> Vec<u8> {
    let t = probs.shape()[1];
    (0..t)
        .map(|s| {
            let retain = probs.at2(1, s) >= probs.at2(0, s);
            u8::from(pad.get(s).is_some_and(|&p| p != 0) && retain)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_features(m: usize, t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[m, t], (0..m * t).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv1_shape_from_channel_plan() {
        let p = build(&ModelConfig::new(Variant::FullUnet, 100), 0).unwrap();
        assert_eq!(p.get("conv1.weight").unwrap().shape(), &[64, 100, 5]);
        assert_eq!(p.get("conv4.weight").unwrap().shape(), &[128, 128, 3]);
        assert_eq!(p.get("conv6.weight").unwrap().shape(), &[256, 256, 3]);
        assert_eq!(p.get("conv7.weight").unwrap().shape(), &[64, 256, 1]);
        assert_eq!(p.get("head.weight").unwrap().shape(), &[2, 64]);
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = ModelConfig::new(Variant::Bilstm, 20);
        assert_eq!(build(&cfg, 9).unwrap(), build(&cfg, 9).unwrap());
        assert_ne!(build(&cfg, 9).unwrap(), build(&cfg, 10).unwrap());
    }

    #[test]
    fn bilstm_layout() {
        let p = build(&ModelConfig::new(Variant::Bilstm, 100), 0).unwrap();
        for layer in 0..3 {
            let n_in = if layer == 0 { 100 } else { 200 };
            for dir in ["fwd", "bwd"] {
                assert_eq!(p.get(&format!("lstm{layer}.{dir}.w_ih")).unwrap().shape(), &[400, n_in]);
            }
        }
        assert_eq!(p.get("head.weight").unwrap().shape(), &[2, 200]);
        let f = random_features(100, 64, 1);
        let trace = length_trace(&p, &f).unwrap();
        assert_eq!(trace.iter().filter(|(s, _)| *s == "bilstm").count(), 3);
    }

    #[test]
    fn ablations_have_fewer_tensors() {
        let count = |v| build(&ModelConfig::new(v, 16), 0).unwrap().tensor_count();
        let full = count(Variant::FullUnet);
        assert!(count(Variant::NoConv245) < full);
        assert!(count(Variant::NoPoolBlock) < full);
    }

    #[test]
    fn every_variant_keeps_length() {
        let f = random_features(12, 64, 2);
        for v in Variant::ALL {
            let p = build(&ModelConfig::new(v, 12), 3).unwrap();
            let probs = forward(&p, &f, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(probs.shape(), &[2, 64], "{v}");
            for s in 0..64 {
                assert!((probs.at2(0, s) + probs.at2(1, s) - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn full_unet_length_trace() {
        let p = build(&ModelConfig::new(Variant::FullUnet, 8), 0).unwrap();
        let lens: Vec<usize> = length_trace(&p, &random_features(8, 64, 0))
            .unwrap()
            .into_iter()
            .map(|(_, n)| n)
            .collect();
        assert_eq!(lens, vec![64, 64, 32, 32, 64, 64, 64]);
    }

    #[test]
    fn wrong_length_rejected() {
        let p = build(&ModelConfig::new(Variant::FullUnet, 8), 0).unwrap();
        assert!(matches!(
            forward_unet(&p, &random_features(8, 32, 0)),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            forward_unet(&p, &random_features(9, 64, 0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn bilstm_inference_is_deterministic() {
        let p = build(&ModelConfig::new(Variant::Bilstm, 10), 4).unwrap();
        let f = random_features(10, 64, 5);
        let a = forward_bilstm(&p, &f, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = forward_bilstm(&p, &f, false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_rules() {
        let probs = Tensor::from_rows(&[&[0.3, 0.5, 0.9, 0.2], &[0.7, 0.5, 0.1, 0.8]]).unwrap();
        assert_eq!(predict_mask(&probs, &[1, 1, 1, 0]), vec![1, 1, 0, 0]);
    }
}
