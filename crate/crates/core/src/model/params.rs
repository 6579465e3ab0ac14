use rand_distr::{Distribution, StandardNormal};

use super::ModelConfig;
use crate::error::Result;
use crate::rng::{self, Purpose, Rng};
use crate::tensor::{Graph, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// How the optimiser treats a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, with weight decay.
    Weight,
    /// Trainable bias, no decay.
    Bias,
    /// Layer-norm gain or bias, no decay.
    Norm,
    /// Never updated.
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub attention_out: Linear<T>,
    pub attention_norm: Norm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ffn_norm: Norm<T>,
}

/// Every tensor of the network, generic over what is stored per tensor:
/// values, graph handles, gradients or optimiser moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub code: T,
    pub segment: T,
    pub age: T,
    pub gender: T,
    pub position: T,
    pub embedding_norm: Norm<T>,
    pub layers: Vec<Layer<T>>,
    /// Untied MLM output projection `[vocab, hidden]`; `None` when tied to `code`.
    pub mlm_decoder: Option<T>,
    pub mlm_bias: T,
    pub classifier: Option<Linear<T>>,
}

type Visitor<'a, 'f, T> = dyn FnMut(&str, ParamKind, &'a T) + 'f;
type VisitorMut<'a, 'f, T> = dyn FnMut(&str, ParamKind, &'a mut T) + 'f;

impl<T> Linear<T> {
    fn visit<'a>(&'a self, p: &str, f: &mut Visitor<'a, '_, T>) {
        f(&format!("{p}.weight"), ParamKind::Weight, &self.weight);
        f(&format!("{p}.bias"), ParamKind::Bias, &self.bias);
    }
    fn visit_mut<'a>(&'a mut self, p: &str, f: &mut VisitorMut<'a, '_, T>) {
        f(&format!("{p}.weight"), ParamKind::Weight, &mut self.weight);
        f(&format!("{p}.bias"), ParamKind::Bias, &mut self.bias);
    }
    fn map<U>(&self, p: &str, f: &mut dyn FnMut(&str, ParamKind, &T) -> U) -> Linear<U> {
        Linear {
            weight: f(&format!("{p}.weight"), ParamKind::Weight, &self.weight),
            bias: f(&format!("{p}.bias"), ParamKind::Bias, &self.bias),
        }
    }
}

impl<T> Norm<T> {
    fn visit<'a>(&'a self, p: &str, f: &mut Visitor<'a, '_, T>) {
        f(&format!("{p}.gain"), ParamKind::Norm, &self.gain);
        f(&format!("{p}.bias"), ParamKind::Norm, &self.bias);
    }
    fn visit_mut<'a>(&'a mut self, p: &str, f: &mut VisitorMut<'a, '_, T>) {
        f(&format!("{p}.gain"), ParamKind::Norm, &mut self.gain);
        f(&format!("{p}.bias"), ParamKind::Norm, &mut self.bias);
    }
    fn map<U>(&self, p: &str, f: &mut dyn FnMut(&str, ParamKind, &T) -> U) -> Norm<U> {
        Norm {
            gain: f(&format!("{p}.gain"), ParamKind::Norm, &self.gain),
            bias: f(&format!("{p}.bias"), ParamKind::Norm, &self.bias),
        }
    }
}

impl<T> Layer<T> {
    fn visit<'a>(&'a self, p: &str, f: &mut Visitor<'a, '_, T>) {
        self.query.visit(&format!("{p}.attention.query"), f);
        self.key.visit(&format!("{p}.attention.key"), f);
        self.value.visit(&format!("{p}.attention.value"), f);
        self.attention_out.visit(&format!("{p}.attention.output"), f);
        self.attention_norm.visit(&format!("{p}.attention.norm"), f);
        self.ffn_in.visit(&format!("{p}.ffn.input"), f);
        self.ffn_out.visit(&format!("{p}.ffn.output"), f);
        self.ffn_norm.visit(&format!("{p}.ffn.norm"), f);
    }
    fn visit_mut<'a>(&'a mut self, p: &str, f: &mut VisitorMut<'a, '_, T>) {
        self.query.visit_mut(&format!("{p}.attention.query"), f);
        self.key.visit_mut(&format!("{p}.attention.key"), f);
        self.value.visit_mut(&format!("{p}.attention.value"), f);
        self.attention_out.visit_mut(&format!("{p}.attention.output"), f);
        self.attention_norm.visit_mut(&format!("{p}.attention.norm"), f);
        self.ffn_in.visit_mut(&format!("{p}.ffn.input"), f);
        self.ffn_out.visit_mut(&format!("{p}.ffn.output"), f);
        self.ffn_norm.visit_mut(&format!("{p}.ffn.norm"), f);
    }
    fn map<U>(&self, p: &str, f: &mut dyn FnMut(&str, ParamKind, &T) -> U) -> Layer<U> {
        Layer {
            query: self.query.map(&format!("{p}.attention.query"), f),
            key: self.key.map(&format!("{p}.attention.key"), f),
            value: self.value.map(&format!("{p}.attention.value"), f),
            attention_out: self.attention_out.map(&format!("{p}.attention.output"), f),
            attention_norm: self.attention_norm.map(&format!("{p}.attention.norm"), f),
            ffn_in: self.ffn_in.map(&format!("{p}.ffn.input"), f),
            ffn_out: self.ffn_out.map(&format!("{p}.ffn.output"), f),
            ffn_norm: self.ffn_norm.map(&format!("{p}.ffn.norm"), f),
        }
    }
}

impl<T> Weights<T> {
    /// Visits tensors in their fixed declaration order.
    pub fn visit<'a>(&'a self, f: &mut Visitor<'a, '_, T>) {
        f("embeddings.code", ParamKind::Weight, &self.code);
        f("embeddings.segment", ParamKind::Weight, &self.segment);
        f("embeddings.age", ParamKind::Weight, &self.age);
        f("embeddings.gender", ParamKind::Weight, &self.gender);
        f("embeddings.position", ParamKind::Fixed, &self.position);
        self.embedding_norm.visit("embeddings.norm", f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layers.{i}"), f);
        }
        if let Some(d) = &self.mlm_decoder {
            f("mlm.decoder", ParamKind::Weight, d);
        }
        f("mlm.bias", ParamKind::Bias, &self.mlm_bias);
        if let Some(c) = &self.classifier {
            c.visit("classifier", f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut VisitorMut<'a, '_, T>) {
        f("embeddings.code", ParamKind::Weight, &mut self.code);
        f("embeddings.segment", ParamKind::Weight, &mut self.segment);
        f("embeddings.age", ParamKind::Weight, &mut self.age);
        f("embeddings.gender", ParamKind::Weight, &mut self.gender);
        f("embeddings.position", ParamKind::Fixed, &mut self.position);
        self.embedding_norm.visit_mut("embeddings.norm", f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layers.{i}"), f);
        }
        if let Some(d) = &mut self.mlm_decoder {
            f("mlm.decoder", ParamKind::Weight, d);
        }
        f("mlm.bias", ParamKind::Bias, &mut self.mlm_bias);
        if let Some(c) = &mut self.classifier {
            c.visit_mut("classifier", f);
        }
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&str, ParamKind, &T) -> U) -> Weights<U> {
        Weights {
            code: f("embeddings.code", ParamKind::Weight, &self.code),
            segment: f("embeddings.segment", ParamKind::Weight, &self.segment),
            age: f("embeddings.age", ParamKind::Weight, &self.age),
            gender: f("embeddings.gender", ParamKind::Weight, &self.gender),
            position: f("embeddings.position", ParamKind::Fixed, &self.position),
            embedding_norm: self.embedding_norm.map("embeddings.norm", f),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("layers.{i}"), f))
                .collect(),
            mlm_decoder: self.mlm_decoder.as_ref().map(|d| f("mlm.decoder", ParamKind::Weight, d)),
            mlm_bias: f("mlm.bias", ParamKind::Bias, &self.mlm_bias),
            classifier: self.classifier.as_ref().map(|c| c.map("classifier", f)),
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _, _| names.push(n.to_string()));
        names
    }
}

impl Weights<Tensor> {
    /// Places every tensor on `graph`; trainable tensors become parameters
    /// when `trainable` is set, constants otherwise.
    pub fn register(&self, graph: &mut Graph, trainable: bool) -> Weights<Var> {
        self.map(&mut |_, kind, t| {
            if trainable && kind != ParamKind::Fixed {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        })
    }

    pub fn zeros_like(&self) -> Weights<Tensor> {
        self.map(&mut |_, _, t| Tensor::zeros(t.shape()))
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, t| n += t.len());
        n
    }
}

impl Weights<Var> {
    /// Gradients after `graph.backward`; fixed tensors report zeros.
    pub fn grads(&self, graph: &Graph) -> Weights<Tensor> {
        self.map(&mut |_, _, &v| graph.grad(v).unwrap_or_else(|| Tensor::zeros(graph.shape(v))))
    }
}

fn truncated_normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(z * INIT_STD);
        }
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Fixed sinusoidal encoding: `sin(pos / 10000^(2i/h))` on even dimension
/// `2i`, the matching cosine on `2i + 1`.
pub fn sinusoidal_positions(max_len: usize, hidden: usize) -> Tensor {
    let mut data = Vec::with_capacity(max_len * hidden);
    for pos in 0..max_len {
        for d in 0..hidden {
            let pair = (d / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / hidden as f64);
            data.push(if d % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![max_len, hidden], data).unwrap()
}

fn linear(rng: &mut Rng, inputs: usize, outputs: usize) -> Linear<Tensor> {
    Linear {
        weight: truncated_normal(rng, &[inputs, outputs]),
        bias: Tensor::zeros(&[outputs]),
    }
}

fn norm(width: usize) -> Norm<Tensor> {
    Norm {
        gain: Tensor::full(&[width], 1.0),
        bias: Tensor::zeros(&[width]),
    }
}

/// Fresh classification head drawn from its own stream.
pub fn init_classifier(hidden: usize, seed: u64) -> Linear<Tensor> {
    let mut rng = rng::stream(seed, Purpose::HeadInit, 0);
    linear(&mut rng, hidden, 1)
}

/// Initial weights: truncated normal (σ = 0.02, cut at 2σ) for matrices and
/// embedding tables, zero biases, unit layer-norm gains.
pub fn init_weights(config: &ModelConfig, seed: u64, with_classifier: bool) -> Result<Weights<Tensor>> {
    config.validate()?;
    let mut rng = rng::stream(seed, Purpose::Init, 0);
    let h = config.hidden_size;
    let code = truncated_normal(&mut rng, &[config.vocab_size, h]);
    let segment = truncated_normal(&mut rng, &[2, h]);
    let age = truncated_normal(&mut rng, &[config.max_age + 1, h]);
    let gender = truncated_normal(&mut rng, &[2, h]);
    let layers = (0..config.n_layers)
        .map(|_| Layer {
            query: linear(&mut rng, h, h),
            key: linear(&mut rng, h, h),
            value: linear(&mut rng, h, h),
            attention_out: linear(&mut rng, h, h),
            attention_norm: norm(h),
            ffn_in: linear(&mut rng, h, config.intermediate_size),
            ffn_out: linear(&mut rng, config.intermediate_size, h),
            ffn_norm: norm(h),
        })
        .collect();
    let mlm_decoder = (!config.tied_mlm).then(|| truncated_normal(&mut rng, &[config.vocab_size, h]));
    Ok(Weights {
        code,
        segment,
        age,
        gender,
        position: sinusoidal_positions(config.max_len, h),
        embedding_norm: norm(h),
        layers,
        mlm_decoder,
        mlm_bias: Tensor::zeros(&[config.vocab_size]),
        classifier: with_classifier.then(|| init_classifier(h, seed)),
    })
}
