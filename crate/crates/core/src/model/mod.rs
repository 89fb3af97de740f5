//! Fusion model: an encoder over the scene tokens and trajectory tokens, a
//! decoder over the instruction tokens that cross-attends to the encoder
//! output, and a two-layer head producing the success probability.

pub mod checkpoint;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::FeatureBundle;
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};
use crate::trajectory::{
    encode_in_graph, trajectory_input, EncoderVars, TrajectoryEncoderConfig, TrajectoryMode, DOF,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

const LN_EPS: f64 = 1e-5;
const BCE_EPS: f64 = 1e-7;

/// How the encoded trajectory `D×d_trm` is cut into tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajTokens {
    /// `d_trm` tokens of width `D`.
    #[default]
    Time,
    /// `D` tokens of width `d_trm`.
    Channel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Layer count of both the encoder and the decoder.
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    /// Decision threshold: success iff probability ≥ threshold.
    pub threshold: f64,
    pub traj_tokens: TrajTokens,
    /// Sinusoidal positions on the scene rows (off: rows form a set).
    pub lambda_positions: bool,
    pub trajectory: TrajectoryEncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            layers: 2,
            heads: 4,
            ff_dim: 256,
            head_hidden: 64,
            dropout: 0.1,
            threshold: 0.5,
            traj_tokens: TrajTokens::Time,
            lambda_positions: false,
            trajectory: TrajectoryEncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.layers == 0 {
            return fail("layers must be ≥ 1".into());
        }
        if self.ff_dim == 0 || self.head_hidden == 0 {
            return fail("ff_dim and head_hidden must be ≥ 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail(format!("threshold {} must lie in (0, 1)", self.threshold));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        self.trajectory.validate()
    }

    fn traj_token_width(&self) -> usize {
        match self.traj_tokens {
            TrajTokens::Time => DOF,
            TrajTokens::Channel => self.trajectory.d_trm,
        }
    }
}

/// Raw widths of the scene and instruction feature rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputWidths {
    pub lambda: usize,
    pub text: usize,
}

#[derive(Clone, Copy)]
enum Init {
    /// Normal with standard deviation `1/√fan_in`.
    Scaled(usize),
    Zeros,
    Ones,
}

/// Ordered `(name, shape, init)` list of every learnable tensor.
fn layout(config: &ModelConfig, widths: InputWidths) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d_model;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut linear = |out: &mut Vec<_>, name: &str, fan_in: usize, fan_out: usize| {
        out.push((
            format!("{name}.weight"),
            vec![fan_in, fan_out],
            Init::Scaled(fan_in),
        ));
        out.push((format!("{name}.bias"), vec![fan_out], Init::Zeros));
    };
    let norm = |out: &mut Vec<_>, name: &str| {
        out.push((format!("{name}.gamma"), vec![d], Init::Ones));
        out.push((format!("{name}.beta"), vec![d], Init::Zeros));
    };
    let tc = &config.trajectory;
    match tc.mode {
        TrajectoryMode::ConvPool => {
            let [o, i, k] = tc.kernel_shape();
            out.push((
                "traj.conv.weight".into(),
                vec![o, i, k],
                Init::Scaled(i * k),
            ));
            out.push(("traj.conv.bias".into(), vec![o], Init::Zeros));
        }
        TrajectoryMode::LinearBaseline => {
            linear(&mut out, "traj.linear", tc.resample_len, tc.d_trm)
        }
        TrajectoryMode::Disabled => {
            out.push(("traj.null_token".into(), vec![1, d], Init::Scaled(d)))
        }
    }
    if widths.lambda != d {
        linear(&mut out, "proj.lambda", widths.lambda, d);
    }
    if tc.mode != TrajectoryMode::Disabled {
        linear(&mut out, "proj.traj", config.traj_token_width(), d);
    }
    if widths.text != d {
        linear(&mut out, "proj.text", widths.text, d);
    }
    let attention =
        |out: &mut Vec<_>, name: &str, linear: &mut dyn FnMut(&mut Vec<_>, &str, usize, usize)| {
            for p in ["q", "k", "v", "o"] {
                linear(out, &format!("{name}.{p}"), d, d);
            }
        };
    for l in 0..config.layers {
        let p = format!("encoder.{l}");
        norm(&mut out, &format!("{p}.norm1"));
        attention(&mut out, &format!("{p}.attn"), &mut linear);
        norm(&mut out, &format!("{p}.norm2"));
        linear(&mut out, &format!("{p}.ff.1"), d, config.ff_dim);
        linear(&mut out, &format!("{p}.ff.2"), config.ff_dim, d);
    }
    norm(&mut out, "encoder.norm");
    for l in 0..config.layers {
        let p = format!("decoder.{l}");
        norm(&mut out, &format!("{p}.norm1"));
        attention(&mut out, &format!("{p}.self_attn"), &mut linear);
        norm(&mut out, &format!("{p}.norm2"));
        attention(&mut out, &format!("{p}.cross_attn"), &mut linear);
        norm(&mut out, &format!("{p}.norm3"));
        linear(&mut out, &format!("{p}.ff.1"), d, config.ff_dim);
        linear(&mut out, &format!("{p}.ff.2"), config.ff_dim, d);
    }
    norm(&mut out, "decoder.norm");
    linear(&mut out, "head.1", d, config.head_hidden);
    linear(&mut out, "head.2", config.head_hidden, 1);
    out
}

/// Parameter group of a tensor name, e.g. `encoder.0` or `head`.
pub fn param_group(name: &str) -> &str {
    let parts: Vec<&str> = name.splitn(3, '.').collect();
    match parts[0] {
        "encoder" | "decoder" | "proj" => &name[..parts[0].len() + 1 + parts[1].len()],
        _ => parts[0],
    }
}

/// Every learnable tensor of the model, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub widths: InputWidths,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ModelParams<T> {
    /// Normal(0, 1/fan_in) weights, zero biases, identity norms.
    pub fn init(config: &ModelConfig, widths: InputWidths, seed: u64) -> Result<Self> {
        config.validate()?;
        if widths.lambda == 0 || widths.text == 0 {
            return Err(Error::Config("input widths must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(config, widths) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Scaled(fan_in) => {
                    let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
                    (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
                }
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            names.push(name);
            tensors.push(Tensor::from_parts(shape, data));
        }
        Ok(Self::from_named(config.clone(), widths, names, tensors))
    }

    fn from_named(
        config: ModelConfig,
        widths: InputWidths,
        names: Vec<String>,
        tensors: Vec<Tensor<T>>,
    ) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self {
            config,
            widths,
            names,
            tensors,
            index,
        }
    }

    /// Rebuilds from stored tensors, which must match the layout exactly.
    pub fn from_tensors(
        config: ModelConfig,
        widths: InputWidths,
        named: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config, widths);
        if expected.len() != named.len() {
            return Err(Error::Format(format!(
                "expected {} tensors for this config, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in expected.iter().zip(&named) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self::from_named(config, widths, names, tensors))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Group names in first-appearance order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for n in &self.names {
            let g = param_group(n);
            if out.last().map(String::as_str) != Some(g) {
                out.push(g.to_string());
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams::from_named(
            self.config.clone(),
            self.widths,
            self.names.clone(),
            self.tensors.iter().map(Tensor::cast).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// SHA-256 over names, shapes and values (hex).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Sinusoidal position table `n×d`.
pub fn positional_encoding<T: Scalar>(n: usize, d: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); n * d];
    for pos in 0..n {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_parts(vec![n, d], data)
}

/// Per-sample dropout masks drawn from a seeded generator.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.rate);
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    T::of(keep)
                }
            })
            .collect();
        let mask = g.constant(Tensor::from_parts(shape, data));
        Ok(g.mul(x, mask)?)
    }
}

/// Parameters registered as graph leaves, addressable by name.
pub struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn register<T: Scalar>(g: &mut Graph<T>, params: &ModelParams<T>) -> Self {
        Self {
            vars: params.tensors.iter().map(|t| g.param(t.clone())).collect(),
            index: params.index.clone(),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    fn try_get(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub probability: Var,
    pub logit: Var,
    /// Attention weight matrices, one per head per attention block.
    pub attention: Vec<Var>,
}

struct Forward<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    p: &'a ParamVars,
    config: &'a ModelConfig,
    dropout: Option<&'a mut Dropout>,
    attention: Vec<Var>,
}

impl<T: Scalar> Forward<'_, T> {
    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p.get(&format!("{name}.weight"));
        let b = self.p.get(&format!("{name}.bias"));
        let y = self.g.matmul(x, w)?;
        Ok(self.g.add_row(y, b)?)
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.p.get(&format!("{name}.gamma"));
        let beta = self.p.get(&format!("{name}.beta"));
        Ok(self.g.layer_norm(x, gamma, beta, LN_EPS)?)
    }

    fn drop(&mut self, x: Var) -> Result<Var> {
        match self.dropout.as_deref_mut() {
            Some(d) => d.apply(self.g, x),
            None => Ok(x),
        }
    }

    fn attention(&mut self, queries: Var, keys: Var, name: &str) -> Result<Var> {
        let q = self.linear(queries, &format!("{name}.q"))?;
        let k = self.linear(keys, &format!("{name}.k"))?;
        let v = self.linear(keys, &format!("{name}.v"))?;
        let dh = self.config.d_model / self.config.heads;
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = self.g.slice_cols(q, a, b)?;
            let kh = self.g.slice_cols(k, a, b)?;
            let vh = self.g.slice_cols(v, a, b)?;
            let (out, weights) = self.g.scaled_dot_attention(qh, kh, vh)?;
            self.attention.push(weights);
            heads.push(out);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            self.g.concat_cols(&heads)?
        };
        self.linear(joined, &format!("{name}.o"))
    }

    fn feed_forward(&mut self, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{name}.1"))?;
        let h = self.g.gelu(h);
        let h = self.drop(h)?;
        self.linear(h, &format!("{name}.2"))
    }

    fn residual(&mut self, x: Var, update: Var) -> Result<Var> {
        let update = self.drop(update)?;
        Ok(self.g.add(x, update)?)
    }

    fn project(&mut self, x: Var, name: &str) -> Result<Var> {
        if self.p.try_get(&format!("{name}.weight")).is_some() {
            self.linear(x, name)
        } else {
            Ok(x)
        }
    }

    fn add_positions(&mut self, x: Var) -> Result<Var> {
        let (n, d) = (self.g.shape(x)[0], self.g.shape(x)[1]);
        let pe = self.g.constant(positional_encoding(n, d));
        Ok(self.g.add(x, pe)?)
    }

    fn trajectory_tokens(&mut self, bundle: &FeatureBundle) -> Result<Var> {
        let tc = &self.config.trajectory;
        let vars = match tc.mode {
            TrajectoryMode::Disabled => return Ok(self.p.get("traj.null_token")),
            TrajectoryMode::ConvPool => EncoderVars::ConvPool {
                kernel: self.p.get("traj.conv.weight"),
                bias: self.p.get("traj.conv.bias"),
            },
            TrajectoryMode::LinearBaseline => EncoderVars::Linear {
                weight: self.p.get("traj.linear.weight"),
                bias: self.p.get("traj.linear.bias"),
            },
        };
        let x = trajectory_input(self.g, &bundle.trajectory);
        let h = encode_in_graph(self.g, x, vars, tc)?;
        let tokens = match self.config.traj_tokens {
            TrajTokens::Time => self.g.transpose(h)?,
            TrajTokens::Channel => h,
        };
        let tokens = self.linear(tokens, "proj.traj")?;
        self.add_positions(tokens)
    }

    fn run(&mut self, bundle: &FeatureBundle) -> Result<ForwardVars> {
        let lambda = self.g.constant(bundle.h_lambda.cast());
        let mut lambda = self.project(lambda, "proj.lambda")?;
        if self.config.lambda_positions {
            lambda = self.add_positions(lambda)?;
        }
        let traj = self.trajectory_tokens(bundle)?;
        let mut x = self.g.concat_rows(&[lambda, traj])?;
        for l in 0..self.config.layers {
            let p = format!("encoder.{l}");
            let h = self.norm(x, &format!("{p}.norm1"))?;
            let a = self.attention(h, h, &format!("{p}.attn"))?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &format!("{p}.norm2"))?;
            let f = self.feed_forward(h, &format!("{p}.ff"))?;
            x = self.residual(x, f)?;
        }
        let memory = self.norm(x, "encoder.norm")?;

        let text = self.g.constant(bundle.h_txt.cast());
        let text = self.project(text, "proj.text")?;
        let mut y = self.add_positions(text)?;
        for l in 0..self.config.layers {
            let p = format!("decoder.{l}");
            let h = self.norm(y, &format!("{p}.norm1"))?;
            let a = self.attention(h, h, &format!("{p}.self_attn"))?;
            y = self.residual(y, a)?;
            let h = self.norm(y, &format!("{p}.norm2"))?;
            let c = self.attention(h, memory, &format!("{p}.cross_attn"))?;
            y = self.residual(y, c)?;
            let h = self.norm(y, &format!("{p}.norm3"))?;
            let f = self.feed_forward(h, &format!("{p}.ff"))?;
            y = self.residual(y, f)?;
        }
        let y = self.norm(y, "decoder.norm")?;
        let pooled = self.g.mean_rows(y)?;
        let h = self.linear(pooled, "head.1")?;
        let h = self.g.gelu(h);
        let logit = self.linear(h, "head.2")?;
        let probability = self.g.sigmoid(logit);
        Ok(ForwardVars {
            probability,
            logit,
            attention: std::mem::take(&mut self.attention),
        })
    }
}

fn check_bundle<T: Scalar>(params: &ModelParams<T>, bundle: &FeatureBundle) -> Result<()> {
    let id = &bundle.episode_id;
    let (kl, wl) = bundle.h_lambda.dims2()?;
    let (kt, wt) = bundle.h_txt.dims2()?;
    if kl == 0 || kt == 0 {
        return Err(Error::Data(format!("episode {id}: empty token set")));
    }
    if wl != params.widths.lambda || wt != params.widths.text {
        return Err(Error::Config(format!(
            "episode {id}: feature widths ({wl}, {wt}) do not match the model's ({}, {})",
            params.widths.lambda, params.widths.text
        )));
    }
    Ok(())
}

/// Adds one forward pass to `g`. `dropout` is `None` at inference.
pub fn forward_in_graph<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    params: &ModelParams<T>,
    bundle: &FeatureBundle,
    dropout: Option<&mut Dropout>,
) -> Result<ForwardVars> {
    check_bundle(params, bundle)?;
    Forward {
        g,
        p: vars,
        config: &params.config,
        dropout,
        attention: Vec::new(),
    }
    .run(bundle)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub episode_id: String,
    pub probability: f64,
    pub decision: u8,
    pub fingerprint: String,
}

/// Inference on one bundle, returning the probability and the attention
/// weight matrices.
pub fn forward_with_attention<T: Scalar>(
    params: &ModelParams<T>,
    bundle: &FeatureBundle,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let vars = ParamVars::register(&mut g, params);
    let out = forward_in_graph(&mut g, &vars, params, bundle, None)?;
    let p = g.value(out.probability).data()[0].as_f64();
    Ok((
        p,
        out.attention.iter().map(|&a| g.value(a).clone()).collect(),
    ))
}

pub fn predict_probability<T: Scalar>(
    params: &ModelParams<T>,
    bundle: &FeatureBundle,
) -> Result<f64> {
    Ok(forward_with_attention(params, bundle)?.0)
}

pub fn decide(probability: f64, threshold: f64) -> u8 {
    u8::from(probability >= threshold)
}

/// Probability and thresholded decision; `fingerprint` is carried through
/// unchanged.
pub fn fuse_and_predict<T: Scalar>(
    params: &ModelParams<T>,
    bundle: &FeatureBundle,
    fingerprint: &str,
) -> Result<Prediction> {
    let probability = predict_probability(params, bundle)?;
    Ok(Prediction {
        episode_id: bundle.episode_id.clone(),
        probability,
        decision: decide(probability, params.config.threshold),
        fingerprint: fingerprint.to_string(),
    })
}

/// Mean binary cross-entropy over a batch, with the graph kept for
/// differentiation.
pub struct LossGraph<T: Scalar> {
    pub graph: Graph<T>,
    pub loss: Var,
    pub params: ParamVars,
    pub probabilities: Vec<f64>,
}

impl<T: Scalar> LossGraph<T> {
    pub fn loss_value(&self) -> f64 {
        self.graph.value(self.loss).data()[0].as_f64()
    }

    /// Gradients in parameter order; unreached parameters get zeros.
    pub fn gradients(&self, params: &ModelParams<T>) -> Result<Vec<Tensor<T>>> {
        let grads = self.graph.backward(self.loss)?;
        Ok(self
            .params
            .vars()
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t))
            .collect())
    }
}

pub fn forward_loss<T: Scalar>(
    params: &ModelParams<T>,
    bundles: &[&FeatureBundle],
    labels: &[u8],
    dropout: Option<&mut Dropout>,
) -> Result<LossGraph<T>> {
    forward_loss_in(Graph::new(), params, bundles, labels, dropout)
}

/// [`forward_loss`] on a caller-supplied (empty) graph.
pub fn forward_loss_in<T: Scalar>(
    mut g: Graph<T>,
    params: &ModelParams<T>,
    bundles: &[&FeatureBundle],
    labels: &[u8],
    mut dropout: Option<&mut Dropout>,
) -> Result<LossGraph<T>> {
    if bundles.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if bundles.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} bundles but {} labels",
            bundles.len(),
            labels.len()
        )));
    }
    if let Some(i) = labels.iter().position(|&y| y > 1) {
        return Err(Error::Data(format!(
            "label {} at batch index {i} is not 0 or 1",
            labels[i]
        )));
    }
    let vars = ParamVars::register(&mut g, params);
    let mut probs = Vec::with_capacity(bundles.len());
    for bundle in bundles {
        let out = forward_in_graph(&mut g, &vars, params, bundle, dropout.as_deref_mut())?;
        probs.push(out.probability);
    }
    let p = if probs.len() == 1 {
        probs[0]
    } else {
        g.concat_rows(&probs)?
    };
    let targets: Vec<T> = labels.iter().map(|&y| T::of(f64::from(y))).collect();
    let loss = g.bce_loss(p, &targets, BCE_EPS)?;
    let probabilities = g.value(p).data().iter().map(|v| v.as_f64()).collect();
    Ok(LossGraph {
        graph: g,
        loss,
        params: vars,
        probabilities,
    })
}

/// Names and shapes of every tensor the config would create.
pub fn describe(config: &ModelConfig, widths: InputWidths) -> Vec<(String, Vec<usize>)> {
    layout(config, widths)
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect()
}
