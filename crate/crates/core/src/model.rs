//! A small MLP image encoder with comment and reaction heads, trained with
//! exact backpropagation in float64.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{ImageInput, PseudoLabels};
use crate::training::loss::{cross_entropy_with_grad, soft_cross_entropy_with_grad};
use crate::{par, seed};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Samples per gradient shard. Fixed so the reduction order never depends on
/// the number of workers.
pub(crate) const GRAD_CHUNK: usize = 8;

/// What the encoder consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputSpec {
    /// Precomputed feature vectors of this length.
    Features { dim: usize },
    /// Rasters resized (or crop-resized) to `size x size x channels`.
    Raster { size: usize, channels: usize },
}

impl InputSpec {
    pub fn flat_dim(&self) -> usize {
        match *self {
            InputSpec::Features { dim } => dim,
            InputSpec::Raster { size, channels } => size * size * channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: InputSpec,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub k_comment: usize,
    pub k_reaction: usize,
    /// Class prior used to initialize both head biases.
    pub prior: f64,
}

impl ModelConfig {
    pub fn new(input: InputSpec, k_comment: usize, k_reaction: usize) -> Self {
        ModelConfig {
            input,
            hidden_dims: vec![64, 64],
            embedding_dim: 32,
            k_comment,
            k_reaction,
            prior: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.input.flat_dim() > 0
            && self.hidden_dims.iter().all(|d| *d > 0)
            && self.embedding_dim > 0
            && self.k_comment > 0
            && self.k_reaction > 0;
        if !dims_ok {
            return Err(Error::Config(format!(
                "all model dimensions must be positive: {self:?}"
            )));
        }
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(Error::Config(format!(
                "prior {} outside (0, 1)",
                self.prior
            )));
        }
        Ok(())
    }
}

/// Head bias `-ln((1 - prior) / prior)`.
pub fn prior_bias(prior: f64) -> f64 {
    -((1.0 - prior) / prior).ln()
}

/// Dense affine layer; `weight` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, constant bias.
    pub fn init(in_dim: usize, out_dim: usize, bias: f64, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (in_dim.max(1) as f64).sqrt();
        Linear {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim)
                .map(|_| rng.random_range(-scale..scale))
                .collect(),
            bias: vec![bias; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim.max(1))
            .take(self.out_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Accumulate parameter gradients into `grad` and return `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear, want_dx: bool) -> Vec<f64> {
        let mut dx = if want_dx {
            vec![0.0; self.in_dim]
        } else {
            Vec::new()
        };
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = o * self.in_dim;
            for (i, &xi) in x.iter().enumerate() {
                grad.weight[row + i] += g * xi;
            }
            if want_dx {
                for (d, w) in dx.iter_mut().zip(&self.weight[row..row + self.in_dim]) {
                    *d += g * w;
                }
            }
        }
        dx
    }

    fn zeros_like(&self) -> Self {
        Linear::zeros(self.in_dim, self.out_dim)
    }
}

/// Stack of affine layers with ReLU between them; the last layer is linear
/// and its output is the embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub layers: Vec<Linear>,
}

/// Inputs seen by each encoder layer during a forward pass.
pub struct EncoderTrace {
    inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Encoder {
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        embedding_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(embedding_dim);
        let layers = dims
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], 0.0, rng))
            .collect();
        Encoder { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_traced(x).output
    }

    pub fn forward_traced(&self, x: &[f64]) -> EncoderTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(&h);
            if i < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut h, z));
        }
        EncoderTrace { inputs, output: h }
    }

    pub fn backward(&self, trace: &EncoderTrace, d_out: &[f64], grad: &mut Encoder) {
        let mut d = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let dx = self.layers[i].backward(&trace.inputs[i], &d, &mut grad.layers[i], i > 0);
            if i > 0 {
                // ReLU gate: the input to layer i is positive iff its pre-activation was.
                d = dx
                    .into_iter()
                    .zip(&trace.inputs[i])
                    .map(|(g, a)| if *a > 0.0 { g } else { 0.0 })
                    .collect();
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        Encoder {
            layers: self.layers.iter().map(Linear::zeros_like).collect(),
        }
    }

    /// Bit-level checksum of every parameter, for freeze checks.
    pub fn checksum(&self) -> u64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias))
            .fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
                (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3)
            })
    }
}

/// Anything whose parameters can be viewed as an ordered list of flat tensors.
pub trait Tensors {
    fn tensors(&self) -> Vec<(String, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

fn linear_views<'a>(prefix: &str, l: &'a Linear, out: &mut Vec<(String, &'a [f64])>) {
    out.push((format!("{prefix}.weight"), &l.weight));
    out.push((format!("{prefix}.bias"), &l.bias));
}

impl Tensors for Encoder {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            linear_views(&format!("encoder.{i}"), l, &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

/// Encoder plus comment and reaction heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: Encoder,
    pub comment_head: Linear,
    pub reaction_head: Linear,
}

impl Tensors for ModelParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = self.encoder.tensors();
        linear_views("comment_head", &self.comment_head, &mut out);
        linear_views("reaction_head", &self.reaction_head, &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.tensors_mut();
        out.push(&mut self.comment_head.weight);
        out.push(&mut self.comment_head.bias);
        out.push(&mut self.reaction_head.weight);
        out.push(&mut self.reaction_head.bias);
        out
    }
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            encoder: self.encoder.zeros_like(),
            comment_head: self.comment_head.zeros_like(),
            reaction_head: self.reaction_head.zeros_like(),
        }
    }

    fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b.1).for_each(|(x, y)| *x += y);
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    fn matches(&self, config: &ModelConfig) -> bool {
        let mut dims = vec![config.input.flat_dim()];
        dims.extend_from_slice(&config.hidden_dims);
        dims.push(config.embedding_dim);
        let enc_ok = self.encoder.layers.len() + 1 == dims.len()
            && self
                .encoder
                .layers
                .iter()
                .zip(dims.windows(2))
                .all(|(l, w)| l.in_dim == w[0] && l.out_dim == w[1]);
        let head_ok = |l: &Linear, k: usize| l.in_dim == config.embedding_dim && l.out_dim == k;
        enc_ok
            && head_ok(&self.comment_head, config.k_comment)
            && head_ok(&self.reaction_head, config.k_reaction)
            && self
                .tensors()
                .iter()
                .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Seeded initialization: scaled-uniform weights, zero encoder biases, and
/// head biases at the prior logit.
pub fn init_params(config: &ModelConfig, seed_value: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = seed::rng(seed_value);
    let encoder = Encoder::init(
        config.input.flat_dim(),
        &config.hidden_dims,
        config.embedding_dim,
        &mut rng,
    );
    let b = prior_bias(config.prior);
    let comment_head = Linear::init(config.embedding_dim, config.k_comment, b, &mut rng);
    let reaction_head = Linear::init(config.embedding_dim, config.k_reaction, b, &mut rng);
    Ok(ModelParams {
        encoder,
        comment_head,
        reaction_head,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub embedding: Vec<f64>,
    pub comment_logits: Vec<f64>,
    pub reaction_logits: Vec<f64>,
}

pub fn forward(params: &ModelParams, input: &[f64]) -> Result<Outputs> {
    if input.len() != params.input_dim() {
        return Err(Error::Input(format!(
            "input has {} values, model expects {}",
            input.len(),
            params.input_dim()
        )));
    }
    let embedding = params.encoder.forward(input);
    Ok(Outputs {
        comment_logits: params.comment_head.forward(&embedding),
        reaction_logits: params.reaction_head.forward(&embedding),
        embedding,
    })
}

/// Flatten an image for evaluation: features pass through, rasters are
/// bilinearly resized to the configured size.
pub fn eval_input(spec: &InputSpec, image: &ImageInput) -> Result<Vec<f64>> {
    match (spec, image) {
        (InputSpec::Features { dim }, ImageInput::Features { features }) => {
            if features.len() != *dim {
                return Err(Error::Input(format!(
                    "feature vector has {} values, model expects {dim}",
                    features.len()
                )));
            }
            Ok(features.clone())
        }
        (InputSpec::Raster { size, channels }, ImageInput::Raster { pixels, h, w, c }) => {
            if c != channels {
                return Err(Error::Input(format!(
                    "raster has {c} channels, model expects {channels}"
                )));
            }
            Ok(crate::training::augment::resize_bilinear(
                pixels,
                (*h, *w, *c),
                (0, 0, *h, *w),
                *size,
            ))
        }
        _ => Err(Error::Input(
            "image representation does not match the model input kind".into(),
        )),
    }
}

/// Relative weights of the two task losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub comment: f64,
    pub reaction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            comment: 1.0,
            reaction: 1.0,
        }
    }
}

/// One training example: a flattened input and its pseudo-labels.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub input: &'a [f64],
    pub labels: &'a PseudoLabels,
}

/// Reported batch loss, excluding weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean comment loss over samples that have a comment target.
    pub comment: Option<f64>,
    /// Mean reaction loss over samples that have a reaction label.
    pub reaction: Option<f64>,
}

struct Partial {
    comment_sum: f64,
    reaction_sum: f64,
    grad: Option<ModelParams>,
}

fn task_counts(batch: &[Sample<'_>]) -> Result<(usize, usize)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let n_c = batch
        .iter()
        .filter(|s| s.labels.comment_target.is_some())
        .count();
    let n_r = batch
        .iter()
        .filter(|s| s.labels.reaction_label.is_some())
        .count();
    if n_c == 0 && n_r == 0 {
        return Err(Error::Input(
            "no sample in the batch carries any target".into(),
        ));
    }
    Ok((n_c, n_r))
}

fn shard(
    params: &ModelParams,
    chunk: &[Sample<'_>],
    scale: (f64, f64),
    with_grad: bool,
    freeze_encoder: bool,
) -> Result<Partial> {
    let mut grad = with_grad.then(|| params.zeros_like());
    let (mut comment_sum, mut reaction_sum) = (0.0, 0.0);
    for s in chunk {
        if s.input.len() != params.input_dim() {
            return Err(Error::Input(format!(
                "input has {} values, model expects {}",
                s.input.len(),
                params.input_dim()
            )));
        }
        let trace = params.encoder.forward_traced(s.input);
        let emb = &trace.output;
        let mut d_emb = vec![0.0; emb.len()];
        if let Some(t) = &s.labels.comment_target {
            let logits = params.comment_head.forward(emb);
            let (l, mut g) = soft_cross_entropy_with_grad(&logits, t)?;
            comment_sum += l;
            if let Some(grad) = grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= scale.0);
                let dx = params
                    .comment_head
                    .backward(emb, &g, &mut grad.comment_head, true);
                d_emb.iter_mut().zip(dx).for_each(|(a, b)| *a += b);
            }
        }
        if let Some(y) = s.labels.reaction_label {
            let logits = params.reaction_head.forward(emb);
            let (l, mut g) = cross_entropy_with_grad(&logits, y)?;
            reaction_sum += l;
            if let Some(grad) = grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= scale.1);
                let dx = params
                    .reaction_head
                    .backward(emb, &g, &mut grad.reaction_head, true);
                d_emb.iter_mut().zip(dx).for_each(|(a, b)| *a += b);
            }
        }
        if let Some(grad) = grad.as_mut() {
            if !freeze_encoder {
                params.encoder.backward(&trace, &d_emb, &mut grad.encoder);
            }
        }
    }
    Ok(Partial {
        comment_sum,
        reaction_sum,
        grad,
    })
}

fn run(
    params: &ModelParams,
    batch: &[Sample<'_>],
    weights: LossWeights,
    with_grad: bool,
    freeze_encoder: bool,
) -> Result<(LossBreakdown, Option<ModelParams>)> {
    let (n_c, n_r) = task_counts(batch)?;
    let scale = (
        if n_c > 0 {
            weights.comment / n_c as f64
        } else {
            0.0
        },
        if n_r > 0 {
            weights.reaction / n_r as f64
        } else {
            0.0
        },
    );
    let partials = par::map_chunks(batch, GRAD_CHUNK, |c| {
        shard(params, c, scale, with_grad, freeze_encoder)
    });
    let (mut c_sum, mut r_sum) = (0.0, 0.0);
    let mut grad: Option<ModelParams> = None;
    for p in partials {
        let p = p?;
        c_sum += p.comment_sum;
        r_sum += p.reaction_sum;
        match (&mut grad, p.grad) {
            (Some(acc), Some(g)) => acc.add_assign(&g),
            (None, g) => grad = g,
            _ => {}
        }
    }
    let comment = (n_c > 0).then(|| c_sum / n_c as f64);
    let reaction = (n_r > 0).then(|| r_sum / n_r as f64);
    let total = comment.map_or(0.0, |l| weights.comment * l)
        + reaction.map_or(0.0, |l| weights.reaction * l);
    Ok((
        LossBreakdown {
            total,
            comment,
            reaction,
        },
        grad,
    ))
}

/// Multi-task batch loss without gradients.
pub fn loss(
    params: &ModelParams,
    batch: &[Sample<'_>],
    weights: LossWeights,
) -> Result<LossBreakdown> {
    run(params, batch, weights, false, false).map(|r| r.0)
}

/// Loss and exact gradient for every parameter. With `freeze_encoder` the
/// encoder gradients are exactly zero.
pub fn backward(
    params: &ModelParams,
    batch: &[Sample<'_>],
    weights: LossWeights,
    freeze_encoder: bool,
) -> Result<(LossBreakdown, ModelParams)> {
    let (l, g) = run(params, batch, weights, true, freeze_encoder)?;
    Ok((l, g.expect("gradient requested")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serialized model state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
    pub step: usize,
}

impl Checkpoint {
    pub fn new(config: &ModelConfig, params: &ModelParams, step: usize) -> Self {
        let shapes = linear_shapes(params);
        let tensors = params
            .tensors()
            .into_iter()
            .zip(shapes)
            .map(|((name, data), shape)| NamedTensor {
                name,
                shape,
                data: data.to_vec(),
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            tensors,
            step,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Input(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        self.config.validate()?;
        let mut params = init_params(&self.config, 0)?;
        let expected: Vec<String> = params.tensors().into_iter().map(|t| t.0).collect();
        let names: Vec<&String> = self.tensors.iter().map(|t| &t.name).collect();
        if names != expected.iter().collect::<Vec<_>>() {
            return Err(Error::Input(
                "checkpoint tensor names do not match its config".into(),
            ));
        }
        for (dst, src) in params.tensors_mut().into_iter().zip(&self.tensors) {
            if dst.len() != src.data.len() {
                return Err(Error::Input(format!(
                    "tensor {} has the wrong size",
                    src.name
                )));
            }
            dst.copy_from_slice(&src.data);
        }
        if !params.matches(&self.config) {
            return Err(Error::Input("checkpoint holds non-finite values".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_string(path, &serde_json::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&crate::io::read_string(path)?)?)
    }
}

fn linear_shapes(p: &ModelParams) -> Vec<Vec<usize>> {
    p.encoder
        .layers
        .iter()
        .chain([&p.comment_head, &p.reaction_head])
        .flat_map(|l| [vec![l.out_dim, l.in_dim], vec![l.out_dim]])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn cfg() -> ModelConfig {
        ModelConfig {
            input: InputSpec::Features { dim: 4 },
            hidden_dims: vec![5],
            embedding_dim: 3,
            k_comment: 6,
            k_reaction: 2,
            prior: 0.01,
        }
    }

    #[test]
    fn head_bias_follows_prior() {
        let p = init_params(&cfg(), 1).unwrap();
        let expected = -(99.0f64).ln();
        assert!((expected + 4.595_119_850_134_59).abs() < 1e-12);
        assert!(p
            .comment_head
            .bias
            .iter()
            .chain(&p.reaction_head.bias)
            .all(|b| *b == expected));
        assert!(p
            .encoder
            .layers
            .iter()
            .all(|l| l.bias.iter().all(|b| *b == 0.0)));
        let half = init_params(
            &ModelConfig {
                prior: 0.5,
                ..cfg()
            },
            1,
        )
        .unwrap();
        assert!(half.comment_head.bias.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let a = init_params(&cfg(), 9).unwrap();
        assert_eq!(a, init_params(&cfg(), 9).unwrap());
        assert_ne!(a, init_params(&cfg(), 10).unwrap());
        let bound = 1.0 / 2.0; // fan_in 4
        assert!(a.encoder.layers[0].weight.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn invalid_configs() {
        assert!(init_params(
            &ModelConfig {
                prior: 1.0,
                ..cfg()
            },
            0
        )
        .is_err());
        assert!(init_params(
            &ModelConfig {
                embedding_dim: 0,
                ..cfg()
            },
            0
        )
        .is_err());
        assert!(init_params(
            &ModelConfig {
                hidden_dims: vec![0],
                ..cfg()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut p = init_params(&cfg(), 3).unwrap();
        for t in p.tensors_mut().into_iter().take(4) {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        p.comment_head.weight.iter_mut().for_each(|v| *v = 0.0);
        p.reaction_head.weight.iter_mut().for_each(|v| *v = 0.0);
        let out = forward(&p, &[0.0; 4]).unwrap();
        let b = prior_bias(0.01);
        assert!(out
            .comment_logits
            .iter()
            .chain(&out.reaction_logits)
            .all(|l| *l == b));
        assert!(matches!(forward(&p, &[0.0; 3]), Err(Error::Input(_))));
    }

    #[test]
    fn forward_is_finite_for_large_inputs() {
        let p = init_params(&cfg(), 3).unwrap();
        let out = forward(&p, &[1e6, -1e6, 3e5, 0.0]).unwrap();
        assert!(out.comment_logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn frozen_encoder_gets_zero_gradient() {
        let p = init_params(&cfg(), 4).unwrap();
        let labels = PseudoLabels {
            comment_target: Some(BTreeMap::from([(1, 0.5), (4, 0.5)])),
            reaction_label: Some(1),
        };
        let x = [0.3, -0.2, 0.9, 0.1];
        let batch = [Sample {
            input: &x,
            labels: &labels,
        }];
        let (_, g) = backward(&p, &batch, LossWeights::default(), true).unwrap();
        assert!(g
            .encoder
            .tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| *v == 0.0)));
        assert!(g.comment_head.weight.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let p = init_params(&cfg(), 4).unwrap();
        let la = PseudoLabels {
            comment_target: Some(BTreeMap::from([(2, 1.0)])),
            reaction_label: None,
        };
        let lb = PseudoLabels {
            comment_target: None,
            reaction_label: Some(0),
        };
        let (xa, xb) = ([0.1, 0.2, 0.3, 0.4], [-0.5, 0.5, -0.5, 0.5]);
        let one = [
            Sample {
                input: &xa,
                labels: &la,
            },
            Sample {
                input: &xb,
                labels: &lb,
            },
        ];
        let two = [one[0], one[1], one[0], one[1]];
        let (l1, g1) = backward(&p, &one, LossWeights::default(), false).unwrap();
        let (l2, g2) = backward(&p, &two, LossWeights::default(), false).unwrap();
        assert!((l1.total - l2.total).abs() < 1e-12);
        for ((_, a), (_, b)) in g1.tensors().into_iter().zip(g2.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_or_unlabeled_batches_rejected() {
        let p = init_params(&cfg(), 4).unwrap();
        assert!(loss(&p, &[], LossWeights::default()).is_err());
        let none = PseudoLabels::default();
        let x = [0.0; 4];
        assert!(matches!(
            loss(
                &p,
                &[Sample {
                    input: &x,
                    labels: &none
                }],
                LossWeights::default()
            ),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let p = init_params(&cfg(), 12).unwrap();
        let ck = Checkpoint::new(&cfg(), &p, 7);
        assert_eq!(ck.tensors[0].shape, vec![5, 4]);
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back.params().unwrap(), p);
        let mut bad = back.clone();
        bad.tensors[1].data.pop();
        assert!(bad.params().is_err());
    }
}
