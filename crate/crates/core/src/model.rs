//! The sequential VAE with its two critics.
//!
//! * encoder: embedding → GRU → softplus → add ε → causal conv with a
//!   residual connection → softplus → affine, producing one latent per step;
//! * decoder: a per-step affine map from latent to item logits;
//! * adversary `T_Ψ`: estimates `log q(z|x) − log p(z)` per step;
//! * contrast critic `G_ω`: tells a user's own latent from another user's.
//!
//! Sequences run through the encoder in time-major layout: row `t*b + i`
//! of every `[steps*b × ·]` matrix is user `i` at step `t`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{gru_step, GruVars, Tape, Var};
use crate::data::PaddedBatch;
use crate::error::{Error, Result};
use crate::optim::{OptimizerConfig, OptimizerState, Update};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveForm {
    /// `−[log σ(G⁺) + log σ(1 − G⁻)]`
    Literal,
    /// `−[log σ(G⁺) + log(1 − σ(G⁻))]`
    Canonical,
}

impl std::str::FromStr for ContrastiveForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(ContrastiveForm::Literal),
            "canonical" => Ok(ContrastiveForm::Canonical),
            other => Err(Error::InvalidArgument(format!("unknown contrastive form `{other}`"))),
        }
    }
}

/// How the encoder mixes neighbouring steps after the recurrent layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMixer {
    CausalConv,
    /// Per-step fully connected layer (the "no CNN" ablation).
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output vocabulary size including the padding slot 0.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub filter_height: usize,
    pub max_len: usize,
    pub critic_hidden: usize,
    pub alpha: f64,
    pub beta: f64,
    pub contrastive_form: ContrastiveForm,
    pub mixer: TimeMixer,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 128,
            hidden_dim: 100,
            latent_dim: 64,
            filter_height: 3,
            max_len: 200,
            critic_hidden: 256,
            alpha: 0.05,
            beta: 0.5,
            contrastive_form: ContrastiveForm::Literal,
            mixer: TimeMixer::CausalConv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("latent_dim", self.latent_dim),
            ("filter_height", self.filter_height),
            ("critic_hidden", self.critic_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidArgument("vocab_size must include at least one item".into()));
        }
        if self.max_len < 2 {
            return Err(Error::InvalidArgument("max_len must be >= 2".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::InvalidArgument("alpha and beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Which optimizer partition a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Decoder,
    Adversary,
    Contrast,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
}

/// Every learnable tensor of the model, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    params: Vec<Param<T>>,
}

fn uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(StandardNormal.sample(rng)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl<T: Real> ModelParams<T> {
    /// Random initialization: GRU weights `U(±1/√d)` with zero biases,
    /// other linear layers `U(±1/√fan_in)` with zero biases, embedding
    /// `N(0, 1)` with an all-zero padding row.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (v, e, d, z, h) = (
            config.vocab_size,
            config.embed_dim,
            config.hidden_dim,
            config.latent_dim,
            config.critic_hidden,
        );
        let mut params = Vec::new();
        let mut push = |name: &str, group: Group, value: Tensor<T>| {
            params.push(Param {
                name: name.to_string(),
                group,
                value,
            })
        };
        let mut embedding = normal::<T, _>(rng, &[v, e]);
        embedding.data_mut()[..e].iter_mut().for_each(|x| *x = T::zero());
        push("encoder.embedding", Group::Encoder, embedding);
        let gb = 1.0 / (d as f64).sqrt();
        push("encoder.gru.w_x", Group::Encoder, uniform(rng, &[e, 3 * d], gb));
        push("encoder.gru.bias", Group::Encoder, Tensor::zeros(&[3 * d]));
        push("encoder.gru.u_zr", Group::Encoder, uniform(rng, &[d, 2 * d], gb));
        push("encoder.gru.u_h", Group::Encoder, uniform(rng, &[d, d], gb));
        match config.mixer {
            TimeMixer::CausalConv => {
                let m = config.filter_height;
                push(
                    "encoder.conv.filter",
                    Group::Encoder,
                    uniform(rng, &[m, 1], 1.0 / (m as f64).sqrt()),
                );
            }
            TimeMixer::Dense => {
                push("encoder.dense.weight", Group::Encoder, uniform(rng, &[d, d], gb));
                push("encoder.dense.bias", Group::Encoder, Tensor::zeros(&[d]));
            }
        }
        push("encoder.out.weight", Group::Encoder, uniform(rng, &[d, z], gb));
        push("encoder.out.bias", Group::Encoder, Tensor::zeros(&[z]));
        let zb = 1.0 / (z as f64).sqrt();
        push("decoder.weight", Group::Decoder, uniform(rng, &[z, v], zb));
        push("decoder.bias", Group::Decoder, Tensor::zeros(&[v]));
        for (prefix, group) in [("adversary", Group::Adversary), ("contrast", Group::Contrast)] {
            let widths = [e + z, h, h, 1];
            for layer in 0..3 {
                let (fan_in, fan_out) = (widths[layer], widths[layer + 1]);
                push(
                    &format!("{prefix}.l{}.weight", layer + 1),
                    group,
                    uniform(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()),
                );
                push(
                    &format!("{prefix}.l{}.bias", layer + 1),
                    group,
                    Tensor::zeros(&[fan_out]),
                );
            }
        }
        Ok(ModelParams { config, params })
    }

    /// Rebuilds from named tensors, checking every expected name and shape.
    pub fn from_named(config: ModelConfig, mut named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = ModelParams::<T>::init(config, &mut rng)?;
        let mut params = Vec::with_capacity(template.params.len());
        for p in template.params {
            let pos = named
                .iter()
                .position(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{}`", p.name)))?;
            let (_, value) = named.swap_remove(pos);
            if value.shape() != p.value.shape() {
                return Err(Error::shape("parameter", p.value.shape(), value.shape()));
            }
            params.push(Param { value, ..p });
        }
        if let Some((n, _)) = named.first() {
            return Err(Error::Format(format!("unexpected parameter `{n}`")));
        }
        Ok(ModelParams {
            config: template.config,
            params,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.params[self.index_of(name).unwrap_or_else(|| panic!("no parameter `{name}`"))].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let i = self.index_of(name).unwrap_or_else(|| panic!("no parameter `{name}`"));
        &mut self.params[i].value
    }

    pub fn group_of(&self, index: usize) -> Group {
        self.params[index].group
    }

    /// Same weights in another float width.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Puts every parameter on `tape`; groups for which `trainable`
    /// returns false become constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(Group) -> bool) -> NetVars {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable(p.group) {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        let v = |name: &str| vars[self.index_of(name).expect("parameter layout")];
        let mixer = match self.config.mixer {
            TimeMixer::CausalConv => MixerVars::Conv {
                filter: v("encoder.conv.filter"),
            },
            TimeMixer::Dense => MixerVars::Dense {
                weight: v("encoder.dense.weight"),
                bias: v("encoder.dense.bias"),
            },
        };
        let mlp = |prefix: &str| MlpVars {
            layers: [1, 2, 3].map(|l| {
                (
                    v(&format!("{prefix}.l{l}.weight")),
                    v(&format!("{prefix}.l{l}.bias")),
                )
            }),
        };
        NetVars {
            embedding: v("encoder.embedding"),
            gru: GruVars {
                w_x: v("encoder.gru.w_x"),
                bias: v("encoder.gru.bias"),
                u_zr: v("encoder.gru.u_zr"),
                u_h: v("encoder.gru.u_h"),
            },
            mixer,
            out_w: v("encoder.out.weight"),
            out_b: v("encoder.out.bias"),
            dec_w: v("decoder.weight"),
            dec_b: v("decoder.bias"),
            adversary: mlp("adversary"),
            contrast: mlp("contrast"),
            all: vars,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum MixerVars {
    Conv { filter: Var },
    Dense { weight: Var, bias: Var },
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub layers: [(Var, Var); 3],
}

/// Model parameters bound to one tape.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub embedding: Var,
    pub gru: GruVars,
    pub mixer: MixerVars,
    pub out_w: Var,
    pub out_b: Var,
    pub dec_w: Var,
    pub dec_b: Var,
    pub adversary: MlpVars,
    pub contrast: MlpVars,
    /// Every parameter variable, in [`ModelParams`] order.
    pub all: Vec<Var>,
}

/// Two hidden leaky-rectifier layers and a scalar head, applied row-wise.
pub fn mlp_forward<T: Real>(tape: &mut Tape<T>, mlp: &MlpVars, input: Var) -> Result<Var> {
    let mut x = input;
    for (k, &(w, b)) in mlp.layers.iter().enumerate() {
        let xw = tape.matmul(x, w)?;
        x = tape.add_row(xw, b)?;
        if k < 2 {
            x = tape.leaky_relu(x, T::lit(LEAKY_SLOPE));
        }
    }
    Ok(x)
}

/// A free-standing critic with the same architecture as `T_Ψ` and `G_ω`,
/// for experiments outside the sequence model.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Mlp<T> {
    /// `input → hidden → hidden → 1`, initialized like the model's critics.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let widths = [input, hidden, hidden, 1];
        let layers = (0..3)
            .map(|l| {
                let bound = 1.0 / (widths[l] as f64).sqrt();
                (
                    uniform(rng, &[widths[l], widths[l + 1]], bound),
                    Tensor::zeros(&[widths[l + 1]]),
                )
            })
            .collect();
        Mlp { layers }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> MlpVars {
        let mut put = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let vars: Vec<(Var, Var)> = self.layers.iter().map(|(w, b)| (put(w), put(b))).collect();
        MlpVars {
            layers: vars.try_into().expect("three layers"),
        }
    }

    /// Scores every row of `x`: `[n × input]` → `n` values.
    pub fn scores(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let input = tape.constant(x.clone());
        let out = mlp_forward(&mut tape, &vars, input)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Trains the critic by logistic regression, `positive` rows labelled 1
    /// and `negative` rows 0, with Adam on random minibatches.
    /// Returns the final minibatch loss.
    pub fn fit_logistic(
        &mut self,
        positive: &Tensor<T>,
        negative: &Tensor<T>,
        steps: usize,
        batch: usize,
        learning_rate: f64,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        if positive.cols() != negative.cols() {
            return Err(Error::shape("fit_logistic", positive.shape(), negative.shape()));
        }
        let mut opt = OptimizerState::new(OptimizerConfig::adam(learning_rate, 0.0));
        let mut last = f64::NAN;
        let pick = |src: &Tensor<T>, rng: &mut dyn rand::RngCore| -> Result<Tensor<T>> {
            let n = src.rows();
            let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
            let mut data = Vec::with_capacity(batch * src.cols());
            for i in idx {
                data.extend_from_slice(src.row(i));
            }
            Tensor::new(vec![batch, src.cols()], data)
        };
        for _ in 0..steps {
            let pos = pick(positive, rng)?;
            let neg = pick(negative, rng)?;
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, true);
            let p_in = tape.constant(pos);
            let n_in = tape.constant(neg);
            let p = mlp_forward(&mut tape, &vars, p_in)?;
            let n = mlp_forward(&mut tape, &vars, n_in)?;
            let lp = tape.log_sigmoid(p);
            let nn = tape.scale(n, -T::one());
            let ln = tape.log_sigmoid(nn);
            let both = tape.add(lp, ln)?;
            let m = tape.mean(both)?;
            let loss = tape.scale(m, -T::one());
            last = tape.value(loss).item().as_f64();
            let grads = tape.backward(loss)?;
            let names = ["l1.w", "l1.b", "l2.w", "l2.b", "l3.w", "l3.b"];
            let flat: Vec<Var> = vars.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
            let gs: Vec<Vec<T>> = flat.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
            let mut targets: Vec<&mut Tensor<T>> =
                self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect();
            let mut updates: Vec<Update<'_, T>> = targets
                .iter_mut()
                .zip(&gs)
                .zip(names)
                .map(|((param, grad), name)| Update {
                    name,
                    param: &mut **param,
                    grad,
                })
                .collect();
            opt.step(&mut updates)?;
        }
        Ok(last)
    }
}

/// Draws `[rows × cols]` standard normal noise.
pub fn standard_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    normal(rng, &[rows, cols])
}

/// Time-major index of the input item at every step `< steps`.
pub fn time_major_inputs(batch: &PaddedBatch, steps: usize) -> Vec<usize> {
    let b = batch.batch;
    let mut idx = vec![0; steps * b];
    for t in 0..steps {
        for i in 0..b {
            idx[t * b + i] = batch.inputs[i * batch.max_len + t];
        }
    }
    idx
}

/// Encoder forward pass over the first `steps` positions of `batch`.
///
/// `epsilon` is the `[steps*b × hidden]` noise added after the recurrent
/// layer; `None` means ε = 0. Returns time-major latents `[steps*b × z]`.
pub fn encode_on_tape<T: Real>(
    tape: &mut Tape<T>,
    net: &NetVars,
    batch: &PaddedBatch,
    steps: usize,
    epsilon: Option<&Tensor<T>>,
) -> Result<Var> {
    let b = batch.batch;
    if steps == 0 || steps > batch.max_len {
        return Err(Error::InvalidArgument(format!(
            "steps must be in 1..={}, got {steps}",
            batch.max_len
        )));
    }
    let items = time_major_inputs(batch, steps);
    let emb = tape.gather_rows(net.embedding, &items)?;
    let xw = tape.matmul(emb, net.gru.w_x)?;
    let projected = tape.add_row(xw, net.gru.bias)?;
    let d = tape.shape(net.gru.u_h)[0];
    let mut h = tape.constant(Tensor::zeros(&[b, d]));
    let mut states = Vec::with_capacity(steps);
    for t in 0..steps {
        let x_t = tape.slice_rows(projected, t * b, b)?;
        h = gru_step(tape, &net.gru, x_t, h)?;
        states.push(h);
    }
    let raw = tape.concat_rows(&states)?;
    let mut hidden = tape.softplus(raw);
    if let Some(eps) = epsilon {
        if eps.shape() != [steps * b, d] {
            return Err(Error::shape("epsilon", eps.shape(), &[steps * b, d]));
        }
        let noise = tape.constant(eps.clone());
        hidden = tape.add(hidden, noise)?;
    }
    let mixed = match net.mixer {
        MixerVars::Conv { filter } => tape.causal_conv(hidden, filter, b)?,
        MixerVars::Dense { weight, bias } => {
            let hw = tape.matmul(hidden, weight)?;
            tape.add_row(hw, bias)?
        }
    };
    let c = tape.add(hidden, mixed)?;
    let activated = tape.softplus(c);
    let zw = tape.matmul(activated, net.out_w)?;
    tape.add_row(zw, net.out_b)
}

/// Decoder logits for a stack of latents `[rows × z]` → `[rows × V]`.
pub fn decode_on_tape<T: Real>(tape: &mut Tape<T>, net: &NetVars, z: Var) -> Result<Var> {
    let zw = tape.matmul(z, net.dec_w)?;
    tape.add_row(zw, net.dec_b)
}

/// Positions that carry a next-item target, in time-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Positions {
    /// Row in the time-major latent matrix.
    pub rows: Vec<usize>,
    /// Row index inside the batch (user slot).
    pub slots: Vec<usize>,
    /// Step index.
    pub steps: Vec<usize>,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Positions {
    pub fn of(batch: &PaddedBatch, steps: usize) -> Self {
        let b = batch.batch;
        let mut p = Positions {
            rows: Vec::new(),
            slots: Vec::new(),
            steps: Vec::new(),
            inputs: Vec::new(),
            targets: Vec::new(),
        };
        for t in 0..steps.min(batch.max_len) {
            for i in 0..b {
                let k = i * batch.max_len + t;
                if batch.mask[k] {
                    p.rows.push(t * b + i);
                    p.slots.push(i);
                    p.steps.push(t);
                    p.inputs.push(batch.inputs[k]);
                    p.targets.push(batch.targets[k]);
                }
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Latent rows of the user at slot `perm[i]` for every position. When
    /// that user's sequence is shorter, its last real step stands in, so
    /// no negative is ever read from padding.
    pub fn permuted_rows(&self, perm: &[usize], lengths: &[usize]) -> Vec<usize> {
        let batch = lengths.len();
        self.steps
            .iter()
            .zip(&self.slots)
            .map(|(&t, &i)| {
                let j = perm[i];
                t.min(lengths[j].saturating_sub(1)) * batch + j
            })
            .collect()
    }
}

/// Embedding rows of `items` as a constant (critics see `x` as data).
pub fn item_features<T: Real>(params: &ModelParams<T>, items: &[usize]) -> Tensor<T> {
    let table = params.get("encoder.embedding");
    let e = table.cols();
    let mut out = Vec::with_capacity(items.len() * e);
    for &i in items {
        out.extend_from_slice(table.row(i));
    }
    Tensor::new(vec![items.len(), e], out).expect("shape")
}

/// Scores a critic on `(x_t, z_t)` pairs: `[rows × 1]`.
pub fn critic_on_tape<T: Real>(
    tape: &mut Tape<T>,
    mlp: &MlpVars,
    features: Var,
    z_rows: Var,
) -> Result<Var> {
    let input = tape.concat_cols(features, z_rows)?;
    mlp_forward(tape, mlp, input)
}

/// Uniform random permutation of `0..n` without fixed points, by rejection.
pub fn derangement(n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::BatchTooSmall);
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Negative log of the contrastive critic's decisions, per position.
pub fn contrastive_on_tape<T: Real>(
    tape: &mut Tape<T>,
    form: ContrastiveForm,
    positive: Var,
    negative: Var,
) -> Result<Var> {
    let pos = tape.log_sigmoid(positive);
    let neg_arg = match form {
        ContrastiveForm::Literal => tape.affine(negative, -T::one(), T::one()),
        ContrastiveForm::Canonical => tape.scale(negative, -T::one()),
    };
    let neg = tape.log_sigmoid(neg_arg);
    let both = tape.add(pos, neg)?;
    let m = tape.mean(both)?;
    Ok(tape.scale(m, -T::one()))
}

/// Scalar diagnostics of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub loss: f64,
    pub recon: f64,
    pub adv_term: f64,
    pub contrast: f64,
}

/// Randomness consumed by one evaluation of the VAE objective.
#[derive(Clone, Debug)]
pub struct VaeNoise<T> {
    pub epsilon: Option<Tensor<T>>,
    pub permutation: Option<Vec<usize>>,
}

impl<T: Real> VaeNoise<T> {
    pub fn sample(rng: &mut impl Rng, batch: &PaddedBatch, steps: usize, hidden: usize, beta: f64) -> Result<Self> {
        let epsilon = Some(standard_normal(rng, steps * batch.batch, hidden));
        let permutation = if beta > 0.0 {
            Some(derangement(batch.batch, rng)?)
        } else {
            None
        };
        Ok(VaeNoise {
            epsilon,
            permutation,
        })
    }
}

/// Builds the loss minimized over (φ, θ, ω):
/// `recon + α · mean(T(x, z)) + β · L_contrast`, every term averaged over
/// the positions that have a next-item target.
///
/// Ψ should be bound as constant: the adversary term carries gradient into
/// the encoder only. The critics' item features are read from `params` as
/// constants; the embedding learns through the encoder path alone.
pub fn vae_objective_on_tape<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    net: &NetVars,
    batch: &PaddedBatch,
    steps: usize,
    noise: &VaeNoise<T>,
) -> Result<(Var, ObjectiveTerms)> {
    let cfg = &params.config;
    let pos = Positions::of(batch, steps);
    if pos.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let z = encode_on_tape(tape, net, batch, steps, noise.epsilon.as_ref())?;
    let z_rows = tape.gather_rows(z, &pos.rows)?;
    let logits = decode_on_tape(tape, net, z_rows)?;
    let all = vec![true; pos.len()];
    let recon = tape.softmax_cross_entropy(logits, &pos.targets, &all)?;
    let mut terms = ObjectiveTerms {
        recon: tape.value(recon).item().as_f64(),
        ..Default::default()
    };
    let mut loss = recon;

    let needs_features = cfg.alpha > 0.0 || cfg.beta > 0.0;
    let features = if needs_features {
        Some(tape.constant(item_features(params, &pos.inputs)))
    } else {
        None
    };
    if cfg.alpha > 0.0 {
        let scores = critic_on_tape(tape, &net.adversary, features.unwrap(), z_rows)?;
        let kl = tape.mean(scores)?;
        terms.adv_term = tape.value(kl).item().as_f64();
        let weighted = tape.scale(kl, T::lit(cfg.alpha));
        loss = tape.add(loss, weighted)?;
    }
    if cfg.beta > 0.0 {
        let perm = noise
            .permutation
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("contrastive term needs a permutation".into()))?;
        let shuffled = tape.gather_rows(z, &pos.permuted_rows(perm, &batch.lengths))?;
        let positive = critic_on_tape(tape, &net.contrast, features.unwrap(), z_rows)?;
        let negative = critic_on_tape(tape, &net.contrast, features.unwrap(), shuffled)?;
        let lc = contrastive_on_tape(tape, cfg.contrastive_form, positive, negative)?;
        terms.contrast = tape.value(lc).item().as_f64();
        let weighted = tape.scale(lc, T::lit(cfg.beta));
        loss = tape.add(loss, weighted)?;
    }
    terms.loss = tape.value(loss).item().as_f64();
    Ok((loss, terms))
}

/// The adversary's objective (to be maximized over Ψ):
/// `Σ_t [log σ(T(x, z_post)) + log(1 − σ(T(x, z_prior)))] / b`.
///
/// `z_post` and `z_prior` are `[positions × z]` in [`Positions`] order.
pub fn adversary_objective_on_tape<T: Real>(
    tape: &mut Tape<T>,
    net: &NetVars,
    features: Var,
    z_post: Var,
    z_prior: Var,
    batch_size: usize,
) -> Result<Var> {
    let post = critic_on_tape(tape, &net.adversary, features, z_post)?;
    let prior = critic_on_tape(tape, &net.adversary, features, z_prior)?;
    let a = tape.log_sigmoid(post);
    let neg = tape.scale(prior, -T::one());
    let b = tape.log_sigmoid(neg);
    let both = tape.add(a, b)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, T::one() / T::lit(batch_size as f64)))
}

// ---------------------------------------------------------------------------
// Tensor-level entry points. Each builds a throwaway tape with every
// parameter bound as a constant.

/// Per-user per-step latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSeq<T> {
    /// `[b × M × z]`, batch-major.
    pub z: Tensor<T>,
}

fn to_batch_major<T: Real>(tm: &Tensor<T>, batch: usize, steps: usize, max_len: usize) -> Tensor<T> {
    let c = tm.cols();
    let mut out = Tensor::zeros(&[batch, max_len, c]);
    let data = out.data_mut();
    for t in 0..steps {
        for i in 0..batch {
            data[(i * max_len + t) * c..(i * max_len + t + 1) * c].copy_from_slice(tm.row(t * batch + i));
        }
    }
    out
}

fn to_time_major<T: Real>(bm: &Tensor<T>, batch: usize, steps: usize) -> Result<Tensor<T>> {
    let s = bm.shape();
    if s.len() != 3 || s[0] != batch || s[1] < steps {
        return Err(Error::shape("latents", s, &[batch, steps]));
    }
    let (m, c) = (s[1], s[2]);
    let mut out = Vec::with_capacity(steps * batch * c);
    for t in 0..steps {
        for i in 0..batch {
            out.extend_from_slice(&bm.data()[(i * m + t) * c..(i * m + t + 1) * c]);
        }
    }
    Tensor::new(vec![steps * batch, c], out)
}

/// Encodes all `M` positions. `rng = None` runs with ε = 0.
pub fn encode<T: Real>(
    params: &ModelParams<T>,
    batch: &PaddedBatch,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<LatentSeq<T>> {
    let steps = batch.max_len;
    let eps = rng.map(|r| standard_normal::<T, _>(r, steps * batch.batch, params.config.hidden_dim));
    let mut tape = Tape::new();
    let net = params.bind(&mut tape, |_| false);
    let z = encode_on_tape(&mut tape, &net, batch, steps, eps.as_ref())?;
    Ok(LatentSeq {
        z: to_batch_major(tape.value(z), batch.batch, steps, steps),
    })
}

/// Logits `[b × M × V]` for latents `[b × M × z]`.
pub fn decode<T: Real>(params: &ModelParams<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    let s = z.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("decode", &s, &[0, 0, 0]));
    }
    let mut tape = Tape::new();
    let net = params.bind(&mut tape, |_| false);
    let flat = tape.constant(z.clone().reshape(vec![s[0] * s[1], s[2]])?);
    let logits = decode_on_tape(&mut tape, &net, flat)?;
    tape.value(logits)
        .clone()
        .reshape(vec![s[0], s[1], params.config.vocab_size])
}

/// Mean next-item negative log-likelihood over masked positions of
/// `[b × M × V]` logits.
pub fn reconstruction_term<T: Real>(logits: &Tensor<T>, batch: &PaddedBatch) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 3 || s[0] != batch.batch || s[1] != batch.max_len {
        return Err(Error::shape("reconstruction_term", s, &[batch.batch, batch.max_len]));
    }
    let mut tape = Tape::new();
    let flat = tape.constant(logits.clone().reshape(vec![s[0] * s[1], s[2]])?);
    let loss = tape.softmax_cross_entropy(flat, &batch.targets, &batch.mask)?;
    Ok(tape.value(loss).item().as_f64())
}

fn critic_scores<T: Real>(
    params: &ModelParams<T>,
    batch: &PaddedBatch,
    z: &Tensor<T>,
    pick: impl Fn(&NetVars) -> MlpVars,
) -> Result<Tensor<T>> {
    let (b, m) = (batch.batch, batch.max_len);
    let zs = z.shape();
    if zs.len() != 3 || zs[0] != b || zs[1] != m {
        return Err(Error::shape("critic", zs, &[b, m]));
    }
    let mut tape = Tape::new();
    let net = params.bind(&mut tape, |_| false);
    let features = tape.constant(item_features(params, &batch.inputs));
    let flat = tape.constant(z.clone().reshape(vec![b * m, zs[2]])?);
    let scores = critic_on_tape(&mut tape, &pick(&net), features, flat)?;
    tape.value(scores).clone().reshape(vec![b, m])
}

/// `T_Ψ(x_t, z_t)` for every `(user, step)`: `[b × M]`.
pub fn adversary_score<T: Real>(params: &ModelParams<T>, batch: &PaddedBatch, z: &Tensor<T>) -> Result<Tensor<T>> {
    critic_scores(params, batch, z, |n| n.adversary)
}

/// `G_ω(x_t, z_t)` for every `(user, step)`: `[b × M]`.
pub fn contrast_score<T: Real>(params: &ModelParams<T>, batch: &PaddedBatch, z: &Tensor<T>) -> Result<Tensor<T>> {
    critic_scores(params, batch, z, |n| n.contrast)
}

/// Adversary scores used as the KL surrogate; masked positions are 0.
pub fn kl_estimate<T: Real>(params: &ModelParams<T>, batch: &PaddedBatch, z: &Tensor<T>) -> Result<Tensor<T>> {
    let mut s = adversary_score(params, batch, z)?;
    for (x, &m) in s.data_mut().iter_mut().zip(&batch.mask) {
        if !m {
            *x = T::zero();
        }
    }
    Ok(s)
}

/// Adversary objective for batch-major latents.
pub fn adversary_objective<T: Real>(
    params: &ModelParams<T>,
    batch: &PaddedBatch,
    z_post: &Tensor<T>,
    z_prior: &Tensor<T>,
) -> Result<f64> {
    let steps = batch.max_len;
    let pos = Positions::of(batch, steps);
    if pos.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut tape = Tape::new();
    let net = params.bind(&mut tape, |_| false);
    let features = tape.constant(item_features(params, &pos.inputs));
    let post_tm = tape.constant(to_time_major(z_post, batch.batch, steps)?);
    let prior_tm = tape.constant(to_time_major(z_prior, batch.batch, steps)?);
    let post = tape.gather_rows(post_tm, &pos.rows)?;
    let prior = tape.gather_rows(prior_tm, &pos.rows)?;
    let obj = adversary_objective_on_tape(&mut tape, &net, features, post, prior, batch.batch)?;
    Ok(tape.value(obj).item().as_f64())
}

/// Permutes the user axis of `[b × M × z]` latents with a derangement.
/// Returns the shuffled tensor and the permutation (`out[i] = z[perm[i]]`).
pub fn shuffle_latents<T: Real>(z: &Tensor<T>, rng: &mut impl Rng) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = z.shape();
    if s.len() != 3 {
        return Err(Error::shape("shuffle_latents", s, &[0, 0, 0]));
    }
    let perm = derangement(s[0], rng)?;
    let block = s[1] * s[2];
    let mut out = Vec::with_capacity(z.len());
    for &p in &perm {
        out.extend_from_slice(&z.data()[p * block..(p + 1) * block]);
    }
    Ok((Tensor::new(s.to_vec(), out)?, perm))
}

/// Contrastive loss for batch-major positive and shuffled latents.
/// `z_shuffled` is used as given at every masked position.
pub fn contrastive_loss<T: Real>(
    params: &ModelParams<T>,
    batch: &PaddedBatch,
    z: &Tensor<T>,
    z_shuffled: &Tensor<T>,
    form: ContrastiveForm,
) -> Result<f64> {
    let steps = batch.max_len;
    let pos = Positions::of(batch, steps);
    if pos.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut tape = Tape::new();
    let net = params.bind(&mut tape, |_| false);
    let features = tape.constant(item_features(params, &pos.inputs));
    let z_tm = tape.constant(to_time_major(z, batch.batch, steps)?);
    let zs_tm = tape.constant(to_time_major(z_shuffled, batch.batch, steps)?);
    let zr = tape.gather_rows(z_tm, &pos.rows)?;
    let zsr = tape.gather_rows(zs_tm, &pos.rows)?;
    let p = critic_on_tape(&mut tape, &net.contrast, features, zr)?;
    let n = critic_on_tape(&mut tape, &net.contrast, features, zsr)?;
    let l = contrastive_on_tape(&mut tape, form, p, n)?;
    Ok(tape.value(l).item().as_f64())
}

/// Evaluates the (φ, θ, ω) objective once with fresh noise from `rng`.
pub fn full_objective<T: Real>(
    params: &ModelParams<T>,
    batch: &PaddedBatch,
    rng: &mut impl Rng,
) -> Result<ObjectiveTerms> {
    let steps = batch.active_len().max(1);
    let noise = VaeNoise::sample(rng, batch, steps, params.config.hidden_dim, params.config.beta)?;
    let mut tape = Tape::new();
    let net = params.bind(&mut tape, |_| false);
    let (_, terms) = vae_objective_on_tape(&mut tape, params, &net, batch, steps, &noise)?;
    Ok(terms)
}
