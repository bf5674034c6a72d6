//! Alternating optimization: even iterations step the encoder, decoder
//! and contrast critic against the full loss; odd iterations step the
//! adversary against its own objective.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::container::{Buffer, Container};
use crate::data::{make_batches, Dataset, PaddedBatch};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, MetricsReport};
use crate::model::{
    adversary_objective_on_tape, encode_on_tape, item_features, standard_normal, vae_objective_on_tape,
    ContrastiveForm, Group, ModelConfig, ModelParams, NetVars, Positions, TimeMixer, VaeNoise,
};
use crate::optim::{clip_global_norm, Moments, OptimizerConfig, OptimizerState, Update};
use crate::tensor::{DType, Real, Tensor};

/// Components switched off for an ablation run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    pub no_avb: bool,
    pub no_contrastive: bool,
    pub no_cnn: bool,
}

impl Ablation {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_avb {
            parts.push("no_avb");
        }
        if self.no_contrastive {
            parts.push("no_contrastive");
        }
        if self.no_cnn {
            parts.push("no_cnn");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    /// Comma- or plus-separated switch names; `full` or empty for none.
    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "full" | "none" => {}
                "no_avb" => a.no_avb = true,
                "no_contrastive" => a.no_contrastive = true,
                "no_cnn" => a.no_cnn = true,
                other => return Err(Error::InvalidArgument(format!("unknown ablation `{other}`"))),
            }
        }
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub vae_optimizer: OptimizerConfig,
    /// Used for both the adversary and the contrast critic.
    pub critic_optimizer: OptimizerConfig,
    pub clip_norm: f64,
    /// Evaluate every this many epochs; 0 disables.
    pub eval_every: usize,
    /// Run the adversary step on the same batch as the preceding VAE step.
    pub same_batch: bool,
    pub exclude_train: bool,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub filter_height: usize,
    pub critic_hidden: usize,
    pub contrastive_form: ContrastiveForm,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 64,
            max_len: 200,
            seed: 0,
            alpha: 0.05,
            beta: 0.5,
            vae_optimizer: OptimizerConfig::adam(1e-4, 1e-2),
            critic_optimizer: OptimizerConfig::sgd(5e-4, 1e-1),
            clip_norm: 5.0,
            eval_every: 0,
            same_batch: false,
            exclude_train: true,
            embed_dim: 128,
            hidden_dim: 100,
            latent_dim: 64,
            filter_height: 3,
            critic_hidden: 256,
            contrastive_form: ContrastiveForm::Literal,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        for (name, o) in [("vae_optimizer", &self.vae_optimizer), ("critic_optimizer", &self.critic_optimizer)] {
            if !(o.learning_rate > 0.0) || !(o.weight_decay >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name}: learning rate must be > 0 and weight decay >= 0"
                )));
            }
        }
        if self.batch_size < 2 && self.effective_beta() > 0.0 {
            return Err(Error::BatchTooSmall);
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument("clip_norm must be > 0".into()));
        }
        Ok(())
    }

    /// Effective adversary weight after ablation switches.
    pub fn effective_alpha(&self) -> f64 {
        if self.ablation.no_avb {
            0.0
        } else {
            self.alpha
        }
    }

    pub fn effective_beta(&self) -> f64 {
        if self.ablation.no_contrastive {
            0.0
        } else {
            self.beta
        }
    }

    /// Whether odd iterations train the adversary.
    pub fn adversary_active(&self) -> bool {
        self.effective_alpha() > 0.0
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            latent_dim: self.latent_dim,
            filter_height: self.filter_height,
            max_len: self.max_len,
            critic_hidden: self.critic_hidden,
            alpha: self.effective_alpha(),
            beta: self.effective_beta(),
            contrastive_form: self.contrastive_form,
            mixer: if self.ablation.no_cnn {
                TimeMixer::Dense
            } else {
                TimeMixer::CausalConv
            },
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Independent random streams, keyed so that any iteration or epoch can be
/// replayed without running the ones before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Noise = 3,
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 56) | (index & ((1 << 56) - 1)));
    rng
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    use rand::Rng;
    stream_rng(seed, Stream::Shuffle, epoch as u64).random()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StepKind {
    Vae,
    Adversary,
}

/// One row of the per-iteration loss log. Terms that a step does not
/// compute are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: u64,
    pub epoch: usize,
    pub kind: StepKind,
    pub recon: Option<f64>,
    pub adv_term: Option<f64>,
    pub contrast: Option<f64>,
    pub psi_objective: Option<f64>,
}

pub fn losses_csv(log: &[LossRecord]) -> String {
    let f = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
    let mut out = String::from("iter,epoch,recon,adv_term,contrast,psi_objective\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iter,
            r.epoch,
            f(r.recon),
            f(r.adv_term),
            f(r.contrast),
            f(r.psi_objective)
        ));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub recon: f64,
    pub adv_term: f64,
    pub contrast: f64,
    pub psi_objective: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub config_hash: String,
    pub model: ModelConfig,
    pub precision: DType,
    pub dataset_fingerprint: String,
    pub epochs: Vec<EpochSummary>,
    pub metrics: Vec<EpochMetrics>,
    pub started_at: String,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    /// Highest Recall@k over the metric history.
    pub fn best_recall(&self, k: usize) -> Option<f64> {
        self.metrics
            .iter()
            .filter_map(|m| m.report.at(k).map(|r| r.recall))
            .fold(None, |acc, r| Some(acc.map_or(r, |a: f64| a.max(r))))
    }

    pub fn best_ndcg(&self, k: usize) -> Option<f64> {
        self.metrics
            .iter()
            .filter_map(|m| m.report.at(k).map(|r| r.ndcg))
            .fold(None, |acc, r| Some(acc.map_or(r, |a: f64| a.max(r))))
    }
}

/// Training state: parameters, optimizer moments, counters and logs.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real> {
    pub config: TrainConfig,
    pub params: ModelParams<T>,
    pub vae_opt: OptimizerState<T>,
    pub adversary_opt: OptimizerState<T>,
    pub contrast_opt: OptimizerState<T>,
    /// Global iteration counter `i`.
    pub iteration: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<LossRecord>,
    pub manifest: RunManifest,
}

struct Collected<T> {
    indices: Vec<usize>,
    grads: Vec<Vec<T>>,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let model = config.model_config(dataset.vocab_size());
        let mut rng = stream_rng(config.seed, Stream::Init, 0);
        let params = ModelParams::init(model.clone(), &mut rng)?;
        Ok(Trainer {
            vae_opt: OptimizerState::new(config.vae_optimizer),
            adversary_opt: OptimizerState::new(config.critic_optimizer),
            contrast_opt: OptimizerState::new(config.critic_optimizer),
            iteration: 0,
            epoch: 0,
            log: Vec::new(),
            manifest: RunManifest {
                config_hash: config.hash(),
                config: config.clone(),
                model,
                precision: T::DTYPE,
                dataset_fingerprint: dataset.fingerprint(),
                epochs: Vec::new(),
                metrics: Vec::new(),
                started_at: chrono::Utc::now().to_rfc3339(),
                wall_clock_seconds: 0.0,
            },
            config,
            params,
        })
    }

    fn collect(&self, tape: &Tape<T>, grads: &Gradients<T>, vars: &[Var], groups: &[Group]) -> Collected<T> {
        let mut out = Collected {
            indices: Vec::new(),
            grads: Vec::new(),
        };
        for (i, p) in self.params.iter().enumerate() {
            if groups.contains(&p.group) {
                let mut g = grads.get_or_zeros(tape, vars[i]);
                if p.name == "encoder.embedding" {
                    // Padding row stays at zero.
                    let e = p.value.cols();
                    g[..e].iter_mut().for_each(|x| *x = T::zero());
                }
                out.indices.push(i);
                out.grads.push(g);
            }
        }
        out
    }

    fn apply(params: &mut ModelParams<T>, opt: &mut OptimizerState<T>, indices: &[usize], grads: &[Vec<T>]) -> Result<()> {
        let mut slots: Vec<Option<&mut crate::model::Param<T>>> = params.params_mut().iter_mut().map(Some).collect();
        let mut updates = Vec::with_capacity(indices.len());
        for (&i, g) in indices.iter().zip(grads) {
            let p = slots[i].take().expect("distinct parameter indices");
            updates.push(Update {
                name: &p.name,
                param: &mut p.value,
                grad: g,
            });
        }
        opt.step(&mut updates)
    }

    /// One step on (φ, θ, ω) with Ψ frozen.
    pub fn vae_step(&mut self, batch: &PaddedBatch) -> Result<LossRecord> {
        let steps = batch.active_len();
        let cfg = self.params.config.clone();
        let mut rng = stream_rng(self.config.seed, Stream::Noise, self.iteration);
        let noise = VaeNoise::sample(&mut rng, batch, steps, cfg.hidden_dim, cfg.beta)?;
        let use_contrast = cfg.beta > 0.0;
        let mut tape = Tape::new();
        let net = self
            .params
            .bind(&mut tape, |g| matches!(g, Group::Encoder | Group::Decoder) || (g == Group::Contrast && use_contrast));
        let (loss, terms) = vae_objective_on_tape(&mut tape, &self.params, &net, batch, steps, &noise)?;
        if !terms.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
            });
        }
        let grads = tape.backward(loss)?;
        let mut groups = vec![Group::Encoder, Group::Decoder];
        if use_contrast {
            groups.push(Group::Contrast);
        }
        let mut c = self.collect(&tape, &grads, &net.all, &groups);
        clip_global_norm(&mut c.grads, self.config.clip_norm);
        let (vae_idx, vae_g, con_idx, con_g) = split_by(&self.params, c, Group::Contrast);
        // Check both partitions before touching either.
        for (idx, g) in vae_idx.iter().zip(&vae_g).chain(con_idx.iter().zip(&con_g)) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(self.params.iter().nth(*idx).unwrap().name.clone()));
            }
        }
        Self::apply(&mut self.params, &mut self.vae_opt, &vae_idx, &vae_g)?;
        if use_contrast {
            Self::apply(&mut self.params, &mut self.contrast_opt, &con_idx, &con_g)?;
        }
        Ok(LossRecord {
            iter: self.iteration,
            epoch: self.epoch,
            kind: StepKind::Vae,
            recon: Some(terms.recon),
            adv_term: (cfg.alpha > 0.0).then_some(terms.adv_term),
            contrast: use_contrast.then_some(terms.contrast),
            psi_objective: None,
        })
    }

    fn adversary_graph(&self, tape: &mut Tape<T>, batch: &PaddedBatch, iteration: u64) -> Result<(NetVars, Var)> {
        let steps = batch.active_len();
        let pos = Positions::of(batch, steps);
        if pos.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let cfg = &self.params.config;
        let mut rng = stream_rng(self.config.seed, Stream::Noise, iteration);
        let eps = standard_normal::<T, _>(&mut rng, steps * batch.batch, cfg.hidden_dim);
        let prior = standard_normal::<T, _>(&mut rng, pos.len(), cfg.latent_dim);
        let net = self.params.bind(tape, |g| g == Group::Adversary);
        let z = encode_on_tape(tape, &net, batch, steps, Some(&eps))?;
        let z_post = tape.gather_rows(z, &pos.rows)?;
        let z_prior = tape.constant(prior);
        let features = tape.constant(item_features(&self.params, &pos.inputs));
        let objective = adversary_objective_on_tape(tape, &net, features, z_post, z_prior, batch.batch)?;
        Ok((net, objective))
    }

    /// The adversary objective on `batch` under the noise that iteration
    /// `iteration` draws, at the current parameters.
    pub fn adversary_objective_at(&self, batch: &PaddedBatch, iteration: u64) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, objective) = self.adversary_graph(&mut tape, batch, iteration)?;
        Ok(tape.value(objective).item().as_f64())
    }

    /// One ascent step on Ψ with everything else frozen.
    pub fn adversary_step(&mut self, batch: &PaddedBatch) -> Result<LossRecord> {
        let mut tape = Tape::new();
        let (net, objective) = self.adversary_graph(&mut tape, batch, self.iteration)?;
        let value = tape.value(objective).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
            });
        }
        let loss = tape.scale(objective, -T::one());
        let grads = tape.backward(loss)?;
        let mut c = self.collect(&tape, &grads, &net.all, &[Group::Adversary]);
        clip_global_norm(&mut c.grads, self.config.clip_norm);
        Self::apply(&mut self.params, &mut self.adversary_opt, &c.indices, &c.grads)?;
        Ok(LossRecord {
            iter: self.iteration,
            epoch: self.epoch,
            kind: StepKind::Adversary,
            recon: None,
            adv_term: None,
            contrast: None,
            psi_objective: Some(value),
        })
    }

    /// Runs iteration `self.iteration` on `batch`, choosing the step by
    /// parity. Without an adversary every iteration is a VAE step.
    pub fn iterate(&mut self, batch: &PaddedBatch) -> Result<LossRecord> {
        let record = if self.config.adversary_active() && self.iteration % 2 == 1 {
            self.adversary_step(batch)?
        } else {
            self.vae_step(batch)?
        };
        self.iteration += 1;
        self.log.push(record);
        Ok(record)
    }

    /// One pass over the dataset followed by optional evaluation.
    pub fn run_epoch(&mut self, dataset: &Dataset, eval_threads: usize) -> Result<EpochSummary> {
        let start = Instant::now();
        let mut batches: Vec<PaddedBatch> = make_batches(
            &dataset.sequences,
            self.config.max_len,
            self.config.batch_size,
            shuffle_seed(self.config.seed, self.epoch),
        )?
        .into_iter()
        .filter(|b| b.masked_positions() > 0)
        .collect();
        // A lone trailing user has no in-batch negative; fold it into the
        // previous batch.
        if batches.len() >= 2 && batches[batches.len() - 1].batch == 1 {
            let last = batches.pop().expect("len >= 2");
            let prev = batches.pop().expect("len >= 2");
            batches.push(prev.merge(&last)?);
        }
        if batches.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let first = self.log.len();
        let pair = self.config.same_batch && self.config.adversary_active();
        for batch in &batches {
            self.iterate(batch)?;
            if pair {
                self.iterate(batch)?;
            }
        }
        let records = &self.log[first..];
        let mean = |f: fn(&LossRecord) -> Option<f64>| {
            let v: Vec<f64> = records.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let summary = EpochSummary {
            epoch: self.epoch,
            recon: mean(|r| r.recon).unwrap_or(f64::NAN),
            adv_term: mean(|r| r.adv_term).unwrap_or(0.0),
            contrast: mean(|r| r.contrast).unwrap_or(0.0),
            psi_objective: mean(|r| r.psi_objective),
            seconds: start.elapsed().as_secs_f64(),
        };
        self.epoch += 1;
        self.manifest.epochs.push(summary);
        self.manifest.wall_clock_seconds += summary.seconds;
        if self.config.eval_every > 0 && self.epoch % self.config.eval_every == 0 {
            let mut opts = EvalOptions::new(self.config.max_len);
            opts.exclude_train = self.config.exclude_train;
            opts.threads = eval_threads;
            let report = evaluate(&self.params, dataset, &opts)?;
            log::info!(
                "epoch {} recall@10 {:.4} ndcg@10 {:.4}",
                self.epoch,
                report.at(10).map_or(f64::NAN, |r| r.recall),
                report.at(10).map_or(f64::NAN, |r| r.ndcg)
            );
            self.manifest.metrics.push(EpochMetrics {
                epoch: self.epoch,
                report,
            });
        }
        log::debug!(
            "epoch {} recon {:.4} adv {:.4} contrast {:.4} ({:.1}s)",
            summary.epoch,
            summary.recon,
            summary.adv_term,
            summary.contrast,
            summary.seconds
        );
        Ok(summary)
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn run(&mut self, dataset: &Dataset, eval_threads: usize) -> Result<()> {
        if dataset.fingerprint() != self.manifest.dataset_fingerprint {
            return Err(Error::InvalidArgument("dataset differs from the one this run started on".into()));
        }
        while self.epoch < self.config.epochs {
            self.run_epoch(dataset, eval_threads)?;
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        let opt_meta = |o: &OptimizerState<T>| serde_json::json!({"config": o.config, "step": o.step});
        let meta = serde_json::json!({
            "kind": "checkpoint",
            "dtype": T::DTYPE,
            "iteration": self.iteration,
            "epoch": self.epoch,
            "vae_opt": opt_meta(&self.vae_opt),
            "adversary_opt": opt_meta(&self.adversary_opt),
            "contrast_opt": opt_meta(&self.contrast_opt),
            "manifest": self.manifest,
            "log": self.log,
        });
        let mut c = Container::new(meta);
        for p in self.params.iter() {
            c.push_tensor(format!("param/{}", p.name), &p.value);
        }
        for (prefix, opt) in [
            ("vae_opt", &self.vae_opt),
            ("adversary_opt", &self.adversary_opt),
            ("contrast_opt", &self.contrast_opt),
        ] {
            for (name, m) in &opt.moments {
                c.push(format!("{prefix}.m/{name}"), vec![m.m.len()], Buffer::from_real(&m.m));
                c.push(format!("{prefix}.v/{name}"), vec![m.v.len()], Buffer::from_real(&m.v));
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = &c.meta;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("checkpoint") {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let field = |key: &str| meta.get(key).cloned().ok_or_else(|| Error::Format(format!("missing `{key}`")));
        let dtype: DType = serde_json::from_value(field("dtype")?)?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint holds {dtype:?} weights, requested {:?}",
                T::DTYPE
            )));
        }
        let manifest: RunManifest = serde_json::from_value(field("manifest")?)?;
        let log: Vec<LossRecord> = serde_json::from_value(field("log")?)?;
        let named = c
            .entries
            .iter()
            .filter_map(|e| e.name.strip_prefix("param/").map(|n| (n.to_string(), e)))
            .map(|(n, e)| Ok((n, Tensor::new(e.shape.clone(), e.data.to_real()?)?)))
            .collect::<Result<Vec<_>>>()?;
        let params = ModelParams::from_named(manifest.model.clone(), named)?;
        let restore = |prefix: &str| -> Result<OptimizerState<T>> {
            #[derive(Deserialize)]
            struct Meta {
                config: OptimizerConfig,
                step: u64,
            }
            let m: Meta = serde_json::from_value(field(prefix)?)?;
            let mut state = OptimizerState::new(m.config);
            state.step = m.step;
            let mprefix = format!("{prefix}.m/");
            for e in &c.entries {
                if let Some(name) = e.name.strip_prefix(&mprefix) {
                    let v = c.get(&format!("{prefix}.v/{name}"))?;
                    state.moments.insert(
                        name.to_string(),
                        Moments {
                            m: e.data.to_real()?,
                            v: v.data.to_real()?,
                        },
                    );
                }
            }
            Ok(state)
        };
        Ok(Trainer {
            config: manifest.config.clone(),
            vae_opt: restore("vae_opt")?,
            adversary_opt: restore("adversary_opt")?,
            contrast_opt: restore("contrast_opt")?,
            iteration: serde_json::from_value(field("iteration")?)?,
            epoch: serde_json::from_value(field("epoch")?)?,
            log,
            manifest,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Trainer::from_container(&Container::load(path)?)
    }
}

#[allow(clippy::type_complexity)]
fn split_by<T: Real>(
    params: &ModelParams<T>,
    c: Collected<T>,
    group: Group,
) -> (Vec<usize>, Vec<Vec<T>>, Vec<usize>, Vec<Vec<T>>) {
    let (mut ai, mut ag, mut bi, mut bg) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, g) in c.indices.into_iter().zip(c.grads) {
        if params.group_of(i) == group {
            bi.push(i);
            bg.push(g);
        } else {
            ai.push(i);
            ag.push(g);
        }
    }
    (ai, ag, bi, bg)
}

/// Trains from scratch and returns the final state.
pub fn train<T: Real>(dataset: &Dataset, config: TrainConfig, eval_threads: usize) -> Result<Trainer<T>> {
    let mut trainer = Trainer::new(config, dataset)?;
    trainer.run(dataset, eval_threads)?;
    Ok(trainer)
}

/// Trains one run per switch set and evaluates each at the end.
pub fn ablate<T: Real>(
    dataset: &Dataset,
    base: &TrainConfig,
    switches: &[Ablation],
    eval_threads: usize,
) -> Result<Vec<(Ablation, Trainer<T>, MetricsReport)>> {
    let mut out = Vec::with_capacity(switches.len());
    for &a in switches {
        let mut cfg = base.clone();
        cfg.ablation = a;
        let trainer = train::<T>(dataset, cfg, eval_threads)?;
        let mut opts = EvalOptions::new(base.max_len);
        opts.exclude_train = base.exclude_train;
        opts.threads = eval_threads;
        let report = evaluate(&trainer.params, dataset, &opts)?;
        out.push((a, trainer, report));
    }
    Ok(out)
}
