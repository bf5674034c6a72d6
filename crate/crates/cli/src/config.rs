//! Sectioned `key = value` run configuration.
//!
//! ```text
//! # comment
//! [train]
//! epochs = 300
//! [model]
//! latent_dim = 64
//! ```
//!
//! Unknown sections or keys are errors.

use std::str::FromStr;

use acvae::optim::OptimizerKind;
use acvae::train::TrainConfig;
use anyhow::{anyhow, bail, Context, Result};

pub const PRESETS: [(&str, &str); 4] = [
    ("ml-latest", include_str!("../presets/ml-latest.conf")),
    ("ml-1m", include_str!("../presets/ml-1m.conf")),
    ("ml-10m", include_str!("../presets/ml-10m.conf")),
    ("yelp", include_str!("../presets/yelp.conf")),
];

pub fn preset(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            anyhow!("unknown preset `{name}` (available: {})", names.join(", "))
        })
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("`{key}`: cannot parse `{value}`: {e}"))
}

/// Sets one `section.key` on `cfg`.
pub fn set(cfg: &mut TrainConfig, section: &str, key: &str, value: &str) -> Result<()> {
    let full = format!("{section}.{key}");
    let k = full.as_str();
    match k {
        "train.epochs" => cfg.epochs = parse(k, value)?,
        "train.batch_size" => cfg.batch_size = parse(k, value)?,
        "train.max_len" => cfg.max_len = parse(k, value)?,
        "train.seed" => cfg.seed = parse(k, value)?,
        "train.alpha" => cfg.alpha = parse(k, value)?,
        "train.beta" => cfg.beta = parse(k, value)?,
        "train.clip_norm" => cfg.clip_norm = parse(k, value)?,
        "train.eval_every" => cfg.eval_every = parse(k, value)?,
        "train.same_batch" => cfg.same_batch = parse(k, value)?,
        "train.exclude_train" => cfg.exclude_train = parse(k, value)?,
        "train.contrastive_form" => cfg.contrastive_form = parse(k, value)?,
        "train.ablation" => cfg.ablation = parse(k, value)?,
        "model.embed_dim" => cfg.embed_dim = parse(k, value)?,
        "model.hidden_dim" => cfg.hidden_dim = parse(k, value)?,
        "model.latent_dim" => cfg.latent_dim = parse(k, value)?,
        "model.filter_height" => cfg.filter_height = parse(k, value)?,
        "model.critic_hidden" => cfg.critic_hidden = parse(k, value)?,
        "optimizer.vae" => cfg.vae_optimizer.kind = parse::<OptimizerKind>(k, value)?,
        "optimizer.vae_lr" => cfg.vae_optimizer.learning_rate = parse(k, value)?,
        "optimizer.vae_l2" => cfg.vae_optimizer.weight_decay = parse(k, value)?,
        "optimizer.critic" => cfg.critic_optimizer.kind = parse::<OptimizerKind>(k, value)?,
        "optimizer.critic_lr" => cfg.critic_optimizer.learning_rate = parse(k, value)?,
        "optimizer.critic_l2" => cfg.critic_optimizer.weight_decay = parse(k, value)?,
        _ => bail!("unknown config key `{full}`"),
    }
    Ok(())
}

/// Applies a config text on top of `cfg`.
pub fn apply(cfg: &mut TrainConfig, text: &str) -> Result<()> {
    let mut section = String::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = || format!("line {}", n + 1);
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| anyhow!("{}: unterminated section header", at()))?
                .trim();
            if !["train", "model", "optimizer"].contains(&name) {
                bail!("{}: unknown section `[{name}]`", at());
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}: expected `key = value`", at()))?;
        if section.is_empty() {
            bail!("{}: `{}` appears before any section", at(), key.trim());
        }
        set(cfg, &section, key.trim(), value.trim()).with_context(at)?;
    }
    Ok(())
}

/// Renders every field in the same format `apply` reads.
pub fn render(cfg: &TrainConfig) -> String {
    let kind = |k: OptimizerKind| match k {
        OptimizerKind::Adam => "adam",
        OptimizerKind::Sgd => "sgd",
    };
    let form = match cfg.contrastive_form {
        acvae::model::ContrastiveForm::Literal => "literal",
        acvae::model::ContrastiveForm::Canonical => "canonical",
    };
    format!(
        "[train]\nepochs = {}\nbatch_size = {}\nmax_len = {}\nseed = {}\nalpha = {}\nbeta = {}\n\
         clip_norm = {}\neval_every = {}\nsame_batch = {}\nexclude_train = {}\ncontrastive_form = {}\n\
         ablation = {}\n\n[model]\nembed_dim = {}\nhidden_dim = {}\nlatent_dim = {}\nfilter_height = {}\n\
         critic_hidden = {}\n\n[optimizer]\nvae = {}\nvae_lr = {}\nvae_l2 = {}\ncritic = {}\n\
         critic_lr = {}\ncritic_l2 = {}\n",
        cfg.epochs,
        cfg.batch_size,
        cfg.max_len,
        cfg.seed,
        cfg.alpha,
        cfg.beta,
        cfg.clip_norm,
        cfg.eval_every,
        cfg.same_batch,
        cfg.exclude_train,
        form,
        cfg.ablation.label(),
        cfg.embed_dim,
        cfg.hidden_dim,
        cfg.latent_dim,
        cfg.filter_height,
        cfg.critic_hidden,
        kind(cfg.vae_optimizer.kind),
        cfg.vae_optimizer.learning_rate,
        cfg.vae_optimizer.weight_decay,
        kind(cfg.critic_optimizer.kind),
        cfg.critic_optimizer.learning_rate,
        cfg.critic_optimizer.weight_decay,
    )
}
