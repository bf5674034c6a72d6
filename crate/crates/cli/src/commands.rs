use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use acvae::container::Container;
use acvae::data::{Dataset, InputFormat, PreprocessConfig};
use acvae::eval::{corr_metric, evaluate as eval_metrics, toy_avb_demo, CorrReport, EvalOptions, MetricsReport, ToyOptions};
use acvae::tensor::DType;
use acvae::train::{losses_csv, Ablation, EpochMetrics, TrainConfig, Trainer};
use acvae::Real;
use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;

use crate::config;
use crate::{Precision, TrainArgs};

pub const MANIFEST: &str = "manifest.json";
pub const LOSSES: &str = "losses.csv";
pub const METRICS: &str = "metrics.csv";
pub const CHECKPOINT: &str = "checkpoint.acvae";
pub const CONFIG: &str = "config.conf";

/// Bad flags, config or input data.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A NaN or infinity stopped training.
#[derive(Debug)]
pub struct NumericFailure {
    pub message: String,
    pub last_good: Option<PathBuf>,
}

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.last_good {
            Some(p) => write!(f, "{}; last good checkpoint: {}", self.message, p.display()),
            None => write!(f, "{}; no checkpoint was written", self.message),
        }
    }
}

impl std::error::Error for NumericFailure {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    use acvae::Error as E;
    for cause in err.chain() {
        if cause.is::<NumericFailure>() {
            return 3;
        }
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::NonFiniteLoss { .. } | E::NonFiniteGradient(_) => 3,
                E::Parse { .. }
                | E::EmptyDataset
                | E::BatchTooSmall
                | E::InvalidArgument(_)
                | E::Format(_)
                | E::File { .. }
                | E::Json(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn usage(e: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(Usage(format!("{e:#}")))
}

/// Worker count from `ACVAE_NUM_THREADS`, else the machine's parallelism.
pub fn num_threads() -> usize {
    std::env::var("ACVAE_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn stamp(cfg: &TrainConfig) -> String {
    format!("# config_hash={} seed={}\n", cfg.hash(), cfg.seed)
}

pub fn preprocess(
    input: &Path,
    format: InputFormat,
    out: &Path,
    min_user: usize,
    min_item: usize,
    threshold: f64,
) -> Result<()> {
    let cfg = PreprocessConfig {
        threshold,
        min_user,
        min_item,
    };
    let dataset = Dataset::from_file(input, format, &cfg)?;
    dataset.save(out)?;
    let stats = dataset.stats();
    let sidecar = json!({
        "input": input.display().to_string(),
        "format": format,
        "preprocess": cfg,
        "stats": stats,
        "fingerprint": dataset.fingerprint(),
    });
    let mut name = out.as_os_str().to_owned();
    name.push(".stats.json");
    write(Path::new(&name), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    println!("{stats}");
    Ok(())
}

/// Preset, then config file, then `--set`, then dedicated flags.
pub fn resolve_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let build = |cfg: &mut TrainConfig| -> Result<()> {
        if let Some(name) = &args.preset {
            config::apply(cfg, config::preset(name)?).with_context(|| format!("preset {name}"))?;
        }
        if let Some(path) = &args.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            config::apply(cfg, &text).with_context(|| path.display().to_string())?;
        }
        for o in &args.overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects section.key=value, got `{o}`"))?;
            let (section, key) = key
                .split_once('.')
                .ok_or_else(|| anyhow!("--set expects section.key=value, got `{o}`"))?;
            config::set(cfg, section.trim(), key.trim(), value.trim())?;
        }
        if let Some(v) = args.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = args.beta {
            cfg.beta = v;
        }
        if let Some(v) = args.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = args.seed {
            cfg.seed = v;
        }
        if let Some(v) = args.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = args.max_len {
            cfg.max_len = v;
        }
        if let Some(v) = args.eval_every {
            cfg.eval_every = v;
        }
        if let Some(a) = &args.ablation {
            cfg.ablation = a.parse()?;
        }
        cfg.validate()?;
        Ok(())
    };
    build(&mut cfg).map_err(usage)?;
    if args.checkpoint_every == 0 {
        bail!(Usage("--checkpoint-every must be >= 1".into()));
    }
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

/// Final numbers of one training run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config: TrainConfig,
    pub report: MetricsReport,
    pub best_recall10: Option<f64>,
    pub corr: Option<CorrReport>,
}

fn write_run_files<T: Real>(trainer: &Trainer<T>, out_dir: &Path) -> Result<()> {
    let cfg = &trainer.config;
    write(&out_dir.join(CONFIG), stamp(cfg) + &config::render(cfg))?;
    write(&out_dir.join(MANIFEST), serde_json::to_string_pretty(&trainer.manifest)? + "\n")?;
    write(&out_dir.join(LOSSES), stamp(cfg) + &losses_csv(&trainer.log))?;
    let mut metrics = stamp(cfg) + "epoch,k,recall,ndcg,mrr\n";
    for m in &trainer.manifest.metrics {
        for r in &m.report.rows {
            metrics.push_str(&format!("{},{},{},{},{}\n", m.epoch, r.k, r.recall, r.ndcg, r.mrr));
        }
    }
    write(&out_dir.join(METRICS), metrics)
}

/// Trains into `out_dir`, checkpointing as it goes, and evaluates at the end.
fn run_training<T: Real>(
    dataset: &Dataset,
    start: Trainer<T>,
    out_dir: &Path,
    checkpoint_every: usize,
    eval_threads: usize,
) -> Result<Trainer<T>> {
    if dataset.fingerprint() != trainer_fingerprint(&start) {
        bail!(Usage("dataset differs from the one this run started on".into()));
    }
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let ckpt = out_dir.join(CHECKPOINT);
    let mut trainer = start;
    let mut last_good: Option<PathBuf> = None;
    log::info!(
        "training {} epochs (seed {}, config {})",
        trainer.config.epochs,
        trainer.config.seed,
        &trainer.manifest.config_hash[..12]
    );
    while trainer.epoch < trainer.config.epochs {
        match trainer.run_epoch(dataset, eval_threads) {
            Ok(s) => log::info!(
                "epoch {}/{} recon {:.4} adv {:.4} contrast {:.4} ({:.1}s)",
                trainer.epoch,
                trainer.config.epochs,
                s.recon,
                s.adv_term,
                s.contrast,
                s.seconds
            ),
            Err(e @ (acvae::Error::NonFiniteLoss { .. } | acvae::Error::NonFiniteGradient(_))) => {
                write_run_files(&trainer, out_dir)?;
                return Err(NumericFailure {
                    message: e.to_string(),
                    last_good,
                }
                .into());
            }
            Err(e) => return Err(e.into()),
        }
        let done = trainer.epoch == trainer.config.epochs;
        if done || trainer.epoch % checkpoint_every == 0 {
            trainer.save(&ckpt)?;
            last_good = Some(ckpt.clone());
            write_run_files(&trainer, out_dir)?;
        }
    }
    if trainer.manifest.metrics.last().map(|m| m.epoch) != Some(trainer.epoch) {
        let mut opts = EvalOptions::new(trainer.config.max_len);
        opts.exclude_train = trainer.config.exclude_train;
        opts.threads = eval_threads;
        let report = eval_metrics(&trainer.params, dataset, &opts)?;
        trainer.manifest.metrics.push(EpochMetrics {
            epoch: trainer.epoch,
            report,
        });
        trainer.save(&ckpt)?;
    }
    write_run_files(&trainer, out_dir)?;
    Ok(trainer)
}

fn trainer_fingerprint<T: Real>(t: &Trainer<T>) -> &str {
    &t.manifest.dataset_fingerprint
}

fn outcome<T: Real>(trainer: &Trainer<T>, with_corr: Option<&Dataset>) -> Result<RunOutcome> {
    let report = trainer
        .manifest
        .metrics
        .last()
        .map(|m| m.report.clone())
        .ok_or_else(|| anyhow!("run has no evaluation"))?;
    let corr = match with_corr {
        Some(d) => Some(corr_metric(&trainer.params, d, trainer.config.max_len, None, trainer.config.seed)?),
        None => None,
    };
    Ok(RunOutcome {
        config: trainer.config.clone(),
        report,
        best_recall10: trainer.manifest.best_recall(10),
        corr,
    })
}

fn train_fresh<T: Real>(
    dataset: &Dataset,
    cfg: TrainConfig,
    out_dir: &Path,
    checkpoint_every: usize,
    eval_threads: usize,
    with_corr: bool,
) -> Result<RunOutcome> {
    let trainer = Trainer::<T>::new(cfg, dataset)?;
    let trainer = run_training(dataset, trainer, out_dir, checkpoint_every, eval_threads)?;
    outcome(&trainer, with_corr.then_some(dataset))
}

fn print_report(report: &MetricsReport) {
    for r in &report.rows {
        println!("Recall@{k}={:.4} NDCG@{k}={:.4} MRR@{k}={:.4}", r.recall, r.ndcg, r.mrr, k = r.k);
    }
}

pub fn train(args: &TrainArgs, resume: Option<&Path>) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let threads = num_threads();
    let report = match resume {
        None => {
            let cfg = resolve_config(args)?;
            match args.precision {
                Precision::F32 => train_fresh::<f32>(&dataset, cfg, &args.out_dir, args.checkpoint_every, threads, false)?,
                Precision::F64 => train_fresh::<f64>(&dataset, cfg, &args.out_dir, args.checkpoint_every, threads, false)?,
            }
            .report
        }
        Some(path) => {
            let c = Container::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            match checkpoint_dtype(&c)? {
                DType::F32 => resume_from::<f32>(&c, &dataset, args, threads)?,
                _ => resume_from::<f64>(&c, &dataset, args, threads)?,
            }
        }
    };
    print_report(&report);
    Ok(())
}

fn resume_from<T: Real>(c: &Container, dataset: &Dataset, args: &TrainArgs, threads: usize) -> Result<MetricsReport> {
    let mut trainer = Trainer::<T>::from_container(c)?;
    if let Some(e) = args.epochs {
        trainer.config.epochs = e;
        trainer.manifest.config.epochs = e;
        trainer.manifest.config_hash = trainer.config.hash();
    }
    let trainer = run_training(dataset, trainer, &args.out_dir, args.checkpoint_every, threads)?;
    Ok(outcome(&trainer, None)?.report)
}

fn checkpoint_dtype(c: &Container) -> Result<DType> {
    let d = c
        .meta
        .get("dtype")
        .cloned()
        .ok_or_else(|| Usage("checkpoint has no dtype".into()))?;
    Ok(serde_json::from_value(d)?)
}

fn load_checkpoint(path: &Path) -> Result<Container> {
    if !path.exists() {
        bail!(Usage(format!("checkpoint {} not found", path.display())));
    }
    Ok(Container::load(path)?)
}

pub fn evaluate(checkpoint: &Path, data: &Path, ks: &[usize], exclude_train: bool, out_dir: Option<&Path>) -> Result<()> {
    let c = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data)?;
    if ks.is_empty() || ks.contains(&0) {
        bail!(Usage("--ks must list positive cutoffs".into()));
    }
    fn run<T: Real>(c: &Container, d: &Dataset, ks: &[usize], exclude: bool) -> Result<(MetricsReport, TrainConfig)> {
        let t = Trainer::<T>::from_container(c)?;
        let mut opts = EvalOptions::new(t.config.max_len);
        opts.ks = ks.to_vec();
        opts.exclude_train = exclude;
        opts.threads = num_threads();
        Ok((eval_metrics(&t.params, d, &opts)?, t.config))
    }
    let (report, cfg) = match checkpoint_dtype(&c)? {
        DType::F32 => run::<f32>(&c, &dataset, ks, exclude_train)?,
        _ => run::<f64>(&c, &dataset, ks, exclude_train)?,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write(&dir.join(METRICS), stamp(&cfg) + &report.to_csv())?;
        let summary = json!({"config_hash": cfg.hash(), "seed": cfg.seed, "checkpoint": checkpoint.display().to_string(), "report": report});
        write(&dir.join("metrics.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    }
    print_report(&report);
    Ok(())
}

pub fn corr(checkpoint: &Path, data: &Path, sample_users: Option<usize>, seed: u64, out_dir: Option<&Path>) -> Result<()> {
    let c = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data)?;
    fn run<T: Real>(c: &Container, d: &Dataset, n: Option<usize>, seed: u64) -> Result<(CorrReport, TrainConfig)> {
        let t = Trainer::<T>::from_container(c)?;
        Ok((corr_metric(&t.params, d, t.config.max_len, n, seed)?, t.config))
    }
    let (report, cfg) = match checkpoint_dtype(&c)? {
        DType::F32 => run::<f32>(&c, &dataset, sample_users, seed)?,
        _ => run::<f64>(&c, &dataset, sample_users, seed)?,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let summary = json!({
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "sample_seed": seed,
            "ablation": cfg.ablation.label(),
            "corr": report.corr,
            "samples": report.samples,
            "constant_dims": report.constant_dims,
            "matrix": report.matrix,
        });
        write(&dir.join("corr.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    }
    println!("corr={:.6} samples={} ablation={}", report.corr, report.samples, cfg.ablation.label());
    Ok(())
}

pub fn toy_demo(sigma: f64, n: usize, seed: u64, steps: Option<usize>, out_dir: Option<&Path>) -> Result<()> {
    let mut opts = ToyOptions {
        sigma,
        n,
        seed,
        ..ToyOptions::default()
    };
    if let Some(s) = steps {
        opts.steps = s;
    }
    let report = toy_avb_demo(&opts)?;
    let kl_gap = report
        .per_dim_kl_real
        .iter()
        .zip(&report.per_dim_kl_fake)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let header = format!("# sigma={} n={} seed={} steps={}\n", opts.sigma, opts.n, opts.seed, opts.steps);
        write(&dir.join("toy_points.csv"), header + &report.points_csv())?;
        let summary = json!({
            "sigma": opts.sigma,
            "n": opts.n,
            "seed": opts.seed,
            "steps": opts.steps,
            "max_kl_difference": kl_gap,
            "kl_per_sample": report.per_dim_kl_real.first(),
            "discriminator_auc": report.discriminator_auc,
        });
        write(&dir.join("toy.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    }
    println!(
        "sigma={} kl_difference={} discriminator_auc={:.4}",
        opts.sigma, kl_gap, report.discriminator_auc
    );
    Ok(())
}

/// Runs `jobs` on at most `workers` threads, keeping results in job order.
fn pool<J: Sync, R: Send>(jobs: &[J], workers: usize, f: impl Fn(usize, &J) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(i, &jobs[i]);
                *slots[i].lock().expect("poisoned slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("poisoned slot").expect("every job ran"))
        .collect()
}

fn run_cell(args: &TrainArgs, dataset: &Dataset, cfg: TrainConfig, dir: &Path, with_corr: bool) -> Result<RunOutcome> {
    match args.precision {
        Precision::F32 => train_fresh::<f32>(dataset, cfg, dir, args.checkpoint_every, 1, with_corr),
        Precision::F64 => train_fresh::<f64>(dataset, cfg, dir, args.checkpoint_every, 1, with_corr),
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn ablate(args: &TrainArgs, variants: &[String]) -> Result<()> {
    let base = resolve_config(args)?;
    let names: Vec<String> = if variants.is_empty() {
        ["full", "no_avb", "no_contrastive", "no_cnn"].map(String::from).to_vec()
    } else {
        variants.to_vec()
    };
    let switches = names
        .iter()
        .map(|v| v.parse::<Ablation>())
        .collect::<acvae::Result<Vec<_>>>()
        .map_err(|e| usage(e.into()))?;
    let dataset = load_dataset(&args.data)?;
    fs::create_dir_all(&args.out_dir)?;
    let results = pool(&switches, num_threads(), |_, &a| {
        let cfg = TrainConfig { ablation: a, ..base.clone() };
        let r = run_cell(args, &dataset, cfg, &args.out_dir.join(a.label()), true);
        if let Err(e) = &r {
            log::error!("variant {}: {e:#}", a.label());
        }
        r
    });
    let mut csv = stamp(&base) + "variant,Recall@10,NDCG@10,MRR@10,best_Recall@10,corr,config_hash,status\n";
    for (a, r) in switches.iter().zip(&results) {
        match r {
            Ok(o) => {
                let row = o.report.at(10);
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},ok\n",
                    a.label(),
                    fmt_opt(row.map(|r| r.recall)),
                    fmt_opt(row.map(|r| r.ndcg)),
                    fmt_opt(row.map(|r| r.mrr)),
                    fmt_opt(o.best_recall10),
                    fmt_opt(o.corr.as_ref().map(|c| c.corr)),
                    o.config.hash(),
                ));
                println!(
                    "{}: Recall@10={} corr={}",
                    a.label(),
                    fmt_opt(row.map(|r| r.recall)),
                    fmt_opt(o.corr.as_ref().map(|c| c.corr))
                );
            }
            Err(e) => csv.push_str(&format!("{},,,,,,,failed: {}\n", a.label(), csv_text(&format!("{e:#}")))),
        }
    }
    write(&args.out_dir.join("ablation.csv"), csv)?;
    if results.iter().all(|r| r.is_err()) {
        bail!("every variant failed");
    }
    Ok(())
}

fn csv_text(s: &str) -> String {
    s.replace([',', '\n', '"'], " ")
}

/// Parses `alpha=0,0.05 beta=0.5` style specs into the two axes.
pub fn parse_grid(specs: &[String], base: &TrainConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut alphas = None;
    let mut betas = None;
    for part in specs.iter().flat_map(|s| s.split_whitespace()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| Usage(format!("grid entry `{part}` is not name=v1,v2,...")))?;
        let vals = values
            .split(',')
            .filter(|v| !v.is_empty())
            .map(|v| v.trim().parse::<f64>().map_err(|_| Usage(format!("bad grid value `{v}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        if vals.is_empty() {
            bail!(Usage(format!("grid axis `{key}` has no values")));
        }
        match key {
            "alpha" => alphas = Some(vals),
            "beta" => betas = Some(vals),
            other => bail!(Usage(format!("unknown grid axis `{other}`"))),
        }
    }
    Ok((alphas.unwrap_or(vec![base.alpha]), betas.unwrap_or(vec![base.beta])))
}

pub fn sweep(args: &TrainArgs, grid: &[String]) -> Result<()> {
    let base = resolve_config(args)?;
    let (alphas, betas) = parse_grid(grid, &base)?;
    let dataset = load_dataset(&args.data)?;
    fs::create_dir_all(&args.out_dir)?;
    let cells: Vec<TrainConfig> = alphas
        .iter()
        .flat_map(|&a| betas.iter().map(move |&b| (a, b)))
        .enumerate()
        .map(|(i, (alpha, beta))| TrainConfig {
            alpha,
            beta,
            seed: base.seed + i as u64,
            ..base.clone()
        })
        .collect();
    log::info!("sweep over {} cells", cells.len());
    let results = pool(&cells, num_threads(), |i, cfg| {
        let r = cfg
            .validate()
            .map_err(anyhow::Error::from)
            .and_then(|_| run_cell(args, &dataset, cfg.clone(), &args.out_dir.join(format!("cell_{i:03}")), false));
        if let Err(e) = &r {
            log::error!("cell {i} (alpha {}, beta {}): {e:#}", cfg.alpha, cfg.beta);
        }
        r
    });
    let mut csv = stamp(&base) + "alpha,beta,Recall@10,NDCG@10,best_Recall@10,seed,config_hash,status\n";
    for (cfg, r) in cells.iter().zip(&results) {
        match r {
            Ok(o) => {
                let row = o.report.at(10);
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},ok\n",
                    cfg.alpha,
                    cfg.beta,
                    fmt_opt(row.map(|r| r.recall)),
                    fmt_opt(row.map(|r| r.ndcg)),
                    fmt_opt(o.best_recall10),
                    cfg.seed,
                    cfg.hash()
                ));
            }
            Err(e) => csv.push_str(&format!(
                "{},{},,,,{},{},failed: {}\n",
                cfg.alpha,
                cfg.beta,
                cfg.seed,
                cfg.hash(),
                csv_text(&format!("{e:#}"))
            )),
        }
    }
    write(&args.out_dir.join("sweep.csv"), csv)?;
    let failed = results.iter().filter(|r| r.is_err()).count();
    println!("sweep: {} cells, {} failed", cells.len(), failed);
    if failed == cells.len() {
        bail!("every sweep cell failed");
    }
    Ok(())
}
