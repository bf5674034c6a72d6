//! Top-k ranking metrics, the latent correlation diagnostic and the toy
//! density-ratio demonstration.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Dataset, PaddedBatch, UserSequence};
use crate::error::{Error, Result};
use crate::model::{decode_on_tape, encode_on_tape, Mlp, ModelParams};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];

/// Orders item indices by descending score, ties by ascending index.
/// Index 0 (padding) and everything in `exclude` are dropped.
pub fn rank_scores<T: Real>(scores: &[T], exclude: &HashSet<usize>) -> Vec<usize> {
    let mut items: Vec<usize> = (1..scores.len()).filter(|i| !exclude.contains(i)).collect();
    items.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    items
}

/// Decoder logits at the last real step of each user's training prefix
/// (last `max_len` items, ε = 0). One `V`-vector per user.
pub fn last_step_logits<T: Real>(
    params: &ModelParams<T>,
    users: &[&UserSequence],
    max_len: usize,
) -> Result<Vec<Vec<T>>> {
    let prefixes: Vec<(usize, &[usize])> = users.iter().map(|u| (u.user_index, u.train())).collect();
    if prefixes.iter().any(|(_, p)| p.is_empty()) {
        return Err(Error::InvalidArgument("user has an empty training prefix".into()));
    }
    let batch = PaddedBatch::from_prefixes(&prefixes, max_len);
    let steps = batch.active_len();
    let b = batch.batch;
    let mut tape = Tape::new();
    let net = params.bind(&mut tape, |_| false);
    let z = encode_on_tape(&mut tape, &net, &batch, steps, None)?;
    let rows: Vec<usize> = batch
        .lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| (len - 1) * b + i)
        .collect();
    let last = tape.gather_rows(z, &rows)?;
    let logits = decode_on_tape(&mut tape, &net, last)?;
    let v = params.config.vocab_size;
    Ok(tape.value(logits).data().chunks(v).map(|c| c.to_vec()).collect())
}

/// Full ranking for one user.
pub fn rank_items<T: Real>(
    params: &ModelParams<T>,
    user: &UserSequence,
    max_len: usize,
    exclude_train: bool,
) -> Result<Vec<usize>> {
    let logits = last_step_logits(params, &[user], max_len)?;
    Ok(rank_scores(&logits[0], &exclusions(user, max_len, exclude_train)))
}

fn exclusions(user: &UserSequence, max_len: usize, exclude_train: bool) -> HashSet<usize> {
    if !exclude_train {
        return HashSet::new();
    }
    let train = user.train();
    train[train.len().saturating_sub(max_len)..].iter().copied().collect()
}

fn hits<'a>(ranked: &'a [usize], relevant: &[usize], k: usize) -> impl Iterator<Item = usize> + 'a {
    let rel: HashSet<usize> = relevant.iter().copied().collect();
    ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(move |(_, item)| rel.contains(item))
        .map(|(pos, _)| pos + 1)
}

fn distinct(relevant: &[usize]) -> usize {
    relevant.iter().collect::<HashSet<_>>().len()
}

/// `|top-k ∩ L| / |L|`.
pub fn recall_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    hits(ranked, relevant, k).count() as f64 / distinct(relevant) as f64
}

/// DCG over hit ranks divided by the ideal DCG of `min(k, |L|)` hits.
pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    let ideal_hits = k.min(distinct(relevant));
    if ideal_hits == 0 {
        return 0.0;
    }
    let gain = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = hits(ranked, relevant, k).map(gain).sum();
    let idcg: f64 = (1..=ideal_hits).map(gain).sum();
    dcg / idcg
}

/// Reciprocal rank of the first hit within the top `k`, 0 without one.
pub fn mrr_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    hits(ranked, relevant, k).next().map_or(0.0, |r| 1.0 / r as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub users_evaluated: usize,
    pub exclude_train: bool,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,recall,ndcg,mrr,users_evaluated,exclude_train\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.k, r.recall, r.ndcg, r.mrr, self.users_evaluated, self.exclude_train
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub exclude_train: bool,
    pub max_len: usize,
    /// Users scored per forward pass.
    pub chunk: usize,
    /// Worker threads; 1 evaluates inline.
    pub threads: usize,
}

impl EvalOptions {
    pub fn new(max_len: usize) -> Self {
        EvalOptions {
            ks: DEFAULT_KS.to_vec(),
            exclude_train: true,
            max_len,
            chunk: 128,
            threads: 1,
        }
    }
}

/// Per-user metric sums for one chunk, indexed like `ks`.
fn score_chunk<T: Real>(params: &ModelParams<T>, users: &[&UserSequence], opts: &EvalOptions) -> Result<Vec<[f64; 3]>> {
    let logits = last_step_logits(params, users, opts.max_len)?;
    let kmax = opts.ks.iter().copied().max().unwrap_or(0);
    let mut sums = vec![[0.0; 3]; opts.ks.len()];
    for (user, scores) in users.iter().zip(&logits) {
        let ranked = rank_scores(scores, &exclusions(user, opts.max_len, opts.exclude_train));
        let top = &ranked[..ranked.len().min(kmax)];
        for (s, &k) in sums.iter_mut().zip(&opts.ks) {
            s[0] += recall_at_k(top, user.test(), k);
            s[1] += ndcg_at_k(top, user.test(), k);
            s[2] += mrr_at_k(top, user.test(), k);
        }
    }
    Ok(sums)
}

/// Mean Recall/NDCG/MRR over every user with a nonempty test set.
pub fn evaluate<T: Real>(params: &ModelParams<T>, dataset: &Dataset, opts: &EvalOptions) -> Result<MetricsReport> {
    let users: Vec<&UserSequence> = dataset
        .sequences
        .iter()
        .filter(|s| !s.test().is_empty() && s.train_len() > 0)
        .collect();
    if users.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let chunks: Vec<&[&UserSequence]> = users.chunks(opts.chunk.max(1)).collect();
    let threads = opts.threads.clamp(1, chunks.len());
    let partials: Vec<Result<Vec<[f64; 3]>>> = if threads == 1 {
        chunks.iter().map(|c| score_chunk(params, c, opts)).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<[f64; 3]>>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let per = chunks.len().div_ceil(threads);
            for (work, out) in chunks.chunks(per).zip(slots.chunks_mut(per)) {
                scope.spawn(move || {
                    for (c, slot) in work.iter().zip(out.iter_mut()) {
                        *slot = Some(score_chunk(params, c, opts));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every chunk scored")).collect()
    };
    let mut totals = vec![[0.0; 3]; opts.ks.len()];
    for part in partials {
        for (t, p) in totals.iter_mut().zip(part?) {
            for j in 0..3 {
                t[j] += p[j];
            }
        }
    }
    let n = users.len() as f64;
    Ok(MetricsReport {
        rows: opts
            .ks
            .iter()
            .zip(&totals)
            .map(|(&k, t)| MetricRow {
                k,
                recall: t[0] / n,
                ndcg: t[1] / n,
                mrr: t[2] / n,
            })
            .collect(),
        users_evaluated: users.len(),
        exclude_train: opts.exclude_train,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrReport {
    pub matrix: Vec<Vec<f64>>,
    pub corr: f64,
    pub samples: usize,
    /// Dimensions whose variance was zero; their correlations are set to 0.
    pub constant_dims: Vec<usize>,
}

/// Pearson correlation matrix of the columns of `samples`.
/// Constant columns get zero off-diagonal entries and are reported.
pub fn pearson_matrix(samples: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::InvalidArgument("ragged samples".into()));
    }
    let n = samples.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; dim]; dim];
    for s in samples {
        for a in 0..dim {
            let da = s[a] - mean[a];
            for b in a..dim {
                cov[a][b] += da * (s[b] - mean[b]);
            }
        }
    }
    let constant: Vec<usize> = (0..dim).filter(|&j| cov[j][j] <= 0.0).collect();
    let mut c = vec![vec![0.0; dim]; dim];
    for a in 0..dim {
        c[a][a] = 1.0;
        for b in a + 1..dim {
            if cov[a][a] > 0.0 && cov[b][b] > 0.0 {
                let r = (cov[a][b] / (cov[a][a].sqrt() * cov[b][b].sqrt())).clamp(-1.0, 1.0);
                c[a][b] = r;
                c[b][a] = r;
            }
        }
    }
    Ok((c, constant))
}

/// Sum of squared off-diagonal entries.
pub fn corr_statistic(matrix: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (a, row) in matrix.iter().enumerate() {
        for (b, &x) in row.iter().enumerate() {
            if a != b {
                total += x * x;
            }
        }
    }
    total
}

/// Pools ε = 0 latents over the real steps of up to `sample_users` users
/// (all when `None`) and measures their cross-dimension correlation.
pub fn corr_metric<T: Real>(
    params: &ModelParams<T>,
    dataset: &Dataset,
    max_len: usize,
    sample_users: Option<usize>,
    seed: u64,
) -> Result<CorrReport> {
    let mut users: Vec<&UserSequence> = dataset.sequences.iter().filter(|s| s.train_len() > 0).collect();
    if let Some(n) = sample_users {
        if n < users.len() {
            use rand::seq::SliceRandom;
            users.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            users.truncate(n);
        }
    }
    let mut samples = Vec::new();
    for chunk in users.chunks(128) {
        let prefixes: Vec<(usize, &[usize])> = chunk.iter().map(|u| (u.user_index, u.train())).collect();
        let batch = PaddedBatch::from_prefixes(&prefixes, max_len);
        let steps = batch.active_len();
        let mut tape = Tape::new();
        let net = params.bind(&mut tape, |_| false);
        let z = encode_on_tape(&mut tape, &net, &batch, steps, None)?;
        let zv = tape.value(z);
        for (i, &len) in batch.lengths.iter().enumerate() {
            for t in 0..len {
                samples.push(zv.row(t * batch.batch + i).iter().map(|x| x.as_f64()).collect());
            }
        }
    }
    let (matrix, constant_dims) = pearson_matrix(&samples)?;
    if !constant_dims.is_empty() {
        log::warn!("latent dimensions {constant_dims:?} have zero variance; their correlations are set to 0");
    }
    Ok(CorrReport {
        corr: corr_statistic(&matrix),
        matrix,
        samples: samples.len(),
        constant_dims,
    })
}

/// `KL(N(μ, σ²I) ‖ N(0, I))` per dimension, summed.
pub fn gaussian_kl(mu: &[f64], sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    mu.iter().map(|m| 0.5 * (s2 + m * m - 1.0 - s2.ln())).sum()
}

/// Probability that a random positive outscores a random negative
/// (ties count one half).
pub fn auc(positive: &[f64], negative: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mann–Whitney U with midranks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyPoint {
    pub x: f64,
    pub y: f64,
    pub real: bool,
    pub score: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub sigma: f64,
    pub per_dim_kl_real: Vec<f64>,
    pub per_dim_kl_fake: Vec<f64>,
    pub discriminator_auc: f64,
    /// Held-out points with the trained discriminator's score.
    pub points: Vec<ToyPoint>,
}

impl ToyReport {
    pub fn points_csv(&self) -> String {
        let mut out = String::from("x,y,set,score,kl\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                p.x,
                p.y,
                if p.real { "real" } else { "fake" },
                p.score,
                p.kl
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyOptions {
    pub sigma: f64,
    pub n: usize,
    pub seed: u64,
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
}

impl Default for ToyOptions {
    fn default() -> Self {
        ToyOptions {
            sigma: 0.4,
            n: 2000,
            seed: 0,
            hidden: 64,
            steps: 1500,
            batch: 256,
            learning_rate: 1e-3,
        }
    }
}

const FAKE_MEANS: [[f64; 2]; 2] = [[-1.0, -1.0], [1.0, 1.0]];
const REAL_MEANS: [[f64; 2]; 4] = [[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]];

fn toy_draw(means: &[[f64; 2]], n: usize, sigma: f64, rng: &mut impl Rng) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let noise = Normal::new(0.0, sigma).expect("sigma > 0");
    let mut mus = Vec::with_capacity(n);
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        let mu = means[rng.random_range(0..means.len())];
        pts.push([mu[0] + noise.sample(rng), mu[1] + noise.sample(rng)]);
        mus.push(mu);
    }
    (mus, pts)
}

fn as_tensor(pts: &[[f64; 2]]) -> Tensor<f64> {
    Tensor::new(vec![pts.len(), 2], pts.iter().flatten().copied().collect()).expect("shape")
}

/// Latent codes from a "real" encoder spread over all four corners versus
/// a collapsed one using only two diagonal corners. Their per-sample
/// analytic KL terms coincide; a trained discriminator still tells them
/// apart.
pub fn toy_avb_demo(opts: &ToyOptions) -> Result<ToyReport> {
    if !(opts.sigma > 0.0) || opts.n == 0 {
        return Err(Error::InvalidArgument("sigma must be > 0 and n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (real_mu, real_train) = toy_draw(&REAL_MEANS, opts.n, opts.sigma, &mut rng);
    let (fake_mu, fake_train) = toy_draw(&FAKE_MEANS, opts.n, opts.sigma, &mut rng);
    let per_dim_kl_real: Vec<f64> = real_mu.iter().map(|m| gaussian_kl(m, opts.sigma)).collect();
    let per_dim_kl_fake: Vec<f64> = fake_mu.iter().map(|m| gaussian_kl(m, opts.sigma)).collect();

    let mut critic = Mlp::<f64>::init(2, opts.hidden, &mut rng);
    critic.fit_logistic(
        &as_tensor(&real_train),
        &as_tensor(&fake_train),
        opts.steps,
        opts.batch,
        opts.learning_rate,
        &mut rng,
    )?;

    let (real_mu_t, real_test) = toy_draw(&REAL_MEANS, opts.n, opts.sigma, &mut rng);
    let (fake_mu_t, fake_test) = toy_draw(&FAKE_MEANS, opts.n, opts.sigma, &mut rng);
    let real_scores = critic.scores(&as_tensor(&real_test))?;
    let fake_scores = critic.scores(&as_tensor(&fake_test))?;
    let discriminator_auc = auc(&real_scores, &fake_scores);

    let mut points = Vec::with_capacity(2 * opts.n);
    for (real, mus, pts, scores) in [
        (true, &real_mu_t, &real_test, &real_scores),
        (false, &fake_mu_t, &fake_test, &fake_scores),
    ] {
        for ((mu, p), &s) in mus.iter().zip(pts.iter()).zip(scores.iter()) {
            points.push(ToyPoint {
                x: p[0],
                y: p[1],
                real,
                score: s,
                kl: gaussian_kl(mu, opts.sigma),
            });
        }
    }
    Ok(ToyReport {
        sigma: opts.sigma,
        per_dim_kl_real,
        per_dim_kl_fake,
        discriminator_auc,
        points,
    })
}
