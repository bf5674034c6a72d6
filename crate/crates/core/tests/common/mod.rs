#![allow(dead_code)]

pub mod checks;

use acvae::autodiff::{Tape, Var};
use acvae::data::{Dataset, PaddedBatch, UserSequence, Vocab};
use acvae::model::{ModelConfig, ModelParams};
use acvae::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)` (0 when both vanish).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Compares reverse-mode gradients of `f` with central differences for
/// every input. `f` builds a scalar from the leaves it is given.
/// Returns the worst relative error over the inputs.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    h: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, vars[k]);
        let mut numeric = vec![0.0; x.len()];
        for j in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[j] += h;
            let up = eval(&xs);
            xs[k].data_mut()[j] -= 2.0 * h;
            let down = eval(&xs);
            numeric[j] = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Contracts a tensor-valued node with fixed weights to get a scalar.
pub fn contract(tape: &mut Tape<f64>, v: Var, weights: &Tensor<f64>) -> Var {
    let w = tape.constant(weights.clone().reshape(tape.shape(v).to_vec()).unwrap());
    let p = tape.mul(v, w).unwrap();
    tape.sum(p)
}

pub fn tiny_config(vocab_size: usize, max_len: usize) -> ModelConfig {
    let mut c = ModelConfig::new(vocab_size);
    c.embed_dim = 3;
    c.hidden_dim = 4;
    c.latent_dim = 4;
    c.filter_height = 2;
    c.critic_hidden = 5;
    c.max_len = max_len;
    c
}

pub fn tiny_params(cfg: ModelConfig, seed: u64) -> ModelParams<f64> {
    ModelParams::init(cfg, &mut rng(seed)).unwrap()
}

/// Two users, `M = 3`, items drawn from `1..7`.
pub fn tiny_batch() -> PaddedBatch {
    let a = [1usize, 4, 6];
    let b = [2usize, 5];
    PaddedBatch::from_prefixes(&[(0, &a[..]), (1, &b[..])], 3)
}

/// Builds a dataset directly from item sequences (items are 1-based).
pub fn dataset_from(seqs: Vec<Vec<usize>>) -> Dataset {
    let max_item = seqs.iter().flatten().copied().max().unwrap_or(0);
    let vocab = Vocab::from_ids(
        (0..seqs.len()).map(|u| format!("u{u}")).collect(),
        (1..=max_item).map(|i| format!("i{i}")).collect(),
    );
    let sequences = seqs
        .into_iter()
        .enumerate()
        .map(|(u, items)| UserSequence {
            user_index: u,
            split_point: acvae::data::split_point(items.len()),
            items,
        })
        .collect();
    Dataset { vocab, sequences }
}

/// Each user walks a fixed cycle over `num_items` items from a random
/// start: item `i` is always followed by item `i % num_items + 1`.
pub fn planted_markov(users: usize, num_items: usize, len: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let seqs = (0..users)
        .map(|_| {
            let mut cur = r.random_range(1..=num_items);
            (0..len)
                .map(|_| {
                    let out = cur;
                    cur = cur % num_items + 1;
                    out
                })
                .collect()
        })
        .collect();
    dataset_from(seqs)
}
