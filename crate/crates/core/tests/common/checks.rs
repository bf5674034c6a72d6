//! Checks shared by the crate tests and the acceptance run.

use acvae::autodiff::{gru_cell, GruVars, Tape, Var};
use acvae::data::PaddedBatch;
use acvae::model::{
    adversary_objective, decode, encode, full_objective, vae_objective_on_tape, ModelParams, VaeNoise,
};
use acvae::Tensor;
use rand::Rng;

use super::*;

pub const H_OP: f64 = 1e-5;
pub const H_COMPOSITE: f64 = 1e-4;

pub fn gru_inputs(r: &mut impl rand::Rng, b: usize, e: usize, d: usize) -> Vec<Tensor<f64>> {
    vec![
        random_tensor(r, &[b, e], 1.0),
        random_tensor(r, &[b, d], 1.0),
        random_tensor(r, &[e, 3 * d], 0.7),
        random_tensor(r, &[3 * d], 0.5),
        random_tensor(r, &[d, 2 * d], 0.7),
        random_tensor(r, &[d, d], 0.7),
    ]
}

pub fn gru_loss(t: &mut Tape<f64>, v: &[Var], w: &Tensor<f64>) -> Var {
    let vars = GruVars {
        w_x: v[2],
        bias: v[3],
        u_zr: v[4],
        u_h: v[5],
    };
    let h = gru_cell(t, &vars, v[0], v[1]).unwrap();
    contract(t, h, w)
}

/// The (φ, θ, ω, Ψ) gradient of the full objective on b=2, M=3, V=7, z=4.
pub fn full_objective_error(seed: u64) -> f64 {
    let mut cfg = tiny_config(7, 3);
    cfg.alpha = 0.3;
    cfg.beta = 0.7;
    let params = tiny_params(cfg.clone(), seed);
    let batch = tiny_batch();
    let steps = 3;
    let noise = VaeNoise::sample(&mut rng(seed + 100), &batch, steps, cfg.hidden_dim, cfg.beta).unwrap();
    // The critics read item embeddings as data, so their features stay at
    // the unperturbed values while the bound weights move.
    let loss_of = |p: &ModelParams<f64>| -> f64 {
        let mut tape = Tape::new();
        let net = p.bind(&mut tape, |_| false);
        vae_objective_on_tape(&mut tape, &params, &net, &batch, steps, &noise).unwrap().1.loss
    };
    let mut tape = Tape::new();
    let net = params.bind(&mut tape, |_| true);
    let (loss, _) = vae_objective_on_tape(&mut tape, &params, &net, &batch, steps, &noise).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, p) in params.iter().enumerate() {
        let a = grads.get_or_zeros(&tape, net.all[k]);
        for j in 0..p.value.len() {
            let mut q = params.clone();
            q.params_mut()[k].value.data_mut()[j] += H_COMPOSITE;
            let up = loss_of(&q);
            q.params_mut()[k].value.data_mut()[j] -= 2.0 * H_COMPOSITE;
            let down = loss_of(&q);
            analytic.push(a[j]);
            numeric.push((up - down) / (2.0 * H_COMPOSITE));
        }
    }
    rel_err(&analytic, &numeric)
}

/// Every differentiable tape op, keyed for the randomized property test.
#[derive(Clone, Copy, Debug)]
pub enum OpCase {
    MatMul,
    AddRow,
    Add,
    Sub,
    Mul,
    Affine,
    Sigmoid,
    Tanh,
    Softplus,
    LogSigmoid,
    LeakyRelu,
    SliceCols,
    SliceRows,
    ConcatCols,
    ConcatRows,
    GatherRows,
    CausalConv,
    Sum,
    Mean,
    SoftmaxXent,
    Gru,
}

pub const ALL_OPS: [OpCase; 21] = [
    OpCase::MatMul,
    OpCase::AddRow,
    OpCase::Add,
    OpCase::Sub,
    OpCase::Mul,
    OpCase::Affine,
    OpCase::Sigmoid,
    OpCase::Tanh,
    OpCase::Softplus,
    OpCase::LogSigmoid,
    OpCase::LeakyRelu,
    OpCase::SliceCols,
    OpCase::SliceRows,
    OpCase::ConcatCols,
    OpCase::ConcatRows,
    OpCase::GatherRows,
    OpCase::CausalConv,
    OpCase::Sum,
    OpCase::Mean,
    OpCase::SoftmaxXent,
    OpCase::Gru,
];

/// Worst relative error of `op` on random shapes `rows × cols`.
pub fn op_error(op: OpCase, rows: usize, cols: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_tensor(&mut r, &[rows, cols], 2.0);
    let y = random_tensor(&mut r, &[rows, cols], 2.0);
    let w = random_tensor(&mut r, &[rows * cols * 4 + 64], 1.0);
    let weights = |n: usize| Tensor::new(vec![n], w.data()[..n].to_vec()).unwrap();
    match op {
        OpCase::MatMul => {
            let b = random_tensor(&mut r, &[cols, 3], 1.0);
            grad_check(&[x, b], H_OP, |t, v| {
                let m = t.matmul(v[0], v[1]).unwrap();
                contract(t, m, &weights(rows * 3))
            })
        }
        OpCase::AddRow => {
            let b = random_tensor(&mut r, &[cols], 1.0);
            grad_check(&[x, b], H_OP, |t, v| {
                let m = t.add_row(v[0], v[1]).unwrap();
                contract(t, m, &weights(rows * cols))
            })
        }
        OpCase::Add | OpCase::Sub | OpCase::Mul => grad_check(&[x, y], H_OP, |t, v| {
            let m = match op {
                OpCase::Add => t.add(v[0], v[1]),
                OpCase::Sub => t.sub(v[0], v[1]),
                _ => t.mul(v[0], v[1]),
            }
            .unwrap();
            contract(t, m, &weights(rows * cols))
        }),
        OpCase::Affine
        | OpCase::Sigmoid
        | OpCase::Tanh
        | OpCase::Softplus
        | OpCase::LogSigmoid
        | OpCase::LeakyRelu => grad_check(&[x], H_OP, |t, v| {
            let m = match op {
                OpCase::Affine => t.affine(v[0], -1.5, 0.25),
                OpCase::Sigmoid => t.sigmoid(v[0]),
                OpCase::Tanh => t.tanh(v[0]),
                OpCase::Softplus => t.softplus(v[0]),
                OpCase::LogSigmoid => t.log_sigmoid(v[0]),
                _ => t.leaky_relu(v[0], 0.2),
            };
            contract(t, m, &weights(rows * cols))
        }),
        OpCase::SliceCols => {
            let (start, len) = (cols / 3, cols - cols / 3);
            grad_check(&[x], H_OP, |t, v| {
                let m = t.slice_cols(v[0], start, len).unwrap();
                contract(t, m, &weights(rows * len))
            })
        }
        OpCase::SliceRows => {
            let (start, len) = (rows / 2, rows - rows / 2);
            grad_check(&[x], H_OP, |t, v| {
                let m = t.slice_rows(v[0], start, len).unwrap();
                contract(t, m, &weights(len * cols))
            })
        }
        OpCase::ConcatCols => grad_check(&[x, y], H_OP, |t, v| {
            let m = t.concat_cols(v[0], v[1]).unwrap();
            contract(t, m, &weights(rows * cols * 2))
        }),
        OpCase::ConcatRows => grad_check(&[x, y], H_OP, |t, v| {
            let m = t.concat_rows(&[v[0], v[1], v[0]]).unwrap();
            contract(t, m, &weights(rows * cols * 3))
        }),
        OpCase::GatherRows => {
            let idx: Vec<usize> = (0..rows + 2).map(|k| (k * 7 + 1) % rows).collect();
            grad_check(&[x], H_OP, |t, v| {
                let m = t.gather_rows(v[0], &idx).unwrap();
                contract(t, m, &weights(idx.len() * cols))
            })
        }
        OpCase::CausalConv => {
            // `rows` steps for a batch of 2.
            let h = random_tensor(&mut r, &[rows * 2, cols], 1.0);
            let f = random_tensor(&mut r, &[3, 1], 1.0);
            grad_check(&[h, f], H_OP, |t, v| {
                let m = t.causal_conv(v[0], v[1], 2).unwrap();
                contract(t, m, &weights(rows * 2 * cols))
            })
        }
        OpCase::Sum => grad_check(&[x], H_OP, |t, v| {
            let w = t.constant(weights(rows * cols).reshape(vec![rows, cols]).unwrap());
            let m = t.mul(v[0], w).unwrap();
            let m = t.mul(m, v[0]).unwrap();
            t.sum(m)
        }),
        OpCase::Mean => grad_check(&[x], H_OP, |t, v| {
            let m = t.mul(v[0], v[0]).unwrap();
            t.mean(m).unwrap()
        }),
        OpCase::SoftmaxXent => {
            let targets: Vec<usize> = (0..rows).map(|i| (i * 5 + 2) % cols).collect();
            let mask: Vec<bool> = (0..rows).map(|i| i % 3 != 1 || rows == 1).collect();
            grad_check(&[x], H_OP, |t, v| t.softmax_cross_entropy(v[0], &targets, &mask).unwrap())
        }
        OpCase::Gru => {
            let (e, d) = (cols.min(4), rows.min(4));
            let inputs = gru_inputs(&mut r, 2, e, d);
            let w = random_tensor(&mut r, &[2, d], 1.0);
            grad_check(&inputs, H_OP, |t, v| gru_loss(t, v, &w))
        }
    }
}

pub fn z_at(z: &Tensor<f64>, i: usize, t: usize) -> &[f64] {
    let (m, c) = (z.shape()[1], z.shape()[2]);
    &z.data()[(i * m + t) * c..(i * m + t + 1) * c]
}

pub fn random_batch(r: &mut impl Rng, lens: &[usize], max_len: usize, vocab: usize) -> PaddedBatch {
    let seqs: Vec<Vec<usize>> = lens.iter().map(|&l| (0..l).map(|_| r.random_range(1..vocab)).collect()).collect();
    let prefixes: Vec<(usize, &[usize])> = seqs.iter().enumerate().map(|(u, s)| (u, &s[..])).collect();
    PaddedBatch::from_prefixes(&prefixes, max_len)
}

// Direct textbook definitions, written independently of the library.
pub fn oracle_recall(ranked: &[usize], rel: &[usize], k: usize) -> f64 {
    let hits = ranked[..k.min(ranked.len())].iter().filter(|i| rel.contains(i)).count();
    hits as f64 / rel.len() as f64
}

pub fn oracle_ndcg(ranked: &[usize], rel: &[usize], k: usize) -> f64 {
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if rel.contains(item) {
            dcg += 1.0 / (pos as f64 + 2.0).log2();
        }
    }
    let mut idcg = 0.0;
    for pos in 0..k.min(rel.len()) {
        idcg += 1.0 / (pos as f64 + 2.0).log2();
    }
    dcg / idcg
}

pub fn oracle_mrr(ranked: &[usize], rel: &[usize], k: usize) -> f64 {
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if rel.contains(item) {
            return 1.0 / (pos as f64 + 1.0);
        }
    }
    0.0
}

pub fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

pub fn subsets_up_to(n: usize, max: usize) -> Vec<Vec<usize>> {
    (1u32..(1 << n))
        .filter(|m| m.count_ones() as usize <= max)
        .map(|m| (0..n).filter(|b| m & (1 << b) != 0).map(|b| b + 1).collect())
        .collect()
}

/// Scores every ranking of six items against every relevant set of at most
/// three items, for every `k`, and reports the first disagreement.
pub fn brute_force_metric_check() -> Result<usize, String> {
    use acvae::eval::{mrr_at_k, ndcg_at_k, recall_at_k};
    let mut cases = 0;
    for ranked in &permutations(&[1, 2, 3, 4, 5, 6]) {
        for rel in &subsets_up_to(6, 3) {
            for k in 1..=6 {
                let got = [recall_at_k(ranked, rel, k), ndcg_at_k(ranked, rel, k), mrr_at_k(ranked, rel, k)];
                let want = [oracle_recall(ranked, rel, k), oracle_ndcg(ranked, rel, k), oracle_mrr(ranked, rel, k)];
                if got != want {
                    return Err(format!("{ranked:?} {rel:?} k={k}: {got:?} vs {want:?}"));
                }
                cases += 1;
            }
        }
    }
    Ok(cases)
}

/// Rewrites inputs of `user` after step `t` and compares latents and
/// logits at steps `0..=t` bit for bit.
pub fn causality_check(seed: u64, t: usize, user: usize) -> Result<(), String> {
    let mut r = rng(seed);
    let p = tiny_params(tiny_config(9, 6), seed);
    let batch = random_batch(&mut r, &[6, 6, 6], 6, 9);
    let z = encode(&p, &batch, Some(&mut rng(seed ^ 1))).unwrap().z;
    let logits = decode(&p, &z).unwrap();
    let mut changed = batch.clone();
    for s in t + 1..6 {
        changed.inputs[user * 6 + s] = r.random_range(1..9);
    }
    let z2 = encode(&p, &changed, Some(&mut rng(seed ^ 1))).unwrap().z;
    let logits2 = decode(&p, &z2).unwrap();
    for i in 0..3 {
        for s in 0..=t {
            if z_at(&z, i, s) != z_at(&z2, i, s) {
                return Err(format!("latent of user {i} at step {s} moved"));
            }
            let k = (i * 6 + s) * 9;
            if logits.data()[k..k + 9] != logits2.data()[k..k + 9] {
                return Err(format!("logits of user {i} at step {s} moved"));
            }
        }
    }
    Ok(())
}

/// Scrambles padded inputs and masked-out targets and compares every loss
/// term bit for bit.
pub fn padding_check(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let mut cfg = tiny_config(9, 6);
    cfg.alpha = 0.2;
    cfg.beta = 0.4;
    let p = tiny_params(cfg, seed);
    let batch = random_batch(&mut r, &[6, 3, 4], 6, 9);
    let mut dirty = batch.clone();
    for k in 0..dirty.mask.len() {
        let (i, t) = (k / 6, k % 6);
        if t >= dirty.lengths[i] {
            dirty.inputs[k] = r.random_range(1..9);
        }
        if !dirty.mask[k] {
            dirty.targets[k] = r.random_range(0..9);
        }
    }
    let clean = full_objective(&p, &batch, &mut rng(seed ^ 2)).unwrap();
    let scrambled = full_objective(&p, &dirty, &mut rng(seed ^ 2)).unwrap();
    if clean != scrambled {
        return Err(format!("objective terms moved: {clean:?} vs {scrambled:?}"));
    }
    let z = encode(&p, &batch, Some(&mut rng(seed ^ 3))).unwrap().z;
    let zd = encode(&p, &dirty, Some(&mut rng(seed ^ 3))).unwrap().z;
    let prior = random_tensor(&mut rng(seed ^ 4), &[3, 6, 4], 1.0);
    let a = adversary_objective(&p, &batch, &z, &prior).unwrap();
    let b = adversary_objective(&p, &dirty, &zd, &prior).unwrap();
    if a.to_bits() != b.to_bits() {
        return Err(format!("adversary objective moved: {a} vs {b}"));
    }
    Ok(())
}
