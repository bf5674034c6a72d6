mod common;

use std::collections::HashSet;

use acvae::eval::*;
use common::checks::*;
use common::*;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn metrics_match_brute_force_oracle() {
    assert_eq!(permutations(&[1, 2, 3, 4, 5, 6]).len(), 720);
    assert_eq!(subsets_up_to(6, 3).len(), 41);
    brute_force_metric_check().unwrap();
}

#[test]
fn ndcg_two_hits_example() {
    let v = ndcg_at_k(&[5, 1, 6, 2], &[5, 6], 3);
    assert!((v - 0.919720).abs() < 1e-6);
    assert_eq!(mrr_at_k(&[9, 8, 7, 5], &[5], 10), 0.25);
}

#[test]
fn ranking_prefers_larger_logits_and_drops_training_items() {
    let ranked = rank_scores(&[9.0, 0.1, 0.7, 0.2], &HashSet::new());
    assert_eq!(ranked, vec![2, 3, 1]);
    let ranked = rank_scores(&[0.0, 0.5, 0.5, 0.5], &HashSet::from([2]));
    assert_eq!(ranked, vec![1, 3]);
}

/// All users share test items {20, 21}; the decoder ignores z and puts all
/// mass there.
fn oracle_setup() -> (acvae::model::ModelParams<f64>, acvae::data::Dataset) {
    let seqs: Vec<Vec<usize>> = (0..9)
        .map(|u| {
            let mut s: Vec<usize> = (0..8).map(|t| 1 + (u + 3 * t) % 19).collect();
            s.extend([20, 21]);
            s
        })
        .collect();
    let data = dataset_from(seqs);
    let mut params = tiny_params(tiny_config(data.vocab_size(), 8), 3);
    params.get_mut("decoder.weight").data_mut().fill(0.0);
    let bias = params.get_mut("decoder.bias");
    bias.data_mut().fill(0.0);
    bias.data_mut()[20] = 10.0;
    bias.data_mut()[21] = 9.0;
    (params, data)
}

#[test]
fn perfect_oracle_scores_one() {
    let (params, data) = oracle_setup();
    let mut opts = EvalOptions::new(8);
    opts.ks = vec![2, 5, 10];
    let report = evaluate(&params, &data, &opts).unwrap();
    assert_eq!(report.users_evaluated, 9);
    for row in &report.rows {
        assert_eq!((row.recall, row.ndcg, row.mrr), (1.0, 1.0, 1.0), "k={}", row.k);
    }
}

#[test]
fn threaded_evaluation_matches_inline() {
    let data = planted_markov(40, 30, 15, 3);
    let params = tiny_params(tiny_config(data.vocab_size(), 12), 8);
    let mut opts = EvalOptions::new(12);
    opts.chunk = 7;
    let one = evaluate(&params, &data, &opts).unwrap();
    opts.threads = 4;
    let four = evaluate(&params, &data, &opts).unwrap();
    assert_eq!(one, four);
    for w in one.rows.windows(2) {
        assert!(w[0].recall <= w[1].recall && w[0].mrr <= w[1].mrr);
    }
}

#[test]
fn corr_of_half_correlated_pair() {
    let m = vec![vec![1.0, 0.5], vec![0.5, 1.0]];
    assert_eq!(corr_statistic(&m), 0.5);
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    assert_eq!(corr_statistic(&eye), 0.0);
}

#[test]
fn corr_metric_on_model_latents() {
    let data = planted_markov(12, 10, 10, 4);
    let params = tiny_params(tiny_config(data.vocab_size(), 8), 2);
    let r = corr_metric(&params, &data, 8, None, 0).unwrap();
    assert_eq!(r.samples, data.sequences.iter().map(|s| s.train_len()).sum::<usize>());
    for (a, row) in r.matrix.iter().enumerate() {
        assert!((row[a] - 1.0).abs() < 1e-9);
        for b in 0..row.len() {
            assert!((row[b] - r.matrix[b][a]).abs() < 1e-12);
        }
    }
    assert!(r.corr >= 0.0);
}

fn sample_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..5).prop_flat_map(|d| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), 4..30))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_bounded_and_monotone(
        ranked in Just((1..=12).collect::<Vec<usize>>()).prop_shuffle(),
        rel in prop::collection::hash_set(1usize..=12, 1..5),
    ) {
        let rel: Vec<usize> = rel.into_iter().collect();
        let mut prev = (0.0, 0.0);
        for k in 1..=12 {
            let (r, n, m) = (recall_at_k(&ranked, &rel, k), ndcg_at_k(&ranked, &rel, k), mrr_at_k(&ranked, &rel, k));
            for v in [r, n, m] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            prop_assert!(r >= prev.0 && m >= prev.1);
            prev = (r, m);
        }
    }

    #[test]
    fn corr_invariances(
        samples in sample_matrix(),
        scale_seed in any::<u64>(),
    ) {
        let d = samples[0].len();
        let Ok((base, _)) = pearson_matrix(&samples) else { return Ok(()); };
        let c0 = corr_statistic(&base);
        prop_assert!(c0 >= 0.0);
        for a in 0..d {
            for b in 0..d {
                prop_assert!((base[a][b] - base[b][a]).abs() < 1e-12);
            }
        }

        let mut r = rng(scale_seed);
        let affine: Vec<(f64, f64)> = (0..d)
            .map(|_| {
                let s: f64 = r.random_range(0.5..3.0);
                (if r.random_bool(0.5) { s } else { -s }, r.random_range(-4.0..4.0))
            })
            .collect();
        let scaled: Vec<Vec<f64>> = samples
            .iter()
            .map(|row| row.iter().zip(&affine).map(|(x, (a, c))| a * x + c).collect())
            .collect();
        let (m, _) = pearson_matrix(&scaled).unwrap();
        prop_assert!((corr_statistic(&m) - c0).abs() < 1e-8 * c0.max(1.0));

        let mut reordered = samples.clone();
        reordered.reverse();
        let (m, _) = pearson_matrix(&reordered).unwrap();
        prop_assert!((corr_statistic(&m) - c0).abs() < 1e-9 * c0.max(1.0));

        let swapped: Vec<Vec<f64>> = samples.iter().map(|row| row.iter().rev().copied().collect()).collect();
        let (m, _) = pearson_matrix(&swapped).unwrap();
        prop_assert!((corr_statistic(&m) - c0).abs() < 1e-9 * c0.max(1.0));
        prop_assert!((m[0][d - 1] - base[d - 1][0]).abs() < 1e-12);
    }
}

#[test]
fn toy_kl_is_identical_for_real_and_fake() {
    let report = toy_avb_demo(&ToyOptions {
        steps: 50,
        n: 300,
        ..ToyOptions::default()
    })
    .unwrap();
    let first = report.per_dim_kl_real[0];
    assert!(report.per_dim_kl_real.iter().chain(&report.per_dim_kl_fake).all(|&k| k == first));
    assert_eq!(report.points.len(), 600);
}

#[test]
fn toy_auc_collapses_for_wide_noise() {
    let report = toy_avb_demo(&ToyOptions {
        sigma: 100.0,
        steps: 300,
        ..ToyOptions::default()
    })
    .unwrap();
    assert!((report.discriminator_auc - 0.5).abs() < 0.05, "{}", report.discriminator_auc);
}

fn mixture_density(x: [f64; 2], means: &[[f64; 2]], sigma: f64) -> f64 {
    means
        .iter()
        .map(|m| (-((x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2)) / (2.0 * sigma * sigma)).exp())
        .sum::<f64>()
        / means.len() as f64
}

/// AUC of the exact likelihood ratio, by counting all positive/negative pairs.
fn bayes_auc(sigma: f64, n: usize, seed: u64) -> f64 {
    let real = [[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]];
    let fake = [[-1.0, -1.0], [1.0, 1.0]];
    let mut r = rng(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut draw = |means: &[[f64; 2]]| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let m = means[r.random_range(0..means.len())];
                let x = [m[0] + noise.sample(&mut r), m[1] + noise.sample(&mut r)];
                mixture_density(x, &real, sigma) / mixture_density(x, &fake, sigma)
            })
            .collect()
    };
    let pos = draw(&real);
    let neg = draw(&fake);
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            wins += if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 };
        }
    }
    wins / (n * n) as f64
}

#[test]
fn toy_separability_is_capped_near_three_quarters() {
    let bound = bayes_auc(0.4, 2000, 17);
    assert!((bound - 0.75).abs() < 0.03, "bayes auc {bound}");
    let report = toy_avb_demo(&ToyOptions::default()).unwrap();
    assert!(report.discriminator_auc > 0.7, "{}", report.discriminator_auc);
    assert!(report.discriminator_auc < bound + 0.03, "{} vs {bound}", report.discriminator_auc);
}
