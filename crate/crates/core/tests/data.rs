use std::collections::{BTreeMap, BTreeSet};
use std::io::Cursor;

use acvae::data::*;
use proptest::prelude::*;

fn rec(u: &str, i: &str, rating: Option<f64>, ts: i64) -> RawInteraction {
    RawInteraction {
        user_id: u.into(),
        item_id: i.into(),
        rating,
        timestamp: ts,
    }
}

/// Naive k-core: recount from scratch, drop every under-count entity, repeat.
fn kcore_oracle(edges: &[(u8, u8)], k: usize) -> BTreeSet<(u8, u8)> {
    let mut live: BTreeSet<usize> = (0..edges.len()).collect();
    loop {
        let mut du: BTreeMap<u8, usize> = BTreeMap::new();
        let mut di: BTreeMap<u8, usize> = BTreeMap::new();
        for &e in &live {
            *du.entry(edges[e].0).or_default() += 1;
            *di.entry(edges[e].1).or_default() += 1;
        }
        let next: BTreeSet<usize> = live
            .iter()
            .copied()
            .filter(|&e| du[&edges[e].0] >= k && di[&edges[e].1] >= k)
            .collect();
        if next == live {
            return live.iter().map(|&e| edges[e]).collect();
        }
        live = next;
    }
}

fn records_of(edges: &[(u8, u8)]) -> Vec<RawInteraction> {
    edges
        .iter()
        .enumerate()
        .map(|(t, &(u, i))| rec(&format!("u{u}"), &format!("i{i}"), None, t as i64))
        .collect()
}

fn edge_set(records: &[RawInteraction]) -> BTreeSet<(u8, u8)> {
    records
        .iter()
        .map(|r| (r.user_id[1..].parse().unwrap(), r.item_id[1..].parse().unwrap()))
        .collect()
}

#[test]
fn empty_file_gives_no_records() {
    let dat = read_interactions(Cursor::new(""), InputFormat::MovielensDat).unwrap();
    assert!(dat.is_empty());
    let csv = read_interactions(Cursor::new("userId,movieId,rating,timestamp\n"), InputFormat::Csv).unwrap();
    assert!(csv.is_empty());
}

#[test]
fn csv_header_and_three_rows() {
    let text = "userId,movieId,rating,timestamp\n1,31,2.5,1260759144\n1,1029,3.0,1260759179\n2,10,4.0,835355493\n";
    let rows = read_interactions(Cursor::new(text), InputFormat::Csv).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0], rec("1", "31", Some(2.5), 1260759144));
}

#[test]
fn binarize_examples() {
    let kept = binarize(
        vec![rec("a", "x", Some(4.0), 0), rec("a", "y", Some(3.0), 1), rec("a", "z", None, 2)],
        3.0,
    );
    assert_eq!(kept.len(), 2);
    assert_eq!(kept[0].rating, Some(1.0));
    assert_eq!(kept[1].item_id, "z");
}

#[test]
fn chain_removal_matches_oracle() {
    // Users 0..4 rate items 0..4; user 5 rates items 0..3 and 5; users 0..2
    // also rate item 5. Item 5 has four raters, and losing it leaves user 5
    // with four interactions.
    let mut edges = Vec::new();
    for u in 0..5u8 {
        for i in 0..5u8 {
            edges.push((u, i));
        }
    }
    for i in [0u8, 1, 2, 3, 5] {
        edges.push((5, i));
    }
    for u in 0..3u8 {
        edges.push((u, 5));
    }
    let expected = kcore_oracle(&edges, 5);
    let got = edge_set(&k_core_filter(records_of(&edges), 5, 5).unwrap());
    assert_eq!(got, expected);
    assert!(!got.iter().any(|&(u, i)| u == 5 || i == 5));
    assert_eq!(got.len(), 25);
}

#[test]
fn length_three_and_seven_masks() {
    let a = [1, 2, 3];
    let b = [1, 2, 3, 4, 5, 6, 7];
    let batch = PaddedBatch::from_prefixes(&[(0, &a[..]), (1, &b[..])], 5);
    let m: Vec<u8> = batch.mask.iter().map(|&x| x as u8).collect();
    assert_eq!(m, vec![1, 1, 0, 0, 0, 1, 1, 1, 1, 0]);
    assert_eq!(&batch.inputs[5..], &[3, 4, 5, 6, 7]);
}

#[test]
fn dataset_cache_round_trip() {
    let text: String = (0..6)
        .flat_map(|u| (0..6).map(move |i| format!("{u}::{i}::5::{}\n", u * 10 + i)))
        .collect();
    let recs = read_interactions(Cursor::new(text), InputFormat::MovielensDat).unwrap();
    let ds = Dataset::from_records(recs, &PreprocessConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.acvae");
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.fingerprint(), ds.fingerprint());
    assert_eq!(ds.stats().users, 6);
    assert_eq!(ds.sequences[0].train_len(), 5);
}

/// Published ML-latest statistics, within 5%; needs `ACVAE_ML_LATEST` pointing at ratings.csv.
#[test]
#[ignore]
fn ml_latest_statistics() {
    let path = std::env::var("ACVAE_ML_LATEST").expect("ACVAE_ML_LATEST not set");
    let ds = Dataset::from_file(path, InputFormat::Csv, &PreprocessConfig::default()).unwrap();
    let s = ds.stats();
    let near = |x: f64, y: f64| (x - y).abs() <= 0.05 * y;
    assert!(near(s.users as f64, 604.0), "{s}");
    assert!(near(s.items as f64, 7400.0), "{s}");
    assert!(near(s.avg_length, 76.2), "{s}");
}

fn random_records() -> impl Strategy<Value = Vec<(u8, u8, u8, u8)>> {
    prop::collection::vec((0u8..12, 0u8..15, 1u8..6, 0u8..40), 0..160)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn k_core_is_idempotent_and_matches_oracle(raw in random_records(), k in 1usize..5) {
        let edges: Vec<(u8, u8)> = raw.iter().map(|&(u, i, _, _)| (u, i)).collect();
        let expected = kcore_oracle(&edges, k);
        match k_core_filter(records_of(&edges), k, k) {
            Ok(once) => {
                prop_assert_eq!(edge_set(&once), expected);
                let twice = k_core_filter(once.clone(), k, k).unwrap();
                prop_assert_eq!(twice, once);
            }
            Err(_) => prop_assert!(expected.is_empty()),
        }
    }

    #[test]
    fn batches_respect_sequences(
        raw in random_records(),
        max_len in 2usize..9,
        batch_size in 1usize..6,
        seed in any::<u64>(),
    ) {
        let recs: Vec<RawInteraction> = raw
            .iter()
            .map(|&(u, i, r, t)| rec(&u.to_string(), &i.to_string(), Some(r as f64), t as i64))
            .collect();
        let cfg = PreprocessConfig { threshold: 2.0, min_user: 5, min_item: 1 };
        let Ok(ds) = Dataset::from_records(recs, &cfg) else { return Ok(()); };
        let by_user: BTreeMap<usize, &UserSequence> =
            ds.sequences.iter().map(|s| (s.user_index, s)).collect();
        for s in &ds.sequences {
            prop_assert!(!s.test().is_empty());
            prop_assert!(s.items.iter().all(|&i| i >= 1 && i < ds.vocab_size()));
        }
        let batches = make_batches(&ds.sequences, max_len, batch_size, seed).unwrap();
        let mut seen = Vec::new();
        for b in &batches {
            for row in 0..b.batch {
                let u = b.user_indices[row];
                seen.push(u);
                let seq = by_user[&u];
                let train = seq.train();
                let base = row * max_len;
                let len = b.lengths[row];
                prop_assert_eq!(len, train.len().min(max_len));
                // Real inputs are the last `len` training items, then padding.
                prop_assert_eq!(&b.inputs[base..base + len], &train[train.len() - len..]);
                prop_assert!(b.inputs[base + len..base + max_len].iter().all(|&x| x == 0));
                for t in 0..max_len {
                    let k = base + t;
                    prop_assert_eq!(b.mask[k], t + 1 < len);
                    if b.mask[k] {
                        let pair = [b.inputs[k], b.targets[k]];
                        prop_assert!(train.windows(2).any(|w| w == pair));
                        prop_assert_eq!(b.targets[k], b.inputs[k + 1]);
                    }
                }
                // Split positions never reach the training side.
                let test_positions: BTreeSet<usize> = (seq.split_point..seq.items.len()).collect();
                let train_start = train.len() - len;
                prop_assert!((train_start..train.len()).all(|p| !test_positions.contains(&p)));
            }
        }
        seen.sort_unstable();
        let mut all: Vec<usize> = ds.sequences.iter().map(|s| s.user_index).collect();
        all.sort_unstable();
        prop_assert_eq!(seen, all);
    }
}
