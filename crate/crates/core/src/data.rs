//! Interaction-log ingestion and the implicit-feedback preprocessing chain:
//! load → binarize → k-core filter → per-user time-ordered sequences → an
//! 8:2 temporal split → fixed-length padded batches.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{Buffer, Container};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RawInteraction {
    pub user_id: String,
    pub item_id: String,
    pub rating: Option<f64>,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    /// `user::item::rating::timestamp`, no header.
    MovielensDat,
    /// `user,item,rating,timestamp` with a header line.
    Csv,
    /// Yelp review JSON lines (`user_id`, `business_id`, `stars`, `date`).
    YelpJson,
}

impl std::str::FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens_dat" | "dat" => Ok(InputFormat::MovielensDat),
            "csv" => Ok(InputFormat::Csv),
            "yelp_json" | "yelp" | "jsonl" => Ok(InputFormat::YelpJson),
            other => Err(Error::InvalidArgument(format!("unknown input format `{other}`"))),
        }
    }
}

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn parse_fields(fields: &[&str], line: usize) -> Result<RawInteraction> {
    if fields.len() < 4 {
        return Err(parse_err(line, fields.len() + 1, "expected 4 fields"));
    }
    let user_id = fields[0].trim();
    let item_id = fields[1].trim();
    if user_id.is_empty() {
        return Err(parse_err(line, 1, "empty user id"));
    }
    if item_id.is_empty() {
        return Err(parse_err(line, 2, "empty item id"));
    }
    let rating_field = fields[2].trim();
    let rating = if rating_field.is_empty() {
        None
    } else {
        let r: f64 = rating_field
            .parse()
            .map_err(|_| parse_err(line, 3, format!("bad rating `{rating_field}`")))?;
        if !r.is_finite() {
            return Err(parse_err(line, 3, "non-finite rating"));
        }
        Some(r)
    };
    let ts_field = fields[3].trim();
    let timestamp: i64 = ts_field
        .parse()
        .map_err(|_| parse_err(line, 4, format!("bad timestamp `{ts_field}`")))?;
    if timestamp < 0 {
        return Err(parse_err(line, 4, "negative timestamp"));
    }
    Ok(RawInteraction {
        user_id: user_id.to_string(),
        item_id: item_id.to_string(),
        rating,
        timestamp,
    })
}

#[derive(Deserialize)]
struct YelpReview {
    user_id: String,
    business_id: String,
    stars: Option<f64>,
    date: String,
}

fn parse_date(s: &str) -> Option<i64> {
    use chrono::{NaiveDate, NaiveDateTime};
    NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S"))
        .map(|dt| dt.and_utc().timestamp())
        .or_else(|_| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .map(|d| d.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp())
        })
        .ok()
}

/// Parses a whole interaction log. Every row either parses or the call
/// fails with its 1-based line and column.
pub fn load_interactions(path: impl AsRef<Path>, format: InputFormat) -> Result<Vec<RawInteraction>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    read_interactions(BufReader::new(file), format)
}

pub fn read_interactions(reader: impl BufRead, format: InputFormat) -> Result<Vec<RawInteraction>> {
    let mut out = Vec::new();
    match format {
        InputFormat::MovielensDat => {
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split("::").collect();
                out.push(parse_fields(&fields, i + 1)?);
            }
        }
        InputFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(true)
                .flexible(true)
                .from_reader(reader);
            for rec in rdr.records() {
                let rec = rec.map_err(|e| {
                    let line = e.position().map_or(0, |p| p.line() as usize);
                    parse_err(line, 0, e.to_string())
                })?;
                let line = rec.position().map_or(0, |p| p.line() as usize);
                let fields: Vec<&str> = rec.iter().collect();
                out.push(parse_fields(&fields, line)?);
            }
        }
        InputFormat::YelpJson => {
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let review: YelpReview = serde_json::from_str(&line)
                    .map_err(|e| parse_err(i + 1, e.column(), e.to_string()))?;
                let timestamp = parse_date(&review.date)
                    .ok_or_else(|| parse_err(i + 1, 0, format!("bad date `{}`", review.date)))?;
                out.push(RawInteraction {
                    user_id: review.user_id,
                    item_id: review.business_id,
                    rating: review.stars,
                    timestamp,
                });
            }
        }
    }
    Ok(out)
}

/// Keeps interactions rated strictly above `threshold` (or unrated) and
/// collapses every kept rating to 1.
pub fn binarize(records: Vec<RawInteraction>, threshold: f64) -> Vec<RawInteraction> {
    records
        .into_iter()
        .filter(|r| r.rating.is_none_or(|x| x > threshold))
        .map(|mut r| {
            r.rating = r.rating.map(|_| 1.0);
            r
        })
        .collect()
}

/// Repeatedly drops users with fewer than `min_user` and items with fewer
/// than `min_item` remaining interactions until nothing changes.
pub fn k_core_filter(
    records: Vec<RawInteraction>,
    min_user: usize,
    min_item: usize,
) -> Result<Vec<RawInteraction>> {
    let mut records = records;
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *users.entry(&r.user_id).or_default() += 1;
            *items.entry(&r.item_id).or_default() += 1;
        }
        let keep: Vec<bool> = records
            .iter()
            .map(|r| users[r.user_id.as_str()] >= min_user && items[r.item_id.as_str()] >= min_item)
            .collect();
        if keep.iter().all(|&k| k) {
            break;
        }
        let mut it = keep.into_iter();
        records.retain(|_| it.next().unwrap());
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(records)
}

/// Dense index maps. Item index 0 is reserved for padding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    pub item_ids: Vec<String>,
    pub user_ids: Vec<String>,
    item_index: HashMap<String, usize>,
    user_index: HashMap<String, usize>,
}

impl Vocab {
    /// Assigns indices in order of first appearance.
    pub fn build(records: &[RawInteraction]) -> Self {
        let mut v = Vocab::default();
        for r in records {
            if !v.user_index.contains_key(&r.user_id) {
                v.user_index.insert(r.user_id.clone(), v.user_ids.len());
                v.user_ids.push(r.user_id.clone());
            }
            if !v.item_index.contains_key(&r.item_id) {
                v.item_index.insert(r.item_id.clone(), v.item_ids.len() + 1);
                v.item_ids.push(r.item_id.clone());
            }
        }
        v
    }

    /// Rebuilds from id lists; item `k` of `item_ids` gets index `k + 1`.
    pub fn from_ids(user_ids: Vec<String>, item_ids: Vec<String>) -> Self {
        let user_index = user_ids.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        let item_index = item_ids.iter().enumerate().map(|(i, u)| (u.clone(), i + 1)).collect();
        Vocab {
            item_ids,
            user_ids,
            item_index,
            user_index,
        }
    }

    pub fn item(&self, id: &str) -> Option<usize> {
        self.item_index.get(id).copied()
    }

    pub fn user(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    pub fn item_id(&self, index: usize) -> Option<&str> {
        index.checked_sub(1).and_then(|i| self.item_ids.get(i)).map(String::as_str)
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    /// Size of the output distribution, padding slot included.
    pub fn vocab_size(&self) -> usize {
        self.item_ids.len() + 1
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }
}

/// `ceil(0.8 · n)`.
pub fn split_point(n: usize) -> usize {
    (4 * n).div_ceil(5)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user_index: usize,
    /// Time-ascending dense item indices.
    pub items: Vec<usize>,
    pub split_point: usize,
}

impl UserSequence {
    pub fn train(&self) -> &[usize] {
        &self.items[..self.split_point]
    }

    pub fn test(&self) -> &[usize] {
        &self.items[self.split_point..]
    }

    /// Training length `T_u`.
    pub fn train_len(&self) -> usize {
        self.split_point
    }
}

/// Groups records per user, sorts each user's items by timestamp (ties
/// keep file order) and applies the 8:2 split.
pub fn build_sequences(records: &[RawInteraction], vocab: &Vocab) -> Vec<UserSequence> {
    let mut per_user: Vec<Vec<(i64, usize)>> = vec![Vec::new(); vocab.num_users()];
    for r in records {
        let (Some(u), Some(i)) = (vocab.user(&r.user_id), vocab.item(&r.item_id)) else {
            continue;
        };
        per_user[u].push((r.timestamp, i));
    }
    per_user
        .into_iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(u, mut v)| {
            v.sort_by_key(|&(ts, _)| ts);
            let items: Vec<usize> = v.into_iter().map(|(_, i)| i).collect();
            UserSequence {
                user_index: u,
                split_point: split_point(items.len()),
                items,
            }
        })
        .collect()
}

/// Fixed-length batch in row-major `[batch × max_len]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub batch: usize,
    pub max_len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub user_indices: Vec<usize>,
    /// Number of real input items per row.
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    /// Builds a batch from training prefixes. Prefixes longer than
    /// `max_len` keep their last `max_len` items; shorter ones are
    /// zero-padded at the end.
    pub fn from_prefixes(prefixes: &[(usize, &[usize])], max_len: usize) -> Self {
        let b = prefixes.len();
        let mut inputs = vec![0; b * max_len];
        let mut targets = vec![0; b * max_len];
        let mut mask = vec![false; b * max_len];
        let mut lengths = Vec::with_capacity(b);
        for (row, &(_, prefix)) in prefixes.iter().enumerate() {
            let kept = &prefix[prefix.len().saturating_sub(max_len)..];
            let base = row * max_len;
            inputs[base..base + kept.len()].copy_from_slice(kept);
            for t in 0..kept.len().saturating_sub(1) {
                targets[base + t] = kept[t + 1];
                mask[base + t] = true;
            }
            lengths.push(kept.len());
        }
        PaddedBatch {
            batch: b,
            max_len,
            inputs,
            targets,
            mask,
            user_indices: prefixes.iter().map(|&(u, _)| u).collect(),
            lengths,
        }
    }

    /// Stacks the rows of `other` under those of `self`.
    pub fn merge(&self, other: &PaddedBatch) -> Result<PaddedBatch> {
        if self.max_len != other.max_len {
            return Err(Error::shape("merge", &[self.max_len], &[other.max_len]));
        }
        let cat = |a: &[usize], b: &[usize]| [a, b].concat();
        Ok(PaddedBatch {
            batch: self.batch + other.batch,
            max_len: self.max_len,
            inputs: cat(&self.inputs, &other.inputs),
            targets: cat(&self.targets, &other.targets),
            mask: [&self.mask[..], &other.mask[..]].concat(),
            user_indices: cat(&self.user_indices, &other.user_indices),
            lengths: cat(&self.lengths, &other.lengths),
        })
    }

    /// Longest real prefix in the batch.
    pub fn active_len(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    pub fn masked_positions(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// One epoch of batches over `sequences`; user order is shuffled by `seed`.
pub fn make_batches(
    sequences: &[UserSequence],
    max_len: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<PaddedBatch>> {
    if max_len < 2 {
        return Err(Error::InvalidArgument("max_len must be >= 2".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let prefixes: Vec<(usize, &[usize])> = chunk
                .iter()
                .map(|&i| (sequences[i].user_index, sequences[i].train()))
                .collect();
            PaddedBatch::from_prefixes(&prefixes, max_len)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub records: usize,
    pub avg_length: f64,
    pub sparsity: f64,
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "records={} users={} items={} avg_length={:.1} sparsity={:.1}%",
            self.records,
            self.users,
            self.items,
            self.avg_length,
            self.sparsity * 100.0
        )
    }
}

pub fn dataset_stats(sequences: &[UserSequence]) -> DatasetStats {
    let users = sequences.len();
    let records: usize = sequences.iter().map(|s| s.items.len()).sum();
    let mut seen = std::collections::HashSet::new();
    for s in sequences {
        seen.extend(s.items.iter().copied());
    }
    let items = seen.len();
    let (avg_length, sparsity) = if users == 0 || items == 0 {
        (0.0, 1.0)
    } else {
        (
            records as f64 / users as f64,
            1.0 - records as f64 / (users as f64 * items as f64),
        )
    };
    DatasetStats {
        users,
        items,
        records,
        avg_length,
        sparsity,
    }
}

/// Preprocessing knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub threshold: f64,
    pub min_user: usize,
    pub min_item: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            threshold: 3.0,
            min_user: 5,
            min_item: 5,
        }
    }
}

/// Preprocessed sequences with their vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub sequences: Vec<UserSequence>,
}

impl Dataset {
    pub fn from_records(records: Vec<RawInteraction>, cfg: &PreprocessConfig) -> Result<Self> {
        let positives = binarize(records, cfg.threshold);
        let kept = k_core_filter(positives, cfg.min_user, cfg.min_item)?;
        let vocab = Vocab::build(&kept);
        let sequences = build_sequences(&kept, &vocab);
        Ok(Dataset { vocab, sequences })
    }

    pub fn from_file(path: impl AsRef<Path>, format: InputFormat, cfg: &PreprocessConfig) -> Result<Self> {
        Dataset::from_records(load_interactions(path, format)?, cfg)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.vocab_size()
    }

    pub fn stats(&self) -> DatasetStats {
        dataset_stats(&self.sequences)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(serde_json::json!({
            "kind": "dataset",
            "user_ids": self.vocab.user_ids,
            "item_ids": self.vocab.item_ids,
        }));
        let mut offsets = Vec::with_capacity(self.sequences.len() + 1);
        let mut items = Vec::new();
        offsets.push(0u32);
        for s in &self.sequences {
            items.extend(s.items.iter().map(|&i| i as u32));
            offsets.push(items.len() as u32);
        }
        let users: Vec<u32> = self.sequences.iter().map(|s| s.user_index as u32).collect();
        let splits: Vec<u32> = self.sequences.iter().map(|s| s.split_point as u32).collect();
        c.push("user_index", vec![users.len()], Buffer::U32(users));
        c.push("offsets", vec![offsets.len()], Buffer::U32(offsets));
        c.push("items", vec![items.len()], Buffer::U32(items));
        c.push("split_points", vec![splits.len()], Buffer::U32(splits));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let strings = |key: &str| -> Result<Vec<String>> {
            serde_json::from_value(c.meta.get(key).cloned().unwrap_or_default())
                .map_err(|e| Error::Format(format!("{key}: {e}")))
        };
        let vocab = Vocab::from_ids(strings("user_ids")?, strings("item_ids")?);
        let users = c.get("user_index")?.data.as_u32()?;
        let offsets = c.get("offsets")?.data.as_u32()?;
        let items = c.get("items")?.data.as_u32()?;
        let splits = c.get("split_points")?.data.as_u32()?;
        if offsets.len() != users.len() + 1 || splits.len() != users.len() {
            return Err(Error::Format("inconsistent dataset buffers".into()));
        }
        let mut sequences = Vec::with_capacity(users.len());
        for (k, &u) in users.iter().enumerate() {
            let (lo, hi) = (offsets[k] as usize, offsets[k + 1] as usize);
            if lo > hi || hi > items.len() || splits[k] as usize > hi - lo {
                return Err(Error::Format("inconsistent dataset buffers".into()));
            }
            sequences.push(UserSequence {
                user_index: u as usize,
                items: items[lo..hi].iter().map(|&i| i as usize).collect(),
                split_point: splits[k] as usize,
            });
        }
        if sequences
            .iter()
            .flat_map(|s| s.items.iter())
            .any(|&i| i == 0 || i > vocab.num_items())
        {
            return Err(Error::Format("item index out of range".into()));
        }
        Ok(Dataset { vocab, sequences })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Dataset::from_container(&Container::load(path)?)
    }

    /// SHA-256 over the cache encoding, hex encoded.
    pub fn fingerprint(&self) -> String {
        let bytes = self.to_container().to_bytes().expect("in-memory encoding");
        hex::encode(Sha256::digest(&bytes))
    }
}
