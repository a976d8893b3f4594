//! Rating-log ingestion, implicit-feedback conversion, the leave-one-out
//! split, and negative sampling for training and test candidate lists.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng as _;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ndcore::rng::{self, tag, Rng};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("no interactions found in input")]
    Empty,
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatingFormat {
    /// `user::item::rating::timestamp`
    Ml1m,
    /// tab-separated `user item rating timestamp`
    Ml100k,
    /// header `user,item,rating,timestamp`
    Csv,
}

impl FromStr for RatingFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ml-1m" => Ok(Self::Ml1m),
            "ml-100k" => Ok(Self::Ml100k),
            "csv" => Ok(Self::Csv),
            other => Err(format!(
                "unknown format `{other}` (expected ml-1m, ml-100k or csv)"
            )),
        }
    }
}

impl fmt::Display for RatingFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ml1m => "ml-1m",
            Self::Ml100k => "ml-100k",
            Self::Csv => "csv",
        })
    }
}

/// Bijection between original ids and dense indices in first-seen order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdMap {
    originals: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn intern(&mut self, original: &str) -> usize {
        if let Some(&i) = self.index.get(original) {
            return i;
        }
        let i = self.originals.len();
        self.originals.push(original.to_string());
        self.index.insert(original.to_string(), i);
        i
    }

    pub fn dense(&self, original: &str) -> Option<usize> {
        self.index.get(original).copied()
    }

    pub fn original(&self, dense: usize) -> Option<&str> {
        self.originals.get(dense).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    /// Writes `original_id<TAB>dense_id` rows in dense order.
    pub fn write_tsv(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        for (i, o) in self.originals.iter().enumerate() {
            out.push_str(o);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        fs::write(path, out).map_err(io_err(path))
    }

    pub fn read_tsv(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |reason: &str| DataError::Malformed {
                line: n + 1,
                reason: reason.to_string(),
            };
            let (orig, dense) = line
                .split_once('\t')
                .ok_or_else(|| malformed("expected original_id<TAB>dense_id"))?;
            let dense: usize = dense
                .trim()
                .parse()
                .map_err(|_| malformed("dense id is not an integer"))?;
            rows.push((dense, orig.to_string()));
        }
        rows.sort();
        let mut map = IdMap::default();
        for (expected, (dense, orig)) in rows.into_iter().enumerate() {
            if dense != expected || map.index.contains_key(&orig) {
                return Err(DataError::Invalid(format!(
                    "id map {} is not a dense bijection",
                    path.display()
                )));
            }
            map.intern(&orig);
        }
        Ok(map)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub timestamp: i64,
}

/// Deduplicated, densely indexed interaction records.
#[derive(Clone, Debug)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
    pub users: IdMap,
    pub items: IdMap,
}

impl InteractionLog {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// Writes `users.tsv` and `items.tsv` into `dir`.
    pub fn write_id_maps(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.users.write_tsv(&dir.join("users.tsv"))?;
        self.items.write_tsv(&dir.join("items.tsv"))
    }
}

pub fn parse_ratings(path: &Path, format: RatingFormat) -> Result<InteractionLog, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_ratings_str(&String::from_utf8_lossy(&bytes), format)
}

pub fn parse_ratings_str(text: &str, format: RatingFormat) -> Result<InteractionLog, DataError> {
    let mut users = IdMap::default();
    let mut items = IdMap::default();
    let mut raw = Vec::new();

    let mut push = |line: usize, fields: &[&str]| -> Result<(), DataError> {
        let malformed = |reason: String| DataError::Malformed { line, reason };
        let [user, item, rating, ts] = fields else {
            return Err(malformed(format!("expected 4 fields, found {}", fields.len())));
        };
        let (user, item) = (user.trim(), item.trim());
        if user.is_empty() || item.is_empty() {
            return Err(malformed("empty user or item id".to_string()));
        }
        let rating: f64 = rating
            .trim()
            .parse()
            .map_err(|_| malformed(format!("rating `{rating}` is not a number")))?;
        let timestamp = parse_timestamp(ts.trim())
            .ok_or_else(|| malformed(format!("timestamp `{ts}` is not an integer")))?;
        raw.push(Interaction {
            user: users.intern(user),
            item: items.intern(item),
            rating,
            timestamp,
        });
        Ok(())
    };

    match format {
        RatingFormat::Ml1m | RatingFormat::Ml100k => {
            for (n, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = match format {
                    RatingFormat::Ml1m => line.split("::").collect(),
                    _ => line.split('\t').collect(),
                };
                push(n + 1, &fields)?;
            }
        }
        RatingFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(true)
                .trim(csv::Trim::All)
                .from_reader(text.as_bytes());
            let header = reader.headers().map_err(|e| DataError::Malformed {
                line: 1,
                reason: e.to_string(),
            })?;
            if header.iter().collect::<Vec<_>>() != ["user", "item", "rating", "timestamp"] {
                if header.is_empty() {
                    return Err(DataError::Empty);
                }
                return Err(DataError::Malformed {
                    line: 1,
                    reason: "header must be `user,item,rating,timestamp`".to_string(),
                });
            }
            for rec in reader.records() {
                let rec = rec.map_err(|e| DataError::Malformed {
                    line: e.position().map_or(0, |p| p.line() as usize),
                    reason: e.to_string(),
                })?;
                let line = rec.position().map_or(0, |p| p.line() as usize);
                let fields: Vec<&str> = rec.iter().collect();
                push(line, &fields)?;
            }
        }
    }
    if raw.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(InteractionLog {
        records: dedup_latest(raw),
        users,
        items,
    })
}

fn parse_timestamp(s: &str) -> Option<i64> {
    s.parse::<i64>().ok().or_else(|| {
        // some exports write integral timestamps as floats
        let f: f64 = s.parse().ok()?;
        (f.fract() == 0.0 && f.is_finite()).then_some(f as i64)
    })
}

/// Keeps one record per (user, item): the latest timestamp, later lines
/// winning ties. Order of first appearance is preserved.
fn dedup_latest(raw: Vec<Interaction>) -> Vec<Interaction> {
    let mut slot: HashMap<(usize, usize), usize> = HashMap::with_capacity(raw.len());
    let mut out: Vec<Interaction> = Vec::with_capacity(raw.len());
    for rec in raw {
        match slot.get(&(rec.user, rec.item)) {
            Some(&i) => {
                if rec.timestamp >= out[i].timestamp {
                    out[i] = rec;
                }
            }
            None => {
                slot.insert((rec.user, rec.item), out.len());
                out.push(rec);
            }
        }
    }
    out
}

/// SHA-256 of the file contents, hex encoded.
pub fn fingerprint_file(path: &Path) -> Result<String, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Leave-one-out split: each user's latest interaction is held out.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub num_users: usize,
    pub num_items: usize,
    /// Training positives sorted by (user, item).
    pub train: Vec<(usize, usize)>,
    /// Per user, sorted training items.
    pub train_items: Vec<Vec<usize>>,
    /// Per user, the held-out positive; `None` for users with one interaction.
    pub test: Vec<Option<usize>>,
    /// Per user, sorted items from train ∪ test.
    observed: Vec<Vec<usize>>,
}

pub fn leave_one_out_split(log: &InteractionLog) -> SplitDataset {
    let (m, n) = (log.num_users(), log.num_items());
    let mut per_user: Vec<Vec<(i64, usize)>> = vec![Vec::new(); m];
    for r in &log.records {
        per_user[r.user].push((r.timestamp, r.item));
    }
    let mut train_items = vec![Vec::new(); m];
    let mut test = vec![None; m];
    let mut observed = vec![Vec::new(); m];
    for (u, recs) in per_user.iter_mut().enumerate() {
        // latest timestamp, larger item id on ties
        recs.sort_unstable();
        let mut items: Vec<usize> = recs.iter().map(|&(_, i)| i).collect();
        if items.len() >= 2 {
            test[u] = items.pop();
        }
        items.sort_unstable();
        let mut all = items.clone();
        if let Some(t) = test[u] {
            let pos = all.binary_search(&t).unwrap_or_else(|p| p);
            all.insert(pos, t);
        }
        train_items[u] = items;
        observed[u] = all;
    }
    let train = train_items
        .iter()
        .enumerate()
        .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
        .collect();
    SplitDataset {
        num_users: m,
        num_items: n,
        train,
        train_items,
        test,
        observed,
    }
}

impl SplitDataset {
    /// Sorted items the user interacted with in train or test.
    pub fn observed(&self, user: usize) -> &[usize] {
        &self.observed[user]
    }

    pub fn has_interacted(&self, user: usize, item: usize) -> bool {
        self.observed[user].binary_search(&item).is_ok()
    }

    /// Users with a held-out positive.
    pub fn evaluable_users(&self) -> impl Iterator<Item = usize> + '_ {
        self.test
            .iter()
            .enumerate()
            .filter_map(|(u, t)| t.map(|_| u))
    }

    pub fn unobserved_count(&self, user: usize) -> usize {
        self.num_items - self.observed[user].len()
    }

    fn unobserved(&self, user: usize) -> Vec<usize> {
        let seen = &self.observed[user];
        let mut j = 0;
        let mut out = Vec::with_capacity(self.unobserved_count(user));
        for item in 0..self.num_items {
            if j < seen.len() && seen[j] == item {
                j += 1;
            } else {
                out.push(item);
            }
        }
        out
    }

    /// One item the user never interacted with, uniformly at random.
    /// `complement` caches the unobserved list for dense users.
    fn sample_unobserved(
        &self,
        user: usize,
        rng: &mut Rng,
        complement: &mut Option<(usize, Vec<usize>)>,
    ) -> Option<usize> {
        let free = self.unobserved_count(user);
        if free == 0 {
            return None;
        }
        if free * 2 >= self.num_items {
            loop {
                let item = rng.random_range(0..self.num_items);
                if !self.has_interacted(user, item) {
                    return Some(item);
                }
            }
        }
        if complement.as_ref().is_none_or(|(u, _)| *u != user) {
            *complement = Some((user, self.unobserved(user)));
        }
        let list = &complement.as_ref().expect("set above").1;
        Some(list[rng.random_range(0..list.len())])
    }
}

/// Labeled pointwise instances.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainBatch {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
    pub labels: Vec<f64>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// (user, positive, negative) triplets for pairwise ranking.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletBatch {
    pub users: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// One epoch of negative samples: each training positive with `ratio`
/// negatives drawn uniformly from the user's never-interacted items.
#[derive(Clone, Debug)]
pub struct EpochSamples {
    pub groups: Vec<SampleGroup>,
    seed: u64,
    epoch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleGroup {
    pub user: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Draws negatives for every training positive. The stream is a pure
/// function of `(seed, epoch)`.
pub fn sample_train_negatives(
    split: &SplitDataset,
    ratio: usize,
    seed: u64,
    epoch: u64,
) -> Result<EpochSamples, DataError> {
    if ratio == 0 {
        return Err(DataError::Invalid("negative ratio must be ≥ 1".to_string()));
    }
    let mut rng = rng::stream(seed, &[tag::NEGATIVES, epoch]);
    let mut complement = None;
    let mut starved = HashSet::new();
    let groups = split
        .train
        .iter()
        .map(|&(user, positive)| {
            let negatives: Vec<usize> = (0..ratio)
                .filter_map(|_| split.sample_unobserved(user, &mut rng, &mut complement))
                .collect();
            if negatives.is_empty() {
                starved.insert(user);
            }
            SampleGroup {
                user,
                positive,
                negatives,
            }
        })
        .collect();
    if !starved.is_empty() {
        warn!(
            "{} user(s) interacted with every item; no negatives sampled for them",
            starved.len()
        );
    }
    Ok(EpochSamples {
        groups,
        seed,
        epoch,
    })
}

impl EpochSamples {
    pub fn instance_count(&self) -> usize {
        self.groups.iter().map(|g| 1 + g.negatives.len()).sum()
    }

    /// Shuffled pointwise batches: positives labeled 1, negatives 0.
    pub fn pointwise_batches(&self, batch_size: usize) -> Vec<TrainBatch> {
        let mut rows: Vec<(usize, usize, f64)> = Vec::with_capacity(self.instance_count());
        for g in &self.groups {
            rows.push((g.user, g.positive, 1.0));
            rows.extend(g.negatives.iter().map(|&n| (g.user, n, 0.0)));
        }
        rows.shuffle(&mut rng::stream(self.seed, &[tag::SHUFFLE, self.epoch]));
        rows.chunks(batch_size.max(1))
            .map(|chunk| TrainBatch {
                users: chunk.iter().map(|r| r.0).collect(),
                items: chunk.iter().map(|r| r.1).collect(),
                labels: chunk.iter().map(|r| r.2).collect(),
            })
            .collect()
    }

    /// Shuffled triplet batches pairing each positive with each of its negatives.
    pub fn triplet_batches(&self, batch_size: usize) -> Vec<TripletBatch> {
        let mut rows: Vec<(usize, usize, usize)> = self
            .groups
            .iter()
            .flat_map(|g| g.negatives.iter().map(move |&n| (g.user, g.positive, n)))
            .collect();
        rows.shuffle(&mut rng::stream(self.seed, &[tag::SHUFFLE, self.epoch]));
        rows.chunks(batch_size.max(1))
            .map(|chunk| TripletBatch {
                users: chunk.iter().map(|r| r.0).collect(),
                positives: chunk.iter().map(|r| r.1).collect(),
                negatives: chunk.iter().map(|r| r.2).collect(),
            })
            .collect()
    }
}

/// A user's test positive mixed with sampled negatives in random order.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateList {
    pub user: usize,
    pub items: Vec<usize>,
    pub positive_index: usize,
}

impl CandidateList {
    pub fn positive(&self) -> usize {
        self.items[self.positive_index]
    }
}

/// Builds one candidate list per evaluable user: the held-out positive plus
/// `negatives` distinct never-interacted items (fewer when the user has not
/// enough left).
pub fn build_test_candidates(
    split: &SplitDataset,
    negatives: usize,
    seed: u64,
) -> Vec<CandidateList> {
    split
        .evaluable_users()
        .map(|user| {
            let positive = split.test[user].expect("evaluable");
            let mut rng = rng::stream(seed, &[tag::CANDIDATES, user as u64]);
            let free = split.unobserved_count(user);
            let mut items = if free <= negatives.saturating_mul(4) {
                let mut pool = split.unobserved(user);
                let take = negatives.min(pool.len());
                pool.partial_shuffle(&mut rng, take);
                pool.truncate(take);
                pool
            } else {
                let mut chosen = HashSet::with_capacity(negatives);
                let mut picks = Vec::with_capacity(negatives + 1);
                while picks.len() < negatives {
                    let item = rng.random_range(0..split.num_items);
                    if !split.has_interacted(user, item) && chosen.insert(item) {
                        picks.push(item);
                    }
                }
                picks
            };
            items.push(positive);
            items.shuffle(&mut rng);
            let positive_index = items.iter().position(|&i| i == positive).expect("present");
            CandidateList {
                user,
                items,
                positive_index,
            }
        })
        .collect()
}

/// Per-item genre label sets, indexed by dense item id.
#[derive(Clone, Debug, Default)]
pub struct GenreMap {
    pub labels: Vec<String>,
    /// Bitmask over `labels`; `None` when the item has no genre entry.
    pub items: Vec<Option<u64>>,
}

impl GenreMap {
    pub fn of(&self, item: usize) -> Option<u64> {
        self.items.get(item).copied().flatten()
    }
}

/// Reads item genres from an `item::title::genre|genre` file (ml-1m
/// `movies.dat` layout) or an ml-100k `u.item` file (19 trailing 0/1 flags).
pub fn parse_genres(path: &Path, items: &IdMap) -> Result<GenreMap, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_genres_str(&String::from_utf8_lossy(&bytes), items)
}

const ML100K_GENRES: [&str; 19] = [
    "unknown",
    "Action",
    "Adventure",
    "Animation",
    "Children's",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];

pub fn parse_genres_str(text: &str, items: &IdMap) -> Result<GenreMap, DataError> {
    let mut map = GenreMap {
        labels: Vec::new(),
        items: vec![None; items.len()],
    };
    let mut label_index: HashMap<String, usize> = HashMap::new();
    let mut seen_any = false;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        seen_any = true;
        let malformed = |reason: &str| DataError::Malformed {
            line: n + 1,
            reason: reason.to_string(),
        };
        let (id, genres): (&str, Vec<&str>) = if line.contains("::") {
            let parts: Vec<&str> = line.splitn(3, "::").collect();
            let [id, _title, genres] = parts[..] else {
                return Err(malformed("expected item::title::genres"));
            };
            let g = genres
                .split('|')
                .map(str::trim)
                .filter(|g| !g.is_empty() && *g != "(no genres listed)")
                .collect();
            (id, g)
        } else {
            let parts: Vec<&str> = line.split('|').collect();
            if parts.len() < 5 + ML100K_GENRES.len() {
                return Err(malformed("expected ml-100k u.item layout"));
            }
            let flags = &parts[parts.len() - ML100K_GENRES.len()..];
            let g = flags
                .iter()
                .zip(ML100K_GENRES)
                .filter(|(f, _)| f.trim() == "1")
                .map(|(_, name)| name)
                .collect();
            (parts[0], g)
        };
        let Some(dense) = items.dense(id.trim()) else {
            continue;
        };
        let mut mask = 0u64;
        for g in genres {
            let next = label_index.len();
            let idx = *label_index.entry(g.to_string()).or_insert_with(|| {
                map.labels.push(g.to_string());
                next
            });
            if idx >= 64 {
                return Err(DataError::Invalid("more than 64 distinct genres".to_string()));
            }
            mask |= 1 << idx;
        }
        if mask != 0 {
            map.items[dense] = Some(mask);
        }
    }
    if !seen_any {
        return Err(DataError::Empty);
    }
    Ok(map)
}
