//! MovieLens-100K ingestion: rating/attribute parsing, dense re-indexing,
//! and the two train/test split protocols used by the evaluation harness.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RapError, Result};

/// One user-item interaction. Indices are dense and 0-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub score: u8,
    pub timestamp: i64,
}

/// Bijection between original file ids and dense 0-based indices.
#[derive(Clone, Debug, Default)]
pub struct IdMap {
    to_orig: Vec<u32>,
    to_dense: HashMap<u32, usize>,
}

impl IdMap {
    fn from_ids(mut ids: Vec<u32>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        let to_dense = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        IdMap { to_orig: ids, to_dense }
    }

    pub fn len(&self) -> usize {
        self.to_orig.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_orig.is_empty()
    }

    pub fn dense(&self, orig: u32) -> Option<usize> {
        self.to_dense.get(&orig).copied()
    }

    pub fn orig(&self, dense: usize) -> u32 {
        self.to_orig[dense]
    }
}

/// Sparse user-item ratings with a per-user index.
#[derive(Clone, Debug, Default)]
pub struct RatingDataset {
    ratings: Vec<Rating>,
    num_users: usize,
    num_items: usize,
    per_user: Vec<Vec<Rating>>,
    rated: Vec<bool>,
    pub user_ids: IdMap,
    pub item_ids: IdMap,
}

impl RatingDataset {
    /// Build from dense-indexed ratings, validating scores and duplicates.
    pub fn from_ratings(
        ratings: Vec<Rating>,
        num_users: usize,
        num_items: usize,
        user_ids: IdMap,
        item_ids: IdMap,
    ) -> Result<Self> {
        let mut per_user: Vec<Vec<Rating>> = vec![Vec::new(); num_users];
        let mut rated = vec![false; num_users * num_items];
        for r in &ratings {
            if r.user >= num_users || r.item >= num_items {
                return Err(RapError::validation(format!(
                    "rating index ({}, {}) outside {}x{}",
                    r.user, r.item, num_users, num_items
                )));
            }
            if !(1..=5).contains(&r.score) {
                return Err(RapError::validation(format!(
                    "rating score {} outside 1..=5",
                    r.score
                )));
            }
            let slot = &mut rated[r.user * num_items + r.item];
            if *slot {
                return Err(RapError::validation(format!(
                    "duplicate rating for user {} item {}",
                    r.user, r.item
                )));
            }
            *slot = true;
            per_user[r.user].push(*r);
        }
        for items in &mut per_user {
            items.sort_unstable_by_key(|r| r.item);
        }
        Ok(RatingDataset {
            ratings,
            num_users,
            num_items,
            per_user,
            rated,
            user_ids,
            item_ids,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_ratings(&self) -> usize {
        self.ratings.len()
    }

    pub fn ratings(&self) -> &[Rating] {
        &self.ratings
    }

    /// User's ratings sorted by item index.
    pub fn items_of(&self, user: usize) -> &[Rating] {
        &self.per_user[user]
    }

    pub fn item_set_of(&self, user: usize) -> Vec<usize> {
        self.per_user[user].iter().map(|r| r.item).collect()
    }

    pub fn is_rated(&self, user: usize, item: usize) -> bool {
        self.rated[user * self.num_items + item]
    }

    pub fn profile_len(&self, user: usize) -> usize {
        self.per_user[user].len()
    }

    pub fn mean_profile_len(&self) -> f64 {
        if self.num_users == 0 {
            return 0.0;
        }
        self.ratings.len() as f64 / self.num_users as f64
    }

    /// Copy with the given (user, item) pairs removed; dimensions and id
    /// maps are preserved.
    pub fn without(&self, remove: &HashMap<usize, Vec<usize>>) -> Result<Self> {
        let drop: std::collections::HashSet<(usize, usize)> = remove
            .iter()
            .flat_map(|(&u, items)| items.iter().map(move |&i| (u, i)))
            .collect();
        let kept: Vec<Rating> = self
            .ratings
            .iter()
            .filter(|r| !drop.contains(&(r.user, r.item)))
            .copied()
            .collect();
        RatingDataset::from_ratings(
            kept,
            self.num_users,
            self.num_items,
            self.user_ids.clone(),
            self.item_ids.clone(),
        )
    }

    /// Copy with extra ratings appended (used by perturbation baselines).
    pub fn with_added(&self, added: Vec<Rating>) -> Result<Self> {
        let mut all = self.ratings.clone();
        all.extend(added);
        RatingDataset::from_ratings(
            all,
            self.num_users,
            self.num_items,
            self.user_ids.clone(),
            self.item_ids.clone(),
        )
    }

    /// Serialize in the same tab-separated layout as the input file,
    /// with original ids, sorted by (user, item).
    pub fn to_tsv(&self) -> String {
        let mut rows: Vec<&Rating> = self.ratings.iter().collect();
        rows.sort_unstable_by_key(|r| (r.user, r.item));
        let mut out = String::new();
        for r in rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                self.user_ids.orig(r.user),
                self.item_ids.orig(r.item),
                r.score,
                r.timestamp
            ));
        }
        out
    }
}

/// Parse a `u.data`-layout file: tab-separated user, item, rating,
/// timestamp with 1-based ids. Ids are re-indexed to dense 0-based
/// indices; the id maps record the bijection.
pub fn load_ratings(path: &Path) -> Result<RatingDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_ratings(&text)
}

pub fn parse_ratings(text: &str) -> Result<RatingDataset> {
    let mut raw = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let mut field = |name: &str| {
            parts.next().ok_or_else(|| RapError::Parse {
                line: ln + 1,
                msg: format!("missing {name} field"),
            })
        };
        let user: u32 = parse_num(field("user")?, ln + 1, "user")?;
        let item: u32 = parse_num(field("item")?, ln + 1, "item")?;
        let score: u8 = parse_num(field("rating")?, ln + 1, "rating")?;
        let timestamp: i64 = parse_num(field("timestamp")?, ln + 1, "timestamp")?;
        if !(1..=5).contains(&score) {
            return Err(RapError::validation(format!(
                "line {}: rating {} outside 1..=5",
                ln + 1,
                score
            )));
        }
        raw.push((user, item, score, timestamp));
    }
    let user_ids = IdMap::from_ids(raw.iter().map(|r| r.0).collect());
    let item_ids = IdMap::from_ids(raw.iter().map(|r| r.1).collect());
    let ratings = raw
        .iter()
        .map(|&(u, i, s, t)| Rating {
            user: user_ids.dense(u).unwrap(),
            item: item_ids.dense(i).unwrap(),
            score: s,
            timestamp: t,
        })
        .collect();
    RatingDataset::from_ratings(ratings, user_ids.len(), item_ids.len(), user_ids, item_ids)
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| RapError::Parse {
        line,
        msg: format!("bad {what} value {s:?}"),
    })
}

/// The three private attributes, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Attribute {
    Gender,
    Age,
    Occupation,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Gender, Attribute::Age, Attribute::Occupation];

    pub fn class_count(self) -> usize {
        match self {
            Attribute::Gender => 2,
            Attribute::Age => 3,
            Attribute::Occupation => 21,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Attribute::Gender => "gender",
            Attribute::Age => "age",
            Attribute::Occupation => "occupation",
        }
    }

    pub fn from_key(s: &str) -> Result<Self> {
        match s {
            "gender" => Ok(Attribute::Gender),
            "age" => Ok(Attribute::Age),
            "occupation" => Ok(Attribute::Occupation),
            other => Err(RapError::argument(format!("unknown attribute {other:?}"))),
        }
    }
}

/// Occupation vocabulary in sorted order; class index = position.
pub const OCCUPATIONS: [&str; 21] = [
    "administrator",
    "artist",
    "doctor",
    "educator",
    "engineer",
    "entertainment",
    "executive",
    "healthcare",
    "homemaker",
    "lawyer",
    "librarian",
    "marketing",
    "none",
    "other",
    "programmer",
    "retired",
    "salesman",
    "scientist",
    "student",
    "technician",
    "writer",
];

/// Age bucketing: under-35, 35 to 44, 45 and over.
pub fn age_bucket(age: u32) -> u8 {
    if age < 35 {
        0
    } else if age < 45 {
        1
    } else {
        2
    }
}

/// Per-user private attribute labels as class indices. An optional access
/// guard makes reads of held-out users' labels fail, so tests can prove
/// that no training path touches them.
#[derive(Clone, Debug)]
pub struct AttributeTable {
    gender: Vec<u8>,
    age_bucket: Vec<u8>,
    occupation: Vec<u8>,
    guarded: Option<Vec<bool>>,
}

impl AttributeTable {
    pub fn num_users(&self) -> usize {
        self.gender.len()
    }

    /// Class label for a user; errors if the user's labels are guarded.
    pub fn label(&self, user: usize, attr: Attribute) -> Result<usize> {
        if let Some(g) = &self.guarded {
            if g[user] {
                return Err(RapError::usage(format!(
                    "attribute labels of held-out user {user} were accessed during training"
                )));
            }
        }
        Ok(self.label_unguarded(user, attr))
    }

    /// Label read for evaluation code, bypassing the guard.
    pub fn label_unguarded(&self, user: usize, attr: Attribute) -> usize {
        (match attr {
            Attribute::Gender => self.gender[user],
            Attribute::Age => self.age_bucket[user],
            Attribute::Occupation => self.occupation[user],
        }) as usize
    }

    /// Copy with reads of `users`' labels tripped.
    pub fn with_guard(&self, users: &[usize]) -> Self {
        let mut g = vec![false; self.num_users()];
        for &u in users {
            g[u] = true;
        }
        AttributeTable {
            guarded: Some(g),
            ..self.clone()
        }
    }

    pub fn to_psv(&self, user_ids: &IdMap) -> String {
        let mut out = String::new();
        for u in 0..self.num_users() {
            out.push_str(&format!(
                "{}|{}|{}|{}\n",
                user_ids.orig(u),
                self.gender[u],
                self.age_bucket[u],
                self.occupation[u]
            ));
        }
        out
    }
}

/// Parse a `u.user`-layout file: pipe-separated user, age, gender,
/// occupation, zip. Gender maps M to 0 and F to 1; ages are bucketed;
/// occupations use the fixed sorted vocabulary.
pub fn load_user_attributes(path: &Path, users: &IdMap) -> Result<AttributeTable> {
    let text = std::fs::read_to_string(path)?;
    parse_user_attributes(&text, users)
}

pub fn parse_user_attributes(text: &str, users: &IdMap) -> Result<AttributeTable> {
    let n = users.len();
    let mut gender = vec![u8::MAX; n];
    let mut age = vec![u8::MAX; n];
    let mut occupation = vec![u8::MAX; n];
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('|').collect();
        if parts.len() < 4 {
            return Err(RapError::Parse {
                line: ln + 1,
                msg: format!("expected 5 pipe-separated fields, got {}", parts.len()),
            });
        }
        let orig: u32 = parse_num(parts[0], ln + 1, "user id")?;
        let dense = users.dense(orig).ok_or_else(|| {
            RapError::validation(format!(
                "line {}: user id {orig} not present in the ratings id map",
                ln + 1
            ))
        })?;
        let age_years: u32 = parse_num(parts[1], ln + 1, "age")?;
        let g = match parts[2].trim() {
            "M" => 0u8,
            "F" => 1u8,
            other => {
                return Err(RapError::Parse {
                    line: ln + 1,
                    msg: format!("bad gender token {other:?}"),
                })
            }
        };
        let occ_token = parts[3].trim();
        let occ = OCCUPATIONS
            .iter()
            .position(|&o| o == occ_token)
            .ok_or_else(|| {
                RapError::validation(format!(
                    "line {}: unknown occupation {occ_token:?}",
                    ln + 1
                ))
            })? as u8;
        gender[dense] = g;
        age[dense] = age_bucket(age_years);
        occupation[dense] = occ;
    }
    if let Some(missing) = gender.iter().position(|&g| g == u8::MAX) {
        return Err(RapError::validation(format!(
            "no attribute row for user id {}",
            users.orig(missing)
        )));
    }
    Ok(AttributeTable {
        gender,
        age_bucket: age,
        occupation,
        guarded: None,
    })
}

/// Derive a per-purpose RNG stream from the run seed.
pub fn derive_rng(seed: u64, tag: &str, idx: u64) -> ChaCha8Rng {
    let mut h: u64 = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in tag.as_bytes() {
        h = (h ^ (*b as u64)).wrapping_mul(0x100_0000_01b3);
    }
    h = (h ^ idx).wrapping_mul(0x100_0000_01b3);
    ChaCha8Rng::seed_from_u64(h)
}

/// Sample `k` distinct elements of `pool` (partial Fisher-Yates).
fn sample_distinct<R: Rng>(pool: &mut [usize], k: usize, rng: &mut R) -> Vec<usize> {
    let n = pool.len();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool[..k].to_vec()
}

/// Held-out-items split for recommendation evaluation.
#[derive(Clone, Debug)]
pub struct RecSplit {
    pub train: RatingDataset,
    /// Held-out item set per user; empty for excluded users.
    pub heldout: Vec<Vec<usize>>,
    /// Users with fewer than `l` ratings, excluded from evaluation.
    pub excluded_users: Vec<usize>,
    /// Users whose entire profile was held out.
    pub degenerate_users: Vec<usize>,
    pub l: usize,
    pub seed: u64,
}

/// Hold out `l` random rated items per user. Users with fewer than `l`
/// ratings keep their data in the train set but are excluded from
/// evaluation.
pub fn split_recommendation(ds: &RatingDataset, l: usize, seed: u64) -> Result<RecSplit> {
    if l == 0 {
        return Err(RapError::argument("held-out count l must be positive"));
    }
    let mut heldout = vec![Vec::new(); ds.num_users()];
    let mut excluded = Vec::new();
    let mut degenerate = Vec::new();
    let mut removal: HashMap<usize, Vec<usize>> = HashMap::new();
    for u in 0..ds.num_users() {
        let mut items = ds.item_set_of(u);
        if items.len() < l {
            excluded.push(u);
            continue;
        }
        if items.len() == l {
            degenerate.push(u);
        }
        let mut rng = derive_rng(seed, "rec-split", u as u64);
        let mut sel = sample_distinct(&mut items, l, &mut rng);
        sel.sort_unstable();
        removal.insert(u, sel.clone());
        heldout[u] = sel;
    }
    let train = ds.without(&removal)?;
    Ok(RecSplit {
        train,
        heldout,
        excluded_users: excluded,
        degenerate_users: degenerate,
        l,
        seed,
    })
}

/// User-level split for the attribute-inference evaluation: a fraction of
/// users are public training users; the rest are test users whose labels
/// stay hidden and who have `l` rated items removed.
#[derive(Clone, Debug)]
pub struct AttackSplit {
    pub train_users: Vec<usize>,
    pub test_users: Vec<usize>,
    /// Removed items, aligned with `test_users`.
    pub removed: Vec<Vec<usize>>,
    pub frac: f64,
    pub l: usize,
    pub seed: u64,
}

pub fn split_attacker(ds: &RatingDataset, frac: f64, l: usize, seed: u64) -> Result<AttackSplit> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(RapError::argument(format!(
            "train fraction {frac} outside (0, 1)"
        )));
    }
    if l == 0 {
        return Err(RapError::argument("removed count l must be positive"));
    }
    let mut users: Vec<usize> = (0..ds.num_users()).collect();
    let mut rng = derive_rng(seed, "attack-split", 0);
    users.shuffle(&mut rng);
    let n_train = ((ds.num_users() as f64) * frac).floor() as usize;
    let mut train_users = users[..n_train].to_vec();
    let mut test_users = users[n_train..].to_vec();
    train_users.sort_unstable();
    test_users.sort_unstable();
    let mut removed = Vec::with_capacity(test_users.len());
    for &u in &test_users {
        let mut items = ds.item_set_of(u);
        let k = l.min(items.len());
        let mut rng = derive_rng(seed, "attack-remove", u as u64);
        let mut sel = sample_distinct(&mut items, k, &mut rng);
        sel.sort_unstable();
        removed.push(sel);
    }
    Ok(AttackSplit {
        train_users,
        test_users,
        removed,
        frac,
        l,
        seed,
    })
}

impl AttackSplit {
    /// Dataset as shared with the recommender: training users intact,
    /// test users with their removed items dropped.
    pub fn apply(&self, ds: &RatingDataset) -> Result<RatingDataset> {
        let removal: HashMap<usize, Vec<usize>> = self
            .test_users
            .iter()
            .zip(self.removed.iter())
            .map(|(&u, items)| (u, items.clone()))
            .collect();
        ds.without(&removal)
    }
}

/// JSON manifest for a recommendation split, keyed by original ids so a
/// run can be reproduced bit-exactly from the manifest alone.
#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct RecSplitManifest {
    pub seed: u64,
    pub l: usize,
    pub heldout: Vec<(u32, Vec<u32>)>,
    pub excluded_users: Vec<u32>,
}

impl RecSplit {
    pub fn manifest(&self, ds: &RatingDataset) -> RecSplitManifest {
        RecSplitManifest {
            seed: self.seed,
            l: self.l,
            heldout: (0..ds.num_users())
                .filter(|&u| !self.heldout[u].is_empty())
                .map(|u| {
                    (
                        ds.user_ids.orig(u),
                        self.heldout[u].iter().map(|&i| ds.item_ids.orig(i)).collect(),
                    )
                })
                .collect(),
            excluded_users: self
                .excluded_users
                .iter()
                .map(|&u| ds.user_ids.orig(u))
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct AttackSplitManifest {
    pub seed: u64,
    pub frac: f64,
    pub l: usize,
    pub train_users: Vec<u32>,
    pub test_users: Vec<u32>,
    pub removed: Vec<(u32, Vec<u32>)>,
}

impl AttackSplit {
    pub fn manifest(&self, ds: &RatingDataset) -> AttackSplitManifest {
        AttackSplitManifest {
            seed: self.seed,
            frac: self.frac,
            l: self.l,
            train_users: self.train_users.iter().map(|&u| ds.user_ids.orig(u)).collect(),
            test_users: self.test_users.iter().map(|&u| ds.user_ids.orig(u)).collect(),
            removed: self
                .test_users
                .iter()
                .zip(self.removed.iter())
                .map(|(&u, items)| {
                    (
                        ds.user_ids.orig(u),
                        items.iter().map(|&i| ds.item_ids.orig(i)).collect(),
                    )
                })
                .collect(),
        }
    }

    pub fn from_manifest(m: &AttackSplitManifest, ds: &RatingDataset) -> Result<Self> {
        let dense_user = |orig: u32| {
            ds.user_ids
                .dense(orig)
                .ok_or_else(|| RapError::validation(format!("manifest user {orig} not in dataset")))
        };
        let dense_item = |orig: u32| {
            ds.item_ids
                .dense(orig)
                .ok_or_else(|| RapError::validation(format!("manifest item {orig} not in dataset")))
        };
        let train_users = m
            .train_users
            .iter()
            .map(|&u| dense_user(u))
            .collect::<Result<_>>()?;
        let test_users: Vec<usize> = m
            .test_users
            .iter()
            .map(|&u| dense_user(u))
            .collect::<Result<_>>()?;
        let mut removed_by_user: HashMap<usize, Vec<usize>> = HashMap::new();
        for (orig_u, items) in &m.removed {
            let u = dense_user(*orig_u)?;
            removed_by_user.insert(
                u,
                items.iter().map(|&i| dense_item(i)).collect::<Result<_>>()?,
            );
        }
        let removed = test_users
            .iter()
            .map(|u| removed_by_user.remove(u).unwrap_or_default())
            .collect();
        Ok(AttackSplit {
            train_users,
            test_users,
            removed,
            frac: m.frac,
            l: m.l,
            seed: m.seed,
        })
    }
}

#[cfg(test)]
mod tests;
