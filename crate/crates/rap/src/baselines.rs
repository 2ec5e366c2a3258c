//! Comparison defenses: the plain recommender (alpha = 0), profile
//! obfuscation that adds items correlated with other attribute classes,
//! and a randomized-response perturbation over the six rating categories
//! (unrated plus scores 1 to 5).

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::advtrain::{fit, TrainConfig, TrainLog, TrainState};
use crate::dataio::{derive_rng, Attribute, AttributeTable, Rating, RatingDataset};
use crate::error::{RapError, Result};

/// Defense under evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Original,
    Blurme,
    Ldp,
    Rap,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Original, Method::Ldp, Method::Blurme, Method::Rap];

    pub fn key(self) -> &'static str {
        match self {
            Method::Original => "original",
            Method::Blurme => "blurme",
            Method::Ldp => "ldp",
            Method::Rap => "rap",
        }
    }

    pub fn from_key(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Method::Original),
            "blurme" => Ok(Method::Blurme),
            "ldp" => Ok(Method::Ldp),
            "rap" => Ok(Method::Rap),
            other => Err(RapError::argument(format!("unknown method {other:?}"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Baseline knobs; the defaults are the documented settings used by the
/// shipped experiments.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Items added per user by the obfuscation baseline. None derives
    /// one tenth of the mean profile length of the dataset at hand.
    pub blurme_k_add: Option<usize>,
    pub ldp_epsilon: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            blurme_k_add: None,
            ldp_epsilon: 1.0,
        }
    }
}

impl BaselineConfig {
    pub fn blurme_k(&self, ds: &RatingDataset) -> usize {
        self.blurme_k_add
            .unwrap_or_else(|| (0.1 * ds.mean_profile_len()).ceil() as usize)
    }
}

/// Add to each user's profile the `k_add` items most associated with
/// attribute classes other than the user's own, rated at the item's
/// global mean score. Association of item i for user h is
/// max over other classes c of P(i rated | c) - P(i rated | own class).
/// Existing ratings are never altered or removed.
pub fn blurme_obfuscate(
    ds: &RatingDataset,
    attrs: &AttributeTable,
    attr: Attribute,
    k_add: usize,
    _seed: u64,
) -> Result<RatingDataset> {
    if k_add == 0 {
        return Ok(ds.clone());
    }
    let classes = attr.class_count();
    let (n, m) = (ds.num_users(), ds.num_items());
    let mut class_size = vec![0usize; classes];
    let mut class_item_counts = vec![vec![0usize; m]; classes];
    for u in 0..n {
        // The perturbation runs on the data owner's side, where the
        // user's own attribute is known; this read is not part of any
        // inference-training path.
        let c = attrs.label_unguarded(u, attr);
        class_size[c] += 1;
        for r in ds.items_of(u) {
            class_item_counts[c][r.item] += 1;
        }
    }
    let freq: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            class_item_counts[c]
                .iter()
                .map(|&cnt| {
                    if class_size[c] == 0 {
                        0.0
                    } else {
                        cnt as f64 / class_size[c] as f64
                    }
                })
                .collect()
        })
        .collect();

    // Global mean rating per item, rounded to the nearest valid score.
    let mut sum = vec![0.0f64; m];
    let mut cnt = vec![0usize; m];
    for r in ds.ratings() {
        sum[r.item] += r.score as f64;
        cnt[r.item] += 1;
    }
    let fill_score = |item: usize| -> u8 {
        if cnt[item] == 0 {
            3
        } else {
            (sum[item] / cnt[item] as f64).round().clamp(1.0, 5.0) as u8
        }
    };

    let mut added = Vec::new();
    for u in 0..n {
        let own = attrs.label_unguarded(u, attr);
        let mut scored: Vec<(usize, f64)> = (0..m)
            .filter(|&i| !ds.is_rated(u, i))
            .map(|i| {
                let best_other = (0..classes)
                    .filter(|&c| c != own)
                    .map(|c| freq[c][i] - freq[own][i])
                    .fold(f64::NEG_INFINITY, f64::max);
                (i, best_other)
            })
            .collect();
        scored.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let take = k_add.min(scored.len());
        if take < k_add {
            log::warn!("user {u}: only {take} unrated items available for obfuscation");
        }
        let ts = ds.items_of(u).iter().map(|r| r.timestamp).max().unwrap_or(0);
        for &(item, _) in &scored[..take] {
            added.push(Rating {
                user: u,
                item,
                score: fill_score(item),
                timestamp: ts,
            });
        }
    }
    ds.with_added(added)
}

/// Keep probability of the 6-ary randomized response at privacy budget
/// epsilon.
pub fn rr_keep_probability(epsilon: f64) -> f64 {
    let e = epsilon.exp();
    e / (e + 5.0)
}

/// Randomized response over rating categories {unrated, 1..5}. Each user
/// perturbs their rated items plus an equally sized sample of unrated
/// items: the category is kept with probability e^eps / (e^eps + 5),
/// otherwise replaced by a uniform draw among the other five.
pub fn ldp_perturb(ds: &RatingDataset, epsilon: f64, seed: u64) -> Result<RatingDataset> {
    if epsilon <= 0.0 {
        return Err(RapError::argument("epsilon must be positive"));
    }
    let keep = rr_keep_probability(epsilon);
    let m = ds.num_items();
    let mut out = Vec::new();
    for u in 0..ds.num_users() {
        let mut rng = derive_rng(seed, "ldp", u as u64);
        let rated = ds.items_of(u);
        let max_ts = rated.iter().map(|r| r.timestamp).max().unwrap_or(0);
        // Universe: the user's rated items plus an equal-size uniform
        // sample of unrated ones, so unrated slots can flip to rated.
        let mut universe: Vec<(usize, u8, i64)> =
            rated.iter().map(|r| (r.item, r.score, r.timestamp)).collect();
        let unrated: Vec<usize> = (0..m).filter(|&i| !ds.is_rated(u, i)).collect();
        let sample_n = rated.len().min(unrated.len());
        let mut pool = unrated;
        for i in 0..sample_n {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        let mut sampled: Vec<usize> = pool[..sample_n].to_vec();
        sampled.sort_unstable();
        universe.extend(sampled.into_iter().map(|i| (i, 0u8, max_ts)));

        for (item, cat, ts) in universe {
            let new_cat = if rng.random::<f64>() < keep {
                cat
            } else {
                // Uniform over the other five categories.
                let mut c = rng.random_range(0..5) as u8;
                if c >= cat {
                    c += 1;
                }
                c
            };
            if new_cat > 0 {
                out.push(Rating {
                    user: u,
                    item,
                    score: new_cat,
                    timestamp: ts,
                });
            }
        }
    }
    RatingDataset::from_ratings(
        out,
        ds.num_users(),
        ds.num_items(),
        ds.user_ids.clone(),
        ds.item_ids.clone(),
    )
}

/// Dataset each defense shares with the recommender. The obfuscation
/// baseline is deployed per attribute; `blurme_attr` selects which.
pub fn perturb_for_method(
    method: Method,
    ds: &RatingDataset,
    attrs: &AttributeTable,
    bcfg: &BaselineConfig,
    blurme_attr: Attribute,
    seed: u64,
) -> Result<RatingDataset> {
    match method {
        Method::Original | Method::Rap => Ok(ds.clone()),
        Method::Blurme => blurme_obfuscate(ds, attrs, blurme_attr, bcfg.blurme_k(ds), seed),
        Method::Ldp => ldp_perturb(ds, bcfg.ldp_epsilon, seed),
    }
}

/// Train a defense on (possibly perturbed) data. The comparison methods
/// all use the plain alpha = 0 recommender; only the adversarially
/// trained method keeps its configured alpha.
pub fn run_baseline(
    method: Method,
    cfg: &TrainConfig,
    bcfg: &BaselineConfig,
    ds: &RatingDataset,
    attrs: &AttributeTable,
    blurme_attr: Attribute,
    train_users: &[usize],
) -> Result<(TrainState, TrainLog, RatingDataset)> {
    let shared = perturb_for_method(method, ds, attrs, bcfg, blurme_attr, cfg.seed)?;
    let mut cfg = cfg.clone();
    if method != Method::Rap {
        cfg.alpha = 0.0;
    }
    let (state, log) = fit(&cfg, &shared, attrs, train_users)?;
    Ok((state, log, shared))
}
