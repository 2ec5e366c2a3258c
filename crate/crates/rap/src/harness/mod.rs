//! Experiment orchestration: the two evaluation protocols (ranking
//! quality on held-out items, attribute-inference robustness against the
//! external adversary), grid runners for the method/l/seed matrix, the
//! alpha sweep and single-attribute variants, and report serialization.

pub mod config;

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adversary::{evaluate_attack, train_adversary};
use crate::advtrain::{fit, TrainConfig, TrainState};
use crate::baselines::{perturb_for_method, Method};
use crate::dataio::{
    load_ratings, load_user_attributes, split_attacker, split_recommendation, Attribute,
    AttributeTable, RatingDataset,
};
use crate::error::{RapError, Result};
use crate::metrics::{precision_at_k, recall_at_k};
use crate::recommender::batch_top_k;

pub use config::ExperimentConfig;

/// Load the ratings and attribute files named by the configuration.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(RatingDataset, AttributeTable)> {
    let ds = load_ratings(&cfg.ratings_path)?;
    let attrs = load_user_attributes(&cfg.users_path, &ds.user_ids)?;
    Ok((ds, attrs))
}

fn check_unit(name: &str, v: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&v) {
        return Err(RapError::validation(format!(
            "metric {name} = {v} outside [0, 1]"
        )));
    }
    Ok(v)
}

/// Ranking-quality numbers from one trained model.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct UtilityMetrics {
    /// Averages over users evaluable under the split.
    pub p_at_k: f64,
    pub r_at_k: f64,
    /// Averages counting excluded users as zero.
    pub p_at_k_all_users: f64,
    pub r_at_k_all_users: f64,
    pub evaluated_users: usize,
    pub excluded_users: usize,
    pub degenerate_users: usize,
}

/// Per-attribute adversary AUC from one attack-protocol run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AttackMetrics {
    pub auc_gender: f64,
    pub auc_age: f64,
    pub auc_occupation: f64,
    pub train_users: usize,
    pub test_users: usize,
}

impl AttackMetrics {
    pub fn auc(&self, attr: Attribute) -> f64 {
        match attr {
            Attribute::Gender => self.auc_gender,
            Attribute::Age => self.auc_age,
            Attribute::Occupation => self.auc_occupation,
        }
    }
}

/// Training configuration for one grid cell.
fn cell_train_config(
    x: &ExperimentConfig,
    method: Method,
    l: usize,
    seed: u64,
    alpha_override: Option<f64>,
    mask_override: Option<&[Attribute]>,
) -> TrainConfig {
    let mut t = x.train.clone();
    t.seed = seed;
    // Training-time list depth follows the evaluation depth.
    t.k_train = l;
    if method != Method::Rap {
        t.alpha = 0.0;
    }
    if let Some(a) = alpha_override {
        t.alpha = a;
    }
    if let Some(m) = mask_override {
        t.attribute_mask = m.to_vec();
    }
    t
}

/// Ranking-quality protocol: hold out `l` rated items per user, train the
/// defense on the remainder (perturbed when the method calls for it), and
/// measure precision/recall at `k` over the held-out items. The
/// obfuscation baseline is deployed once per attribute and its numbers
/// averaged.
pub fn utility_protocol(
    x: &ExperimentConfig,
    ds: &RatingDataset,
    attrs: &AttributeTable,
    method: Method,
    l: usize,
    seed: u64,
    alpha_override: Option<f64>,
    mask_override: Option<&[Attribute]>,
) -> Result<UtilityMetrics> {
    let split = split_recommendation(ds, l, seed)?;
    let deployments: &[Attribute] = if method == Method::Blurme {
        &Attribute::ALL
    } else {
        &[Attribute::Gender]
    };
    let tcfg = cell_train_config(x, method, l, seed, alpha_override, mask_override);
    let all_users: Vec<usize> = (0..ds.num_users()).collect();
    let mut acc: Option<UtilityMetrics> = None;
    for &dep in deployments {
        let shared = perturb_for_method(method, &split.train, attrs, &x.baseline, dep, seed)?;
        let (state, _) = fit(&tcfg, &shared, attrs, &all_users)?;
        let m = score_utility(&state, &shared, &split.heldout, x.k)?;
        acc = Some(match acc {
            None => m,
            Some(a) => UtilityMetrics {
                p_at_k: a.p_at_k + m.p_at_k,
                r_at_k: a.r_at_k + m.r_at_k,
                p_at_k_all_users: a.p_at_k_all_users + m.p_at_k_all_users,
                r_at_k_all_users: a.r_at_k_all_users + m.r_at_k_all_users,
                ..m
            },
        });
    }
    let mut m = acc.unwrap();
    let d = deployments.len() as f64;
    m.p_at_k /= d;
    m.r_at_k /= d;
    m.p_at_k_all_users /= d;
    m.r_at_k_all_users /= d;
    m.excluded_users = split.excluded_users.len();
    m.degenerate_users = split.degenerate_users.len();
    check_unit("p_at_k", m.p_at_k)?;
    check_unit("r_at_k", m.r_at_k)?;
    Ok(m)
}

fn score_utility(
    state: &TrainState,
    shared: &RatingDataset,
    heldout: &[Vec<usize>],
    k: usize,
) -> Result<UtilityMetrics> {
    let evaluable: Vec<usize> = (0..shared.num_users())
        .filter(|&u| !heldout[u].is_empty())
        .collect();
    let recs = batch_top_k(
        &state.rec_params,
        &evaluable,
        |u| shared.item_set_of(u),
        |u| k.min(shared.num_items() - shared.profile_len(u)),
    )?;
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    for (&u, rec) in evaluable.iter().zip(&recs) {
        p_sum += precision_at_k(&heldout[u], rec, k.min(rec.len()))?;
        r_sum += recall_at_k(&heldout[u], rec, k)?;
    }
    let n_eval = evaluable.len().max(1);
    let n_all = shared.num_users().max(1);
    Ok(UtilityMetrics {
        p_at_k: p_sum / n_eval as f64,
        r_at_k: r_sum / n_eval as f64,
        p_at_k_all_users: p_sum / n_all as f64,
        r_at_k_all_users: r_sum / n_all as f64,
        evaluated_users: evaluable.len(),
        excluded_users: 0,
        degenerate_users: 0,
    })
}

/// Attribute-inference protocol: split users 80/20, remove `l` rated
/// items from each test user, train the defense on the shared data
/// (attribute labels of test users are guard-protected), rebuild each
/// test user's item list as published-profile plus top-`l`
/// recommendations, then train the external adversary per attribute on
/// the training users' intact profiles and report its micro-AUC on the
/// test users.
pub fn attack_protocol(
    x: &ExperimentConfig,
    ds: &RatingDataset,
    attrs: &AttributeTable,
    method: Method,
    l: usize,
    seed: u64,
    alpha_override: Option<f64>,
    mask_override: Option<&[Attribute]>,
) -> Result<AttackMetrics> {
    let split = split_attacker(ds, x.attack_frac, l, seed)?;
    let guarded = attrs.with_guard(&split.test_users);
    let reduced = split.apply(ds)?;
    let tcfg = cell_train_config(x, method, l, seed, alpha_override, mask_override);

    // The adversary always trains on the original intact interactions of
    // the public users, whatever the defense under test publishes.
    let adv_train_lists: Vec<Vec<usize>> = split
        .train_users
        .iter()
        .map(|&u| ds.item_set_of(u))
        .collect();

    let mut trained: Option<(TrainState, RatingDataset)> = None;
    let mut aucs = [0.0f64; 3];
    for (ti, &attr) in Attribute::ALL.iter().enumerate() {
        // The obfuscation baseline publishes different data per
        // attribute, so the recommender is retrained for each; the other
        // methods share one training run.
        if trained.is_none() || method == Method::Blurme {
            let shared = perturb_for_method(method, &reduced, attrs, &x.baseline, attr, seed)?;
            let (state, _) = fit(&tcfg, &shared, &guarded, &split.train_users)?;
            trained = Some((state, shared));
        }
        let (state, shared) = trained.as_ref().unwrap();

        let published: Vec<Vec<usize>> = split
            .test_users
            .iter()
            .map(|&u| shared.item_set_of(u))
            .collect();
        let recs = batch_top_k(
            &state.rec_params,
            &split.test_users,
            |u| shared.item_set_of(u),
            |u| l.min(shared.num_items() - shared.profile_len(u)),
        )?;
        let test_lists: Vec<Vec<usize>> = published
            .iter()
            .zip(&recs)
            .map(|(profile, rec)| {
                let mut s: BTreeSet<usize> = profile.iter().copied().collect();
                s.extend(rec.iter().copied());
                s.into_iter().collect()
            })
            .collect();

        let train_labels: Vec<usize> = split
            .train_users
            .iter()
            .map(|&u| guarded.label(u, attr))
            .collect::<Result<_>>()?;
        let test_labels: Vec<usize> = split
            .test_users
            .iter()
            .map(|&u| attrs.label_unguarded(u, attr))
            .collect();

        let mut adv_cfg = x.adversary.clone();
        adv_cfg.seed = seed ^ (0x5ad5 + ti as u64);
        let adv = train_adversary(
            &adv_train_lists,
            &train_labels,
            attr.class_count(),
            ds.num_items(),
            &adv_cfg,
        )?;
        let auc = evaluate_attack(&adv, &test_lists, &test_labels)?;
        aucs[ti] = check_unit(&format!("auc_{}", attr.key()), auc)?;
    }
    Ok(AttackMetrics {
        auc_gender: aucs[0],
        auc_age: aucs[1],
        auc_occupation: aucs[2],
        train_users: split.train_users.len(),
        test_users: split.test_users.len(),
    })
}

/// One seed's worth of numbers for a grid cell.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SeedCell {
    pub seed: u64,
    pub utility: Option<UtilityMetrics>,
    pub attack: Option<AttackMetrics>,
    pub wall_secs: f64,
}

/// One row of the report: a method at one held-out depth, averaged over
/// seeds.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MethodCell {
    pub method: String,
    pub l: usize,
    pub auc_gender: f64,
    pub auc_age: f64,
    pub auc_occupation: f64,
    pub p_at_k: f64,
    pub r_at_k: f64,
    pub p_at_k_all_users: f64,
    pub excluded_users: usize,
    pub per_seed: Vec<SeedCell>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExperimentReport {
    pub k: usize,
    pub attack_frac: f64,
    pub seeds: Vec<u64>,
    pub cells: Vec<MethodCell>,
    pub wall_secs: f64,
}

impl ExperimentReport {
    /// Flat CSV mirroring the main results table layout.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("method,l,gender_auc,age_auc,occupation_auc,p_at_k,r_at_k\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                c.method, c.l, c.auc_gender, c.auc_age, c.auc_occupation, c.p_at_k, c.r_at_k
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(self)?,
        )?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        Ok(())
    }
}

/// Run one labeled grid cell over all seeds.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    x: &ExperimentConfig,
    ds: &RatingDataset,
    attrs: &AttributeTable,
    label: &str,
    method: Method,
    l: usize,
    alpha_override: Option<f64>,
    mask_override: Option<&[Attribute]>,
) -> Result<MethodCell> {
    let mut per_seed = Vec::new();
    for &seed in &x.seeds {
        let t0 = Instant::now();
        let utility = utility_protocol(x, ds, attrs, method, l, seed, alpha_override, mask_override)?;
        let attack = attack_protocol(x, ds, attrs, method, l, seed, alpha_override, mask_override)?;
        per_seed.push(SeedCell {
            seed,
            utility: Some(utility),
            attack: Some(attack),
            wall_secs: t0.elapsed().as_secs_f64(),
        });
        log::info!(
            "cell {label} l={l} seed={seed} done in {:.1}s",
            per_seed.last().unwrap().wall_secs
        );
    }
    Ok(aggregate_cell(label, l, per_seed))
}

/// Average per-seed numbers into one report row.
pub fn aggregate_cell(label: &str, l: usize, per_seed: Vec<SeedCell>) -> MethodCell {
    let n = per_seed.len().max(1) as f64;
    let mean = |f: &dyn Fn(&SeedCell) -> f64| per_seed.iter().map(|s| f(s)).sum::<f64>() / n;
    MethodCell {
        method: label.to_string(),
        l,
        auc_gender: mean(&|s| s.attack.as_ref().map_or(f64::NAN, |a| a.auc_gender)),
        auc_age: mean(&|s| s.attack.as_ref().map_or(f64::NAN, |a| a.auc_age)),
        auc_occupation: mean(&|s| s.attack.as_ref().map_or(f64::NAN, |a| a.auc_occupation)),
        p_at_k: mean(&|s| s.utility.as_ref().map_or(f64::NAN, |u| u.p_at_k)),
        r_at_k: mean(&|s| s.utility.as_ref().map_or(f64::NAN, |u| u.r_at_k)),
        p_at_k_all_users: mean(&|s| s.utility.as_ref().map_or(f64::NAN, |u| u.p_at_k_all_users)),
        excluded_users: per_seed
            .first()
            .and_then(|s| s.utility.as_ref())
            .map_or(0, |u| u.excluded_users),
        per_seed,
    }
}

/// Full method-by-depth grid.
pub fn run_table1(x: &ExperimentConfig, ds: &RatingDataset, attrs: &AttributeTable) -> Result<ExperimentReport> {
    let t0 = Instant::now();
    let mut cells = Vec::new();
    for &method in &x.methods {
        for &l in &x.l_values {
            cells.push(run_cell(x, ds, attrs, method.key(), method, l, None, None)?);
        }
    }
    Ok(ExperimentReport {
        k: x.k,
        attack_frac: x.attack_frac,
        seeds: x.seeds.clone(),
        cells,
        wall_secs: t0.elapsed().as_secs_f64(),
    })
}

/// Adversarial-weight sweep at fixed depth; alpha = 0 reproduces the
/// plain recommender.
pub fn run_alpha_sweep(
    x: &ExperimentConfig,
    ds: &RatingDataset,
    attrs: &AttributeTable,
    l: usize,
) -> Result<ExperimentReport> {
    let t0 = Instant::now();
    let mut cells = Vec::new();
    for &alpha in &x.alphas {
        let label = format!("alpha={alpha}");
        cells.push(run_cell(x, ds, attrs, &label, Method::Rap, l, Some(alpha), None)?);
    }
    Ok(ExperimentReport {
        k: x.k,
        attack_frac: x.attack_frac,
        seeds: x.seeds.clone(),
        cells,
        wall_secs: t0.elapsed().as_secs_f64(),
    })
}

/// The full model against its single-attribute variants.
pub fn run_variants(
    x: &ExperimentConfig,
    ds: &RatingDataset,
    attrs: &AttributeTable,
) -> Result<ExperimentReport> {
    let t0 = Instant::now();
    let variants: [(&str, &[Attribute]); 4] = [
        ("rap", &Attribute::ALL),
        ("rap-age", &[Attribute::Age]),
        ("rap-gen", &[Attribute::Gender]),
        ("rap-occ", &[Attribute::Occupation]),
    ];
    let mut cells = Vec::new();
    for &l in &x.l_values {
        for (label, mask) in variants {
            cells.push(run_cell(x, ds, attrs, label, Method::Rap, l, None, Some(mask))?);
        }
    }
    Ok(ExperimentReport {
        k: x.k,
        attack_frac: x.attack_frac,
        seeds: x.seeds.clone(),
        cells,
        wall_secs: t0.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests;
