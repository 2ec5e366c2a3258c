//! External evaluation-only adversary: a single-hidden-layer feed-forward
//! classifier over multi-hot item lists. It models a malicious attacker
//! who sees published item lists but nothing of the recommender's
//! internals, and is trained from scratch for each evaluation.

use rand::seq::SliceRandom;

use crate::dataio::derive_rng;
use crate::error::{RapError, Result};
use crate::metrics::micro_auc;
use crate::nnkernel::{adam_step, AdamState, ParameterSet, Tape, Tensor};

pub const PARAM_W1: &str = "adv.w1";
pub const PARAM_B1: &str = "adv.b1";
pub const PARAM_W2: &str = "adv.w2";
pub const PARAM_B2: &str = "adv.b2";

#[derive(Clone, Debug)]
pub struct AdversaryConfig {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// L2 coefficient on the weight matrices; keeps the classifier from
    /// memorizing individual training profiles.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig {
            hidden_dim: 100,
            epochs: 50,
            lr: 1e-3,
            batch_size: 32,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Multi-hot indicator vector over the item universe.
pub fn featurize(items: &[usize], num_items: usize) -> Result<Vec<f64>> {
    let mut x = vec![0.0; num_items];
    for &j in items {
        if j >= num_items {
            return Err(RapError::argument(format!(
                "item index {j} out of range ({num_items} items)"
            )));
        }
        x[j] = 1.0;
    }
    Ok(x)
}

fn init_adv_params(
    num_items: usize,
    hidden: usize,
    classes: usize,
    class_priors: &[f64],
    seed: u64,
) -> ParameterSet {
    let mut rng = derive_rng(seed, "init.adv", 0);
    let mut ps = ParameterSet::new();
    let s1 = 1.0 / (num_items as f64).sqrt();
    let s2 = 1.0 / (hidden as f64).sqrt();
    // Output bias starts at the training-set log-priors so the classifier
    // opens at the base rates instead of uniform.
    let b2: Vec<f64> = class_priors.iter().map(|&p| p.max(1e-6).ln()).collect();
    ps.insert(PARAM_B1, Tensor::zeros(&[hidden])).unwrap();
    ps.insert(PARAM_B2, Tensor::from_vec(&[classes], b2).unwrap())
        .unwrap();
    ps.insert(
        PARAM_W1,
        Tensor::uniform(&[num_items, hidden], -s1, s1, &mut rng),
    )
    .unwrap();
    ps.insert(
        PARAM_W2,
        Tensor::uniform(&[classes, hidden], -s2, s2, &mut rng),
    )
    .unwrap();
    ps
}

/// Train the classifier on (item list, label) pairs with cross-entropy
/// and Adam. `num_items` fixes the input dimension. Deterministic under
/// the config seed.
pub fn train_adversary(
    lists: &[Vec<usize>],
    labels: &[usize],
    classes: usize,
    num_items: usize,
    cfg: &AdversaryConfig,
) -> Result<ParameterSet> {
    if lists.is_empty() || lists.len() != labels.len() {
        return Err(RapError::argument(
            "adversary training needs matching, nonempty lists and labels",
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(RapError::argument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut priors = vec![0.0; classes];
    for &y in labels {
        priors[y] += 1.0 / labels.len() as f64;
    }
    let mut ps = init_adv_params(num_items, cfg.hidden_dim, classes, &priors, cfg.seed);
    let mut adam = AdamState::new(&ps, cfg.lr);
    let mut tape = Tape::new();
    let mut order: Vec<usize> = (0..lists.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = derive_rng(cfg.seed, "adv-shuffle", epoch as u64);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            tape.reset();
            let w1 = tape.param(&ps, ps.id(PARAM_W1)?);
            let b1 = tape.param(&ps, ps.id(PARAM_B1)?);
            let w2 = tape.param(&ps, ps.id(PARAM_W2)?);
            let b2 = tape.param(&ps, ps.id(PARAM_B2)?);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                // Multi-hot x times W1 is exactly the sum of the item rows.
                let pre = tape.rows_sum(w1, &lists[i])?;
                let pre = tape.add(pre, b1)?;
                let hid = tape.relu(pre);
                let logits = tape.affine(w2, hid, b2)?;
                let probs = tape.softmax(logits)?;
                losses.push(tape.cross_entropy(probs, labels[i])?);
            }
            let sum = tape.add_n(&losses)?;
            let mut loss = tape.scale(sum, 1.0 / batch.len() as f64);
            if cfg.weight_decay > 0.0 {
                let s1 = tape.sum_sq(w1);
                let s2 = tape.sum_sq(w2);
                let s = tape.add(s1, s2)?;
                let reg = tape.scale(s, cfg.weight_decay);
                loss = tape.add(loss, reg)?;
            }
            if !tape.scalar(loss).is_finite() {
                return Err(RapError::NonFinite(format!(
                    "adversary loss at epoch {epoch}"
                )));
            }
            ps.zero_grads();
            tape.backward(loss, &mut ps)?;
            adam_step(&mut ps, &mut adam)?;
        }
    }
    Ok(ps)
}

/// Predicted class distribution for one item list.
pub fn adversary_scores(ps: &ParameterSet, items: &[usize]) -> Result<Vec<f64>> {
    let w1 = ps.get(PARAM_W1)?;
    let b1 = ps.get(PARAM_B1)?;
    let w2 = ps.get(PARAM_W2)?;
    let b2 = ps.get(PARAM_B2)?;
    let (m, hidden) = (w1.shape[0], w1.shape[1]);
    let classes = w2.shape[0];
    let mut hid = b1.vals.clone();
    for &j in items {
        if j >= m {
            return Err(RapError::argument(format!(
                "item index {j} out of range ({m} items)"
            )));
        }
        for (h, w) in hid.iter_mut().zip(&w1.vals[j * hidden..(j + 1) * hidden]) {
            *h += w;
        }
    }
    for h in hid.iter_mut() {
        if *h < 0.0 {
            *h = 0.0;
        }
    }
    let mut logits = vec![0.0; classes];
    for c in 0..classes {
        let row = &w2.vals[c * hidden..(c + 1) * hidden];
        logits[c] = row.iter().zip(&hid).map(|(a, b)| a * b).sum::<f64>() + b2.vals[c];
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut probs = vec![0.0; classes];
    for c in 0..classes {
        probs[c] = (logits[c] - mx).exp();
        z += probs[c];
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    Ok(probs)
}

/// Micro-averaged one-vs-rest AUC of the classifier on held-out users'
/// item lists and hidden labels.
pub fn evaluate_attack(
    ps: &ParameterSet,
    test_lists: &[Vec<usize>],
    test_labels: &[usize],
) -> Result<f64> {
    if test_lists.len() != test_labels.len() || test_lists.is_empty() {
        return Err(RapError::argument(
            "attack evaluation needs matching, nonempty lists and labels",
        ));
    }
    let probs = test_lists
        .iter()
        .map(|l| adversary_scores(ps, l))
        .collect::<Result<Vec<_>>>()?;
    micro_auc(&probs, test_labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn featurize_contracts() {
        assert_eq!(featurize(&[], 4).unwrap(), vec![0.0; 4]);
        let x = featurize(&[0, 3], 4).unwrap();
        assert_eq!(x, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(x.iter().filter(|&&v| v == 1.0).count(), 2);
        assert!(featurize(&[4], 4).is_err());
    }

    #[test]
    fn rows_sum_path_equals_dense_multi_hot_product() {
        // The training path sums selected rows of W1; check against the
        // dense multi-hot matrix-vector product on the eval path.
        let ps = init_adv_params(6, 4, 2, &[0.5, 0.5], 9);
        let items = vec![1usize, 4];
        let scores = adversary_scores(&ps, &items).unwrap();
        let x = featurize(&items, 6).unwrap();
        let w1 = ps.get(PARAM_W1).unwrap();
        let b1 = ps.get(PARAM_B1).unwrap();
        let mut hid = b1.vals.clone();
        for (j, &xv) in x.iter().enumerate() {
            for h in 0..4 {
                hid[h] += xv * w1.vals[j * 4 + h];
            }
        }
        // Just confirm the hidden layer matches; the head is shared code.
        let mut hid2 = b1.vals.clone();
        for &j in &items {
            for h in 0..4 {
                hid2[h] += w1.vals[j * 4 + h];
            }
        }
        assert_eq!(hid, hid2);
        assert_eq!(scores.len(), 2);
    }

    #[test]
    fn constant_labels_saturate_to_that_class() {
        let lists: Vec<Vec<usize>> = (0..12).map(|i| vec![i % 5]).collect();
        let labels = vec![1usize; 12];
        let cfg = AdversaryConfig {
            hidden_dim: 8,
            epochs: 60,
            lr: 0.01,
            batch_size: 4,
            seed: 2,
        };
        let ps = train_adversary(&lists, &labels, 3, 5, &cfg).unwrap();
        for l in &lists {
            let p = adversary_scores(&ps, l).unwrap();
            assert!(p[1] > 0.95, "class-1 probability {p:?}");
        }
    }

    #[test]
    fn separable_toy_reaches_high_training_accuracy() {
        // Item 0 present iff class 1.
        let mut lists = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            if i % 2 == 0 {
                lists.push(vec![0, 2 + (i % 3)]);
                labels.push(1);
            } else {
                lists.push(vec![1, 2 + (i % 3)]);
                labels.push(0);
            }
        }
        let cfg = AdversaryConfig {
            hidden_dim: 10,
            epochs: 80,
            lr: 0.01,
            batch_size: 5,
            seed: 7,
        };
        let ps = train_adversary(&lists, &labels, 2, 6, &cfg).unwrap();
        let correct = lists
            .iter()
            .zip(&labels)
            .filter(|(l, &y)| {
                let p = adversary_scores(&ps, l).unwrap();
                (p[1] > p[0]) == (y == 1)
            })
            .count();
        assert!(correct as f64 / lists.len() as f64 >= 0.99);
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let lists: Vec<Vec<usize>> = (0..10).map(|i| vec![i % 4, (i + 1) % 4]).collect();
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let cfg = AdversaryConfig {
            hidden_dim: 6,
            epochs: 5,
            lr: 0.01,
            batch_size: 3,
            seed: 11,
        };
        let a = train_adversary(&lists, &labels, 2, 4, &cfg).unwrap();
        let b = train_adversary(&lists, &labels, 2, 4, &cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn evaluation_auc_endpoints() {
        let lists: Vec<Vec<usize>> = (0..8).map(|i| vec![i % 2]).collect();
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let cfg = AdversaryConfig {
            hidden_dim: 6,
            epochs: 80,
            lr: 0.02,
            batch_size: 4,
            seed: 3,
        };
        let ps = train_adversary(&lists, &labels, 2, 2, &cfg).unwrap();
        let auc = evaluate_attack(&ps, &lists, &labels).unwrap();
        assert!(auc > 0.99, "separable AUC {auc}");

        // Untrained uniform-ish predictor on uninformative inputs.
        let same_lists: Vec<Vec<usize>> = (0..8).map(|_| vec![0]).collect();
        let ps0 = init_adv_params(2, 4, 2, &[0.5, 0.5], 1);
        let auc0 = evaluate_attack(&ps0, &same_lists, &labels).unwrap();
        assert!((auc0 - 0.5).abs() < 1e-9, "constant-input AUC {auc0}");
    }

    #[test]
    fn single_class_test_set_is_undefined() {
        let ps = init_adv_params(3, 4, 1, &[1.0], 1);
        let lists = vec![vec![0], vec![1]];
        let labels = vec![0, 0];
        assert!(evaluate_attack(&ps, &lists, &labels).is_err());
    }
}
