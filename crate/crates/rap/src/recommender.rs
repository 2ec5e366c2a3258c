//! Pairwise-ranking recommender: shared user/item embeddings feed a
//! shared hidden layer; a linear head over the concatenated towers scores
//! each (user, item) pair, trained with the pairwise logistic loss over
//! sampled (positive, negative) item pairs.

use std::collections::HashMap;

use rand::Rng;

use crate::dataio::{derive_rng, RatingDataset};
use crate::error::{RapError, Result};
use crate::nnkernel::{sigmoid_stable, ParameterSet, Tape, Tensor, Val};

pub const PARAM_USER_EMBED: &str = "rec.user_embed";
pub const PARAM_ITEM_EMBED: &str = "rec.item_embed";
pub const PARAM_HIDDEN_W: &str = "rec.hidden_w";
pub const PARAM_HIDDEN_B: &str = "rec.hidden_b";
pub const PARAM_OUT_W: &str = "rec.out_w";
pub const PARAM_OUT_B: &str = "rec.out_b";

/// Recommender dimensions.
#[derive(Clone, Copy, Debug)]
pub struct RecDims {
    pub num_users: usize,
    pub num_items: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for RecDims {
    fn default() -> Self {
        RecDims {
            num_users: 0,
            num_items: 0,
            embed_dim: 70,
            hidden_dim: 20,
        }
    }
}

/// Fresh parameters, every entry uniform over [0, 1).
pub fn init_rec_params(dims: &RecDims, seed: u64) -> ParameterSet {
    let mut rng = derive_rng(seed, "init.rec", 0);
    let mut ps = ParameterSet::new();
    let d = dims.embed_dim;
    let h = dims.hidden_dim;
    // Drawn in lexicographic name order so init does not depend on the
    // insertion sequence.
    ps.insert(PARAM_HIDDEN_B, Tensor::uniform(&[h], 0.0, 1.0, &mut rng))
        .unwrap();
    ps.insert(PARAM_HIDDEN_W, Tensor::uniform(&[h, d], 0.0, 1.0, &mut rng))
        .unwrap();
    ps.insert(
        PARAM_ITEM_EMBED,
        Tensor::uniform(&[dims.num_items, d], 0.0, 1.0, &mut rng),
    )
    .unwrap();
    ps.insert(PARAM_OUT_B, Tensor::uniform(&[1], 0.0, 1.0, &mut rng))
        .unwrap();
    ps.insert(PARAM_OUT_W, Tensor::uniform(&[1, 2 * h], 0.0, 1.0, &mut rng))
        .unwrap();
    ps.insert(
        PARAM_USER_EMBED,
        Tensor::uniform(&[dims.num_users, d], 0.0, 1.0, &mut rng),
    )
    .unwrap();
    ps
}

/// Borrowed view of the recommender parameters for tape-free scoring.
pub struct RecView<'a> {
    pub num_users: usize,
    pub num_items: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    user_embed: &'a [f64],
    item_embed: &'a [f64],
    hidden_w: &'a [f64],
    hidden_b: &'a [f64],
    out_w: &'a [f64],
    out_b: f64,
}

impl<'a> RecView<'a> {
    pub fn new(ps: &'a ParameterSet) -> Result<Self> {
        let ue = ps.get(PARAM_USER_EMBED)?;
        let ie = ps.get(PARAM_ITEM_EMBED)?;
        let hw = ps.get(PARAM_HIDDEN_W)?;
        let hb = ps.get(PARAM_HIDDEN_B)?;
        let ow = ps.get(PARAM_OUT_W)?;
        let ob = ps.get(PARAM_OUT_B)?;
        Ok(RecView {
            num_users: ue.shape[0],
            num_items: ie.shape[0],
            embed_dim: ue.shape[1],
            hidden_dim: hw.shape[0],
            user_embed: &ue.vals,
            item_embed: &ie.vals,
            hidden_w: &hw.vals,
            hidden_b: &hb.vals,
            out_w: &ow.vals,
            out_b: ob.vals[0],
        })
    }

    pub fn user_vec(&self, h: usize) -> &[f64] {
        &self.user_embed[h * self.embed_dim..(h + 1) * self.embed_dim]
    }

    pub fn item_vec(&self, j: usize) -> &[f64] {
        &self.item_embed[j * self.embed_dim..(j + 1) * self.embed_dim]
    }

    /// ReLU(hidden_w x + hidden_b).
    fn tower(&self, x: &[f64]) -> Vec<f64> {
        let (hd, d) = (self.hidden_dim, self.embed_dim);
        let mut out = vec![0.0; hd];
        for r in 0..hd {
            let row = &self.hidden_w[r * d..(r + 1) * d];
            let s: f64 =
                row.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() + self.hidden_b[r];
            out[r] = if s > 0.0 { s } else { 0.0 };
        }
        out
    }

    fn head(&self, user_tower: &[f64], item_tower: &[f64]) -> f64 {
        let hd = self.hidden_dim;
        let mut s = self.out_b;
        for r in 0..hd {
            s += self.out_w[r] * user_tower[r];
            s += self.out_w[hd + r] * item_tower[r];
        }
        if s > 0.0 {
            s
        } else {
            0.0
        }
    }

    fn check_user(&self, h: usize) -> Result<()> {
        if h >= self.num_users {
            return Err(RapError::argument(format!(
                "user index {h} out of range ({} users)",
                self.num_users
            )));
        }
        Ok(())
    }

    fn check_item(&self, j: usize) -> Result<()> {
        if j >= self.num_items {
            return Err(RapError::argument(format!(
                "item index {j} out of range ({} items)",
                self.num_items
            )));
        }
        Ok(())
    }
}

/// Preference scores of user `h` toward items `j` and `k` under shared
/// tower weights.
pub fn score_pair(ps: &ParameterSet, h: usize, j: usize, k: usize) -> Result<(f64, f64)> {
    let view = RecView::new(ps)?;
    view.check_user(h)?;
    view.check_item(j)?;
    view.check_item(k)?;
    let th = view.tower(view.user_vec(h));
    let tj = view.tower(view.item_vec(j));
    let tk = view.tower(view.item_vec(k));
    Ok((view.head(&th, &tj), view.head(&th, &tk)))
}

/// Final preference score: the pair (h, j, j) is scored and the two
/// outputs averaged. With shared towers both outputs coincide.
pub fn score_item(ps: &ParameterSet, h: usize, j: usize) -> Result<f64> {
    let (a, b) = score_pair(ps, h, j, j)?;
    debug_assert_eq!(a, b);
    Ok(0.5 * (a + b))
}

/// Per-item head contributions, independent of the user; scoring a batch
/// of users then costs one add and a ReLU per item.
fn item_partials(view: &RecView) -> Vec<f64> {
    let hd = view.hidden_dim;
    let mut vals = vec![0.0; view.num_items];
    for (j, v) in vals.iter_mut().enumerate() {
        let tower = view.tower(view.item_vec(j));
        let mut s = 0.0;
        for r in 0..hd {
            s += view.out_w[hd + r] * tower[r];
        }
        *v = s;
    }
    vals
}

fn user_partial(view: &RecView, h: usize) -> f64 {
    let tower = view.tower(view.user_vec(h));
    let mut s = 0.0;
    for r in 0..view.hidden_dim {
        s += view.out_w[r] * tower[r];
    }
    s
}

fn select_top_k(scores: &[f64], excluded: &[bool], k: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&j| !excluded[j]).collect();
    // Descending score, ties broken by ascending item index.
    candidates.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    candidates.truncate(k);
    candidates
}

/// Top-`k` unrated items for one user, scores non-increasing, ties broken
/// by ascending item index.
pub fn top_k(ps: &ParameterSet, h: usize, rated: &[usize], k: usize) -> Result<Vec<usize>> {
    Ok(batch_top_k(ps, &[h], |_| rated.to_vec(), |_| k)?
        .pop()
        .unwrap())
}

/// Top-k lists for a batch of users, sharing the per-item tower work.
/// The requested depth may vary per user.
pub fn batch_top_k(
    ps: &ParameterSet,
    users: &[usize],
    rated_of: impl Fn(usize) -> Vec<usize>,
    k_of: impl Fn(usize) -> usize,
) -> Result<Vec<Vec<usize>>> {
    let view = RecView::new(ps)?;
    let partials = item_partials(&view);
    let mut out = Vec::with_capacity(users.len());
    let mut excluded = vec![false; view.num_items];
    let mut scores = vec![0.0; view.num_items];
    for &h in users {
        view.check_user(h)?;
        let rated = rated_of(h);
        excluded.iter_mut().for_each(|e| *e = false);
        for &j in &rated {
            view.check_item(j)?;
            excluded[j] = true;
        }
        let k = k_of(h);
        let available = view.num_items - rated.len();
        if k > available {
            return Err(RapError::argument(format!(
                "top-k of {k} exceeds the {available} unrated items for user {h}"
            )));
        }
        let c = user_partial(&view, h) + view.out_b;
        for (s, p) in scores.iter_mut().zip(partials.iter()) {
            *s = (c + p).max(0.0);
        }
        out.push(select_top_k(&scores, &excluded, k));
    }
    Ok(out)
}

/// One pairwise training instance: the scorer compares `first` against
/// `second`; `label` is +1 when `first` is the rated item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub user: usize,
    pub first: usize,
    pub second: usize,
    pub label: i8,
}

/// Sample pairwise instances: for every rated item of every batch user,
/// draw `negatives_per_positive` uniform negatives from the unrated set,
/// emitting each pair in a random orientation (rated item first with
/// label +1, or second with label -1). Users whose profile covers every
/// item are skipped.
pub fn sample_triplets(
    train: &RatingDataset,
    users: &[usize],
    negatives_per_positive: usize,
    seed: u64,
) -> Vec<Triplet> {
    let m = train.num_items();
    let mut rng = derive_rng(seed, "triplets", 0);
    let mut out = Vec::new();
    for &h in users {
        let rated = train.items_of(h);
        if rated.len() >= m {
            log::warn!("user {h} has rated every item; no negatives to sample");
            continue;
        }
        for r in rated {
            for _ in 0..negatives_per_positive {
                let neg = loop {
                    let cand = rng.random_range(0..m);
                    if !train.is_rated(h, cand) {
                        break cand;
                    }
                };
                if rng.random::<f64>() < 0.5 {
                    out.push(Triplet {
                        user: h,
                        first: r.item,
                        second: neg,
                        label: 1,
                    });
                } else {
                    out.push(Triplet {
                        user: h,
                        first: neg,
                        second: r.item,
                        label: -1,
                    });
                }
            }
        }
    }
    out
}

/// Tape leaves for the recommender parameters, with per-batch tower
/// memoization.
pub struct RecLeaves {
    pub user_embed: Val,
    pub item_embed: Val,
    pub hidden_w: Val,
    pub hidden_b: Val,
    pub out_w: Val,
    pub out_b: Val,
    user_towers: HashMap<usize, Val>,
    item_towers: HashMap<usize, Val>,
}

impl RecLeaves {
    /// Bind the recommender parameters on the tape. With `trainable`
    /// false the leaves are constants and no gradients flow into them.
    pub fn bind(tape: &mut Tape, ps: &ParameterSet, trainable: bool) -> Result<Self> {
        let mut leaf = |name: &str| -> Result<Val> {
            let id = ps.id(name)?;
            Ok(if trainable {
                tape.param(ps, id)
            } else {
                tape.constant(ps.value(id))
            })
        };
        Ok(RecLeaves {
            user_embed: leaf(PARAM_USER_EMBED)?,
            item_embed: leaf(PARAM_ITEM_EMBED)?,
            hidden_w: leaf(PARAM_HIDDEN_W)?,
            hidden_b: leaf(PARAM_HIDDEN_B)?,
            out_w: leaf(PARAM_OUT_W)?,
            out_b: leaf(PARAM_OUT_B)?,
            user_towers: HashMap::new(),
            item_towers: HashMap::new(),
        })
    }

    pub fn user_embedding(&self, tape: &mut Tape, h: usize) -> Result<Val> {
        tape.gather(self.user_embed, h)
    }

    pub fn item_embedding(&self, tape: &mut Tape, j: usize) -> Result<Val> {
        tape.gather(self.item_embed, j)
    }

    fn user_tower(&mut self, tape: &mut Tape, h: usize) -> Result<Val> {
        if let Some(&v) = self.user_towers.get(&h) {
            return Ok(v);
        }
        let q = tape.gather(self.user_embed, h)?;
        let a = tape.affine(self.hidden_w, q, self.hidden_b)?;
        let t = tape.relu(a);
        self.user_towers.insert(h, t);
        Ok(t)
    }

    fn item_tower(&mut self, tape: &mut Tape, j: usize) -> Result<Val> {
        if let Some(&v) = self.item_towers.get(&j) {
            return Ok(v);
        }
        let p = tape.gather(self.item_embed, j)?;
        let a = tape.affine(self.hidden_w, p, self.hidden_b)?;
        let t = tape.relu(a);
        self.item_towers.insert(j, t);
        Ok(t)
    }

    /// Recorded preference score of user `h` toward item `j`.
    pub fn score(&mut self, tape: &mut Tape, h: usize, j: usize) -> Result<Val> {
        let uh = self.user_tower(tape, h)?;
        let ij = self.item_tower(tape, j)?;
        let cat = tape.concat(uh, ij)?;
        let o = tape.affine(self.out_w, cat, self.out_b)?;
        Ok(tape.relu(o))
    }

    /// L2 penalty over every recommender parameter.
    pub fn l2_penalty(&self, tape: &mut Tape, lambda: f64) -> Val {
        let terms: Vec<Val> = [
            self.user_embed,
            self.item_embed,
            self.hidden_w,
            self.hidden_b,
            self.out_w,
            self.out_b,
        ]
        .iter()
        .map(|&v| tape.sum_sq(v))
        .collect();
        let s = tape.add_n(&terms).expect("scalar penalty terms");
        tape.scale(s, lambda)
    }
}

/// Pairwise ranking loss: mean over batch users of the summed
/// -ln sigmoid(margin * label) over their triplets, plus `lambda` times
/// the squared L2 norm of all recommender parameters.
pub fn build_bpr_loss(
    tape: &mut Tape,
    leaves: &mut RecLeaves,
    triplets: &[Triplet],
    lambda: f64,
) -> Result<Val> {
    if triplets.is_empty() {
        return Err(RapError::argument("empty triplet batch"));
    }
    let mut per_user: Vec<(usize, Vec<Val>)> = Vec::new();
    for t in triplets {
        let ya = leaves.score(tape, t.user, t.first)?;
        let yb = leaves.score(tape, t.user, t.second)?;
        let margin = tape.sub(ya, yb)?;
        let signed = tape.scale(margin, -f64::from(t.label));
        let loss = tape.softplus(signed);
        match per_user.iter_mut().find(|(u, _)| *u == t.user) {
            Some((_, items)) => items.push(loss),
            None => per_user.push((t.user, vec![loss])),
        }
    }
    let user_sums: Vec<Val> = per_user
        .iter()
        .map(|(_, items)| tape.add_n(items))
        .collect::<Result<_>>()?;
    let total = tape.add_n(&user_sums)?;
    let data_term = tape.scale(total, 1.0 / per_user.len() as f64);
    if lambda == 0.0 {
        return Ok(data_term);
    }
    let penalty = leaves.l2_penalty(tape, lambda);
    tape.add(data_term, penalty)
}

/// Evaluation-path pairwise loss for one triplet, outside any tape.
pub fn triplet_loss_value(ps: &ParameterSet, t: &Triplet) -> Result<f64> {
    let (ya, yb) = score_pair(ps, t.user, t.first, t.second)?;
    let m = (ya - yb) * f64::from(t.label);
    Ok(-sigmoid_stable(m).ln())
}
