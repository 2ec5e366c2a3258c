//! Alternating min-max training: per mini-batch, one Adam step on the
//! recommender objective (ranking loss minus the alpha-weighted attacker
//! loss, gradients reversed through the shared embeddings), then one Adam
//! step minimizing the attacker loss over its own parameters on item
//! lists rebuilt from the freshly updated recommender.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacker::{
    build_attacker_loss, init_att_params, order_items, AttLeaves, AttackerDims, ItemListSequence,
};
use crate::dataio::{derive_rng, Attribute, AttributeTable, RatingDataset};
use crate::error::{RapError, Result};
use crate::nnkernel::{adam_step, AdamState, ParameterSet, Tape};
use crate::recommender::{
    batch_top_k, build_bpr_loss, init_rec_params, sample_triplets, RecDims, RecLeaves, Triplet,
};

/// Training hyperparameters. Defaults follow the evaluated configuration:
/// alpha 1, lambda 0.01, batch 32, 20 epochs, embedding width 70,
/// recommender hidden 20, attacker hidden 100.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Recommendation depth used to build item lists during training.
    pub k_train: usize,
    pub seed: u64,
    /// Attributes the internal attacker trains on; the single-attribute
    /// variants use a one-element mask.
    pub attribute_mask: Vec<Attribute>,
    pub embed_dim: usize,
    pub rec_hidden: usize,
    pub att_hidden: usize,
    pub negatives_per_positive: usize,
    pub max_unroll: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            lambda: 0.01,
            lr: 1e-3,
            batch_size: 32,
            epochs: 20,
            k_train: 35,
            seed: 0,
            attribute_mask: Attribute::ALL.to_vec(),
            embed_dim: 70,
            rec_hidden: 20,
            att_hidden: 100,
            negatives_per_positive: 1,
            max_unroll: 200,
        }
    }
}

impl TrainConfig {
    pub fn attacker_enabled(&self) -> bool {
        self.alpha > 0.0 && !self.attribute_mask.is_empty()
    }

    pub fn attacker_dims(&self) -> AttackerDims {
        AttackerDims {
            embed_dim: self.embed_dim,
            hidden_dim: self.att_hidden,
            max_unroll: self.max_unroll,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(RapError::argument("alpha must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(RapError::argument("batch_size must be positive"));
        }
        if self.lr <= 0.0 {
            return Err(RapError::argument("lr must be positive"));
        }
        Ok(())
    }
}

/// Mutable training state: both parameter sets, their optimizers, and
/// append-only per-epoch loss histories.
pub struct TrainState {
    pub rec_params: ParameterSet,
    pub att_params: ParameterSet,
    pub rec_adam: AdamState,
    pub att_adam: AdamState,
    pub epoch: usize,
    pub rec_loss_history: Vec<f64>,
    pub att_loss_history: Vec<f64>,
    pub cfg: TrainConfig,
}

impl TrainState {
    /// Freshly initialized state; attacker parameters for all three
    /// attributes are always allocated so unmasked heads stay untouched
    /// but observable.
    pub fn init(cfg: &TrainConfig, ds: &RatingDataset) -> TrainState {
        let rec_dims = RecDims {
            num_users: ds.num_users(),
            num_items: ds.num_items(),
            embed_dim: cfg.embed_dim,
            hidden_dim: cfg.rec_hidden,
        };
        let rec_params = init_rec_params(&rec_dims, cfg.seed);
        let att_params = if cfg.attacker_enabled() {
            init_att_params(&cfg.attacker_dims(), &Attribute::ALL, cfg.seed)
        } else {
            ParameterSet::new()
        };
        let rec_adam = AdamState::new(&rec_params, cfg.lr);
        let att_adam = AdamState::new(&att_params, cfg.lr);
        TrainState {
            rec_params,
            att_params,
            rec_adam,
            att_adam,
            epoch: 0,
            rec_loss_history: Vec::new(),
            att_loss_history: Vec::new(),
            cfg: cfg.clone(),
        }
    }
}

/// Item lists for a batch of users: the user's training-rated items plus
/// the current model's top-k recommendations. The depth is capped at the
/// number of unrated items.
pub fn build_item_lists(
    rec_params: &ParameterSet,
    batch_users: &[usize],
    k: usize,
    train: &RatingDataset,
) -> Result<Vec<ItemListSequence>> {
    let m = train.num_items();
    let rec_lists = batch_top_k(
        rec_params,
        batch_users,
        |u| train.item_set_of(u),
        // Depth capped per user so near-complete profiles stay valid.
        |u| k.min(m - train.profile_len(u)),
    )?;
    Ok(batch_users
        .iter()
        .zip(rec_lists)
        .map(|(&u, recs)| order_items(u, train.items_of(u), &recs))
        .collect())
}

/// One Adam step on the recommender parameters for the joint objective:
/// ranking loss (with its L2 term) minus alpha times the attacker loss.
/// Attacker parameters are bound as constants; item-list membership is
/// fixed for the step. Returns (ranking loss, attacker loss if coupled).
pub fn recommender_update(
    state: &mut TrainState,
    triplets: &[Triplet],
    sequences: &[ItemListSequence],
    attrs: &AttributeTable,
    tape: &mut Tape,
) -> Result<(f64, Option<f64>)> {
    let cfg = state.cfg.clone();
    tape.reset();
    let mut rec = RecLeaves::bind(tape, &state.rec_params, true)?;
    let bpr = build_bpr_loss(tape, &mut rec, triplets, cfg.lambda)?;
    let rec_loss = tape.scalar(bpr);
    let mut att_loss = None;
    let objective = if cfg.attacker_enabled() {
        let mut att = AttLeaves::bind(
            tape,
            &state.att_params,
            &cfg.attribute_mask,
            &cfg.attacker_dims(),
            false,
        )?;
        let batch: Vec<&ItemListSequence> = sequences.iter().collect();
        let lp = build_attacker_loss(tape, &mut att, &rec, &batch, attrs)?;
        att_loss = Some(tape.scalar(lp));
        let reversed = tape.scale(lp, -cfg.alpha);
        tape.add(bpr, reversed)?
    } else {
        bpr
    };
    let value = tape.scalar(objective);
    if !value.is_finite() {
        return Err(RapError::NonFinite(format!(
            "recommender objective {value} at epoch {} (ranking {rec_loss}, attacker {att_loss:?})",
            state.epoch
        )));
    }
    state.rec_params.zero_grads();
    tape.backward(objective, &mut state.rec_params)?;
    adam_step(&mut state.rec_params, &mut state.rec_adam)?;
    Ok((rec_loss, att_loss))
}

/// One Adam step minimizing the attacker loss (plus its own L2 term) over
/// the masked attributes' parameters; embeddings stay frozen. Returns the
/// attacker loss before the step.
pub fn attacker_update(
    state: &mut TrainState,
    sequences: &[ItemListSequence],
    attrs: &AttributeTable,
    tape: &mut Tape,
) -> Result<f64> {
    let cfg = state.cfg.clone();
    tape.reset();
    let rec = RecLeaves::bind(tape, &state.rec_params, false)?;
    let mut att = AttLeaves::bind(
        tape,
        &state.att_params,
        &cfg.attribute_mask,
        &cfg.attacker_dims(),
        true,
    )?;
    let batch: Vec<&ItemListSequence> = sequences.iter().collect();
    let data = build_attacker_loss(tape, &mut att, &rec, &batch, attrs)?;
    let value = tape.scalar(data);
    if !value.is_finite() {
        return Err(RapError::NonFinite(format!(
            "attacker loss {value} at epoch {}",
            state.epoch
        )));
    }
    let objective = if cfg.lambda > 0.0 {
        let penalty = att.l2_penalty(tape, cfg.lambda);
        tape.add(data, penalty)?
    } else {
        data
    };
    state.att_params.zero_grads();
    tape.backward(objective, &mut state.att_params)?;
    adam_step(&mut state.att_params, &mut state.att_adam)?;
    Ok(value)
}

/// Mini-batch order for one epoch: shuffled users, fixed-size chunks.
pub fn batch_schedule(users: &[usize], batch_size: usize, epoch: usize, seed: u64) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order = users.to_vec();
    let mut rng = derive_rng(seed, "epoch-shuffle", epoch as u64);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Seed for the triplet sampler of one mini-batch.
pub fn triplet_seed(seed: u64, epoch: usize, batch_idx: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (batch_idx as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Per-epoch log entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub rec_loss: f64,
    pub att_loss: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub epochs: Vec<EpochLog>,
    pub total_secs: f64,
}

/// Full training loop over `train_users`. Attribute labels are read only
/// for batch users, all drawn from `train_users`; pass a guarded table to
/// prove it. Returns the final state and a JSON-serializable log.
pub fn fit(
    cfg: &TrainConfig,
    train: &RatingDataset,
    attrs: &AttributeTable,
    train_users: &[usize],
) -> Result<(TrainState, TrainLog)> {
    cfg.validate()?;
    if train_users.is_empty() {
        return Err(RapError::argument("empty training user set"));
    }
    let mut state = TrainState::init(cfg, train);
    let mut log = TrainLog {
        config: cfg.clone(),
        epochs: Vec::new(),
        total_secs: 0.0,
    };
    let start = Instant::now();
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        state.epoch = epoch;
        let mut rec_sum = 0.0;
        let mut att_sum = 0.0;
        let mut att_batches = 0usize;
        let mut rec_batches = 0usize;
        for (bi, batch) in batch_schedule(train_users, cfg.batch_size, epoch, cfg.seed)
            .into_iter()
            .enumerate()
        {
            let triplets = sample_triplets(
                train,
                &batch,
                cfg.negatives_per_positive,
                triplet_seed(cfg.seed, epoch, bi),
            );
            if triplets.is_empty() {
                continue;
            }
            if cfg.attacker_enabled() {
                let pre_lists = build_item_lists(&state.rec_params, &batch, cfg.k_train, train)?;
                let (rec_loss, _) =
                    recommender_update(&mut state, &triplets, &pre_lists, attrs, &mut tape)?;
                let post_lists = build_item_lists(&state.rec_params, &batch, cfg.k_train, train)?;
                let att_loss = attacker_update(&mut state, &post_lists, attrs, &mut tape)?;
                rec_sum += rec_loss;
                att_sum += att_loss;
                att_batches += 1;
            } else {
                let (rec_loss, _) =
                    recommender_update(&mut state, &triplets, &[], attrs, &mut tape)?;
                rec_sum += rec_loss;
            }
            rec_batches += 1;
        }
        if rec_batches > 0 {
            state.rec_loss_history.push(rec_sum / rec_batches as f64);
        }
        if att_batches > 0 {
            state.att_loss_history.push(att_sum / att_batches as f64);
        }
        log.epochs.push(EpochLog {
            epoch,
            rec_loss: state.rec_loss_history.last().copied().unwrap_or(f64::NAN),
            att_loss: state.att_loss_history.last().copied(),
            wall_secs: t0.elapsed().as_secs_f64(),
        });
        if !state.rec_params.all_finite() || !state.att_params.all_finite() {
            return Err(RapError::NonFinite(format!(
                "non-finite parameters after epoch {epoch}"
            )));
        }
    }
    state.epoch = cfg.epochs;
    log.total_secs = start.elapsed().as_secs_f64();
    Ok((state, log))
}
