//! Internal attribute-inference component: per attribute, a single-layer
//! recurrent encoder runs over the embeddings of a user's item list and a
//! softmax head over [final state; user embedding] predicts the attribute.
//! Trained jointly with the recommender, it supplies the adversarial
//! gradient that the recommender reverses.

use std::collections::HashMap;

use crate::dataio::{derive_rng, Attribute, AttributeTable, Rating};
use crate::error::{RapError, Result};
use crate::nnkernel::{ParameterSet, Tape, Tensor, Val};
use crate::recommender::RecLeaves;

/// Default hidden width of the recurrent encoder.
pub const DEFAULT_ATT_HIDDEN: usize = 100;
/// Sequences are truncated to this many most-recent items to bound the
/// unroll depth of backpropagation through time.
pub const DEFAULT_MAX_UNROLL: usize = 200;

pub fn param_name(attr: Attribute, part: &str) -> String {
    format!("att.{}.{}", attr.key(), part)
}

#[derive(Clone, Copy, Debug)]
pub struct AttackerDims {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_unroll: usize,
}

impl Default for AttackerDims {
    fn default() -> Self {
        AttackerDims {
            embed_dim: 70,
            hidden_dim: DEFAULT_ATT_HIDDEN,
            max_unroll: DEFAULT_MAX_UNROLL,
        }
    }
}

/// Fresh per-attribute parameters. Weights are zero-mean uniform scaled
/// by 1/sqrt(fan-in) so the tanh recurrence starts in its active range.
pub fn init_att_params(dims: &AttackerDims, attrs: &[Attribute], seed: u64) -> ParameterSet {
    let mut ps = ParameterSet::new();
    let (d, h) = (dims.embed_dim, dims.hidden_dim);
    for (k, &attr) in attrs.iter().enumerate() {
        let mut rng = derive_rng(seed, "init.att", k as u64);
        let c = attr.class_count();
        let s_in = 1.0 / (d as f64).sqrt();
        let s_hh = 1.0 / (h as f64).sqrt();
        let s_head = 1.0 / ((h + d) as f64).sqrt();
        ps.insert(
            &param_name(attr, "w_in"),
            Tensor::uniform(&[h, d], -s_in, s_in, &mut rng),
        )
        .unwrap();
        ps.insert(
            &param_name(attr, "w_hh"),
            Tensor::uniform(&[h, h], -s_hh, s_hh, &mut rng),
        )
        .unwrap();
        ps.insert(&param_name(attr, "b_h"), Tensor::zeros(&[h])).unwrap();
        ps.insert(
            &param_name(attr, "head_w"),
            Tensor::uniform(&[c, h + d], -s_head, s_head, &mut rng),
        )
        .unwrap();
        ps.insert(&param_name(attr, "head_b"), Tensor::zeros(&[c]))
            .unwrap();
    }
    ps
}

/// A user's item list: previously rated items in ascending timestamp
/// order, then newly recommended items in recommendation order. Items in
/// both sets appear once, in the rated segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemListSequence {
    pub user: usize,
    pub items: Vec<usize>,
    /// Items before this index are rated; the rest are recommended.
    pub n_rated: usize,
}

impl ItemListSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_recommended(&self, pos: usize) -> bool {
        pos >= self.n_rated
    }
}

/// Merge rated items (by timestamp, ties by item index) with an ordered
/// recommendation list into one duplicate-free sequence.
pub fn order_items(user: usize, rated: &[Rating], recommended: &[usize]) -> ItemListSequence {
    let mut rated_sorted: Vec<&Rating> = rated.iter().collect();
    rated_sorted.sort_by_key(|r| (r.timestamp, r.item));
    let mut items: Vec<usize> = rated_sorted.iter().map(|r| r.item).collect();
    let n_rated = items.len();
    let rated_set: std::collections::HashSet<usize> = items.iter().copied().collect();
    for &j in recommended {
        if !rated_set.contains(&j) {
            items.push(j);
        }
    }
    ItemListSequence {
        user,
        items,
        n_rated,
    }
}

/// Tape leaves for one attribute's encoder and head.
struct AttrLeaves {
    w_in: Val,
    w_hh: Val,
    b_h: Val,
    head_w: Val,
    head_b: Val,
}

/// Tape leaves for the attacker parameters of the enabled attributes.
pub struct AttLeaves {
    per_attr: Vec<(Attribute, AttrLeaves)>,
    zero_state: Val,
    gathered_items: HashMap<usize, Val>,
    gathered_users: HashMap<usize, Val>,
    max_unroll: usize,
}

impl AttLeaves {
    /// Bind the parameters of `attrs` on the tape; constants when
    /// `trainable` is false.
    pub fn bind(
        tape: &mut Tape,
        ps: &ParameterSet,
        attrs: &[Attribute],
        dims: &AttackerDims,
        trainable: bool,
    ) -> Result<Self> {
        let mut per_attr = Vec::new();
        for &attr in attrs {
            let mut leaf = |part: &str| -> Result<Val> {
                let id = ps.id(&param_name(attr, part))?;
                Ok(if trainable {
                    tape.param(ps, id)
                } else {
                    tape.constant(ps.value(id))
                })
            };
            per_attr.push((
                attr,
                AttrLeaves {
                    w_in: leaf("w_in")?,
                    w_hh: leaf("w_hh")?,
                    b_h: leaf("b_h")?,
                    head_w: leaf("head_w")?,
                    head_b: leaf("head_b")?,
                },
            ));
        }
        let zero_state = tape.constant(&Tensor::zeros(&[dims.hidden_dim]));
        Ok(AttLeaves {
            per_attr,
            zero_state,
            gathered_items: HashMap::new(),
            gathered_users: HashMap::new(),
            max_unroll: dims.max_unroll,
        })
    }

    pub fn attributes(&self) -> Vec<Attribute> {
        self.per_attr.iter().map(|(a, _)| *a).collect()
    }

    fn item_embedding(&mut self, tape: &mut Tape, rec: &RecLeaves, j: usize) -> Result<Val> {
        if let Some(&v) = self.gathered_items.get(&j) {
            return Ok(v);
        }
        let v = rec.item_embedding(tape, j)?;
        self.gathered_items.insert(j, v);
        Ok(v)
    }

    fn user_embedding(&mut self, tape: &mut Tape, rec: &RecLeaves, h: usize) -> Result<Val> {
        if let Some(&v) = self.gathered_users.get(&h) {
            return Ok(v);
        }
        let v = rec.user_embedding(tape, h)?;
        self.gathered_users.insert(h, v);
        Ok(v)
    }

    /// Recorded class distribution for one user and one attribute.
    pub fn predict(
        &mut self,
        tape: &mut Tape,
        rec: &RecLeaves,
        seq: &ItemListSequence,
        attr: Attribute,
    ) -> Result<Val> {
        let idx = self
            .per_attr
            .iter()
            .position(|(a, _)| *a == attr)
            .ok_or_else(|| RapError::argument(format!("attribute {:?} not bound", attr)))?;
        let start = seq.items.len().saturating_sub(self.max_unroll);
        let window: Vec<usize> = seq.items[start..].to_vec();
        let mut state = self.zero_state;
        for j in window {
            let x = self.item_embedding(tape, rec, j)?;
            let a = &self.per_attr[idx].1;
            state = tape.rnn_step(a.w_in, x, a.w_hh, state, a.b_h)?;
        }
        let q = self.user_embedding(tape, rec, seq.user)?;
        let a = &self.per_attr[idx].1;
        let cat = tape.concat(state, q)?;
        let logits = tape.affine(a.head_w, cat, a.head_b)?;
        tape.softmax(logits)
    }

    /// L2 penalty over the bound attributes' parameters.
    pub fn l2_penalty(&self, tape: &mut Tape, lambda: f64) -> Val {
        let mut terms = Vec::new();
        for (_, a) in &self.per_attr {
            for v in [a.w_in, a.w_hh, a.b_h, a.head_w, a.head_b] {
                terms.push(tape.sum_sq(v));
            }
        }
        let s = tape.add_n(&terms).expect("scalar penalty terms");
        tape.scale(s, lambda)
    }
}

/// Inference-attack loss: mean over batch users of the mean over enabled
/// attributes of the cross-entropy between the predicted distribution and
/// the user's label. Label reads go through the table's access guard, so
/// held-out users fail loudly.
pub fn build_attacker_loss(
    tape: &mut Tape,
    att: &mut AttLeaves,
    rec: &RecLeaves,
    batch: &[&ItemListSequence],
    attrs_table: &AttributeTable,
) -> Result<Val> {
    if batch.is_empty() {
        return Err(RapError::argument("empty attacker batch"));
    }
    let mask = att.attributes();
    if mask.is_empty() {
        return Err(RapError::argument("no attributes bound for the attacker"));
    }
    let mut user_losses = Vec::with_capacity(batch.len());
    for seq in batch {
        let mut terms = Vec::with_capacity(mask.len());
        for &attr in &mask {
            let label = attrs_table.label(seq.user, attr)?;
            let probs = att.predict(tape, rec, seq, attr)?;
            terms.push(tape.cross_entropy(probs, label)?);
        }
        let s = tape.add_n(&terms)?;
        user_losses.push(tape.scale(s, 1.0 / mask.len() as f64));
    }
    let total = tape.add_n(&user_losses)?;
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

/// Class distribution for one user and attribute, outside any training
/// tape (builds a throwaway constant-leaf tape internally).
pub fn predict_attribute(
    att_ps: &ParameterSet,
    rec_ps: &ParameterSet,
    seq: &ItemListSequence,
    attr: Attribute,
    dims: &AttackerDims,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let rec = RecLeaves::bind(&mut tape, rec_ps, false)?;
    let mut att = AttLeaves::bind(&mut tape, att_ps, &[attr], dims, false)?;
    let probs = att.predict(&mut tape, &rec, seq, attr)?;
    Ok(tape.value(probs).to_vec())
}

#[cfg(test)]
mod tests;
