//! In-batch contrastive alignment between the entity-side aggregate and the
//! tree-side aggregate of each conversation.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::kg::EntityId;
use crate::params::{glorot, uniform, Group, ParamId, ParamStore};
use crate::user_pref::AttentionSum;

/// Added under the logarithm of the negatives-only denominator.
pub const LITERAL_EPS: f64 = 1e-12;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Sequences must be equal as ordered lists.
    #[default]
    Ordered,
    /// Sequences must contain the same entities.
    Set,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignSettings {
    pub tau: f64,
    pub normalize: bool,
    /// Denominator over negatives only, guarded by [`LITERAL_EPS`].
    pub literal: bool,
    pub mask: MaskMode,
}

impl Default for AlignSettings {
    fn default() -> Self {
        Self { tau: 0.07, normalize: true, literal: false, mask: MaskMode::Ordered }
    }
}

/// Entity-side aggregate `e_E`: attention-sum over mentioned entity rows,
/// then a projection into the alignment space.
#[derive(Clone, Debug)]
pub struct EntityAggregator {
    pub asum: AttentionSum,
    pub proj: ParamId,
    pub null: ParamId,
}

impl EntityAggregator {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        d_ent: usize,
        d: usize,
        asum_scale_by_rows: bool,
    ) -> Self {
        Self {
            asum: AttentionSum::register(store, rng, "align.asum", Group::User, d_ent, d_ent, asum_scale_by_rows),
            proj: store.add("align.proj", Group::User, glorot(rng, d_ent, d)),
            null: store.add("align.null_entity", Group::User, uniform(rng, 1, d, 0.1)),
        }
    }

    /// `1 x d` aggregate; the learned null vector when there are no rows.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, e: Option<Var>) -> Var {
        match e {
            Some(e) => {
                let a = self.asum.forward(tape, store, e);
                let p = tape.param(store, self.proj);
                tape.matmul(a, p)
            }
            None => tape.param(store, self.null),
        }
    }

    pub fn apply(&self, store: &ParamStore, e: &Mat) -> Result<Mat> {
        if e.nrows() > 0 && e.ncols() != store.value(self.proj).nrows() {
            return Err(Error::Shape(format!("entity rows have width {}", e.ncols())));
        }
        let mut tape = Tape::new();
        let ev = (e.nrows() > 0).then(|| tape.constant(e.clone()));
        let out = self.forward(&mut tape, store, ev);
        Ok(tape.value(out).clone())
    }
}

pub fn contrast_mask(seqs: &[Vec<EntityId>], mode: MaskMode) -> Mat {
    let b = seqs.len();
    let sets: Vec<BTreeSet<EntityId>> = match mode {
        MaskMode::Set => seqs.iter().map(|s| s.iter().copied().collect()).collect(),
        MaskMode::Ordered => Vec::new(),
    };
    Mat::from_shape_fn((b, b), |(i, j)| {
        let eq = match mode {
            MaskMode::Ordered => seqs[i] == seqs[j],
            MaskMode::Set => sets[i] == sets[j],
        };
        if eq {
            1.0
        } else {
            0.0
        }
    })
}

fn positives(mask: &Mat) -> Vec<(usize, usize)> {
    mask.indexed_iter().filter(|(_, &m)| m != 0.0).map(|(ij, _)| ij).collect()
}

/// Contrastive loss on the tape, summed over positive pairs. Returns `None`
/// when the mask has no positive pair.
pub fn align_loss_on_tape(
    tape: &mut Tape,
    e: Var,
    t: Var,
    mask: &Mat,
    s: &AlignSettings,
) -> Option<Var> {
    let (b, _) = tape.shape(e);
    assert_eq!(tape.shape(t).0, b, "row counts differ");
    assert_eq!(mask.dim(), (b, b), "mask shape");
    let pos = positives(mask);
    if pos.is_empty() {
        return None;
    }
    let (e, t) = if s.normalize {
        (tape.normalize_rows(e, NORM_EPS), tape.normalize_rows(t, NORM_EPS))
    } else {
        (e, t)
    };
    let sim = tape.matmul_bt(e, t);
    let logits = tape.scale(sim, 1.0 / s.tau);
    let picked = if !s.literal {
        let lsm = tape.log_softmax(logits);
        tape.pick_sum(lsm, &pos)
    } else {
        // log of sum_k (1 - M_ik) exp(l_ik) + eps, evaluated after a global shift.
        let shift = tape.value(logits).fold(f64::NEG_INFINITY, |a, &x| a.max(x));
        let shifted = tape.affine(logits, 1.0, -shift);
        let ex = tape.exp(shifted);
        let neg = tape.constant(mask.mapv(|m| 1.0 - m));
        let masked = tape.mul(ex, neg);
        let ones = tape.constant(Mat::ones((b, 1)));
        let den = tape.matmul(masked, ones);
        let den = tape.affine(den, 1.0, LITERAL_EPS * (-shift).exp());
        let den = tape.clamp(den, f64::MIN_POSITIVE, f64::INFINITY);
        let logden = tape.ln(den);
        let logden = tape.affine(logden, 1.0, shift);
        let num = tape.pick_sum(logits, &pos);
        let rows: Vec<(usize, usize)> = pos.iter().map(|&(i, _)| (i, 0)).collect();
        let den_sum = tape.pick_sum(logden, &rows);
        tape.sub(num, den_sum)
    };
    Some(tape.scale(picked, -1.0))
}

/// Value-level contrastive loss. Zero, with a warning, when there are no
/// positive pairs.
pub fn align_loss(e: &Mat, t: &Mat, mask: &Mat, s: &AlignSettings) -> Result<f64> {
    if s.tau <= 0.0 {
        return Err(Error::Invalid("temperature must be positive".into()));
    }
    if e.dim() != t.dim() || mask.dim() != (e.nrows(), e.nrows()) {
        return Err(Error::Shape(format!(
            "alignment batch shapes {:?}, {:?}, mask {:?}",
            e.dim(),
            t.dim(),
            mask.dim()
        )));
    }
    let mut tape = Tape::new();
    let ev = tape.constant(e.clone());
    let tv = tape.constant(t.clone());
    match align_loss_on_tape(&mut tape, ev, tv, mask, s) {
        Some(l) => Ok(tape.scalar(l)),
        None => {
            log::warn!("alignment batch has no positive pairs; loss is 0");
            Ok(0.0)
        }
    }
}
