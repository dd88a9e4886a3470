//! User-preference extraction: cross-interaction between dialogue tokens and
//! mentioned entities, attention-sum aggregation, item scoring and the
//! collaborative supervision loss.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{glorot, Group, ParamId, ParamStore};

/// Probabilities are clipped into `[CLIP, 1 - CLIP]` before taking logs.
pub const CLIP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Attention aggregation
/// `ASum(X) = sum_i sum_j softmax_j(X_i W_Q . X_j W_K / sqrt(d)) X_j W_V`.
#[derive(Clone, Debug)]
pub struct AttentionSum {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub key_dim: usize,
    /// Divide the double sum by the number of rows.
    pub scale_by_rows: bool,
}

impl AttentionSum {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        group: Group,
        in_dim: usize,
        out_dim: usize,
        scale_by_rows: bool,
    ) -> Self {
        Self {
            wq: store.add(&format!("{prefix}.wq"), group, glorot(rng, in_dim, out_dim)),
            wk: store.add(&format!("{prefix}.wk"), group, glorot(rng, in_dim, out_dim)),
            wv: store.add(&format!("{prefix}.wv"), group, glorot(rng, in_dim, out_dim)),
            key_dim: out_dim,
            scale_by_rows,
        }
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.wq, self.wk, self.wv]
    }

    /// `n x in_dim` rows to a `1 x out_dim` row. Requires `n >= 1`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = tape.shape(x).0;
        assert!(n >= 1, "attention-sum over zero rows");
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let q = tape.matmul(x, wq);
        let k = tape.matmul(x, wk);
        let v = tape.matmul(x, wv);
        let s = tape.matmul_bt(q, k);
        let s = tape.scale(s, 1.0 / (self.key_dim as f64).sqrt());
        let p = tape.softmax(s, false);
        let pv = tape.matmul(p, v);
        let out = tape.sum_rows(pv);
        if self.scale_by_rows {
            tape.scale(out, 1.0 / n as f64)
        } else {
            out
        }
    }

    pub fn apply(&self, store: &ParamStore, x: &Mat) -> Result<Mat> {
        if x.nrows() == 0 {
            return Err(Error::Invalid("attention-sum needs at least one row".into()));
        }
        if x.ncols() != store.value(self.wq).nrows() {
            return Err(Error::Shape(format!(
                "attention-sum input has {} columns, expected {}",
                x.ncols(),
                store.value(self.wq).nrows()
            )));
        }
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let o = self.forward(&mut tape, store, v);
        Ok(tape.value(o).clone())
    }
}

/// Bilinear cross-interaction between dialogue and entity rows.
#[derive(Clone, Debug)]
pub struct CrossInteraction {
    pub wc: ParamId,
    pub we: ParamId,
    pub w: ParamId,
    /// Row-softmax the interaction matrix before mixing.
    pub normalize: bool,
}

impl CrossInteraction {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        d_text: usize,
        d_ent: usize,
        d: usize,
        normalize: bool,
    ) -> Self {
        Self {
            wc: store.add("user.cross.wc", Group::User, glorot(rng, d_text, d)),
            we: store.add("user.cross.we", Group::User, glorot(rng, d_ent, d)),
            w: store.add("user.cross.w", Group::User, glorot(rng, d, d)),
            normalize,
        }
    }

    /// Returns `(C~, E~)`; `E~` is `None` when there are no entity rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        c: Var,
        e: Option<Var>,
    ) -> (Var, Option<Var>) {
        let wc = tape.param(store, self.wc);
        let cp = tape.matmul(c, wc);
        let Some(e) = e else { return (cp, None) };
        let we = tape.param(store, self.we);
        let ep = tape.matmul(e, we);
        let w = tape.param(store, self.w);
        let cw = tape.matmul(cp, w);
        let a = tape.matmul_bt(cw, ep);
        let at = tape.transpose(a);
        let (a, at) = if self.normalize {
            (tape.softmax(a, false), tape.softmax(at, false))
        } else {
            (a, at)
        };
        let mix_c = tape.matmul(a, ep);
        let mix_e = tape.matmul(at, cp);
        (tape.add(cp, mix_c), Some(tape.add(ep, mix_e)))
    }

    pub fn apply(&self, store: &ParamStore, c: &Mat, e: &Mat) -> Result<(Mat, Mat)> {
        let d_text = store.value(self.wc).nrows();
        let d_ent = store.value(self.we).nrows();
        if c.nrows() == 0 {
            return Err(Error::Invalid("cross-interaction needs at least one dialogue row".into()));
        }
        if c.ncols() != d_text || e.ncols() != d_ent {
            return Err(Error::Shape(format!(
                "cross-interaction got widths ({}, {}), expected ({d_text}, {d_ent})",
                c.ncols(),
                e.ncols()
            )));
        }
        let mut tape = Tape::new();
        let cv = tape.constant(c.clone());
        let ev = (e.nrows() > 0).then(|| tape.constant(e.clone()));
        let (ct, et) = self.forward(&mut tape, store, cv, ev);
        let d = store.value(self.w).nrows();
        let et = et.map(|v| tape.value(v).clone()).unwrap_or_else(|| Mat::zeros((0, d)));
        Ok((tape.value(ct).clone(), et))
    }
}

/// User-preference module parameters.
#[derive(Clone, Debug)]
pub struct UserPreference {
    pub cross: CrossInteraction,
    pub asum: AttentionSum,
    pub item_proj: ParamId,
}

impl UserPreference {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        d_text: usize,
        d_ent: usize,
        d: usize,
        normalize_cross: bool,
        asum_scale_by_rows: bool,
    ) -> Self {
        Self {
            cross: CrossInteraction::register(store, rng, d_text, d_ent, d, normalize_cross),
            asum: AttentionSum::register(store, rng, "user.asum", Group::User, d, d, asum_scale_by_rows),
            item_proj: store.add("user.item_proj", Group::User, glorot(rng, d_ent, d)),
        }
    }

    /// `U = ASum(concat(C~, E~))`.
    pub fn user_embedding(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        c_tilde: Var,
        e_tilde: Option<Var>,
    ) -> Var {
        let x = match e_tilde {
            Some(e) => tape.concat_rows(&[c_tilde, e]),
            None => c_tilde,
        };
        self.asum.forward(tape, store, x)
    }

    /// `R = softmax(U (I W_I)^T)` over the `|I| x d_ent` item rows.
    pub fn score_items(&self, tape: &mut Tape, store: &ParamStore, u: Var, items: Var) -> Var {
        let wi = tape.param(store, self.item_proj);
        let ip = tape.matmul(items, wi);
        let logits = tape.matmul_bt(u, ip);
        tape.softmax(logits, false)
    }
}

/// Softmax over a single logit row, checking the catalogue size.
pub fn score_from_logits(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.len() < 2 {
        return Err(Error::Invalid(format!(
            "scoring needs at least 2 items, got {}",
            logits.len()
        )));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Binary cross-entropy over softmax scores, recorded on the tape.
/// `y` holds one multi-hot row per score row.
pub fn bce_on_tape(tape: &mut Tape, r: Var, y: &Mat, reduction: Reduction) -> Var {
    assert_eq!(tape.shape(r), y.dim(), "score/label shape mismatch");
    let rc = tape.clamp(r, CLIP, 1.0 - CLIP);
    let log_r = tape.ln(rc);
    let one_minus = tape.affine(rc, -1.0, 1.0);
    let log_1mr = tape.ln(one_minus);
    let yv = tape.constant(y.clone());
    let ny = tape.constant(y.mapv(|v| 1.0 - v));
    let a = tape.mul(yv, log_r);
    let b = tape.mul(ny, log_1mr);
    let s = tape.add(a, b);
    let total = tape.sum_all(s);
    let scale = match reduction {
        Reduction::Sum => -1.0,
        Reduction::Mean => -1.0 / y.nrows().max(1) as f64,
    };
    tape.scale(total, scale)
}

/// Value-level binary cross-entropy over score rows.
pub fn bce_loss(r: &Mat, y: &Mat, reduction: Reduction) -> Result<f64> {
    if r.dim() != y.dim() {
        return Err(Error::Shape(format!("scores {:?} vs labels {:?}", r.dim(), y.dim())));
    }
    let mut tape = Tape::new();
    let rv = tape.constant(r.clone());
    let l = bce_on_tape(&mut tape, rv, y, reduction);
    Ok(tape.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn bce_half_half() {
        let l = bce_loss(&array![[0.5, 0.5]], &array![[1.0, 0.0]], Reduction::Sum).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
        let small = bce_loss(&array![[1e-300, 1e-300]], &array![[0.0, 0.0]], Reduction::Sum).unwrap();
        assert!(small.abs() < 1e-11);
        assert!(bce_loss(&array![[0.5, 0.5]], &array![[1.0]], Reduction::Sum).is_err());
        let two = array![[0.5, 0.5], [0.5, 0.5]];
        let y2 = array![[1.0, 0.0], [0.0, 1.0]];
        let s = bce_loss(&two, &y2, Reduction::Sum).unwrap();
        let m = bce_loss(&two, &y2, Reduction::Mean).unwrap();
        assert!((s - 2.0 * m).abs() < 1e-12);
    }

    #[test]
    fn softmax_scores() {
        let r = score_from_logits(&[3.0, 3.0, 3.0]).unwrap();
        assert!(r.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let a = score_from_logits(&[0.1, 2.0, -1.0]).unwrap();
        let b = score_from_logits(&[100.1, 102.0, 99.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(score_from_logits(&[1.0]).is_err());
    }

    #[test]
    fn asum_single_and_duplicate_rows() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = AttentionSum::register(&mut store, &mut rng, "a", Group::User, 3, 3, false);
        let x = array![[0.2, -0.4, 1.0]];
        let wv = store.value(a.wv).clone();
        let one = a.apply(&store, &x).unwrap();
        assert!((&one - &x.dot(&wv)).mapv(f64::abs).sum() < 1e-12);
        let two = a.apply(&store, &array![[0.2, -0.4, 1.0], [0.2, -0.4, 1.0]]).unwrap();
        assert!((&two - &(x.dot(&wv) * 2.0)).mapv(f64::abs).sum() < 1e-12);
        assert!(a.apply(&store, &Mat::zeros((0, 3))).is_err());
    }

    #[test]
    fn cross_interaction_empty_entities() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ci = CrossInteraction::register(&mut store, &mut rng, 4, 3, 2, true);
        let c = glorot(&mut rng, 2, 4);
        let (ct, et) = ci.apply(&store, &c, &Mat::zeros((0, 3))).unwrap();
        assert_eq!(ct, c.dot(store.value(ci.wc)));
        assert_eq!(et.dim(), (0, 2));
        assert!(ci.apply(&store, &c, &Mat::zeros((1, 5))).is_err());
    }
}
