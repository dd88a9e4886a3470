//! Central finite-difference checks of the tape gradients.

use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{align_loss_on_tape, contrast_mask, AlignSettings, MaskMode};
use crate::autograd::{Grads, Mat, Tape};
use crate::config::{ModelConfig, RunConfig};
use crate::corpus::Dialogue;
use crate::error::{Error, Result};
use crate::fixture::{self, FixtureSpec};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::model::{token_nll_on_tape, Decoder, Objective};
use crate::params::{uniform, Group, ParamId, ParamStore};
use crate::train::Pipeline;
use crate::user_pref::{bce_on_tape, Reduction, UserPreference};

pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    /// `||g_a - g_n|| / max(||g_a||, ||g_n||)` over the probed coordinates.
    pub rel_error: f64,
    pub coords: usize,
}

pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nn);
    if den < 1e-10 {
        diff
    } else {
        diff / den
    }
}

pub fn collect(grads: &Grads) -> HashMap<ParamId, Mat> {
    grads.params().map(|(id, g)| (id, g.clone())).collect()
}

/// Up to `per_param` random coordinates of each listed parameter.
pub fn sample_coords(
    store: &ParamStore,
    ids: &[ParamId],
    per_param: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(ParamId, usize, usize)> {
    let mut out = Vec::new();
    for &id in ids {
        let (r, c) = store.value(id).dim();
        if r * c <= per_param {
            out.extend((0..r).flat_map(|i| (0..c).map(move |j| (id, i, j))));
        } else {
            for _ in 0..per_param {
                out.push((id, rng.gen_range(0..r), rng.gen_range(0..c)));
            }
        }
    }
    out
}

/// Compares analytic gradients with central differences of `f` at `coords`.
pub fn check<F>(
    name: &str,
    store: &mut ParamStore,
    analytic: &HashMap<ParamId, Mat>,
    coords: &[(ParamId, usize, usize)],
    mut f: F,
) -> Result<GradReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut a = Vec::with_capacity(coords.len());
    let mut n = Vec::with_capacity(coords.len());
    for &(id, i, j) in coords {
        a.push(analytic.get(&id).map_or(0.0, |g| g[[i, j]]));
        let orig = store.value(id)[[i, j]];
        store.value_mut(id)[[i, j]] = orig + STEP;
        let up = f(store)?;
        store.value_mut(id)[[i, j]] = orig - STEP;
        let down = f(store)?;
        store.value_mut(id)[[i, j]] = orig;
        n.push((up - down) / (2.0 * STEP));
    }
    Ok(GradReport { name: name.into(), rel_error: relative_error(&a, &n), coords: coords.len() })
}

fn labels(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let mut y = Mat::zeros((rows, cols));
    for r in 0..rows {
        y[[r, rng.gen_range(0..cols)]] = 1.0;
    }
    y
}

/// User-preference loss over random dialogue, entity and item rows.
pub fn user_loss(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dt, de, d, items) = (6, 5, 4, 7);
    let mut store = ParamStore::new();
    let up = UserPreference::register(&mut store, &mut rng, dt, de, d, true, false);
    let c = store.add("c", Group::User, uniform(&mut rng, 3, dt, 1.0));
    let e = store.add("e", Group::User, uniform(&mut rng, 4, de, 1.0));
    let it = store.add("items", Group::User, uniform(&mut rng, items, de, 1.0));
    let y = labels(&mut rng, 1, items);
    let f = |s: &ParamStore| -> (Tape, crate::autograd::Var) {
        let mut t = Tape::new();
        let (cv, ev, iv) = (t.param(s, c), t.param(s, e), t.param(s, it));
        let (ct, et) = up.cross.forward(&mut t, s, cv, Some(ev));
        let u = up.user_embedding(&mut t, s, ct, et);
        let r = up.score_items(&mut t, s, u, iv);
        let l = bce_on_tape(&mut t, r, &y, Reduction::Sum);
        (t, l)
    };
    let (t, l) = f(&store);
    let analytic = collect(&t.backward(l));
    let ids: Vec<ParamId> = store.ids().collect();
    let coords = sample_coords(&store, &ids, 6, &mut rng);
    check("L_user", &mut store, &analytic, &coords, |s| {
        let (t, l) = f(s);
        Ok(t.scalar(l))
    })
}

/// Contrastive alignment loss over random aggregates with shared entities.
pub fn align_loss(seed: u64, literal: bool) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = 5;
    let mut store = ParamStore::new();
    let e = store.add("e", Group::User, uniform(&mut rng, b, 6, 1.0));
    let tr = store.add("t", Group::Tree, uniform(&mut rng, b, 6, 1.0));
    let seqs: Vec<Vec<EntityId>> = (0..b)
        .map(|_| (0..3).map(|_| EntityId(rng.gen_range(0..4))).collect())
        .collect();
    let mask = contrast_mask(&seqs, MaskMode::Ordered);
    let settings = AlignSettings { tau: 0.5, literal, ..AlignSettings::default() };
    let f = |s: &ParamStore| -> Result<(Tape, crate::autograd::Var)> {
        let mut t = Tape::new();
        let (ev, tv) = (t.param(s, e), t.param(s, tr));
        let l = align_loss_on_tape(&mut t, ev, tv, &mask, &settings)
            .ok_or_else(|| Error::Invalid("no positive pair".into()))?;
        Ok((t, l))
    };
    let (t, l) = f(&store)?;
    let analytic = collect(&t.backward(l));
    let coords = sample_coords(&store, &[e, tr], 30, &mut rng);
    let name = if literal { "L_align (negatives only)" } else { "L_align" };
    check(name, &mut store, &analytic, &coords, |s| {
        let (t, l) = f(s)?;
        Ok(t.scalar(l))
    })
}

/// Recommendation loss: BCE over the softmax of logit rows.
pub fn rec_loss(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let z = store.add("logits", Group::Prompt, uniform(&mut rng, 3, 8, 2.0));
    let y = labels(&mut rng, 3, 8);
    let f = |s: &ParamStore| {
        let mut t = Tape::new();
        let zv = t.param(s, z);
        let r = t.softmax(zv, false);
        let l = bce_on_tape(&mut t, r, &y, Reduction::Sum);
        (t, l)
    };
    let (t, l) = f(&store);
    let analytic = collect(&t.backward(l));
    let coords = sample_coords(&store, &[z], 24, &mut rng);
    check("L_rec", &mut store, &analytic, &coords, |s| {
        let (t, l) = f(s);
        Ok(t.scalar(l))
    })
}

/// Generation loss through a frozen decoder, with respect to the prompt rows.
pub fn conv_loss(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        decoder_width: 8,
        decoder_layers: 1,
        decoder_heads: 2,
        decoder_ffn: 16,
        decoder_max_len: 32,
        ..ModelConfig::default()
    };
    let vocab = 12;
    let mut store = ParamStore::new();
    let dec = Decoder::register(&mut store, &mut rng, &cfg, vocab);
    store.set_frozen(Group::Plm, true);
    let p = store.add("prompt", Group::Prompt, uniform(&mut rng, 4, 8, 0.5));
    let ids: Vec<usize> = (0..6).map(|_| rng.gen_range(0..vocab)).collect();
    let targets: Vec<usize> = (0..6).map(|_| rng.gen_range(0..vocab)).collect();
    let f = |s: &ParamStore| {
        let mut t = Tape::new();
        let pv = t.param(s, p);
        let h = dec.forward(&mut t, s, Some(pv), &ids);
        let h = t.slice_rows(h, 4, ids.len());
        let logits = dec.lm_logits(&mut t, s, h);
        let l = token_nll_on_tape(&mut t, logits, &targets);
        (t, l)
    };
    let (t, l) = f(&store);
    let grads = t.backward(l);
    let analytic = collect(&grads);
    if dec.param_ids().iter().any(|id| analytic.contains_key(id)) {
        return Err(Error::Invalid("frozen decoder received a gradient".into()));
    }
    let coords = sample_coords(&store, &[p], 32, &mut rng);
    check("L_conv", &mut store, &analytic, &coords, |s| {
        let (t, l) = f(s);
        Ok(t.scalar(l))
    })
}

/// Small fixture pipeline with an untrained backbone, for end-to-end checks.
pub fn toy_pipeline(dialogues: usize, seed: u64) -> Result<(Pipeline, KnowledgeGraph, Vec<Dialogue>)> {
    let fx = fixture::generate(&FixtureSpec { dialogues, seed, ..FixtureSpec::default() });
    let mut cfg: RunConfig = fixture::toy_config();
    cfg.train.backbone_pretrain_steps = 0;
    let g = fx.graph(cfg.encoder.use_inverse_edges)?;
    let p = Pipeline::from_parts(&cfg, g.clone(), &fx.dialogues)?;
    Ok((p, g, fx.dialogues))
}

/// Full recommendation objective on a fixture batch, probing every trainable
/// group. Tree structures are pinned so the loss is smooth in the parameters.
pub fn end_to_end(seed: u64) -> Result<(GradReport, bool)> {
    let (mut p, _, _) = toy_pipeline(20, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.model.pin_trees(true);
    let batch: Vec<usize> = (0..p.train.len())
        .filter(|&i| !p.train[i].target_cols.is_empty())
        .take(4)
        .collect();
    let model = &p.model;
    let inputs = p.train.clone();
    let store = &mut p.store;
    let f = |s: &ParamStore| -> Result<(Tape, crate::autograd::Var)> {
        let refs: Vec<_> = batch.iter().map(|&i| &inputs[i]).collect();
        let mut t = Tape::new();
        let (l, _) = model.batch_loss(&mut t, s, &refs, Objective::Rec)?;
        Ok((t, l))
    };
    let (t, l) = f(store)?;
    let analytic = collect(&t.backward(l));
    let plm_zero = store
        .ids_in(Group::Plm)
        .all(|id| analytic.get(&id).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    let ids: Vec<ParamId> = [Group::User, Group::Tree, Group::Prompt]
        .iter()
        .flat_map(|&g| store.ids_in(g).collect::<Vec<_>>())
        .filter(|id| analytic.contains_key(id))
        .collect();
    let coords = sample_coords(store, &ids, 3, &mut rng);
    let r = check("L_all", store, &analytic, &coords, |s| {
        let (t, l) = f(s)?;
        Ok(t.scalar(l))
    })?;
    model.pin_trees(false);
    Ok((r, plm_zero))
}

/// Graph used by callers that only need a parsed fixture graph.
pub fn fixture_graph() -> Result<Rc<KnowledgeGraph>> {
    Ok(Rc::new(fixture::generate(&FixtureSpec::default()).graph(true)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn per_loss_checks_pass() {
        for r in [user_loss(1), align_loss(2, false), align_loss(3, true), rec_loss(4), conv_loss(5)] {
            let r = r.unwrap();
            assert!(r.rel_error < 1e-4, "{}: {}", r.name, r.rel_error);
        }
    }
}
