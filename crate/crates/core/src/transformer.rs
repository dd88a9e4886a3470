//! Pre-norm transformer stack shared by the text encoder and the decoder.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::params::{glorot, Group, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerShape {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub shape: TransformerShape,
    pub causal: bool,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

const LN_EPS: f64 = 1e-5;

impl Transformer {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        group: Group,
        shape: TransformerShape,
        causal: bool,
    ) -> Self {
        assert!(shape.width.is_multiple_of(shape.heads), "width must divide into heads");
        let d = shape.width;
        let add = |store: &mut ParamStore, name: String, m: Mat| store.add(&name, group, m);
        let blocks = (0..shape.layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                Block {
                    ln1_g: add(store, format!("{p}.ln1.gain"), Mat::ones((1, d))),
                    ln1_b: add(store, format!("{p}.ln1.bias"), Mat::zeros((1, d))),
                    wq: add(store, format!("{p}.attn.q"), glorot(rng, d, d)),
                    wk: add(store, format!("{p}.attn.k"), glorot(rng, d, d)),
                    wv: add(store, format!("{p}.attn.v"), glorot(rng, d, d)),
                    wo: add(store, format!("{p}.attn.o"), glorot(rng, d, d)),
                    ln2_g: add(store, format!("{p}.ln2.gain"), Mat::ones((1, d))),
                    ln2_b: add(store, format!("{p}.ln2.bias"), Mat::zeros((1, d))),
                    w1: add(store, format!("{p}.ffn.w1"), glorot(rng, d, shape.ffn)),
                    b1: add(store, format!("{p}.ffn.b1"), Mat::zeros((1, shape.ffn))),
                    w2: add(store, format!("{p}.ffn.w2"), glorot(rng, shape.ffn, d)),
                    b2: add(store, format!("{p}.ffn.b2"), Mat::zeros((1, d))),
                }
            })
            .collect();
        let lnf_g = add(store, format!("{prefix}.final_ln.gain"), Mat::ones((1, d)));
        let lnf_b = add(store, format!("{prefix}.final_ln.bias"), Mat::zeros((1, d)));
        Self { shape, causal, blocks, lnf_g, lnf_b }
    }

    /// Runs the stack over an `n x width` input and returns `n x width`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let heads = self.shape.heads;
        let dh = self.shape.width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = x;
        for b in &self.blocks {
            let g = tape.param(store, b.ln1_g);
            let bb = tape.param(store, b.ln1_b);
            let n1 = tape.layer_norm(h, g, bb, LN_EPS);
            let wq = tape.param(store, b.wq);
            let wk = tape.param(store, b.wk);
            let wv = tape.param(store, b.wv);
            let q = tape.matmul(n1, wq);
            let k = tape.matmul(n1, wk);
            let v = tape.matmul(n1, wv);
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (
                        tape.slice_cols(q, hd * dh, dh),
                        tape.slice_cols(k, hd * dh, dh),
                        tape.slice_cols(v, hd * dh, dh),
                    )
                };
                let s = tape.matmul_bt(qh, kh);
                let s = tape.scale(s, scale);
                let p = tape.softmax(s, self.causal);
                outs.push(tape.matmul(p, vh));
            }
            let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
            let wo = tape.param(store, b.wo);
            let attn = tape.matmul(cat, wo);
            h = tape.add(h, attn);

            let g = tape.param(store, b.ln2_g);
            let bb = tape.param(store, b.ln2_b);
            let n2 = tape.layer_norm(h, g, bb, LN_EPS);
            let w1 = tape.param(store, b.w1);
            let b1 = tape.param(store, b.b1);
            let w2 = tape.param(store, b.w2);
            let b2 = tape.param(store, b.b2);
            let f = tape.matmul(n2, w1);
            let f = tape.add_row(f, b1);
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2);
            let f = tape.add_row(f, b2);
            h = tape.add(h, f);
        }
        let g = tape.param(store, self.lnf_g);
        let bb = tape.param(store, self.lnf_b);
        tape.layer_norm(h, g, bb, LN_EPS)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([
                b.ln1_g, b.ln1_b, b.wq, b.wk, b.wv, b.wo, b.ln2_g, b.ln2_b, b.w1, b.b1, b.w2, b.b2,
            ]);
        }
        out.extend([self.lnf_g, self.lnf_b]);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn stack(causal: bool) -> (ParamStore, Transformer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = TransformerShape { width: 8, layers: 2, heads: 2, ffn: 16 };
        let t = Transformer::register(&mut store, &mut rng, "t", Group::Plm, shape, causal);
        (store, t)
    }

    fn run(store: &ParamStore, t: &Transformer, x: &Mat) -> Mat {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let o = t.forward(&mut tape, store, v);
        tape.value(o).clone()
    }

    #[test]
    fn causal_prefix_is_unaffected_by_suffix() {
        let (store, t) = stack(true);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = glorot(&mut rng, 5, 8);
        let full = run(&store, &t, &x);
        let prefix = run(&store, &t, &x.slice(ndarray::s![..3, ..]).to_owned());
        let diff = (&full.slice(ndarray::s![..3, ..]) - &prefix).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn bidirectional_sees_suffix() {
        let (store, t) = stack(false);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = glorot(&mut rng, 5, 8);
        let full = run(&store, &t, &x);
        let prefix = run(&store, &t, &x.slice(ndarray::s![..3, ..]).to_owned());
        let diff = (&full.slice(ndarray::s![..3, ..]) - &prefix).mapv(f64::abs).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn every_weight_gets_gradient() {
        let (store, t) = stack(true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let x = tape.leaf(glorot(&mut rng, 4, 8));
        let o = t.forward(&mut tape, &store, x);
        let w = tape.constant(glorot(&mut rng, 4, 8));
        let p = tape.mul(o, w);
        let l = tape.sum_all(p);
        let g = tape.backward(l);
        let got: std::collections::HashSet<_> = g
            .params()
            .filter(|(_, m)| m.iter().any(|v| *v != 0.0))
            .map(|(id, _)| id)
            .collect();
        for id in t.param_ids() {
            assert!(got.contains(&id), "{} has no gradient", store.param(id).name);
        }
    }
}
