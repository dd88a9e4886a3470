//! Slow, literal reference implementations and random instance generators.
//! They share no code with the production paths and back the self-test and
//! the oracle test suites.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Mat;
use crate::kg::{EntityId, KnowledgeGraph, RelationId};

/// 1-based rank of item `i`: one plus the number of items that precede it
/// (higher score, or equal score and lower index).
fn position(scores: &[f64], i: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
        .count()
}

fn unique(gold: &[usize]) -> Vec<usize> {
    gold.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
}

pub fn recall(scores: &[f64], gold: &[usize], k: usize) -> f64 {
    let g = unique(gold);
    let mut hits = 0.0;
    for &i in &g {
        if position(scores, i) <= k {
            hits += 1.0;
        }
    }
    hits / g.len() as f64
}

pub fn ndcg(scores: &[f64], gold: &[usize], k: usize) -> f64 {
    let g = unique(gold);
    let mut dcg = 0.0;
    for &i in &g {
        let r = position(scores, i);
        if r <= k {
            dcg += 1.0 / (r as f64 + 1.0).log2();
        }
    }
    let mut idcg = 0.0;
    let mut r = 1;
    while r <= g.len() && r <= k {
        idcg += 1.0 / (r as f64 + 1.0).log2();
        r += 1;
    }
    dcg / idcg
}

pub fn mrr(scores: &[f64], gold: &[usize], k: usize) -> f64 {
    let best = unique(gold).iter().map(|&i| position(scores, i)).min().unwrap();
    if best <= k {
        1.0 / best as f64
    } else {
        0.0
    }
}

pub fn distinct(responses: &[String], n: usize) -> f64 {
    let mut all: Vec<String> = Vec::new();
    for r in responses {
        let w: Vec<String> = r.split_whitespace().map(|s| s.to_lowercase()).collect();
        let mut s = 0;
        while s + n <= w.len() {
            all.push(w[s..s + n].join("\u{1}"));
            s += 1;
        }
    }
    if all.is_empty() {
        return 0.0;
    }
    let mut uniq = 0;
    for (i, g) in all.iter().enumerate() {
        if !all[..i].contains(g) {
            uniq += 1;
        }
    }
    uniq as f64 / all.len() as f64
}

/// Neighbours of `v` found by scanning every triple in both directions.
pub fn neighbors_by_scan(g: &KnowledgeGraph, v: EntityId) -> Vec<(RelationId, EntityId)> {
    let nf = g.num_forward_relations();
    let mut out = BTreeSet::new();
    for t in g.triples() {
        if t.head == v {
            out.insert((t.relation, t.tail));
        }
        if g.inverse_edges() && t.tail == v {
            out.insert((RelationId(t.relation.0 + nf), t.head));
        }
    }
    out.into_iter().collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Every root path of the tree, each as `(entities, relations)`, obtained by
/// fully sorting each node's candidate list.
pub fn tree_paths(
    g: &KnowledgeGraph,
    emb: &Mat,
    c: &[f64],
    root: EntityId,
    depth: usize,
    degree: usize,
) -> BTreeSet<(Vec<usize>, Vec<usize>)> {
    let mut out = BTreeSet::new();
    let mut stack = vec![(vec![root.0], vec![])];
    while let Some((path, rels)) = stack.pop() {
        out.insert((path.clone(), rels.clone()));
        if path.len() > depth {
            continue;
        }
        let v = *path.last().unwrap();
        let mut best: BTreeMap<usize, usize> = BTreeMap::new();
        for (r, u) in neighbors_by_scan(g, EntityId(v)) {
            if path.contains(&u.0) {
                continue;
            }
            let e = best.entry(u.0).or_insert(r.0);
            if r.0 < *e {
                *e = r.0;
            }
        }
        let mut cands: Vec<(f64, usize, usize)> = best
            .into_iter()
            .map(|(u, r)| (cos(c, &emb.row(u).to_vec()), u, r))
            .collect();
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, u, r) in cands.iter().take(degree) {
            let mut p = path.clone();
            p.push(u);
            let mut q = rels.clone();
            q.push(r);
            stack.push((p, q));
        }
    }
    out
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[[i, k]] * b[[k, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

/// `sum_i sum_j softmax_j(q_i . k_j / sqrt(d)) v_j` by explicit loops.
pub fn asum(x: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, scale_by_rows: bool) -> Vec<f64> {
    let (q, k, v) = (mm(x, wq), mm(x, wk), mm(x, wv));
    let n = x.nrows();
    let d = wq.ncols();
    let mut out = vec![0.0; v.ncols()];
    for i in 0..n {
        let s: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|t| q[[i, t]] * k[[j, t]]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let w = softmax(&s);
        for j in 0..n {
            for c in 0..out.len() {
                out[c] += w[j] * v[[j, c]];
            }
        }
    }
    if scale_by_rows {
        out.iter_mut().for_each(|o| *o /= n as f64);
    }
    out
}

/// Cross-interaction by explicit loops; returns `(C~, E~)`.
pub fn cross(c: &Mat, e: &Mat, wc: &Mat, we: &Mat, w: &Mat, normalize: bool) -> (Mat, Mat) {
    let cp = mm(c, wc);
    if e.nrows() == 0 {
        return (cp, Mat::zeros((0, wc.ncols())));
    }
    let ep = mm(e, we);
    let (nc, ne, d) = (cp.nrows(), ep.nrows(), cp.ncols());
    let mut a = Mat::zeros((nc, ne));
    for i in 0..nc {
        for j in 0..ne {
            let mut s = 0.0;
            for p in 0..d {
                for q in 0..d {
                    s += cp[[i, p]] * w[[p, q]] * ep[[j, q]];
                }
            }
            a[[i, j]] = s;
        }
    }
    let row_weights = |m: &Mat, i: usize| -> Vec<f64> {
        let r = m.row(i).to_vec();
        if normalize {
            softmax(&r)
        } else {
            r
        }
    };
    let at = a.t().to_owned();
    let mut ct = cp.clone();
    for i in 0..nc {
        let wts = row_weights(&a, i);
        for j in 0..ne {
            for p in 0..d {
                ct[[i, p]] += wts[j] * ep[[j, p]];
            }
        }
    }
    let mut et = ep.clone();
    for j in 0..ne {
        let wts = row_weights(&at, j);
        for i in 0..nc {
            for p in 0..d {
                et[[j, p]] += wts[i] * cp[[i, p]];
            }
        }
    }
    (ct, et)
}

/// `-sum_j sum_i [y log r + (1 - y) log(1 - r)]` with clipping.
pub fn bce(r: &Mat, y: &Mat) -> f64 {
    let mut total = 0.0;
    for j in 0..r.nrows() {
        for i in 0..r.ncols() {
            let p = r[[j, i]].clamp(1e-12, 1.0 - 1e-12);
            total -= y[[j, i]] * p.ln() + (1.0 - y[[j, i]]) * (1.0 - p).ln();
        }
    }
    total
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for i in 0..x.nrows() {
        let s = softmax(&x.row(i).to_vec());
        for j in 0..x.ncols() {
            out[[i, j]] = s[j];
        }
    }
    out
}

/// Contrastive loss summed over positive pairs.
pub fn infonce(e: &Mat, t: &Mat, mask: &Mat, tau: f64, normalize: bool, literal: bool) -> f64 {
    let b = e.nrows();
    let norm = |m: &Mat, i: usize| -> Vec<f64> {
        let r = m.row(i).to_vec();
        if !normalize {
            return r;
        }
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        r.iter().map(|x| x / n).collect()
    };
    let s = |i: usize, j: usize| -> f64 {
        let (a, c) = (norm(e, i), norm(t, j));
        a.iter().zip(&c).map(|(x, y)| x * y).sum::<f64>()
    };
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..b {
            if mask[[i, j]] == 0.0 {
                continue;
            }
            let num = (s(i, j) / tau).exp();
            let mut den = 0.0;
            for k in 0..b {
                let w = if literal { 1.0 - mask[[i, k]] } else { 1.0 };
                den += w * (s(i, k) / tau).exp();
            }
            if literal {
                den += 1e-12;
            }
            total -= (num / den).ln();
        }
    }
    total
}

/// One relational graph-convolution layer by a dense double loop.
/// `w_rel[r]` is the `d x d` weight of relation `r`.
pub fn rgcn_layer(g: &KnowledgeGraph, h: &Mat, w_self: &Mat, w_rel: &[Mat], relu: bool) -> Mat {
    let n = g.num_entities();
    let d = w_self.ncols();
    let mut out = mm(h, w_self);
    for v in 0..n {
        let nb = neighbors_by_scan(g, EntityId(v));
        for (r, w_r) in w_rel.iter().enumerate() {
            let members: Vec<usize> = nb.iter().filter(|(rr, _)| rr.0 == r).map(|(_, u)| u.0).collect();
            if members.is_empty() {
                continue;
            }
            let norm = 1.0 / members.len() as f64;
            for &u in &members {
                for c in 0..d {
                    let mut s = 0.0;
                    for k in 0..h.ncols() {
                        s += h[[u, k]] * w_r[[k, c]];
                    }
                    out[[v, c]] += norm * s;
                }
            }
        }
    }
    if relu {
        out.mapv_inplace(|x| x.max(0.0));
    }
    out
}

/// Random graph over `n` entities named `e0..`, with `r` relation names and
/// about `m` triples.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, r: usize, m: usize, inverse: bool) -> KnowledgeGraph {
    let mut lines = Vec::with_capacity(m + n);
    // A spanning chain keeps every entity present.
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    for w in perm.windows(2) {
        lines.push(format!("e{}\tr{}\te{}", w[0], rng.gen_range(0..r), w[1]));
    }
    for _ in 0..m {
        lines.push(format!("e{}\tr{}\te{}", rng.gen_range(0..n), rng.gen_range(0..r), rng.gen_range(0..n)));
    }
    if n == 1 {
        lines.push("e0\tr0\te0".into());
    }
    KnowledgeGraph::parse_triples(&lines.join("\n"), "random", inverse).expect("generated triples parse")
}

pub fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.gen_range(-scale..scale))
}
