//! Oracle and gradient suites runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Mat;
use crate::encoders::{EncoderConfig, RelationAdjacency, Rgcn};
use crate::error::Result;
use crate::eval;
use crate::gradcheck;
use crate::kg::{EntityId, KnowledgeGraph};
use crate::ktree::{build_tree, parse_serialized};
use crate::params::{Group, ParamStore};
use crate::reference;
use crate::user_pref::{AttentionSum, CrossInteraction};

pub const ORACLE_TOL: f64 = 1e-9;
pub const LOSS_GRAD_TOL: f64 = 1e-4;
pub const E2E_GRAD_TOL: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check { name: name.into(), passed, detail }
}

fn failed(name: &str, e: crate::Error) -> Check {
    check(name, false, format!("error: {e}"))
}

/// Random score vector with deliberate ties and a random gold set.
pub fn random_ranking_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let n = rng.gen_range(2..80);
    let levels = rng.gen_range(2..12);
    let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
    let g = rng.gen_range(1..=n.min(5));
    let gold: Vec<usize> = (0..g).map(|_| rng.gen_range(0..n)).collect();
    (scores, gold)
}

/// Largest absolute gap between production metrics and the brute-force ones.
pub fn metric_gap(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (scores, gold) = random_ranking_instance(&mut rng);
        let ranked = eval::rank(&scores);
        for k in [1, 5, 10, 50] {
            worst = worst
                .max((eval::recall_at_k(&ranked, &gold, k)? - reference::recall(&scores, &gold, k)).abs())
                .max((eval::ndcg_at_k(&ranked, &gold, k)? - reference::ndcg(&scores, &gold, k)).abs())
                .max((eval::mrr_at_k(&ranked, &gold, k)? - reference::mrr(&scores, &gold, k)).abs());
        }
    }
    Ok(worst)
}

pub fn random_responses(rng: &mut ChaCha8Rng) -> Vec<String> {
    const WORDS: [&str; 6] = ["a", "b", "C", "c", "dd", "e"];
    (0..rng.gen_range(1..6))
        .map(|_| {
            (0..rng.gen_range(0..9))
                .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

pub fn distinct_gap(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let r = random_responses(&mut rng);
        for n in 1..=4 {
            worst = worst.max((eval::distinct_n(&r, n)? - reference::distinct(&r, n)).abs());
        }
    }
    Ok(worst)
}

/// Number of (graph, depth, degree) cases whose tree differs from the
/// exhaustive enumeration, out of the total checked.
pub fn tree_mismatches(graphs: usize, seed: u64) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut bad, mut total) = (0, 0);
    for _ in 0..graphs {
        let n = rng.gen_range(2..=50);
        let m = rng.gen_range(0..3 * n);
        let g = reference::random_graph(&mut rng, n, 3, m, true);
        let emb = reference::random_mat(&mut rng, g.num_entities(), 4, 1.0);
        let c: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let root = EntityId(rng.gen_range(0..g.num_entities()));
        for depth in [1, 2] {
            for degree in [1, 3, 5] {
                total += 1;
                let t = build_tree(&g, &emb, &c, root, depth, degree)?;
                let got: std::collections::BTreeSet<(Vec<usize>, Vec<usize>)> = (0..t.len())
                    .map(|i| {
                        let (mut ents, mut rels) = (Vec::new(), Vec::new());
                        let mut cur = Some(i);
                        while let Some(j) = cur {
                            let node = &t.nodes[j];
                            ents.push(node.entity.0);
                            if let Some(r) = node.relation {
                                rels.push(r.0);
                            }
                            cur = node.parent;
                        }
                        ents.reverse();
                        rels.reverse();
                        (ents, rels)
                    })
                    .collect();
                if got != reference::tree_paths(&g, &emb, &c, root, depth, degree) {
                    bad += 1;
                }
            }
        }
    }
    Ok((bad, total))
}

/// Serialises and re-parses random trees; returns the number that differ.
pub fn round_trip_failures(trees: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..trees {
        let n = rng.gen_range(2..30);
        let g = reference::random_graph(&mut rng, n, 4, 2 * n, true);
        let emb = reference::random_mat(&mut rng, g.num_entities(), 3, 1.0);
        let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let root = EntityId(rng.gen_range(0..g.num_entities()));
        let t = build_tree(&g, &emb, &c, root, rng.gen_range(0..4), rng.gen_range(1..5))?;
        let parsed = parse_serialized(&t.serialize(&g).text)?;
        if parsed != t.named(&g) {
            bad += 1;
        }
    }
    Ok(bad)
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    if a.dim() != b.dim() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// One-layer graph convolution against the dense loop, with and without a
/// basis decomposition.
pub fn rgcn_gap(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for bases in [0, 2] {
        let g: KnowledgeGraph = reference::random_graph(&mut rng, 12, 3, 20, true);
        let cfg = EncoderConfig { d_ent: 5, rgcn_layers: 1, rgcn_bases: bases, ..EncoderConfig::default() };
        let mut store = ParamStore::new();
        let rgcn = Rgcn::register(&mut store, &mut rng, &cfg, g.num_entities(), g.num_relations());
        let got = rgcn.encode_graph(&store, &RelationAdjacency::from_graph(&g));
        let lp = rgcn.layer_params(0);
        let d = cfg.d_ent;
        let all = if lp.len() == 3 {
            store.value(lp[2]).dot(store.value(lp[1]))
        } else {
            store.value(lp[1]).clone()
        };
        let w_rel: Vec<Mat> = (0..g.num_relations())
            .map(|r| Mat::from_shape_fn((d, d), |(i, j)| all[[r, i * d + j]]))
            .collect();
        let want = reference::rgcn_layer(&g, store.value(rgcn.entity_table()), store.value(lp[0]), &w_rel, true);
        worst = worst.max(max_abs_diff(&got, &want));
    }
    Ok(worst)
}

pub fn asum_gap(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for scale in [false, true] {
        let mut store = ParamStore::new();
        let a = AttentionSum::register(&mut store, &mut rng, "a", Group::User, 4, 3, scale);
        let rows = rng.gen_range(1..7);
        let x = reference::random_mat(&mut rng, rows, 4, 1.0);
        let got = a.apply(&store, &x)?;
        let want = reference::asum(&x, store.value(a.wq), store.value(a.wk), store.value(a.wv), scale);
        worst = worst.max(got.iter().zip(&want).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max));
    }
    Ok(worst)
}

pub fn cross_gap(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for normalize in [true, false] {
        let mut store = ParamStore::new();
        let ci = CrossInteraction::register(&mut store, &mut rng, 5, 4, 3, normalize);
        let c = reference::random_mat(&mut rng, 3, 5, 1.0);
        let e = reference::random_mat(&mut rng, 4, 4, 1.0);
        let (ct, et) = ci.apply(&store, &c, &e)?;
        let (rc, re) =
            reference::cross(&c, &e, store.value(ci.wc), store.value(ci.we), store.value(ci.w), normalize);
        worst = worst.max(max_abs_diff(&ct, &rc)).max(max_abs_diff(&et, &re));
    }
    Ok(worst)
}

pub fn oracle_suite() -> Vec<Check> {
    let mut out = Vec::new();
    let gap_check = |name: &str, r: Result<f64>| match r {
        Ok(g) => check(name, g <= ORACLE_TOL, format!("max gap {g:.3e}")),
        Err(e) => failed(name, e),
    };
    out.push(gap_check("ranking metrics vs brute force", metric_gap(200, 11)));
    out.push(gap_check("distinct-n vs brute force", distinct_gap(100, 12)));
    out.push(match tree_mismatches(100, 13) {
        Ok((bad, total)) => check("knowledge trees vs exhaustive ranking", bad == 0, format!("{bad}/{total} mismatched")),
        Err(e) => failed("knowledge trees vs exhaustive ranking", e),
    });
    out.push(match round_trip_failures(100, 14) {
        Ok(bad) => check("tree serialisation round trip", bad == 0, format!("{bad}/100 differ")),
        Err(e) => failed("tree serialisation round trip", e),
    });
    out.push(gap_check("graph convolution vs dense loop", rgcn_gap(15)));
    out.push(gap_check("attention sum vs double loop", asum_gap(16)));
    out.push(gap_check("cross interaction vs loops", cross_gap(17)));
    out
}

pub fn gradient_suite(end_to_end: bool) -> Vec<Check> {
    let mut out = Vec::new();
    let runs = [
        gradcheck::user_loss(21),
        gradcheck::align_loss(22, false),
        gradcheck::align_loss(23, true),
        gradcheck::rec_loss(24),
        gradcheck::conv_loss(25),
    ];
    for r in runs {
        out.push(match r {
            Ok(r) => check(
                &format!("gradient {}", r.name),
                r.rel_error < LOSS_GRAD_TOL,
                format!("rel error {:.3e} over {} coords", r.rel_error, r.coords),
            ),
            Err(e) => failed("gradient", e),
        });
    }
    if end_to_end {
        match gradcheck::end_to_end(26) {
            Ok((r, plm_zero)) => {
                out.push(check(
                    "gradient L_all end to end",
                    r.rel_error < E2E_GRAD_TOL,
                    format!("rel error {:.3e} over {} coords", r.rel_error, r.coords),
                ));
                out.push(check("frozen backbone receives no gradient", plm_zero, String::new()));
            }
            Err(e) => out.push(failed("gradient L_all end to end", e)),
        }
    }
    out
}

pub fn run_all() -> Vec<Check> {
    let mut v = oracle_suite();
    v.extend(gradient_suite(true));
    v
}
