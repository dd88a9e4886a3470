use std::collections::BTreeSet;

use kgcrs::autograd::Tape;
use kgcrs::kg::{EntityId, KnowledgeGraph};
use kgcrs::ktree::{build_tree, context_similarity, cosine, parse_serialized, KnowledgeTree, TreeModule};
use kgcrs::params::ParamStore;
use kgcrs::reference;
use ndarray::array;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Paths = BTreeSet<(Vec<usize>, Vec<usize>)>;

fn paths(t: &KnowledgeTree) -> Paths {
    (0..t.len())
        .map(|i| {
            let (mut e, mut r) = (Vec::new(), Vec::new());
            let mut cur = Some(i);
            while let Some(j) = cur {
                e.push(t.nodes[j].entity.0);
                if let Some(rel) = t.nodes[j].relation {
                    r.push(rel.0);
                }
                cur = t.nodes[j].parent;
            }
            e.reverse();
            r.reverse();
            (e, r)
        })
        .collect()
}

struct Instance {
    g: KnowledgeGraph,
    emb: ndarray::Array2<f64>,
    c: Vec<f64>,
    root: EntityId,
}

fn instance(seed: u64, n: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(n..3 * n);
    let g = reference::random_graph(&mut rng, n, 3, m, true);
    let emb = reference::random_mat(&mut rng, g.num_entities(), 4, 1.0);
    let c: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let root = EntityId(rng.gen_range(0..g.num_entities()));
    Instance { g, emb, c, root }
}

#[test]
fn cosine_hand_value() {
    let e = array![[1.0, 1.0]];
    assert!((context_similarity(&[1.0, 0.0], EntityId(0), &e) - 1.0 / 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(cosine(&[2.0, 0.0], &[0.0, 3.0]), 0.0);
    assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
}

#[test]
fn thirty_entity_tree_matches_exhaustive_ranking() {
    for seed in 0..20 {
        let x = instance(seed, 30);
        let t = build_tree(&x.g, &x.emb, &x.c, x.root, 2, 2).unwrap();
        assert_eq!(paths(&t), reference::tree_paths(&x.g, &x.emb, &x.c, x.root, 2, 2), "seed {seed}");
    }
}

#[test]
fn depth_zero_and_star() {
    let g = KnowledgeGraph::parse_triples("h\tr\ta\nh\tr\tb\nh\ts\tc\nh\ts\td", "t", false).unwrap();
    let emb = reference::random_mat(&mut ChaCha8Rng::seed_from_u64(1), 5, 3, 1.0);
    let hub = g.entity_id("h").unwrap();
    assert_eq!(build_tree(&g, &emb, &[1.0, 0.0, 0.0], hub, 0, 3).unwrap().len(), 1);
    let t = build_tree(&g, &emb, &[1.0, 0.0, 0.0], hub, 1, 4).unwrap();
    assert_eq!(t.layer(1).len(), 4);
}

#[test]
fn tree_aggregate_of_one_and_two_identical_trees() {
    let mut store = ParamStore::new();
    let tm = TreeModule::register(&mut store, &mut ChaCha8Rng::seed_from_u64(3), 4, 4, 3, false);
    let x = reference::random_mat(&mut ChaCha8Rng::seed_from_u64(4), 5, 4, 1.0);
    let mut t = Tape::new();
    let a = t.constant(x.clone());
    let (rows, agg) = tm.aggregate(&mut t, &store, &[a]);
    let t1 = t.value(rows).clone();
    let want = t1.dot(store.value(tm.outer.wv));
    for (p, q) in t.value(agg).iter().zip(&want) {
        assert!((p - q).abs() < 1e-12);
    }
    let mut t = Tape::new();
    let (a, b) = (t.constant(x.clone()), t.constant(x.clone()));
    let (rows, agg) = tm.aggregate(&mut t, &store, &[a, b]);
    assert_eq!(t.value(rows).row(0), t.value(rows).row(1));
    for (p, q) in t.value(agg).iter().zip(&want) {
        assert!((p - 2.0 * q).abs() < 1e-12);
    }
}

#[test]
fn three_trees_match_composed_oracles() {
    let mut store = ParamStore::new();
    let tm = TreeModule::register(&mut store, &mut ChaCha8Rng::seed_from_u64(5), 4, 4, 3, false);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xs: Vec<_> = (0..3).map(|i| reference::random_mat(&mut rng, 2 + i, 4, 1.0)).collect();
    let mut t = Tape::new();
    let vars: Vec<_> = xs.iter().map(|x| t.constant(x.clone())).collect();
    let (_, agg) = tm.aggregate(&mut t, &store, &vars);
    let (i, o) = (&tm.inner, &tm.outer);
    let rows: Vec<f64> = xs
        .iter()
        .flat_map(|x| reference::asum(x, store.value(i.wq), store.value(i.wk), store.value(i.wv), false))
        .collect();
    let stacked = ndarray::Array2::from_shape_vec((3, 3), rows).unwrap();
    let want = reference::asum(&stacked, store.value(o.wq), store.value(o.wk), store.value(o.wv), false);
    for (p, q) in t.value(agg).iter().zip(&want) {
        assert!((p - q).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn deterministic(seed in 0u64..100_000, depth in 0usize..3, degree in 1usize..5) {
        let x = instance(seed, 20);
        let a = build_tree(&x.g, &x.emb, &x.c, x.root, depth, degree).unwrap();
        let b = build_tree(&x.g, &x.emb, &x.c, x.root, depth, degree).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn wider_trees_contain_narrower(seed in 0u64..100_000, depth in 1usize..3, degree in 1usize..5) {
        let x = instance(seed, 25);
        let narrow = paths(&build_tree(&x.g, &x.emb, &x.c, x.root, depth, degree).unwrap());
        let wide = paths(&build_tree(&x.g, &x.emb, &x.c, x.root, depth, degree + 1).unwrap());
        prop_assert!(narrow.is_subset(&wide));
    }

    #[test]
    fn moving_a_child_towards_the_context_keeps_it(seed in 0u64..100_000, degree in 1usize..4, step in 0.01f64..3.0) {
        let mut x = instance(seed, 20);
        let t = build_tree(&x.g, &x.emb, &x.c, x.root, 1, degree).unwrap();
        let before: Vec<EntityId> = t.layer(1);
        prop_assume!(!before.is_empty());
        let u = before[0];
        let cn = x.c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let en = x.emb.row(u.0).iter().map(|v| v * v).sum::<f64>().sqrt();
        for k in 0..x.c.len() {
            x.emb[[u.0, k]] += step * en * x.c[k] / cn;
        }
        let after = build_tree(&x.g, &x.emb, &x.c, x.root, 1, degree).unwrap().layer(1);
        prop_assert!(after.contains(&u));
    }

    #[test]
    fn round_trip(seed in 0u64..100_000, depth in 0usize..4, degree in 1usize..5) {
        let x = instance(seed, 30);
        let t = build_tree(&x.g, &x.emb, &x.c, x.root, depth, degree).unwrap();
        let s = t.serialize(&x.g);
        prop_assert_eq!(parse_serialized(&s.text).unwrap(), t.named(&x.g));
    }
}
