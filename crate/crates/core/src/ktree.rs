//! Dialogue-conditioned knowledge trees.
//!
//! A tree grows breadth-first from a mentioned entity. At every node the
//! one-hop neighbours are ranked by cosine similarity between the projected
//! dialogue vector and their embeddings, and the best `N` become children
//! until the tree is `L` hops deep. Trees are flattened depth-first into a
//! marker grammar: an entity at depth `k` is written with `k + 1` leading
//! `#`, and the relation leading to it with `k + 1` leading `$`.

use std::cmp::Ordering;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::encoders::{TextEncoder, Truncation};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId};
use crate::params::{glorot, uniform, Group, ParamId, ParamStore};
use crate::tokenizer::Vocab;
use crate::user_pref::AttentionSum;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeNode {
    pub entity: EntityId,
    pub depth: usize,
    pub parent: Option<usize>,
    pub relation: Option<RelationId>,
    pub children: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeTree {
    /// Arena of nodes; index 0 is the root.
    pub nodes: Vec<TreeNode>,
    pub depth_limit: usize,
    pub degree_limit: usize,
    pub context: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedTree {
    pub text: String,
}

/// Cosine similarity; zero vectors score 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

pub fn context_similarity(c: &[f64], m: EntityId, embeddings: &Mat) -> f64 {
    let row = embeddings.row(m.0);
    cosine(c, row.as_slice().expect("contiguous rows"))
}

/// Candidate children of `v`: one edge per distinct neighbour (the smallest
/// relation id wins), excluding entities already on the root path.
fn candidates(
    g: &KnowledgeGraph,
    v: EntityId,
    path: &[EntityId],
) -> Result<Vec<(RelationId, EntityId)>> {
    let mut best: Vec<(RelationId, EntityId)> = Vec::new();
    for &(r, u) in g.neighbors(v)? {
        if path.contains(&u) {
            continue;
        }
        match best.iter_mut().find(|(_, e)| *e == u) {
            Some(slot) => {
                if r < slot.0 {
                    slot.0 = r
                }
            }
            None => best.push((r, u)),
        }
    }
    Ok(best)
}

fn rank(a: &(f64, EntityId), b: &(f64, EntityId)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Grows the tree rooted at `root` to `depth_limit` hops keeping at most
/// `degree_limit` children per node.
pub fn build_tree(
    g: &KnowledgeGraph,
    embeddings: &Mat,
    context: &[f64],
    root: EntityId,
    depth_limit: usize,
    degree_limit: usize,
) -> Result<KnowledgeTree> {
    if root.0 >= g.num_entities() {
        return Err(Error::EntityOutOfRange(root.0));
    }
    if degree_limit == 0 {
        return Err(Error::Invalid("tree degree must be at least 1".into()));
    }
    let mut nodes = vec![TreeNode { entity: root, depth: 0, parent: None, relation: None, children: vec![] }];
    let mut frontier = vec![0usize];
    for depth in 0..depth_limit {
        let mut next = Vec::new();
        for &ni in &frontier {
            let mut path = Vec::with_capacity(depth + 1);
            let mut cur = Some(ni);
            while let Some(i) = cur {
                path.push(nodes[i].entity);
                cur = nodes[i].parent;
            }
            let cands = candidates(g, nodes[ni].entity, &path)?;
            let mut scored: Vec<(f64, EntityId, RelationId)> = cands
                .into_iter()
                .map(|(r, u)| (context_similarity(context, u, embeddings), u, r))
                .collect();
            let keep = degree_limit.min(scored.len());
            let by = |a: &(f64, EntityId, RelationId), b: &(f64, EntityId, RelationId)| {
                rank(&(a.0, a.1), &(b.0, b.1))
            };
            if keep < scored.len() && keep > 0 {
                scored.select_nth_unstable_by(keep - 1, by);
            }
            scored.truncate(keep);
            scored.sort_by(by);
            for (_, u, r) in scored {
                let child = nodes.len();
                nodes.push(TreeNode {
                    entity: u,
                    depth: depth + 1,
                    parent: Some(ni),
                    relation: Some(r),
                    children: vec![],
                });
                nodes[ni].children.push(child);
                next.push(child);
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    Ok(KnowledgeTree { nodes, depth_limit, degree_limit, context: context.to_vec() })
}

/// Name-level tree recovered from (or comparable with) a serialisation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NamedTree {
    pub nodes: Vec<NamedNode>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NamedNode {
    pub name: String,
    pub relation: Option<String>,
    pub depth: usize,
    pub children: Vec<usize>,
}

impl KnowledgeTree {
    pub fn root(&self) -> EntityId {
        self.nodes[0].entity
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes at hop distance `depth` in breadth-first order.
    pub fn layer(&self, depth: usize) -> Vec<EntityId> {
        self.nodes.iter().filter(|n| n.depth == depth).map(|n| n.entity).collect()
    }

    /// Root-to-node entity paths, one per node, in arena order.
    pub fn paths(&self) -> Vec<Vec<EntityId>> {
        self.nodes
            .iter()
            .map(|n| {
                let mut p = vec![n.entity];
                let mut cur = n.parent;
                while let Some(i) = cur {
                    p.push(self.nodes[i].entity);
                    cur = self.nodes[i].parent;
                }
                p.reverse();
                p
            })
            .collect()
    }

    pub fn serialize(&self, g: &KnowledgeGraph) -> SerializedTree {
        let mut parts = Vec::with_capacity(self.nodes.len() * 2);
        self.emit(0, g, &mut parts);
        SerializedTree { text: parts.join(" ") }
    }

    fn emit(&self, i: usize, g: &KnowledgeGraph, out: &mut Vec<String>) {
        let n = &self.nodes[i];
        let k = n.depth + 1;
        if let Some(r) = n.relation {
            out.push(format!("{}{}", "$".repeat(k), g.relation_name(r)));
        }
        out.push(format!("{}{}", "#".repeat(k), g.entity_name(n.entity)));
        for &c in &n.children {
            self.emit(c, g, out);
        }
    }

    /// Re-numbers the tree in pre-order with names instead of ids.
    pub fn named(&self, g: &KnowledgeGraph) -> NamedTree {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        self.named_rec(0, g, &mut nodes);
        NamedTree { nodes }
    }

    fn named_rec(&self, i: usize, g: &KnowledgeGraph, out: &mut Vec<NamedNode>) -> usize {
        let n = &self.nodes[i];
        let me = out.len();
        out.push(NamedNode {
            name: g.entity_name(n.entity).to_string(),
            relation: n.relation.map(|r| g.relation_name(r).to_string()),
            depth: n.depth,
            children: vec![],
        });
        for &c in &n.children {
            let ci = self.named_rec(c, g, out);
            out[me].children.push(ci);
        }
        me
    }
}

/// Splits a serialisation into `(marker, count, name)` tokens. A token starts
/// at the beginning of the text or after a space, with a run of `#` or `$`.
fn marker_tokens(text: &str) -> Result<Vec<(char, usize, String)>> {
    let bytes = text.as_bytes();
    let mut starts = Vec::new();
    for i in 0..bytes.len() {
        let at_boundary = i == 0 || bytes[i - 1] == b' ';
        let prev_marker = i > 0 && (bytes[i - 1] == b'#' || bytes[i - 1] == b'$');
        if at_boundary && !prev_marker && (bytes[i] == b'#' || bytes[i] == b'$') {
            starts.push(i);
        }
    }
    if starts.first() != Some(&0) {
        return Err(Error::Invalid("serialised tree must start with a marker".into()));
    }
    let mut out = Vec::with_capacity(starts.len());
    for (k, &s) in starts.iter().enumerate() {
        let end = starts.get(k + 1).map(|&e| e - 1).unwrap_or(text.len());
        let tok = &text[s..end];
        let marker = tok.as_bytes()[0] as char;
        let count = tok.bytes().take_while(|&b| b == marker as u8).count();
        let name = tok[count..].to_string();
        if name.is_empty() {
            return Err(Error::Invalid(format!("marker run without a name at byte {s}")));
        }
        out.push((marker, count, name));
    }
    Ok(out)
}

/// Inverse of [`KnowledgeTree::serialize`].
pub fn parse_serialized(text: &str) -> Result<NamedTree> {
    let toks = marker_tokens(text)?;
    let mut nodes: Vec<NamedNode> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    let mut pending: Option<(usize, String)> = None;
    for (marker, count, name) in toks {
        match marker {
            '$' => {
                if pending.is_some() {
                    return Err(Error::Invalid("two relation tokens in a row".into()));
                }
                pending = Some((count, name));
            }
            _ => {
                let depth = count - 1;
                match (depth, pending.take()) {
                    (0, None) if nodes.is_empty() => {
                        nodes.push(NamedNode { name, relation: None, depth: 0, children: vec![] });
                        stack.push(0);
                    }
                    (d, Some((rc, rel))) if d >= 1 && rc == count => {
                        stack.truncate(d);
                        let parent = *stack.last().ok_or_else(|| {
                            Error::Invalid(format!("entity `{name}` at depth {d} has no parent"))
                        })?;
                        if nodes[parent].depth + 1 != d {
                            return Err(Error::Invalid(format!("depth jump at `{name}`")));
                        }
                        let me = nodes.len();
                        nodes.push(NamedNode { name, relation: Some(rel), depth: d, children: vec![] });
                        nodes[parent].children.push(me);
                        stack.push(me);
                    }
                    _ => return Err(Error::Invalid(format!("unexpected entity token `{name}`"))),
                }
            }
        }
    }
    if pending.is_some() || nodes.is_empty() {
        return Err(Error::Invalid("truncated serialised tree".into()));
    }
    Ok(NamedTree { nodes })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimSource {
    /// Rows of the graph encoder output.
    #[default]
    Rgcn,
    /// Rows of the raw entity table.
    Initial,
}

/// Per-tree vectors, their stack and the aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeRepresentations {
    pub per_tree: Mat,
    pub aggregate: Mat,
}

/// Knowledge-tree module parameters.
#[derive(Clone, Debug)]
pub struct TreeModule {
    /// Maps the pooled dialogue vector into entity space for ranking.
    pub sim_proj: ParamId,
    pub inner: AttentionSum,
    pub outer: AttentionSum,
    pub null_tree: ParamId,
}

impl TreeModule {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        d_text: usize,
        d_ent: usize,
        d: usize,
        asum_scale_by_rows: bool,
    ) -> Self {
        Self {
            sim_proj: store.add("tree.sim_proj", Group::Tree, glorot(rng, d_text, d_ent)),
            inner: AttentionSum::register(store, rng, "tree.inner", Group::Tree, d_text, d, asum_scale_by_rows),
            outer: AttentionSum::register(store, rng, "tree.outer", Group::Tree, d, d, asum_scale_by_rows),
            null_tree: store.add("tree.null", Group::Tree, uniform(rng, 1, d, 0.1)),
        }
    }

    /// Projects a `1 x d_text` dialogue vector into entity space.
    pub fn project_context(&self, store: &ParamStore, c: &Mat) -> Vec<f64> {
        c.dot(store.value(self.sim_proj)).iter().copied().collect()
    }

    /// Aggregates encoded trees: returns (`n_E x d` per-tree rows, `1 x d`).
    pub fn aggregate(&self, tape: &mut Tape, store: &ParamStore, encoded: &[Var]) -> (Var, Var) {
        assert!(!encoded.is_empty(), "no trees to aggregate");
        let rows: Vec<Var> = encoded.iter().map(|e| self.inner.forward(tape, store, *e)).collect();
        let stacked = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows) };
        let agg = self.outer.forward(tape, store, stacked);
        (stacked, agg)
    }

    pub fn encode_and_aggregate(
        &self,
        store: &ParamStore,
        encoder: &TextEncoder,
        vocab: &Vocab,
        trees: &[SerializedTree],
    ) -> Result<TreeRepresentations> {
        if trees.is_empty() {
            return Err(Error::Invalid("encode_and_aggregate needs at least one tree".into()));
        }
        let mut tape = Tape::new();
        let mut enc = Vec::with_capacity(trees.len());
        for t in trees {
            let seq = encoder.encode_text(store, vocab, &t.text, Truncation::KeepLeading)?;
            enc.push(tape.constant(seq.vectors));
        }
        let (rows, agg) = self.aggregate(&mut tape, store, &enc);
        Ok(TreeRepresentations {
            per_tree: tape.value(rows).clone(),
            aggregate: tape.value(agg).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn movie_graph() -> KnowledgeGraph {
        KnowledgeGraph::parse_triples(
            "Inception\tstarring\tDiCaprio\nInception\tdirected by\tNolan\nTitanic\tstarring\tDiCaprio\n",
            "t",
            true,
        )
        .unwrap()
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[2.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]) - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn serialisation_examples() {
        let g = movie_graph();
        let emb = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
        let root = g.resolve("Inception").unwrap();
        let t0 = build_tree(&g, &emb, &[1.0, 0.0], root, 0, 3).unwrap();
        assert_eq!(t0.len(), 1);
        assert_eq!(t0.serialize(&g).text, "#Inception");
        let t1 = build_tree(&g, &emb, &[1.0, 0.0], root, 1, 1).unwrap();
        assert_eq!(t1.serialize(&g).text, "#Inception $$starring ##DiCaprio");
        let t2 = build_tree(&g, &emb, &[1.0, 0.0], root, 2, 3).unwrap();
        let s = t2.serialize(&g);
        assert_eq!(
            s.text,
            "#Inception $$starring ##DiCaprio $$$inv:starring ###Titanic $$directed by ##Nolan"
        );
        assert_eq!(parse_serialized(&s.text).unwrap(), t2.named(&g));
    }

    #[test]
    fn cycle_guard_is_per_path() {
        let g = KnowledgeGraph::parse_triples("A\tr\tB\nB\tr\tC\nA\tr\tC\n", "t", true).unwrap();
        let emb = Mat::ones((3, 2));
        let t = build_tree(&g, &emb, &[1.0, 1.0], g.resolve("A").unwrap(), 2, 5).unwrap();
        for p in t.paths() {
            let mut q = p.clone();
            q.sort();
            q.dedup();
            assert_eq!(p.len(), q.len());
        }
        // C is reachable both directly and through B.
        assert_eq!(t.layer(2).len(), 2);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(parse_serialized("Inception").is_err());
        assert!(parse_serialized("#A $$r").is_err());
        assert!(parse_serialized("#A ##B").is_err());
        assert!(parse_serialized("#A $$r ###B").is_err());
        assert!(parse_serialized("#A #B").is_err());
    }

    #[test]
    fn unknown_root_errors() {
        let g = movie_graph();
        assert!(build_tree(&g, &Mat::ones((4, 2)), &[1.0, 0.0], EntityId(99), 1, 1).is_err());
    }
}
