//! Triple store with a bidirectional adjacency index and the candidate-item
//! registry.
//!
//! Entity and relation ids are dense and assigned in first-appearance order.
//! When inverse edges are enabled every forward relation `r` with id `k` gets
//! a companion `inv:r` with id `k + R`, where `R` is the number of forward
//! relations, so a traversal can walk against edge direction.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

pub const INVERSE_PREFIX: &str = "inv:";

/// Bijective string <-> dense id table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NameTable {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl NameTable {
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    entities: NameTable,
    relations: NameTable,
    forward_relations: usize,
    inverse_edges: bool,
    triples: Vec<Triple>,
    adjacency: Vec<Vec<(RelationId, EntityId)>>,
    items: Vec<EntityId>,
    item_index: HashMap<EntityId, usize>,
}

fn split_line(line: &str) -> Option<[&str; 3]> {
    let mut parts = line.split('\t');
    let h = parts.next()?;
    let r = parts.next()?;
    let t = parts.next()?;
    if parts.next().is_some() || h.is_empty() || r.is_empty() || t.is_empty() {
        return None;
    }
    Some([h, r, t])
}

impl KnowledgeGraph {
    /// Builds a graph from named triples. Ids follow first appearance;
    /// duplicate triples collapse.
    pub fn from_named_triples<'a, I>(triples: I, inverse_edges: bool) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        Self::build(NameTable::default(), NameTable::default(), triples, inverse_edges)
    }

    fn build<'a, I>(
        mut entities: NameTable,
        mut relations: NameTable,
        triples: I,
        inverse_edges: bool,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        let mut seen = HashSet::new();
        let mut list = Vec::new();
        for (h, r, t) in triples {
            let tr = Triple {
                head: EntityId(entities.intern(h)),
                relation: RelationId(relations.intern(r)),
                tail: EntityId(entities.intern(t)),
            };
            if seen.insert(tr) {
                list.push(tr);
            }
        }
        if list.is_empty() {
            return Err(Error::Graph("a knowledge graph needs at least one triple".into()));
        }
        let forward = relations.len();
        if inverse_edges {
            for r in 0..forward {
                let name = format!("{INVERSE_PREFIX}{}", relations.name(r));
                if relations.get(&name).is_some() {
                    return Err(Error::Graph(format!(
                        "relation `{name}` collides with a materialised inverse relation"
                    )));
                }
                relations.intern(&name);
            }
        }
        let mut adjacency = vec![Vec::new(); entities.len()];
        for tr in &list {
            adjacency[tr.head.0].push((tr.relation, tr.tail));
            if inverse_edges {
                adjacency[tr.tail.0].push((RelationId(tr.relation.0 + forward), tr.head));
            }
        }
        for adj in &mut adjacency {
            adj.sort();
            adj.dedup();
        }
        Ok(Self {
            entities,
            relations,
            forward_relations: forward,
            inverse_edges,
            triples: list,
            adjacency,
            items: Vec::new(),
            item_index: HashMap::new(),
        })
    }

    /// Reads a TAB-separated `head relation tail` file.
    pub fn load_triples(path: &Path, inverse_edges: bool) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse_triples(&text, &path.display().to_string(), inverse_edges)
    }

    pub fn parse_triples(text: &str, origin: &str, inverse_edges: bool) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields = split_line(line).ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: format!(
                    "expected 3 TAB-separated fields, found {}",
                    line.split('\t').count()
                ),
            })?;
            rows.push(fields);
        }
        if rows.is_empty() {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: 0,
                msg: "empty triples file; a knowledge graph is required".into(),
            });
        }
        Self::from_named_triples(rows.iter().map(|[h, r, t]| (*h, *r, *t)), inverse_edges)
    }

    /// Registers the candidate items. Duplicate names count once; the item
    /// ordering is ascending entity id.
    pub fn register_items<S: AsRef<str>>(mut self, names: &[S]) -> Result<Self> {
        let mut ids = Vec::with_capacity(names.len());
        for n in names {
            let n = n.as_ref();
            let id = self
                .entities
                .get(n)
                .ok_or_else(|| Error::UnknownItem(n.to_string()))?;
            ids.push(EntityId(id));
        }
        ids.sort();
        ids.dedup();
        self.item_index = ids.iter().enumerate().map(|(i, e)| (*e, i)).collect();
        self.items = ids;
        Ok(self)
    }

    pub fn load_items(self, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let names: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        self.register_items(&names)
    }

    pub fn neighbors(&self, v: EntityId) -> Result<&[(RelationId, EntityId)]> {
        self.adjacency
            .get(v.0)
            .map(Vec::as_slice)
            .ok_or(Error::EntityOutOfRange(v.0))
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Relation count including materialised inverses.
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_forward_relations(&self) -> usize {
        self.forward_relations
    }

    pub fn inverse_edges(&self) -> bool {
        self.inverse_edges
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities.get(name).map(EntityId)
    }

    pub fn resolve(&self, name: &str) -> Result<EntityId> {
        self.entity_id(name).ok_or_else(|| Error::UnknownEntity(name.to_string()))
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relations.get(name).map(RelationId)
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        self.entities.name(id.0)
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        self.relations.name(id.0)
    }

    pub fn entity_names(&self) -> &[String] {
        self.entities.names()
    }

    pub fn relation_names(&self) -> &[String] {
        self.relations.names()
    }

    pub fn items(&self) -> &[EntityId] {
        &self.items
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// Column of `entity` in label and score vectors.
    pub fn item_index(&self, entity: EntityId) -> Option<usize> {
        self.item_index.get(&entity).copied()
    }

    fn manifest(&self) -> String {
        let mut m = String::new();
        let _ = writeln!(m, "format=kgcrs-graph-v1");
        let _ = writeln!(m, "entities={}", self.entities.len());
        let _ = writeln!(m, "forward_relations={}", self.forward_relations);
        let _ = writeln!(m, "inverse_edges={}", self.inverse_edges);
        let _ = writeln!(m, "triples={}", self.triples.len());
        let _ = writeln!(m, "items={}", self.items.len());
        for (i, n) in self.entities.names().iter().enumerate() {
            let _ = writeln!(m, "entity.{i}={n}");
        }
        for (i, n) in self.relations.names()[..self.forward_relations].iter().enumerate() {
            let _ = writeln!(m, "relation.{i}={n}");
        }
        for (i, e) in self.items.iter().enumerate() {
            let _ = writeln!(m, "item.{i}={}", self.entities.name(e.0));
        }
        m
    }

    fn triples_text(&self) -> String {
        let mut t = String::new();
        for tr in &self.triples {
            let _ = writeln!(
                t,
                "{}\t{}\t{}",
                self.entities.name(tr.head.0),
                self.relations.name(tr.relation.0),
                self.entities.name(tr.tail.0)
            );
        }
        t
    }

    /// Writes `manifest.txt` and `triples.tsv` into `dir`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.txt"), self.manifest())?;
        fs::write(dir.join("triples.tsv"), self.triples_text())?;
        Ok(())
    }

    /// Reads a graph written by [`KnowledgeGraph::dump`], preserving ids.
    pub fn load_dump(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.txt");
        let manifest = fs::read_to_string(&mpath)
            .map_err(|e| Error::Io(format!("{}: {e}", mpath.display())))?;
        let origin = mpath.display().to_string();
        let mut counts: HashMap<&str, &str> = HashMap::new();
        let mut entities = Vec::new();
        let mut relations = Vec::new();
        let mut items = Vec::new();
        for (i, line) in manifest.lines().enumerate() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.clone(),
                line: i + 1,
                msg: "expected key=value".into(),
            })?;
            if let Some(idx) = k.strip_prefix("entity.") {
                entities.push((idx.parse::<usize>().unwrap_or(usize::MAX), v));
            } else if let Some(idx) = k.strip_prefix("relation.") {
                relations.push((idx.parse::<usize>().unwrap_or(usize::MAX), v));
            } else if let Some(idx) = k.strip_prefix("item.") {
                items.push((idx.parse::<usize>().unwrap_or(usize::MAX), v));
            } else {
                counts.insert(k, v);
            }
        }
        let bad = |msg: String| Error::Parse { path: origin.clone(), line: 0, msg };
        if counts.get("format") != Some(&"kgcrs-graph-v1") {
            return Err(bad("unsupported or missing format".into()));
        }
        let count = |key: &str| -> Result<usize> {
            counts
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("missing or invalid `{key}`")))
        };
        let inverse_edges = match counts.get("inverse_edges") {
            Some(&"true") => true,
            Some(&"false") => false,
            _ => return Err(bad("missing or invalid `inverse_edges`".into())),
        };
        let mut ent_table = NameTable::default();
        for (expect, (idx, name)) in entities.iter().enumerate() {
            if *idx != expect || ent_table.intern(name) != expect {
                return Err(bad(format!("entity table is not dense at `{name}`")));
            }
        }
        let mut rel_table = NameTable::default();
        for (expect, (idx, name)) in relations.iter().enumerate() {
            if *idx != expect || rel_table.intern(name) != expect {
                return Err(bad(format!("relation table is not dense at `{name}`")));
            }
        }
        if ent_table.len() != count("entities")? || rel_table.len() != count("forward_relations")?
        {
            return Err(bad("id table sizes disagree with counts".into()));
        }
        let tpath = dir.join("triples.tsv");
        let ttext = fs::read_to_string(&tpath)
            .map_err(|e| Error::Io(format!("{}: {e}", tpath.display())))?;
        let mut rows = Vec::new();
        for (i, line) in ttext.lines().enumerate() {
            let f = split_line(line).ok_or_else(|| Error::Parse {
                path: tpath.display().to_string(),
                line: i + 1,
                msg: "expected 3 TAB-separated fields".into(),
            })?;
            rows.push(f);
        }
        let g = Self::build(ent_table, rel_table, rows.iter().map(|[h, r, t]| (*h, *r, *t)), inverse_edges)?;
        if g.entities.len() != count("entities")?
            || g.forward_relations != count("forward_relations")?
            || g.triples.len() != count("triples")?
        {
            return Err(bad("triples file disagrees with manifest".into()));
        }
        let names: Vec<&str> = items.iter().map(|(_, n)| *n).collect();
        let g = g.register_items(&names)?;
        if g.items.len() != count("items")? {
            return Err(bad("item registry disagrees with manifest".into()));
        }
        Ok(g)
    }

    /// Content hash over the canonical dump.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.manifest().as_bytes());
        h.update(self.triples_text().as_bytes());
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(text: &str) -> KnowledgeGraph {
        KnowledgeGraph::parse_triples(text, "test", true).unwrap()
    }

    #[test]
    fn two_mutual_likes() {
        let g = graph("A\tlikes\tB\nB\tlikes\tA\n");
        assert_eq!(g.num_entities(), 2);
        assert_eq!(g.num_forward_relations(), 1);
        assert_eq!(g.num_relations(), 2);
        assert_eq!(g.relation_name(RelationId(1)), "inv:likes");
        let edges: usize = (0..2).map(|v| g.neighbors(EntityId(v)).unwrap().len()).sum();
        assert_eq!(edges, 4);
    }

    #[test]
    fn duplicate_lines_collapse() {
        let g = graph("A\tr\tB\nA\tr\tB\nB\tr\tC\n");
        assert_eq!(g.triples().len(), 2);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = KnowledgeGraph::parse_triples("A\tr\tB\nA\tr\n", "f.tsv", true).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = KnowledgeGraph::parse_triples("A\tr\tB\tC\n", "f.tsv", true).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(KnowledgeGraph::parse_triples("", "f", true).is_err());
        assert!(KnowledgeGraph::parse_triples("\n\n", "f", true).is_err());
    }

    #[test]
    fn self_loops_are_kept_once() {
        let g = graph("A\tr\tA\nA\tr\tA\n");
        assert_eq!(g.triples().len(), 1);
        assert_eq!(
            g.neighbors(EntityId(0)).unwrap(),
            &[(RelationId(0), EntityId(0)), (RelationId(1), EntityId(0))]
        );
    }

    #[test]
    fn register_items_semantics() {
        let g = graph("M1\tgenre\tG\nM2\tgenre\tG\nM3\tgenre\tG\n");
        let g2 = g.clone().register_items(&["M3", "M1", "M2"]).unwrap();
        assert_eq!(g2.num_items(), 3);
        assert_eq!(g2.items(), &[EntityId(0), EntityId(2), EntityId(3)]);
        let g3 = g.clone().register_items(&["M1", "M1"]).unwrap();
        assert_eq!(g3.num_items(), 1);
        let err = g.register_items(&["Nope"]).unwrap_err();
        assert!(err.to_string().contains("Nope"));
    }

    #[test]
    fn star_hub_and_isolated() {
        let g = graph("H\tr\tA\nH\tr\tB\nH\ts\tC\nD\tr\tH\n");
        assert_eq!(g.neighbors(g.resolve("H").unwrap()).unwrap().len(), 4);
        let g = KnowledgeGraph::parse_triples("A\tr\tB\n", "t", false).unwrap();
        assert!(g.neighbors(EntityId(1)).unwrap().is_empty());
        assert!(g.neighbors(EntityId(7)).is_err());
    }

    #[test]
    fn inverse_name_collision_is_rejected() {
        let err = KnowledgeGraph::parse_triples("A\tr\tB\nA\tinv:r\tB\n", "t", true).unwrap_err();
        assert!(err.to_string().contains("inv:r"));
    }
}
