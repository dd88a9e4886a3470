//! Feature encoders: a bidirectional text encoder and a relational graph
//! convolution over the knowledge graph, plus pooling and row retrieval.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Csr, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::params::{glorot, uniform, Group, ParamId, ParamStore};
use crate::tokenizer::Vocab;
use crate::transformer::{Transformer, TransformerShape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
    First,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_text: usize,
    pub d_ent: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_ffn: usize,
    pub max_len: usize,
    pub rgcn_layers: usize,
    pub rgcn_bases: usize,
    pub rgcn_activation: Activation,
    pub use_inverse_edges: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_text: 64,
            d_ent: 64,
            text_layers: 2,
            text_heads: 2,
            text_ffn: 128,
            max_len: 512,
            rgcn_layers: 1,
            rgcn_bases: 8,
            rgcn_activation: Activation::Relu,
            use_inverse_edges: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_text", self.d_text),
            ("d_ent", self.d_ent),
            ("text_heads", self.text_heads),
            ("text_ffn", self.text_ffn),
            ("max_len", self.max_len),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config { key: format!("encoder.{k}"), msg: "must be > 0".into() });
            }
        }
        if !self.d_text.is_multiple_of(self.text_heads) {
            return Err(Error::Config {
                key: "encoder.text_heads".into(),
                msg: "must divide d_text".into(),
            });
        }
        Ok(())
    }
}

/// Contextual token embeddings, one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbeddingSequence {
    pub tokens: Vec<usize>,
    pub vectors: Mat,
}

/// Which end of an over-long input survives truncation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Truncation {
    /// Keep the most recent tokens (dialogue inputs).
    KeepRecent,
    /// Keep the leading tokens (serialised trees).
    KeepLeading,
}

pub fn truncate(ids: &[usize], max_len: usize, mode: Truncation) -> &[usize] {
    if ids.len() <= max_len {
        return ids;
    }
    match mode {
        Truncation::KeepRecent => &ids[ids.len() - max_len..],
        Truncation::KeepLeading => &ids[..max_len],
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub max_len: usize,
    pub width: usize,
    tok_emb: ParamId,
    pos_emb: ParamId,
    stack: Transformer,
}

impl TextEncoder {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &EncoderConfig,
        vocab_size: usize,
    ) -> Self {
        let d = cfg.d_text;
        let tok_emb = store.add("text.tok_emb", Group::Plm, uniform(rng, vocab_size, d, 0.5));
        let pos_emb = store.add("text.pos_emb", Group::Plm, uniform(rng, cfg.max_len, d, 0.1));
        let shape = TransformerShape {
            width: d,
            layers: cfg.text_layers,
            heads: cfg.text_heads,
            ffn: cfg.text_ffn,
        };
        let stack = Transformer::register(store, rng, "text", Group::Plm, shape, false);
        Self { max_len: cfg.max_len, width: d, tok_emb, pos_emb, stack }
    }

    /// Differentiable encoding of already truncated token ids.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Var {
        assert!(!ids.is_empty() && ids.len() <= self.max_len);
        let te = tape.param(store, self.tok_emb);
        let pe = tape.param(store, self.pos_emb);
        let x = tape.gather_rows(te, ids);
        let pos: Vec<usize> = (0..ids.len()).collect();
        let p = tape.gather_rows(pe, &pos);
        let h = tape.add(x, p);
        self.stack.forward(tape, store, h)
    }

    /// Encodes `text` with the current weights.
    pub fn encode_text(
        &self,
        store: &ParamStore,
        vocab: &Vocab,
        text: &str,
        mode: Truncation,
    ) -> Result<TokenEmbeddingSequence> {
        let ids = vocab.encode(text);
        if ids.is_empty() {
            return Err(Error::Invalid("cannot encode an empty string".into()));
        }
        self.encode_ids(store, &ids, mode)
    }

    pub fn encode_ids(
        &self,
        store: &ParamStore,
        ids: &[usize],
        mode: Truncation,
    ) -> Result<TokenEmbeddingSequence> {
        if ids.is_empty() {
            return Err(Error::Invalid("cannot encode an empty token sequence".into()));
        }
        let kept = truncate(ids, self.max_len, mode).to_vec();
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, &kept);
        Ok(TokenEmbeddingSequence { vectors: tape.value(out).clone(), tokens: kept })
    }
}

/// Row-normalised adjacency `A_r[v, u] = 1 / |N_r(v)|`, one matrix per relation.
#[derive(Clone, Debug)]
pub struct RelationAdjacency {
    pub per_relation: Vec<Rc<Csr>>,
}

impl RelationAdjacency {
    pub fn from_graph(g: &KnowledgeGraph) -> Self {
        let n = g.num_entities();
        let mut entries: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); g.num_relations()];
        for v in 0..n {
            let adj = g.neighbors(EntityId(v)).expect("dense ids");
            let mut counts = vec![0usize; g.num_relations()];
            for (r, _) in adj {
                counts[r.0] += 1;
            }
            for (r, u) in adj {
                entries[r.0].push((v, u.0, 1.0 / counts[r.0] as f64));
            }
        }
        Self {
            per_relation: entries
                .into_iter()
                .map(|e| Rc::new(Csr::from_entries(n, n, e)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
enum RelationWeights {
    /// `R x d^2`, row `r` is `W_r` flattened.
    Full(ParamId),
    /// `W_r = sum_b coef[r, b] V_b`; basis is `B x d^2`.
    Basis { basis: ParamId, coef: ParamId },
}

#[derive(Clone, Debug)]
struct RgcnLayer {
    self_loop: ParamId,
    relations: RelationWeights,
}

/// Relational graph convolution:
/// `h_v' = act( sum_r sum_{u in N_r(v)} W_r h_u / |N_r(v)| + W_0 h_v )`.
#[derive(Clone, Debug)]
pub struct Rgcn {
    pub width: usize,
    pub num_relations: usize,
    pub activation: Activation,
    entity_emb: ParamId,
    layers: Vec<RgcnLayer>,
}

impl Rgcn {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &EncoderConfig,
        num_entities: usize,
        num_relations: usize,
    ) -> Self {
        let d = cfg.d_ent;
        let entity_emb = store.add("rgcn.entity_emb", Group::User, uniform(rng, num_entities, d, 0.5));
        let scale = (1.0 / d as f64).sqrt();
        let layers = (0..cfg.rgcn_layers)
            .map(|l| {
                let self_loop =
                    store.add(&format!("rgcn.layer{l}.self"), Group::User, glorot(rng, d, d));
                let relations = if cfg.rgcn_bases > 0 && num_relations > cfg.rgcn_bases {
                    RelationWeights::Basis {
                        basis: store.add(
                            &format!("rgcn.layer{l}.basis"),
                            Group::User,
                            uniform(rng, cfg.rgcn_bases, d * d, scale),
                        ),
                        coef: store.add(
                            &format!("rgcn.layer{l}.coef"),
                            Group::User,
                            glorot(rng, num_relations, cfg.rgcn_bases),
                        ),
                    }
                } else {
                    RelationWeights::Full(store.add(
                        &format!("rgcn.layer{l}.rel"),
                        Group::User,
                        uniform(rng, num_relations, d * d, scale),
                    ))
                };
                RgcnLayer { self_loop, relations }
            })
            .collect();
        Self { width: d, num_relations, activation: cfg.rgcn_activation, entity_emb, layers }
    }

    pub fn entity_table(&self) -> ParamId {
        self.entity_emb
    }

    pub fn layer_params(&self, layer: usize) -> Vec<ParamId> {
        let l = &self.layers[layer];
        match l.relations {
            RelationWeights::Full(p) => vec![l.self_loop, p],
            RelationWeights::Basis { basis, coef } => vec![l.self_loop, basis, coef],
        }
    }

    pub fn uses_basis(&self) -> bool {
        self.layers
            .first()
            .is_some_and(|l| matches!(l.relations, RelationWeights::Basis { .. }))
    }

    /// Produces the `|E| x d_ent` entity embedding matrix.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, adj: &RelationAdjacency) -> Var {
        let mut h = tape.param(store, self.entity_emb);
        let d = self.width;
        for layer in &self.layers {
            let w0 = tape.param(store, layer.self_loop);
            let mut acc = tape.matmul(h, w0);
            let all = match layer.relations {
                RelationWeights::Full(p) => tape.param(store, p),
                RelationWeights::Basis { basis, coef } => {
                    let b = tape.param(store, basis);
                    let c = tape.param(store, coef);
                    tape.matmul(c, b)
                }
            };
            for (r, a) in adj.per_relation.iter().enumerate() {
                if a.nnz() == 0 {
                    continue;
                }
                let wr = tape.row_as_matrix(all, r, d, d);
                let m = tape.spmm(a.clone(), h);
                let msg = tape.matmul(m, wr);
                acc = tape.add(acc, msg);
            }
            h = match self.activation {
                Activation::Relu => tape.relu(acc),
                Activation::Identity => acc,
            };
        }
        h
    }

    /// Convenience forward pass returning the embedding values.
    pub fn encode_graph(&self, store: &ParamStore, adj: &RelationAdjacency) -> Mat {
        let mut tape = Tape::new();
        let h = self.forward(&mut tape, store, adj);
        tape.value(h).clone()
    }
}

/// Gathers the rows of `ids` in order.
pub fn retrieve(embeddings: &Mat, ids: &[EntityId]) -> Result<Mat> {
    let mut out = Mat::zeros((ids.len(), embeddings.ncols()));
    for (k, id) in ids.iter().enumerate() {
        if id.0 >= embeddings.nrows() {
            return Err(Error::EntityOutOfRange(id.0));
        }
        out.row_mut(k).assign(&embeddings.row(id.0));
    }
    Ok(out)
}

/// Pools token rows into a single `1 x d` row.
pub fn pool(seq: &Mat, mode: Pooling) -> Result<Mat> {
    if seq.nrows() == 0 {
        return Err(Error::Invalid("cannot pool an empty sequence".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(seq.clone());
    let p = pool_on_tape(&mut tape, x, mode);
    Ok(tape.value(p).clone())
}

pub fn pool_on_tape(tape: &mut Tape, x: Var, mode: Pooling) -> Var {
    let n = tape.shape(x).0;
    match mode {
        Pooling::Mean => tape.mean_rows(x),
        Pooling::Max => tape.max_rows(x),
        Pooling::First => tape.slice_rows(x, 0, 1),
        Pooling::Last => tape.slice_rows(x, n - 1, 1),
    }
}
