//! The full recommender: knowledge-enhanced prompts in front of a frozen
//! causal decoder, used both to rank items and to generate responses.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{align_loss_on_tape, contrast_mask, EntityAggregator};
use crate::autograd::{Mat, Tape, Var};
use crate::config::{ModelConfig, RunConfig};
use crate::corpus::{Example, Speaker, Utterance};
use crate::encoders::{pool, pool_on_tape, RelationAdjacency, Rgcn, TextEncoder, Truncation};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::ktree::{build_tree, KnowledgeTree, SimSource, TreeModule};
use crate::params::{uniform, Group, ParamId, ParamStore};
use crate::tokenizer::{self, Vocab};
use crate::transformer::{Transformer, TransformerShape};
use crate::user_pref::{bce_on_tape, UserPreference};

/// Causal decoder with a language-model head tied to its token embeddings.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub width: usize,
    pub max_len: usize,
    tok_emb: ParamId,
    pos_emb: ParamId,
    stack: Transformer,
}

impl Decoder {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
        vocab_size: usize,
    ) -> Self {
        let w = cfg.decoder_width;
        let tok_emb = store.add("decoder.tok_emb", Group::Plm, uniform(rng, vocab_size, w, 0.5));
        let pos_emb = store.add("decoder.pos_emb", Group::Plm, uniform(rng, cfg.decoder_max_len, w, 0.1));
        let shape = TransformerShape {
            width: w,
            layers: cfg.decoder_layers,
            heads: cfg.decoder_heads,
            ffn: cfg.decoder_ffn,
        };
        let stack = Transformer::register(store, rng, "decoder", Group::Plm, shape, true);
        Self { width: w, max_len: cfg.decoder_max_len, tok_emb, pos_emb, stack }
    }

    /// Hidden states of `prompts` (optional `k x width`) followed by `ids`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, prompts: Option<Var>, ids: &[usize]) -> Var {
        let te = tape.param(store, self.tok_emb);
        let x = match (prompts, ids.is_empty()) {
            (Some(p), true) => p,
            (p, false) => {
                let toks = tape.gather_rows(te, ids);
                match p {
                    Some(p) => tape.concat_rows(&[p, toks]),
                    None => toks,
                }
            }
            (None, true) => panic!("decoder input is empty"),
        };
        let n = tape.shape(x).0;
        assert!(n <= self.max_len, "decoder input of {n} exceeds {}", self.max_len);
        let pe = tape.param(store, self.pos_emb);
        let pos: Vec<usize> = (0..n).collect();
        let p = tape.gather_rows(pe, &pos);
        let h = tape.add(x, p);
        self.stack.forward(tape, store, h)
    }

    pub fn lm_logits(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Var {
        let te = tape.param(store, self.tok_emb);
        tape.matmul_bt(h, te)
    }

    /// Next-token NLL of `ids` after a `[BOS]`, including the closing `[EOS]`.
    pub fn lm_nll(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize], bos: usize, eos: usize) -> Var {
        let mut input = Vec::with_capacity(ids.len() + 1);
        input.push(bos);
        input.extend_from_slice(ids);
        let mut targets = ids.to_vec();
        targets.push(eos);
        let h = self.forward(tape, store, None, &input);
        let logits = self.lm_logits(tape, store, h);
        token_nll_on_tape(tape, logits, &targets)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.tok_emb, self.pos_emb];
        v.extend(self.stack.param_ids());
        v
    }
}

/// Summed negative log-likelihood of `targets[i]` under row `i` of `logits`.
pub fn token_nll_on_tape(tape: &mut Tape, logits: Var, targets: &[usize]) -> Var {
    assert_eq!(tape.shape(logits).0, targets.len(), "one logit row per target");
    let lsm = tape.log_softmax(logits);
    let at: Vec<(usize, usize)> = targets.iter().copied().enumerate().collect();
    let s = tape.pick_sum(lsm, &at);
    tape.scale(s, -1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Rgcn,
    Tree,
    User,
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptTask {
    Rec,
    Gen,
}

/// Prompt segments in their fixed concatenation order.
#[derive(Clone, Debug, Default)]
pub struct PromptBundle {
    pub segments: Vec<(Segment, Var)>,
}

impl PromptBundle {
    pub fn len(&self, tape: &Tape) -> usize {
        self.segments.iter().map(|(_, v)| tape.shape(*v).0).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segment_len(&self, tape: &Tape, seg: Segment) -> usize {
        self.segments.iter().filter(|(s, _)| *s == seg).map(|(_, v)| tape.shape(*v).0).sum()
    }

    pub fn without(&self, seg: Segment) -> Self {
        Self { segments: self.segments.iter().filter(|(s, _)| *s != seg).copied().collect() }
    }

    pub fn concat(&self, tape: &mut Tape) -> Option<Var> {
        match self.segments.len() {
            0 => None,
            1 => Some(self.segments[0].1),
            _ => {
                let parts: Vec<Var> = self.segments.iter().map(|(_, v)| *v).collect();
                Some(tape.concat_rows(&parts))
            }
        }
    }
}

/// An example with everything that does not depend on trainable weights
/// precomputed.
#[derive(Clone, Debug)]
pub struct ExampleInput {
    pub id: String,
    pub mentioned: Vec<EntityId>,
    pub context_ids: Vec<usize>,
    /// Frozen text-encoder output for the context.
    pub context_enc: Rc<Mat>,
    /// Pooled context, `1 x d_text`.
    pub context_vec: Mat,
    pub response_text: String,
    pub response_ids: Vec<usize>,
    pub target_cols: Vec<usize>,
    /// Multi-hot `1 x |I|` label row.
    pub label: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecOutput {
    pub pooled: Vec<f64>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Emitted ids, including a closing `[EOS]` when one was produced.
    pub tokens: Vec<usize>,
    pub text: String,
}

/// Tape handles shared by every example of a batch.
pub struct GraphState {
    pub g: Var,
    pub items_ent: Var,
    pub items_dec: Var,
    sim_table: Mat,
}

/// Per-example knowledge computed on the tape.
pub struct Knowledge {
    pub entities: Option<Var>,
    pub user: Option<Var>,
    /// Per-tree rows (absent without mentions) and the aggregate.
    pub trees: Option<(Option<Var>, Var)>,
    pub entity_agg: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Response generation without soft prompts.
    Stage1,
    Rec,
    Conv,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub rec: Option<f64>,
    pub user: Option<f64>,
    pub align: Option<f64>,
    pub conv: Option<f64>,
    pub total: f64,
}

pub fn total_loss(l_rec: f64, l_user: f64, l_align: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(0.0..=f64::MAX).contains(&alpha) || !(0.0..=f64::MAX).contains(&beta) {
        return Err(Error::Invalid(format!("loss weights must be non-negative, got {alpha}, {beta}")));
    }
    Ok(l_rec + alpha * l_user + beta * l_align)
}

/// Renders context utterances with speaker tags.
pub fn format_context(utts: &[Utterance]) -> String {
    utts.iter()
        .map(|u| {
            let tag = match u.speaker {
                Speaker::Seeker => tokenizer::SEEKER,
                Speaker::Recommender => tokenizer::RECOMMENDER,
            };
            format!("{tag} {}", u.text)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Replaces every occurrence of the given item names with the item placeholder.
pub fn mask_items(text: &str, items: &[String]) -> String {
    let mut names: Vec<&String> = items.iter().filter(|n| !n.is_empty()).collect();
    names.sort_by_key(|n| std::cmp::Reverse(n.len()));
    let mut out = text.to_string();
    for n in names {
        out = out.replace(n.as_str(), tokenizer::ITEM);
    }
    out
}

pub struct CrsModel {
    pub cfg: RunConfig,
    pub graph: Rc<KnowledgeGraph>,
    pub vocab: Vocab,
    pub text: TextEncoder,
    pub rgcn: Rgcn,
    pub adj: RelationAdjacency,
    pub user: UserPreference,
    pub tree: TreeModule,
    pub ent_agg: EntityAggregator,
    pub decoder: Decoder,
    pub proj_rgcn: ParamId,
    pub proj_user: ParamId,
    pub proj_tree: ParamId,
    pub soft_rec: ParamId,
    pub soft_conv: ParamId,
    pub rec_item_proj: ParamId,
    items: Vec<usize>,
    tree_cache: RefCell<HashMap<String, Rc<Mat>>>,
    tree_memo: RefCell<Option<HashMap<(String, usize), String>>>,
}

impl CrsModel {
    pub fn build(
        cfg: &RunConfig,
        graph: Rc<KnowledgeGraph>,
        vocab: Vocab,
        seed: u64,
    ) -> Result<(ParamStore, Self)> {
        cfg.validate()?;
        if graph.num_items() < 2 {
            return Err(Error::Invalid("at least two candidate items are required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e = &cfg.encoder;
        let m = &cfg.model;
        let text = TextEncoder::register(&mut store, &mut rng, e, vocab.len());
        let rgcn = Rgcn::register(&mut store, &mut rng, e, graph.num_entities(), graph.num_relations());
        let adj = RelationAdjacency::from_graph(&graph);
        let user = UserPreference::register(
            &mut store,
            &mut rng,
            e.d_text,
            e.d_ent,
            m.d,
            m.normalize_cross_attention,
            m.asum_scale_by_rows,
        );
        let tree = TreeModule::register(&mut store, &mut rng, e.d_text, e.d_ent, m.d, m.asum_scale_by_rows);
        let ent_agg = EntityAggregator::register(&mut store, &mut rng, e.d_ent, m.d, m.asum_scale_by_rows);
        let decoder = Decoder::register(&mut store, &mut rng, m, vocab.len());
        let w = m.decoder_width;
        let proj_rgcn = store.add("prompt_proj.rgcn", Group::User, crate::params::glorot(&mut rng, e.d_ent, w));
        let proj_user = store.add("prompt_proj.user", Group::User, crate::params::glorot(&mut rng, m.d, w));
        let proj_tree = store.add("prompt_proj.tree", Group::Tree, crate::params::glorot(&mut rng, m.d, w));
        let (soft_rec, soft_conv, rec_item_proj) = register_prompt_group(&mut store, &mut rng, m, e.d_ent);
        let items = graph.items().iter().map(|e| e.0).collect();
        let model = Self {
            cfg: cfg.clone(),
            graph,
            vocab,
            text,
            rgcn,
            adj,
            user,
            tree,
            ent_agg,
            decoder,
            proj_rgcn,
            proj_user,
            proj_tree,
            soft_rec,
            soft_conv,
            rec_item_proj,
            items,
            tree_cache: RefCell::new(HashMap::new()),
            tree_memo: RefCell::new(None),
        };
        Ok((store, model))
    }

    /// Draws fresh values for every soft-prompt parameter.
    pub fn reseed_prompts(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_prompt_group(store, &mut rng, &self.cfg.model, self.cfg.encoder.d_ent);
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// While enabled, tree structures are remembered per example and root,
    /// so repeated forward passes see identical trees.
    pub fn pin_trees(&self, on: bool) {
        *self.tree_memo.borrow_mut() = on.then(HashMap::new);
    }

    pub fn prepare(&self, store: &ParamStore, ex: &Example) -> Result<ExampleInput> {
        let g = &self.graph;
        let ctx_text = format_context(&ex.context);
        let context_ids = self.vocab.encode(&ctx_text);
        let enc = self.text.encode_ids(store, &context_ids, Truncation::KeepRecent)?;
        let context_vec = pool(&enc.vectors, self.cfg.model.context_pooling)?;
        let response_text = mask_items(&ex.target_response, &ex.target_items);
        let response_ids = self.vocab.encode(&response_text);
        let target_cols = ex.target_columns(g)?;
        let mut label = Mat::zeros((1, g.num_items()));
        for &c in &target_cols {
            label[[0, c]] = 1.0;
        }
        Ok(ExampleInput {
            id: ex.id(),
            mentioned: ex.mentioned_ids(g)?,
            context_ids,
            context_enc: Rc::new(enc.vectors),
            context_vec,
            response_text,
            response_ids,
            target_cols,
            label,
        })
    }

    pub fn graph_state(&self, tape: &mut Tape, store: &ParamStore) -> GraphState {
        let g = self.rgcn.forward(tape, store, &self.adj);
        let items_ent = tape.gather_rows(g, &self.items);
        let proj = tape.param(store, self.rec_item_proj);
        let items_dec = tape.matmul(items_ent, proj);
        let sim_table = match self.cfg.tree.sim_source {
            SimSource::Rgcn => tape.value(g).clone(),
            SimSource::Initial => store.value(self.rgcn.entity_table()).clone(),
        };
        GraphState { g, items_ent, items_dec, sim_table }
    }

    fn tree_encoding(&self, store: &ParamStore, text: &str) -> Result<Rc<Mat>> {
        if let Some(m) = self.tree_cache.borrow().get(text) {
            return Ok(m.clone());
        }
        let enc = Rc::new(self.text.encode_text(store, &self.vocab, text, Truncation::KeepLeading)?.vectors);
        self.tree_cache.borrow_mut().insert(text.to_string(), enc.clone());
        Ok(enc)
    }

    /// Builds the trees of every mentioned entity against `sim_table`.
    pub fn build_trees(&self, store: &ParamStore, ex: &ExampleInput, sim_table: &Mat) -> Result<Vec<KnowledgeTree>> {
        let c = self.tree.project_context(store, &ex.context_vec);
        ex.mentioned
            .iter()
            .map(|&root| build_tree(&self.graph, sim_table, &c, root, self.cfg.tree.depth, self.cfg.tree.degree))
            .collect()
    }

    /// Current similarity table, outside any tape.
    pub fn sim_table(&self, store: &ParamStore) -> Mat {
        match self.cfg.tree.sim_source {
            SimSource::Rgcn => self.rgcn.encode_graph(store, &self.adj),
            SimSource::Initial => store.value(self.rgcn.entity_table()).clone(),
        }
    }

    fn serialized_trees(&self, store: &ParamStore, ex: &ExampleInput, sim_table: &Mat) -> Result<Vec<String>> {
        let memo = self.tree_memo.borrow().as_ref().map(|m| {
            (0..ex.mentioned.len())
                .map(|i| m.get(&(ex.id.clone(), i)).cloned())
                .collect::<Option<Vec<String>>>()
        });
        if let Some(Some(texts)) = memo {
            return Ok(texts);
        }
        let texts: Vec<String> = self
            .build_trees(store, ex, sim_table)?
            .iter()
            .map(|t| t.serialize(&self.graph).text)
            .collect();
        if let Some(m) = self.tree_memo.borrow_mut().as_mut() {
            for (i, t) in texts.iter().enumerate() {
                m.insert((ex.id.clone(), i), t.clone());
            }
        }
        Ok(texts)
    }

    pub fn knowledge(&self, tape: &mut Tape, store: &ParamStore, gs: &GraphState, ex: &ExampleInput) -> Result<Knowledge> {
        let v = &self.cfg.variant;
        let ids: Vec<usize> = ex.mentioned.iter().map(|e| e.0).collect();
        let entities = (!ids.is_empty()).then(|| tape.gather_rows(gs.g, &ids));
        let user = if v.user {
            let c = tape.constant((*ex.context_enc).clone());
            let (ct, et) = self.user.cross.forward(tape, store, c, entities);
            Some(self.user.user_embedding(tape, store, ct, et))
        } else {
            None
        };
        let trees = if v.tree {
            if ids.is_empty() {
                Some((None, tape.param(store, self.tree.null_tree)))
            } else {
                let texts = self.serialized_trees(store, ex, &gs.sim_table)?;
                let mut enc = Vec::with_capacity(texts.len());
                for t in &texts {
                    let m = self.tree_encoding(store, t)?;
                    enc.push(tape.constant((*m).clone()));
                }
                let (rows, agg) = self.tree.aggregate(tape, store, &enc);
                Some((Some(rows), agg))
            }
        } else {
            None
        };
        let entity_agg = (v.align && v.tree && entities.is_some())
            .then(|| self.ent_agg.forward(tape, store, entities));
        Ok(Knowledge { entities, user, trees, entity_agg })
    }

    pub fn prompts(&self, tape: &mut Tape, store: &ParamStore, k: &Knowledge, task: PromptTask, soft: bool) -> PromptBundle {
        let mut segments = Vec::with_capacity(4);
        if let Some(e) = k.entities {
            let p = tape.param(store, self.proj_rgcn);
            segments.push((Segment::Rgcn, tape.matmul(e, p)));
        }
        if let Some((rows, agg)) = k.trees {
            let t = match rows {
                Some(r) => tape.concat_rows(&[r, agg]),
                None => agg,
            };
            let p = tape.param(store, self.proj_tree);
            segments.push((Segment::Tree, tape.matmul(t, p)));
        }
        if let Some(u) = k.user {
            let p = tape.param(store, self.proj_user);
            segments.push((Segment::User, tape.matmul(u, p)));
        }
        let soft_len = match task {
            PromptTask::Rec => self.cfg.model.rec_prompt_len,
            PromptTask::Gen => self.cfg.model.conv_prompt_len,
        };
        if soft && soft_len > 0 {
            let id = match task {
                PromptTask::Rec => self.soft_rec,
                PromptTask::Gen => self.soft_conv,
            };
            segments.push((Segment::Soft, tape.param(store, id)));
        }
        PromptBundle { segments }
    }

    /// Room for the response tail once prompts and the separator are placed.
    fn tail_room(&self, prompt_len: usize) -> usize {
        self.decoder.max_len.saturating_sub(prompt_len + 1)
    }

    /// Token ids following the prompts: the most recent context that fits,
    /// a separator and the optional response tail.
    pub fn assemble_ids(&self, ex: &ExampleInput, prompt_len: usize, tail: &[usize]) -> Vec<usize> {
        let sep = self.vocab.id(tokenizer::SEP);
        let room = self.tail_room(prompt_len);
        let tail = &tail[..tail.len().min(room)];
        let ctx_room = room - tail.len();
        let ctx = &ex.context_ids[ex.context_ids.len().saturating_sub(ctx_room)..];
        let mut ids = Vec::with_capacity(ctx.len() + 1 + tail.len());
        ids.extend_from_slice(ctx);
        ids.push(sep);
        ids.extend_from_slice(tail);
        ids
    }

    /// Item logits `O I^T` for one example, `1 x |I|`.
    pub fn rec_logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        gs: &GraphState,
        ex: &ExampleInput,
        k: &Knowledge,
        response: Option<&[usize]>,
    ) -> Var {
        self.rec_forward(tape, store, gs, ex, k, response).1
    }

    /// Pooled decoder state and item logits.
    fn rec_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        gs: &GraphState,
        ex: &ExampleInput,
        k: &Knowledge,
        response: Option<&[usize]>,
    ) -> (Var, Var) {
        let bundle = self.prompts(tape, store, k, PromptTask::Rec, true);
        let plen = bundle.len(tape);
        let ids = self.assemble_ids(ex, plen, response.unwrap_or(&[]));
        let p = bundle.concat(tape);
        let h = self.decoder.forward(tape, store, p, &ids);
        let o = pool_on_tape(tape, h, self.cfg.model.rec_pooling);
        (o, tape.matmul_bt(o, gs.items_dec))
    }

    /// Summed NLL of the gold response and `[EOS]` given the prompts and context.
    pub fn conv_nll(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ex: &ExampleInput,
        k: &Knowledge,
        soft: bool,
    ) -> Var {
        let bundle = self.prompts(tape, store, k, PromptTask::Gen, soft);
        let plen = bundle.len(tape);
        let eos = self.vocab.id(tokenizer::EOS);
        let ids = self.assemble_ids(ex, plen, &ex.response_ids);
        let kept = ex.response_ids.len().min(self.tail_room(plen));
        let mut targets: Vec<usize> = ex.response_ids[..kept].to_vec();
        targets.push(eos);
        let p = bundle.concat(tape);
        let h = self.decoder.forward(tape, store, p, &ids);
        let n = tape.shape(h).0;
        let rows = tape.slice_rows(h, n - targets.len(), targets.len());
        let logits = self.decoder.lm_logits(tape, store, rows);
        token_nll_on_tape(tape, logits, &targets)
    }

    /// Greedy decoding of at most `max_new_tokens` tokens.
    pub fn generate(&self, store: &ParamStore, ex: &ExampleInput, max_new_tokens: usize, soft: bool) -> Result<Generation> {
        if max_new_tokens == 0 {
            return Err(Error::Invalid("max_new_tokens must be positive".into()));
        }
        let mut tape = Tape::new();
        let gs = self.graph_state(&mut tape, store);
        let k = self.knowledge(&mut tape, store, &gs, ex)?;
        let bundle = self.prompts(&mut tape, store, &k, PromptTask::Gen, soft);
        let plen = bundle.len(&tape);
        let p = bundle.concat(&mut tape);
        let banned = [tokenizer::PAD, tokenizer::UNK, tokenizer::BOS, tokenizer::SEP].map(|t| self.vocab.id(t));
        let eos = self.vocab.id(tokenizer::EOS);
        let mut out: Vec<usize> = Vec::new();
        for _ in 0..max_new_tokens {
            if out.len() >= self.tail_room(plen) {
                break;
            }
            let ids = self.assemble_ids(ex, plen, &out);
            let h = self.decoder.forward(&mut tape, store, p, &ids);
            let n = tape.shape(h).0;
            let last = tape.slice_rows(h, n - 1, 1);
            let logits = self.decoder.lm_logits(&mut tape, store, last);
            let row = tape.value(logits);
            let mut best = None::<(usize, f64)>;
            for (i, &v) in row.iter().enumerate() {
                if banned.contains(&i) {
                    continue;
                }
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            let tok = best.expect("vocabulary has ordinary tokens").0;
            out.push(tok);
            if tok == eos {
                break;
            }
        }
        let words: Vec<usize> = out.iter().copied().filter(|&t| t != eos).collect();
        Ok(Generation { text: self.vocab.decode(&words), tokens: out })
    }

    /// Response appended to the recommendation input at inference time.
    pub fn inference_response(&self, store: &ParamStore, ex: &ExampleInput) -> Result<Option<Vec<usize>>> {
        use crate::config::ResponseSource::*;
        Ok(match self.cfg.model.rec_response_source {
            Gold => Some(ex.response_ids.clone()),
            None => Option::None,
            Generated => {
                let g = self.generate(store, ex, self.cfg.model.max_new_tokens, false)?;
                let eos = self.vocab.id(tokenizer::EOS);
                let ids: Vec<usize> = g.tokens.into_iter().filter(|&t| t != eos).collect();
                if ids.is_empty() {
                    log::warn!("{}: empty generated response; ranking from context only", ex.id);
                    Option::None
                } else {
                    Some(ids)
                }
            }
        })
    }

    pub fn recommend(&self, store: &ParamStore, ex: &ExampleInput, response: Option<&[usize]>) -> Result<RecOutput> {
        let mut tape = Tape::new();
        let gs = self.graph_state(&mut tape, store);
        let k = self.knowledge(&mut tape, store, &gs, ex)?;
        let (o, logits) = self.rec_forward(&mut tape, store, &gs, ex, &k, response);
        let r = tape.softmax(logits, false);
        Ok(RecOutput {
            pooled: tape.value(o).iter().copied().collect(),
            scores: tape.value(r).iter().copied().collect(),
        })
    }

    /// Loss of one batch on a fresh tape. Returns the scalar to minimise and
    /// its parts.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[&ExampleInput],
        objective: Objective,
    ) -> Result<(Var, LossParts)> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let gs = self.graph_state(tape, store);
        let mut parts = LossParts::default();
        match objective {
            Objective::Stage1 | Objective::Conv => {
                let soft = objective == Objective::Conv;
                let mut terms = Vec::with_capacity(batch.len());
                for ex in batch {
                    let k = self.knowledge(tape, store, &gs, ex)?;
                    terms.push(self.conv_nll(tape, store, ex, &k, soft));
                }
                let cat = if terms.len() == 1 { terms[0] } else { tape.concat_rows(&terms) };
                let s = tape.sum_all(cat);
                let l = tape.scale(s, 1.0 / batch.len() as f64);
                parts.conv = Some(tape.scalar(l));
                parts.total = tape.scalar(l);
                Ok((l, parts))
            }
            Objective::Rec => self.rec_batch_loss(tape, store, &gs, batch, parts),
        }
    }

    fn rec_batch_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        gs: &GraphState,
        batch: &[&ExampleInput],
        mut parts: LossParts,
    ) -> Result<(Var, LossParts)> {
        let lc = &self.cfg.loss;
        let n_items = self.num_items();
        let mut rec_rows = Vec::new();
        let mut user_rows = Vec::new();
        let mut labels = Vec::new();
        let mut e_rows = Vec::new();
        let mut t_rows = Vec::new();
        let mut seqs = Vec::new();
        for ex in batch {
            let k = self.knowledge(tape, store, gs, ex)?;
            if let (Some(e), Some((_, t))) = (k.entity_agg, k.trees) {
                e_rows.push(e);
                t_rows.push(t);
                seqs.push(ex.mentioned.clone());
            }
            if ex.target_cols.is_empty() {
                continue;
            }
            let resp = match self.cfg.model.train_response_source {
                crate::config::ResponseSource::Gold => Some(ex.response_ids.as_slice()),
                _ => None,
            };
            let logits = self.rec_logits(tape, store, gs, ex, &k, resp);
            rec_rows.push(tape.softmax(logits, false));
            if let Some(u) = k.user {
                user_rows.push(self.user.score_items(tape, store, u, gs.items_ent));
            }
            labels.push(ex.label.clone());
        }
        if rec_rows.is_empty() {
            return Err(Error::Invalid("recommendation batch has no labelled example".into()));
        }
        let y = ndarray::concatenate(ndarray::Axis(0), &labels.iter().map(|m| m.view()).collect::<Vec<_>>())
            .expect("label rows share width");
        debug_assert_eq!(y.ncols(), n_items);
        let r = if rec_rows.len() == 1 { rec_rows[0] } else { tape.concat_rows(&rec_rows) };
        let mut total = bce_on_tape(tape, r, &y, lc.rec_reduction);
        parts.rec = Some(tape.scalar(total));
        if !user_rows.is_empty() && lc.alpha > 0.0 {
            let ru = if user_rows.len() == 1 { user_rows[0] } else { tape.concat_rows(&user_rows) };
            let lu = bce_on_tape(tape, ru, &y, lc.user_reduction);
            parts.user = Some(tape.scalar(lu));
            let w = tape.scale(lu, lc.alpha);
            total = tape.add(total, w);
        }
        if !e_rows.is_empty() && lc.beta > 0.0 {
            let e = if e_rows.len() == 1 { e_rows[0] } else { tape.concat_rows(&e_rows) };
            let t = if t_rows.len() == 1 { t_rows[0] } else { tape.concat_rows(&t_rows) };
            let mask = contrast_mask(&seqs, lc.align_mask);
            match align_loss_on_tape(tape, e, t, &mask, &lc.align_settings()) {
                Some(la) => {
                    parts.align = Some(tape.scalar(la));
                    let w = tape.scale(la, lc.beta);
                    total = tape.add(total, w);
                }
                None => log::warn!("alignment batch has no positive pairs; term skipped"),
            }
        }
        parts.total = tape.scalar(total);
        Ok((total, parts))
    }
}

fn register_prompt_group(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    m: &ModelConfig,
    d_ent: usize,
) -> (ParamId, ParamId, ParamId) {
    let w = m.decoder_width;
    (
        store.add("soft_prompt.rec", Group::Prompt, uniform(rng, m.rec_prompt_len, w, 0.5)),
        store.add("soft_prompt.conv", Group::Prompt, uniform(rng, m.conv_prompt_len, w, 0.5)),
        store.add("soft_prompt.item_proj", Group::Prompt, crate::params::glorot(rng, d_ent, w)),
    )
}
