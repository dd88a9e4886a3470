//! Data preparation, backbone setup and the two-stage training procedure.

use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Tape;
use crate::config::{parse_metric_key, RunConfig, SplitName, Task};
use crate::corpus::{self, Dialogue, Splits};
use crate::error::{Error, Result};
use crate::eval;
use crate::kg::KnowledgeGraph;
use crate::model::{CrsModel, ExampleInput, LossParts, Objective};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Group, ParamStore};
use crate::tokenizer::{self, Vocab};

/// Vocabulary over every utterance plus entity and relation names, so that
/// serialised trees tokenise without unknowns.
pub fn build_vocab(g: &KnowledgeGraph, dialogues: &[Dialogue]) -> Vocab {
    let mut texts: Vec<&str> = Vec::new();
    for d in dialogues {
        for u in &d.utterances {
            texts.push(&u.text);
        }
    }
    texts.extend(g.entity_names().iter().map(String::as_str));
    texts.extend(g.relation_names().iter().map(String::as_str));
    Vocab::build(texts)
}

/// Loads the graph, item registry and dialogues named by the config.
pub fn load_inputs(cfg: &RunConfig) -> Result<(KnowledgeGraph, Vec<Dialogue>)> {
    cfg.require_paths()?;
    let g = KnowledgeGraph::load_triples(&cfg.paths.kg, cfg.encoder.use_inverse_edges)?
        .load_items(&cfg.paths.items)?;
    let dialogues = corpus::load_dialogues(&cfg.paths.corpus)?;
    Ok((g, dialogues))
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct StageSummary {
    pub steps: usize,
    pub epochs: usize,
    pub losses: Vec<f64>,
    pub valid: Vec<f64>,
    pub best_valid: Option<f64>,
    pub stopped_early: bool,
}

impl StageSummary {
    pub fn first_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainSummary {
    pub plm_hash_before: String,
    pub plm_hash_after: String,
    pub prompt_hash_stage2_start: String,
    pub backbone_losses: Vec<f64>,
    pub stage1: StageSummary,
    pub stage2: StageSummary,
}

/// Everything a run needs: config, graph, model, weights and prepared splits.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub graph: Rc<KnowledgeGraph>,
    pub model: CrsModel,
    pub store: ParamStore,
    pub splits: Splits,
    pub train: Vec<ExampleInput>,
    pub valid: Vec<ExampleInput>,
    pub test: Vec<ExampleInput>,
    pub backbone_losses: Vec<f64>,
    /// One JSON record per optimizer step.
    pub log: Vec<String>,
}

impl Pipeline {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let (g, d) = load_inputs(cfg)?;
        Self::from_parts(cfg, g, &d)
    }

    /// Splits the corpus, builds the model, runs the backbone setup step,
    /// freezes the backbone and prepares every example.
    pub fn from_parts(cfg: &RunConfig, g: KnowledgeGraph, dialogues: &[Dialogue]) -> Result<Self> {
        cfg.validate()?;
        let splits = corpus::split(dialogues, cfg.seeds.split)?;
        let vocab = build_vocab(&g, dialogues);
        let graph = Rc::new(g);
        let (mut store, model) = CrsModel::build(cfg, graph.clone(), vocab, cfg.seeds.init)?;
        let backbone_losses = pretrain_backbone(cfg, &model, &mut store, &splits.train)?;
        store.set_frozen(Group::Plm, true);
        let prep = |ds: &[Dialogue]| -> Result<Vec<ExampleInput>> {
            corpus::expand_all(ds).iter().map(|e| model.prepare(&store, e)).collect()
        };
        let train = prep(&splits.train)?;
        let valid = prep(&splits.valid)?;
        let test = prep(&splits.test)?;
        Ok(Self {
            cfg: cfg.clone(),
            graph,
            model,
            store,
            splits,
            train,
            valid,
            test,
            backbone_losses,
            log: Vec::new(),
        })
    }

    pub fn split(&self, which: SplitName) -> &[ExampleInput] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }

    pub fn plm_hash(&self) -> String {
        self.store.group_hash(Group::Plm)
    }

    /// Both stages. The backbone hash is taken before and after.
    pub fn train(&mut self) -> Result<TrainSummary> {
        let mut summary = TrainSummary {
            plm_hash_before: self.plm_hash(),
            backbone_losses: self.backbone_losses.clone(),
            ..Default::default()
        };
        summary.stage1 = self.run_stage(1)?;
        self.model.reseed_prompts(&mut self.store, stage2_prompt_seed(self.cfg.seeds.init));
        summary.prompt_hash_stage2_start = self.store.group_hash(Group::Prompt);
        self.log.push(
            serde_json::json!({
                "event": "stage2_start",
                "prompt_hash": summary.prompt_hash_stage2_start,
            })
            .to_string(),
        );
        summary.stage2 = self.run_stage(2)?;
        summary.plm_hash_after = self.plm_hash();
        Ok(summary)
    }

    fn objective(&self, stage: u8) -> Objective {
        match (stage, self.cfg.task) {
            (1, _) => Objective::Stage1,
            (_, Task::Rec) => Objective::Rec,
            (_, Task::Conv) => Objective::Conv,
        }
    }

    pub fn run_stage(&mut self, stage: u8) -> Result<StageSummary> {
        let t = self.cfg.train.clone();
        let objective = self.objective(stage);
        let (lr, max_epochs, max_steps, batch) = match (stage, objective) {
            (1, _) => (t.stage1_lr, t.stage1_max_epochs, t.stage1_max_steps, t.conv_batch),
            (_, Objective::Rec) => (t.stage2_lr, t.stage2_max_epochs, t.stage2_max_steps, t.rec_batch),
            _ => (t.stage2_lr, t.stage2_max_epochs, t.stage2_max_steps, t.conv_batch),
        };
        self.store.set_frozen(Group::Plm, true);
        self.store.set_frozen(Group::User, false);
        self.store.set_frozen(Group::Tree, false);
        self.store.set_frozen(Group::Prompt, stage == 1);
        let pool: Vec<usize> = (0..self.train.len())
            .filter(|&i| objective != Objective::Rec || !self.train[i].target_cols.is_empty())
            .collect();
        let mut summary = StageSummary::default();
        if pool.is_empty() || (max_epochs == 0 && max_steps == 0) {
            return Ok(summary);
        }
        let mut opt = AdamW::new(AdamWConfig {
            lr,
            beta1: t.adam_beta1,
            beta2: t.adam_beta2,
            eps: t.adam_eps,
            weight_decay: t.weight_decay,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seeds.shuffle.wrapping_add(stage as u64));
        let mut best: Option<(f64, ParamStore)> = None;
        let mut bad_epochs = 0;
        let epochs = if max_epochs == 0 { usize::MAX } else { max_epochs };
        'outer: for epoch in 0..epochs {
            let mut order = pool.clone();
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let exs: Vec<&ExampleInput> = chunk.iter().map(|&i| &self.train[i]).collect();
                let mut tape = Tape::new();
                let (loss, parts) = self.model.batch_loss(&mut tape, &self.store, &exs, objective)?;
                if !parts.total.is_finite() {
                    return Err(diverged(stage, summary.steps, &parts));
                }
                let grads = tape.backward(loss);
                opt.step(&mut self.store, &grads);
                if !self.store.all_finite() {
                    return Err(diverged(stage, summary.steps, &parts));
                }
                summary.steps += 1;
                summary.losses.push(parts.total);
                self.log.push(step_record(stage, summary.steps, epoch, lr, &parts));
                if max_steps > 0 && summary.steps >= max_steps {
                    summary.epochs = epoch + 1;
                    break 'outer;
                }
            }
            summary.epochs = epoch + 1;
            if t.patience == 0 {
                continue;
            }
            // Higher is better for both watched quantities.
            let score = self.validation_score(objective)?;
            summary.valid.push(score);
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, self.store.clone()));
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
                if bad_epochs >= t.patience {
                    summary.stopped_early = true;
                    break;
                }
            }
        }
        if let Some((score, snapshot)) = best {
            summary.best_valid = Some(score);
            if summary.valid.last() != Some(&score) {
                for g in [Group::User, Group::Tree, Group::Prompt] {
                    for id in snapshot.ids_in(g).collect::<Vec<_>>() {
                        *self.store.value_mut(id) = snapshot.value(id).clone();
                    }
                }
            }
        }
        Ok(summary)
    }

    /// Validation ranking metric (recommendation) or negated mean response
    /// NLL (generation).
    fn validation_score(&self, objective: Objective) -> Result<f64> {
        match objective {
            Objective::Rec => {
                let (name, k) = parse_metric_key(&self.cfg.train.early_stop_metric)
                    .expect("validated metric key");
                let scores = eval::rank_split(&self.model, &self.store, &self.valid)?;
                Ok(eval::mean_metric(&scores, name, k))
            }
            _ => Ok(-eval::mean_conv_nll(&self.model, &self.store, &self.valid, objective == Objective::Conv)?),
        }
    }

    /// Writes weights, config and vocabulary into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.store.save(dir)?;
        std::fs::write(dir.join("config.toml"), self.cfg.to_toml())?;
        self.model.vocab.save(&dir.join("vocab.txt"))?;
        Ok(())
    }

    /// Restores weights saved by [`Pipeline::save_checkpoint`].
    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<()> {
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        if vocab != self.model.vocab {
            return Err(Error::Checkpoint("vocabulary differs from the current corpus".into()));
        }
        self.store.load_into(dir)?;
        self.store.set_frozen(Group::Plm, true);
        Ok(())
    }
}

pub fn stage2_prompt_seed(init: u64) -> u64 {
    init ^ 0x9e37_79b9_7f4a_7c15
}

fn diverged(stage: u8, step: usize, parts: &LossParts) -> Error {
    Error::Diverged(format!(
        "stage {stage} step {step}: total {} (rec {:?}, user {:?}, align {:?}, conv {:?})",
        parts.total, parts.rec, parts.user, parts.align, parts.conv
    ))
}

fn step_record(stage: u8, step: usize, epoch: usize, lr: f64, p: &LossParts) -> String {
    let mut m = serde_json::Map::new();
    m.insert("stage".into(), stage.into());
    m.insert("step".into(), step.into());
    m.insert("epoch".into(), epoch.into());
    m.insert("lr".into(), lr.into());
    m.insert("loss".into(), p.total.into());
    for (k, v) in [("rec", p.rec), ("user", p.user), ("align", p.align), ("conv", p.conv)] {
        if let Some(v) = v {
            m.insert(format!("loss_{k}"), v.into());
        }
    }
    serde_json::Value::Object(m).to_string()
}

/// Brief next-token training of the decoder on training utterances, run
/// once before the backbone is frozen.
fn pretrain_backbone(
    cfg: &RunConfig,
    model: &CrsModel,
    store: &mut ParamStore,
    train: &[Dialogue],
) -> Result<Vec<f64>> {
    let t = &cfg.train;
    if t.backbone_pretrain_steps == 0 {
        return Ok(Vec::new());
    }
    let limit = model.decoder.max_len - 1;
    let seqs: Vec<Vec<usize>> = train
        .iter()
        .flat_map(|d| d.utterances.iter())
        .map(|u| {
            let mut ids = model.vocab.encode(&crate::model::format_context(std::slice::from_ref(u)));
            ids.truncate(limit);
            ids
        })
        .collect();
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    for g in [Group::User, Group::Tree, Group::Prompt] {
        store.set_frozen(g, true);
    }
    store.set_frozen(Group::Plm, false);
    let bos = model.vocab.id(tokenizer::BOS);
    let eos = model.vocab.id(tokenizer::EOS);
    let mut opt = AdamW::new(AdamWConfig {
        lr: t.backbone_lr,
        beta1: t.adam_beta1,
        beta2: t.adam_beta2,
        eps: t.adam_eps,
        weight_decay: 0.0,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.shuffle);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(t.backbone_pretrain_steps);
    for step in 0..t.backbone_pretrain_steps {
        let mut tape = Tape::new();
        let mut terms = Vec::with_capacity(t.backbone_batch);
        for _ in 0..t.backbone_batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            terms.push(model.decoder.lm_nll(&mut tape, store, &seqs[order[cursor]], bos, eos));
            cursor += 1;
        }
        let cat = tape.concat_rows(&terms);
        let s = tape.sum_all(cat);
        let l = tape.scale(s, 1.0 / terms.len() as f64);
        let v = tape.scalar(l);
        if !v.is_finite() {
            return Err(Error::Diverged(format!("backbone setup step {step}: loss {v}")));
        }
        losses.push(v);
        let grads = tape.backward(l);
        opt.step(store, &grads);
    }
    for g in Group::ALL {
        store.set_frozen(g, false);
    }
    Ok(losses)
}
