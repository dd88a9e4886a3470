//! Dialogue ingestion, turn expansion and dialogue-level splits.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Seeker,
    Recommender,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default)]
    pub entities: Vec<String>,
    #[serde(default)]
    pub items: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

/// One training instance: the context `s_1..s_n` and the target `s_{n+1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub dialogue_id: String,
    /// Zero-based index of the target utterance inside its dialogue.
    pub turn: usize,
    pub context: Vec<Utterance>,
    pub target_response: String,
    pub target_items: Vec<String>,
    /// Ordered, duplicate-free mentions from the context (entities, then
    /// items, utterance by utterance).
    pub mentioned_entities: Vec<String>,
}

impl Example {
    pub fn id(&self) -> String {
        format!("{}#{}", self.dialogue_id, self.turn)
    }

    pub fn mentioned_ids(&self, g: &KnowledgeGraph) -> Result<Vec<EntityId>> {
        self.mentioned_entities.iter().map(|n| g.resolve(n)).collect()
    }

    /// Item columns of the targets in the fixed item ordering.
    pub fn target_columns(&self, g: &KnowledgeGraph) -> Result<Vec<usize>> {
        self.target_items
            .iter()
            .map(|n| {
                g.entity_id(n)
                    .and_then(|e| g.item_index(e))
                    .ok_or_else(|| Error::UnknownItem(n.clone()))
            })
            .collect()
    }
}

impl Dialogue {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Error::Dialogue { id: self.id.clone(), msg };
        if self.utterances.len() < 2 {
            return Err(err(format!(
                "needs at least 2 utterances, found {}",
                self.utterances.len()
            )));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if u.text.trim().is_empty() {
                return Err(err(format!("utterances[{i}].text is empty")));
            }
        }
        Ok(())
    }
}

fn parse_record(line: &str, lineno: usize, origin: &str) -> Result<Dialogue> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
        path: origin.to_string(),
        line: lineno,
        msg: e.to_string(),
    })?;
    let id = value
        .get("id")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .unwrap_or_else(|| format!("<record at line {lineno}>"));
    let d: Dialogue = serde_path_to_error::deserialize(value).map_err(|e| Error::Dialogue {
        id: id.clone(),
        msg: format!("field `{}`: {}", e.path(), e.inner()),
    })?;
    d.validate()?;
    Ok(d)
}

pub fn parse_dialogues(text: &str, origin: &str) -> Result<Vec<Dialogue>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(line, i + 1, origin)?);
    }
    Ok(out)
}

/// Reads a line-delimited JSON dialogue file.
pub fn load_dialogues(path: &Path) -> Result<Vec<Dialogue>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_dialogues(&text, &path.display().to_string())
}

pub fn write_dialogues(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    let mut out = String::new();
    for d in dialogues {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// One example per recommender utterance that has at least one utterance
/// before it.
pub fn expand_turns(d: &Dialogue) -> Vec<Example> {
    let mut out = Vec::new();
    let mut mentioned: Vec<String> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, u) in d.utterances.iter().enumerate() {
        if idx >= 1 && u.speaker == Speaker::Recommender {
            out.push(Example {
                dialogue_id: d.id.clone(),
                turn: idx,
                context: d.utterances[..idx].to_vec(),
                target_response: u.text.clone(),
                target_items: u.items.clone(),
                mentioned_entities: mentioned.clone(),
            });
        }
        for name in u.entities.iter().chain(u.items.iter()) {
            if seen.insert(name.clone()) {
                mentioned.push(name.clone());
            }
        }
    }
    out
}

pub fn expand_all(dialogues: &[Dialogue]) -> Vec<Example> {
    dialogues.iter().flat_map(expand_turns).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

/// Seeded 8:1:1 split at dialogue granularity.
pub fn split(dialogues: &[Dialogue], seed: u64) -> Result<Splits> {
    let n = dialogues.len();
    if n < 10 {
        return Err(Error::Invalid(format!("split needs at least 10 dialogues, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    let pick = |r: &[usize]| r.iter().map(|&i| dialogues[i].clone()).collect::<Vec<_>>();
    Ok(Splits {
        train: pick(&order[..n_train]),
        valid: pick(&order[n_train..n_train + n_valid]),
        test: pick(&order[n_train + n_valid..]),
    })
}

/// Multi-hot label vector over the registered items.
pub fn make_label_vector(ex: &Example, g: &KnowledgeGraph) -> Result<Vec<f64>> {
    let mut y = vec![0.0; g.num_items()];
    for col in ex.target_columns(g)? {
        y[col] = 1.0;
    }
    Ok(y)
}
