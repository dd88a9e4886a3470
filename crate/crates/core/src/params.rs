//! Named parameter tensors organised into the four training groups.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    /// Backbone language models (text encoder, decoder, shared token table).
    Plm,
    /// User-preference module, graph encoder and entity table.
    User,
    /// Knowledge-tree module.
    Tree,
    /// Task-specific soft prompts and the recommendation head.
    Prompt,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Plm, Group::User, Group::Tree, Group::Prompt];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Plm => "plm",
            Group::User => "user",
            Group::Tree => "tree",
            Group::Prompt => "prompt",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Mat,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
    frozen: [bool; 4],
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

fn group_slot(g: Group) -> usize {
    g as usize
}

/// Uniform Glorot initialisation.
pub fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Re-registering an existing name replaces its value.
    pub fn add(&mut self, name: &str, group: Group, value: Mat) -> ParamId {
        if let Some(&id) = self.by_name.get(name) {
            self.params[id.0] = Param { name: name.to_string(), group, value };
            return id;
        }
        let id = ParamId(self.params.len());
        self.params.push(Param { name: name.to_string(), group, value });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn expect(&self, name: &str) -> ParamId {
        self.id(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not registered"))
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: Group) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(move |id| self.params[id.0].group == group)
    }

    pub fn set_frozen(&mut self, group: Group, frozen: bool) {
        self.frozen[group_slot(group)] = frozen;
    }

    pub fn is_group_frozen(&self, group: Group) -> bool {
        self.frozen[group_slot(group)]
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[group_slot(self.params[id.0].group)]
    }

    pub fn count(&self, group: Group) -> usize {
        self.ids_in(group).map(|id| self.value(id).len()).sum()
    }

    /// SHA-256 over names, shapes and exact bit patterns of a group.
    pub fn group_hash(&self, group: Group) -> String {
        let mut h = Sha256::new();
        for (name, id) in &self.by_name {
            let p = &self.params[id.0];
            if p.group != group {
                continue;
            }
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update((p.value.nrows() as u64).to_le_bytes());
            h.update((p.value.ncols() as u64).to_le_bytes());
            for v in p.value.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes one `<group>.json` file per group into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for g in Group::ALL {
            let mut map: BTreeMap<&str, StoredTensor> = BTreeMap::new();
            for id in self.ids_in(g) {
                let p = &self.params[id.0];
                map.insert(
                    &p.name,
                    StoredTensor {
                        shape: [p.value.nrows(), p.value.ncols()],
                        data: p.value.iter().copied().collect(),
                    },
                );
            }
            let text = serde_json::to_string(&map)?;
            fs::write(dir.join(format!("{}.json", g.as_str())), text)?;
        }
        Ok(())
    }

    /// Overwrites registered tensors with the values stored in `dir`. Every
    /// stored tensor must already be registered with a matching shape.
    pub fn load_into(&mut self, dir: &Path) -> Result<()> {
        for g in Group::ALL {
            let path = dir.join(format!("{}.json", g.as_str()));
            let text = fs::read_to_string(&path)
                .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            let map: BTreeMap<String, StoredTensor> = serde_json::from_str(&text)?;
            for (name, t) in map {
                let id = self.id(&name).ok_or_else(|| {
                    Error::Checkpoint(format!("unknown tensor `{name}` in {}", path.display()))
                })?;
                let shape = (t.shape[0], t.shape[1]);
                if self.value(id).dim() != shape || self.params[id.0].group != g {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?} in checkpoint, expected {:?}",
                        shape,
                        self.value(id).dim()
                    )));
                }
                self.params[id.0].value = Mat::from_shape_vec(shape, t.data)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}
