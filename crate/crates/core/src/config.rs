//! Run configuration. Everything that can change a result lives here; the
//! command line only picks the command and paths.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{AlignSettings, MaskMode};
use crate::encoders::{EncoderConfig, Pooling};
use crate::error::{Error, Result};
use crate::ktree::SimSource;
use crate::user_pref::Reduction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Rec,
    Conv,
}

/// Which response is appended to the context for recommendation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseSource {
    Gold,
    Generated,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistinctMode {
    #[default]
    Corpus,
    PerResponse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    #[default]
    Test,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub kg: PathBuf,
    pub items: PathBuf,
    pub corpus: PathBuf,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Shared fusion width of the user, tree and alignment modules.
    pub d: usize,
    pub decoder_width: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_ffn: usize,
    pub decoder_max_len: usize,
    pub rec_pooling: Pooling,
    pub context_pooling: Pooling,
    pub rec_prompt_len: usize,
    pub conv_prompt_len: usize,
    pub normalize_cross_attention: bool,
    pub asum_scale_by_rows: bool,
    pub max_new_tokens: usize,
    pub train_response_source: ResponseSource,
    pub rec_response_source: ResponseSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            decoder_width: 64,
            decoder_layers: 2,
            decoder_heads: 2,
            decoder_ffn: 128,
            decoder_max_len: 512,
            rec_pooling: Pooling::Last,
            context_pooling: Pooling::Mean,
            rec_prompt_len: 10,
            conv_prompt_len: 20,
            normalize_cross_attention: true,
            asum_scale_by_rows: false,
            max_new_tokens: 20,
            train_response_source: ResponseSource::Gold,
            rec_response_source: ResponseSource::Generated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeConfig {
    pub depth: usize,
    pub degree: usize,
    pub sim_source: SimSource,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self { depth: 2, degree: 3, sim_source: SimSource::Rgcn }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub align_literal: bool,
    pub align_normalize: bool,
    pub align_mask: MaskMode,
    pub user_reduction: Reduction,
    pub rec_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.02,
            beta: 0.002,
            tau: 0.07,
            align_literal: false,
            align_normalize: true,
            align_mask: MaskMode::Ordered,
            user_reduction: Reduction::Sum,
            rec_reduction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn align_settings(&self) -> AlignSettings {
        AlignSettings {
            tau: self.tau,
            normalize: self.align_normalize,
            literal: self.align_literal,
            mask: self.align_mask,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub backbone_pretrain_steps: usize,
    pub backbone_lr: f64,
    pub backbone_batch: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub stage1_max_epochs: usize,
    pub stage2_max_epochs: usize,
    /// Caps on optimizer steps per stage; 0 means no cap.
    pub stage1_max_steps: usize,
    pub stage2_max_steps: usize,
    pub rec_batch: usize,
    pub conv_batch: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Ranking metric watched for early stopping in the recommendation task.
    pub early_stop_metric: String,
    pub adam_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone_pretrain_steps: 200,
            backbone_lr: 1e-3,
            backbone_batch: 8,
            stage1_lr: 5e-4,
            stage2_lr: 1e-4,
            stage1_max_epochs: 10,
            stage2_max_epochs: 20,
            stage1_max_steps: 0,
            stage2_max_steps: 0,
            rec_batch: 64,
            conv_batch: 8,
            patience: 3,
            early_stop_metric: "recall@50".into(),
            adam_eps: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub split: u64,
    pub init: u64,
    pub shuffle: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { split: 13, init: 42, shuffle: 7 }
    }
}

/// Prompt segments and loss terms that can be switched off for ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantConfig {
    pub tree: bool,
    pub user: bool,
    pub align: bool,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self { tree: true, user: true, align: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: SplitName,
    pub ks: Vec<usize>,
    pub distinct_ns: Vec<usize>,
    pub distinct_mode: DistinctMode,
    pub ablation_seeds: Vec<u64>,
    pub sweep_tree_depth: Vec<usize>,
    pub sweep_tree_degree: Vec<usize>,
    pub sweep_alpha: Vec<f64>,
    pub sweep_beta: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: SplitName::Test,
            ks: vec![10, 50],
            distinct_ns: vec![2, 3, 4],
            distinct_mode: DistinctMode::Corpus,
            ablation_seeds: vec![1, 2, 3, 4, 5],
            sweep_tree_depth: vec![0, 1, 2, 3],
            sweep_tree_degree: vec![1, 2, 3, 5],
            sweep_alpha: vec![0.0, 0.02, 0.1, 0.5],
            sweep_beta: vec![0.0, 0.002, 0.01, 0.05],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    pub paths: PathsConfig,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub tree: TreeConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub seeds: Seeds,
    pub variant: VariantConfig,
    pub eval: EvalConfig,
}

fn bad(key: &str, msg: &str) -> Error {
    Error::Config { key: key.into(), msg: msg.into() }
}

/// Parses a `name@k` metric key such as `recall@10`.
pub fn parse_metric_key(key: &str) -> Option<(&str, usize)> {
    let (name, k) = key.split_once('@')?;
    let k: usize = k.parse().ok()?;
    (matches!(name, "recall" | "ndcg" | "mrr") && k >= 1).then_some((name, k))
}

impl RunConfig {
    /// Parses TOML, reporting the dotted key path of the first offending field.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| bad("<document>", e.message()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            bad(&key, e.into_inner().message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative data paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.kg, &mut cfg.paths.items, &mut cfg.paths.corpus, &mut cfg.paths.out] {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let m = &self.model;
        let positive = [
            ("model.d", m.d),
            ("model.decoder_width", m.decoder_width),
            ("model.decoder_heads", m.decoder_heads),
            ("model.decoder_ffn", m.decoder_ffn),
            ("model.decoder_max_len", m.decoder_max_len),
            ("model.max_new_tokens", m.max_new_tokens),
            ("tree.degree", self.tree.degree),
            ("train.rec_batch", self.train.rec_batch),
            ("train.conv_batch", self.train.conv_batch),
            ("train.backbone_batch", self.train.backbone_batch),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(bad(k, "must be > 0"));
            }
        }
        if !m.decoder_width.is_multiple_of(m.decoder_heads) {
            return Err(bad("model.decoder_heads", "must divide decoder_width"));
        }
        if m.train_response_source == ResponseSource::Generated {
            return Err(bad("model.train_response_source", "training appends gold or no response"));
        }
        let l = &self.loss;
        if !(0.0..=f64::MAX).contains(&l.alpha) {
            return Err(bad("loss.alpha", "must be >= 0"));
        }
        if !(0.0..=f64::MAX).contains(&l.beta) {
            return Err(bad("loss.beta", "must be >= 0"));
        }
        if l.tau.is_nan() || l.tau <= 0.0 {
            return Err(bad("loss.tau", "must be > 0"));
        }
        let t = &self.train;
        for (k, v) in [
            ("train.backbone_lr", t.backbone_lr),
            ("train.stage1_lr", t.stage1_lr),
            ("train.stage2_lr", t.stage2_lr),
            ("train.adam_eps", t.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(k, "must be a positive number"));
            }
        }
        if !(0.0..1.0).contains(&t.adam_beta1) || !(0.0..1.0).contains(&t.adam_beta2) {
            return Err(bad("train.adam_beta1", "betas must lie in [0, 1)"));
        }
        if !(0.0..=f64::MAX).contains(&t.weight_decay) {
            return Err(bad("train.weight_decay", "must be >= 0"));
        }
        if parse_metric_key(&t.early_stop_metric).is_none() {
            return Err(bad("train.early_stop_metric", "expected recall@k, ndcg@k or mrr@k"));
        }
        if self.eval.ks.contains(&0) {
            return Err(bad("eval.ks", "k must be >= 1"));
        }
        if self.eval.distinct_ns.contains(&0) {
            return Err(bad("eval.distinct_ns", "n must be >= 1"));
        }
        Ok(())
    }

    /// Checks that the data paths needed to run are present.
    pub fn require_paths(&self) -> Result<()> {
        for (k, p) in [
            ("paths.kg", &self.paths.kg),
            ("paths.items", &self.paths.items),
            ("paths.corpus", &self.paths.corpus),
        ] {
            if p.as_os_str().is_empty() {
                return Err(bad(k, "path is required"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.loss.alpha, 0.02);
        assert_eq!(c.loss.beta, 0.002);
        assert_eq!(c.model.rec_prompt_len, 10);
        assert_eq!(c.model.conv_prompt_len, 20);
        assert_eq!(c.train.stage1_lr, 5e-4);
        assert_eq!(c.train.stage2_lr, 1e-4);
        assert_eq!((c.train.rec_batch, c.train.conv_batch), (64, 8));
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = RunConfig::from_toml("[tree]\ndepht = 2\n").unwrap_err().to_string();
        assert!(err.contains("tree.depht"), "{err}");
        let err = RunConfig::from_toml("[loss]\nalpha = \"x\"\n").unwrap_err().to_string();
        assert!(err.contains("loss.alpha"), "{err}");
    }

    #[test]
    fn negative_weight_rejected() {
        let err = RunConfig::from_toml("[loss]\nbeta = -1.0\n").unwrap_err().to_string();
        assert!(err.contains("loss.beta"), "{err}");
    }

    #[test]
    fn metric_keys() {
        assert_eq!(parse_metric_key("recall@10"), Some(("recall", 10)));
        assert_eq!(parse_metric_key("ndcg@0"), None);
        assert_eq!(parse_metric_key("dist@2"), None);
    }
}
