//! Ranking and diversity metrics, split evaluation, ablations and sweeps.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tape;
use crate::config::{DistinctMode, RunConfig, Task};
use crate::corpus::Dialogue;
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::model::{CrsModel, ExampleInput, Objective};
use crate::params::ParamStore;
use crate::train::{Pipeline, TrainSummary};

/// Item indices by descending score; ties go to the lower index.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn check(gold: &[usize], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if gold.is_empty() {
        return Err(Error::Invalid("ranking metric over an empty gold set".into()));
    }
    Ok(())
}

fn gold_set(gold: &[usize]) -> HashSet<usize> {
    gold.iter().copied().collect()
}

pub fn recall_at_k(ranked: &[usize], gold: &[usize], k: usize) -> Result<f64> {
    check(gold, k)?;
    let g = gold_set(gold);
    let hits = ranked.iter().take(k).filter(|i| g.contains(i)).count();
    Ok(hits as f64 / g.len() as f64)
}

pub fn ndcg_at_k(ranked: &[usize], gold: &[usize], k: usize) -> Result<f64> {
    check(gold, k)?;
    let g = gold_set(gold);
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| g.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..g.len().min(k)).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Ok(dcg / idcg)
}

pub fn mrr_at_k(ranked: &[usize], gold: &[usize], k: usize) -> Result<f64> {
    check(gold, k)?;
    let g = gold_set(gold);
    Ok(ranked
        .iter()
        .take(k)
        .position(|i| g.contains(i))
        .map_or(0.0, |r| 1.0 / (r + 1) as f64))
}

fn ngrams(text: &str, n: usize) -> Vec<Vec<String>> {
    let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    if words.len() < n {
        return Vec::new();
    }
    words.windows(n).map(<[String]>::to_vec).collect()
}

/// Unique over total word n-grams, pooled over the whole corpus.
pub fn distinct_n(responses: &[String], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Invalid("n must be at least 1".into()));
    }
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for g in ngrams(r, n) {
            total += 1;
            seen.insert(g);
        }
    }
    if total == 0 {
        log::warn!("no response has {n} words; distinct-{n} is 0");
        return Ok(0.0);
    }
    Ok(seen.len() as f64 / total as f64)
}

/// Per-response distinct ratio, averaged over responses long enough to have
/// an n-gram.
pub fn distinct_n_per_response(responses: &[String], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Invalid("n must be at least 1".into()));
    }
    let ratios: Vec<f64> = responses
        .iter()
        .filter_map(|r| {
            let g = ngrams(r, n);
            (!g.is_empty()).then(|| g.iter().collect::<HashSet<_>>().len() as f64 / g.len() as f64)
        })
        .collect();
    if ratios.is_empty() {
        log::warn!("no response has {n} words; distinct-{n} is 0");
        return Ok(0.0);
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Ranked catalogue and gold columns of one example.
#[derive(Clone, Debug)]
pub struct Ranking {
    pub ranked: Vec<usize>,
    pub gold: Vec<usize>,
}

pub fn ranking_metric(r: &Ranking, name: &str, k: usize) -> Result<f64> {
    match name {
        "recall" => recall_at_k(&r.ranked, &r.gold, k),
        "ndcg" => ndcg_at_k(&r.ranked, &r.gold, k),
        "mrr" => mrr_at_k(&r.ranked, &r.gold, k),
        other => Err(Error::Invalid(format!("unknown metric `{other}`"))),
    }
}

/// Mean of a ranking metric; 0 for an empty list.
pub fn mean_metric(rankings: &[Ranking], name: &str, k: usize) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    rankings.iter().map(|r| ranking_metric(r, name, k).expect("gold is non-empty")).sum::<f64>()
        / rankings.len() as f64
}

/// Ranks the full catalogue for every labelled example of a split.
pub fn rank_split(model: &CrsModel, store: &ParamStore, split: &[ExampleInput]) -> Result<Vec<Ranking>> {
    split
        .iter()
        .filter(|ex| !ex.target_cols.is_empty())
        .map(|ex| {
            let resp = model.inference_response(store, ex)?;
            let out = model.recommend(store, ex, resp.as_deref())?;
            Ok(Ranking { ranked: rank(&out.scores), gold: ex.target_cols.clone() })
        })
        .collect()
}

/// Mean per-example response NLL.
pub fn mean_conv_nll(model: &CrsModel, store: &ParamStore, split: &[ExampleInput], soft: bool) -> Result<f64> {
    if split.is_empty() {
        return Ok(0.0);
    }
    let objective = if soft { Objective::Conv } else { Objective::Stage1 };
    let mut total = 0.0;
    for chunk in split.chunks(16) {
        let refs: Vec<&ExampleInput> = chunk.iter().collect();
        let mut tape = Tape::new();
        let (_, parts) = model.batch_loss(&mut tape, store, &refs, objective)?;
        total += parts.total * chunk.len() as f64;
    }
    Ok(total / split.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub split: String,
    pub metrics: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub seeds: BTreeMap<String, u64>,
    pub input_hash: String,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub curves: BTreeMap<String, Vec<f64>>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    /// `metric<TAB>value` lines; distinct-n rendered as percentages.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.metrics {
            if k.starts_with("distinct") {
                s.push_str(&format!("{k}\t{:.3}\n", v * 100.0));
            } else {
                s.push_str(&format!("{k}\t{v:.4}\n"));
            }
        }
        s
    }
}

/// Content hash of the graph, the corpus and the config.
pub fn input_hash(g: &KnowledgeGraph, dialogues: &[Dialogue], cfg: &RunConfig) -> String {
    let mut h = Sha256::new();
    h.update(g.content_hash().as_bytes());
    for d in dialogues {
        h.update(serde_json::to_string(d).expect("dialogue serialises").as_bytes());
        h.update(b"\n");
    }
    h.update(cfg.to_toml().as_bytes());
    hex::encode(h.finalize())
}

pub fn evaluate(p: &Pipeline, split: crate::config::SplitName, hash: &str) -> Result<MetricsReport> {
    let cfg = &p.cfg;
    let inputs = p.split(split);
    let mut metrics = BTreeMap::new();
    let mut counts = BTreeMap::new();
    counts.insert("examples".to_string(), inputs.len());
    let soft = cfg.task == Task::Conv;
    match cfg.task {
        Task::Rec => {
            let rankings = rank_split(&p.model, &p.store, inputs)?;
            counts.insert("ranked".to_string(), rankings.len());
            for &k in &cfg.eval.ks {
                for name in ["recall", "ndcg", "mrr"] {
                    metrics.insert(format!("{name}@{k}"), mean_metric(&rankings, name, k));
                }
            }
        }
        Task::Conv => {
            let mut responses = Vec::with_capacity(inputs.len());
            for ex in inputs {
                responses.push(p.model.generate(&p.store, ex, cfg.model.max_new_tokens, soft)?.text);
            }
            for &n in &cfg.eval.distinct_ns {
                let v = match cfg.eval.distinct_mode {
                    DistinctMode::Corpus => distinct_n(&responses, n)?,
                    DistinctMode::PerResponse => distinct_n_per_response(&responses, n)?,
                };
                metrics.insert(format!("distinct-{n}"), v);
            }
            metrics.insert("conv_nll".to_string(), mean_conv_nll(&p.model, &p.store, inputs, soft)?);
        }
    }
    let seeds = [("split", cfg.seeds.split), ("init", cfg.seeds.init), ("shuffle", cfg.seeds.shuffle)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    Ok(MetricsReport {
        task: cfg.task,
        split: format!("{split:?}").to_lowercase(),
        metrics,
        counts,
        seeds,
        input_hash: hash.to_string(),
        config: cfg.clone(),
        curves: BTreeMap::new(),
    })
}

/// Attaches loss curves from a training run.
pub fn with_curves(mut r: MetricsReport, s: &TrainSummary) -> MetricsReport {
    r.curves.insert("backbone".into(), s.backbone_losses.clone());
    r.curves.insert("stage1".into(), s.stage1.losses.clone());
    r.curves.insert("stage2".into(), s.stage2.losses.clone());
    r
}

/// Trains from scratch with `cfg` and evaluates on the configured split.
pub fn train_and_evaluate(cfg: &RunConfig, g: &KnowledgeGraph, dialogues: &[Dialogue]) -> Result<MetricsReport> {
    let mut p = Pipeline::from_parts(cfg, g.clone(), dialogues)?;
    let summary = p.train()?;
    let hash = input_hash(g, dialogues, cfg);
    Ok(with_curves(evaluate(&p, cfg.eval.split, &hash)?, &summary))
}

pub const VARIANTS: [&str; 5] = ["full", "-tree", "-user", "-align", "-all"];

pub fn variant_config(base: &RunConfig, name: &str) -> Result<RunConfig> {
    let mut c = base.clone();
    let v = &mut c.variant;
    match name {
        "full" => {}
        "-tree" => v.tree = false,
        "-user" => v.user = false,
        "-align" => v.align = false,
        "-all" => {
            v.tree = false;
            v.user = false;
            v.align = false;
        }
        other => return Err(Error::Invalid(format!("unknown variant `{other}`"))),
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub per_seed: Vec<BTreeMap<String, f64>>,
    pub mean: BTreeMap<String, f64>,
    /// Standard error of the mean over seeds.
    pub se: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub split: String,
    pub variants: Vec<VariantResult>,
    pub input_hash: String,
    pub config: RunConfig,
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    /// One row per variant: `variant<TAB>metric mean<TAB>se ...`.
    pub fn to_table(&self) -> String {
        let keys: Vec<&String> = self.variants.first().map(|v| v.mean.keys().collect()).unwrap_or_default();
        let mut s = String::from("variant");
        for k in &keys {
            s.push_str(&format!("\t{k}\t{k}_se"));
        }
        s.push('\n');
        for v in &self.variants {
            s.push_str(&v.name);
            for k in &keys {
                s.push_str(&format!("\t{:.4}\t{:.4}", v.mean[*k], v.se[*k]));
            }
            s.push('\n');
        }
        s
    }
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Every variant over every seed; the split seed stays fixed so all runs
/// share one held-out split.
pub fn run_ablation(cfg: &RunConfig, g: &KnowledgeGraph, dialogues: &[Dialogue]) -> Result<AblationReport> {
    let seeds = cfg.eval.ablation_seeds.clone();
    if seeds.is_empty() {
        return Err(Error::Config { key: "eval.ablation_seeds".into(), msg: "no seeds".into() });
    }
    let mut variants = Vec::with_capacity(VARIANTS.len());
    for name in VARIANTS {
        let vc = variant_config(cfg, name)?;
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &s in &seeds {
            let mut c = vc.clone();
            c.seeds.init = s;
            c.seeds.shuffle = s;
            log::info!("ablation {name} seed {s}");
            per_seed.push(train_and_evaluate(&c, g, dialogues)?.metrics);
        }
        let mut mean = BTreeMap::new();
        let mut se = BTreeMap::new();
        for k in per_seed[0].keys() {
            let vals: Vec<f64> = per_seed.iter().map(|m| m[k]).collect();
            let (m, e) = mean_se(&vals);
            mean.insert(k.clone(), m);
            se.insert(k.clone(), e);
        }
        variants.push(VariantResult { name: name.to_string(), per_seed, mean, se });
    }
    Ok(AblationReport {
        seeds,
        split: format!("{:?}", cfg.eval.split).to_lowercase(),
        variants,
        input_hash: input_hash(g, dialogues, cfg),
        config: cfg.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TreeDepth,
    TreeDegree,
    Alpha,
    Beta,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tree_depth" => Ok(Self::TreeDepth),
            "tree_degree" => Ok(Self::TreeDegree),
            "alpha" => Ok(Self::Alpha),
            "beta" => Ok(Self::Beta),
            other => Err(Error::Invalid(format!(
                "unknown sweep axis `{other}` (tree_depth, tree_degree, alpha, beta)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TreeDepth => "tree_depth",
            Self::TreeDegree => "tree_degree",
            Self::Alpha => "alpha",
            Self::Beta => "beta",
        }
    }

    /// Values configured for this axis, ascending.
    pub fn values(self, cfg: &RunConfig) -> Vec<f64> {
        let e = &cfg.eval;
        let mut v: Vec<f64> = match self {
            Self::TreeDepth => e.sweep_tree_depth.iter().map(|&x| x as f64).collect(),
            Self::TreeDegree => e.sweep_tree_degree.iter().map(|&x| x as f64).collect(),
            Self::Alpha => e.sweep_alpha.clone(),
            Self::Beta => e.sweep_beta.clone(),
        };
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    pub fn apply(self, cfg: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut c = cfg.clone();
        match self {
            Self::TreeDepth => c.tree.depth = value as usize,
            Self::TreeDegree => c.tree.degree = value as usize,
            Self::Alpha => c.loss.alpha = value,
            Self::Beta => c.loss.beta = value,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub input_hash: String,
    pub config: RunConfig,
}

impl SweepReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    /// Tab-separated table: header `axis<TAB>metric...`, one row per value
    /// in ascending order.
    pub fn to_table(&self) -> String {
        let keys: Vec<&String> = self.rows.first().map(|r| r.metrics.keys().collect()).unwrap_or_default();
        let mut s = self.axis.as_str().to_string();
        for k in &keys {
            s.push('\t');
            s.push_str(k);
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{}", r.value));
            for k in &keys {
                s.push_str(&format!("\t{:.6}", r.metrics[*k]));
            }
            s.push('\n');
        }
        s
    }
}

/// Parses a table produced by [`SweepReport::to_table`].
pub fn parse_sweep_table(text: &str) -> Result<(String, Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Invalid("empty table".into()))?;
    let mut cols = header.split('\t').map(str::to_string);
    let axis = cols.next().unwrap_or_default();
    let metrics: Vec<String> = cols.collect();
    let mut rows = Vec::new();
    for (i, l) in lines.enumerate() {
        let vals: std::result::Result<Vec<f64>, _> = l.split('\t').map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| Error::Invalid(format!("row {}: {e}", i + 1)))?;
        if vals.len() != metrics.len() + 1 {
            return Err(Error::Invalid(format!("row {} has {} columns", i + 1, vals.len())));
        }
        rows.push(vals);
    }
    Ok((axis, metrics, rows))
}

pub fn run_sweep(cfg: &RunConfig, axis: SweepAxis, g: &KnowledgeGraph, dialogues: &[Dialogue]) -> Result<SweepReport> {
    let values = axis.values(cfg);
    if values.is_empty() {
        return Err(Error::Config { key: format!("eval.sweep_{}", axis.as_str()), msg: "no values".into() });
    }
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        log::info!("sweep {} = {v}", axis.as_str());
        let c = axis.apply(cfg, v)?;
        rows.push(SweepRow { value: v, metrics: train_and_evaluate(&c, g, dialogues)?.metrics });
    }
    Ok(SweepReport { axis, rows, input_hash: input_hash(g, dialogues, cfg), config: cfg.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_examples() {
        let ranked: Vec<usize> = (0..100).collect();
        assert_eq!(recall_at_k(&ranked, &[0], 10).unwrap(), 1.0);
        assert_eq!(recall_at_k(&ranked, &[10], 10).unwrap(), 0.0);
        assert_eq!(recall_at_k(&ranked, &[2, 59], 50).unwrap(), 0.5);
        assert_eq!(ndcg_at_k(&ranked, &[0], 10).unwrap(), 1.0);
        assert!((ndcg_at_k(&ranked, &[2], 10).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(mrr_at_k(&ranked, &[1], 10).unwrap(), 0.5);
        assert_eq!(mrr_at_k(&ranked, &[20], 10).unwrap(), 0.0);
        assert!(recall_at_k(&ranked, &[], 10).is_err());
        assert!(recall_at_k(&ranked, &[1], 0).is_err());
    }

    #[test]
    fn distinct_examples() {
        let v = distinct_n(&["a b a b".to_string()], 2).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        let twice = distinct_n(&["a b a b".to_string(), "a b a b".to_string()], 2).unwrap();
        assert!((twice - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(distinct_n(&["x y z".to_string()], 1).unwrap(), 1.0);
        assert_eq!(distinct_n(&["x".to_string()], 2).unwrap(), 0.0);
    }

    #[test]
    fn rank_breaks_ties_by_index() {
        assert_eq!(rank(&[0.2, 0.5, 0.2, 0.5]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn sweep_table_parses() {
        let r = SweepReport {
            axis: SweepAxis::Alpha,
            rows: vec![
                SweepRow { value: 0.0, metrics: [("recall@10".to_string(), 0.5)].into() },
                SweepRow { value: 0.02, metrics: [("recall@10".to_string(), 0.25)].into() },
            ],
            input_hash: String::new(),
            config: RunConfig::default(),
        };
        let (axis, m, rows) = parse_sweep_table(&r.to_table()).unwrap();
        assert_eq!(axis, "alpha");
        assert_eq!(m, vec!["recall@10"]);
        assert_eq!(rows, vec![vec![0.0, 0.5], vec![0.02, 0.25]]);
    }
}
