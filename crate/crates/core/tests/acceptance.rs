//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero when
//! any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use kgcrs::config::{RunConfig, SplitName};
use kgcrs::eval::{self, SweepAxis};
use kgcrs::fixture::{self, FixtureSpec};
use kgcrs::selftest::{self, E2E_GRAD_TOL, LOSS_GRAD_TOL, ORACLE_TOL};
use kgcrs::train::{self, Pipeline};
use kgcrs::{gradcheck, Result};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn within(limit: Duration, took: Duration) -> bool {
    took <= limit
}

fn metrics() -> Result<Outcome> {
    let t = Instant::now();
    let m = selftest::metric_gap(200, 101)?;
    let d = selftest::distinct_gap(200, 102)?;
    let took = t.elapsed();
    Ok(outcome(
        m <= ORACLE_TOL && d <= ORACLE_TOL && within(Duration::from_secs(10), took),
        format!("ranking gap {m:.1e}, distinct gap {d:.1e}, {took:.2?}"),
    ))
}

fn trees() -> Result<Outcome> {
    let t = Instant::now();
    let (bad, total) = selftest::tree_mismatches(100, 103)?;
    let took = t.elapsed();
    Ok(outcome(bad == 0 && within(Duration::from_secs(30), took), format!("{bad}/{total} mismatched, {took:.2?}")))
}

fn round_trip() -> Result<Outcome> {
    let t = Instant::now();
    let bad = selftest::round_trip_failures(100, 104)?;
    let took = t.elapsed();
    Ok(outcome(bad == 0 && within(Duration::from_secs(5), took), format!("{bad}/100 differ, {took:.2?}")))
}

fn gradients() -> Result<Outcome> {
    let t = Instant::now();
    let per_loss = [
        gradcheck::user_loss(105)?,
        gradcheck::align_loss(106, false)?,
        gradcheck::rec_loss(107)?,
        gradcheck::conv_loss(108)?,
    ];
    let (e2e, plm_zero) = gradcheck::end_to_end(109)?;
    let took = t.elapsed();
    let worst = per_loss.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let parts: Vec<String> = per_loss.iter().map(|r| format!("{} {:.1e}", r.name, r.rel_error)).collect();
    Ok(outcome(
        worst < LOSS_GRAD_TOL && e2e.rel_error < E2E_GRAD_TOL && plm_zero && within(Duration::from_secs(120), took),
        format!("{}, L_all {:.1e}, {took:.2?}", parts.join(", "), e2e.rel_error),
    ))
}

/// Frozen backbone and train-set fit from a single toy run.
fn toy_run() -> Result<(Outcome, Outcome)> {
    let cfg = RunConfig::load(&configs().join("toy.toml"))?;
    let t = Instant::now();
    let mut p = Pipeline::from_config(&cfg)?;
    let s = p.train()?;
    let rankings = eval::rank_split(&p.model, &p.store, p.split(SplitName::Train))?;
    let r1 = eval::mean_metric(&rankings, "recall", 1);
    let took = t.elapsed();
    let frozen = outcome(
        s.plm_hash_before == s.plm_hash_after,
        format!("backbone hash {} before and after", &s.plm_hash_after[..12]),
    );
    let fit = outcome(
        r1 >= 0.9 && s.stage2.steps <= 200 && within(Duration::from_secs(300), took),
        format!("train recall@1 {r1:.3} after {} stage-2 steps, {took:.2?}", s.stage2.steps),
    );
    Ok((frozen, fit))
}

fn random_baseline() -> Result<Outcome> {
    let fx = fixture::generate(&FixtureSpec { dialogues: 510, cycle_targets: true, ..FixtureSpec::default() });
    let mut cfg = fixture::toy_config();
    cfg.train.backbone_pretrain_steps = 0;
    let g = fx.graph(cfg.encoder.use_inverse_edges)?;
    let items = g.num_items();
    let p = Pipeline::from_parts(&cfg, g, &fx.dialogues)?;
    let first: Vec<_> = [SplitName::Train, SplitName::Valid, SplitName::Test]
        .iter()
        .flat_map(|&s| p.split(s).iter())
        .filter(|e| e.id.ends_with("#1") && !e.target_cols.is_empty())
        .cloned()
        .collect();
    let rankings = eval::rank_split(&p.model, &p.store, &first)?;
    let r10 = eval::mean_metric(&rankings, "recall", 10);
    let n = rankings.len() as f64;
    let q = 10.0 / items as f64;
    let sd = (q * (1.0 - q) / n).sqrt();
    Ok(outcome(
        items == 30 && n >= 500.0 && (r10 - q).abs() <= 3.0 * sd,
        format!("recall@10 {r10:.4} over {n} examples, expected {q:.4} +- {:.4}", 3.0 * sd),
    ))
}

fn ablation() -> Result<Outcome> {
    let cfg = RunConfig::load(&configs().join("toy.toml"))?;
    let (g, d) = train::load_inputs(&cfg)?;
    let t = Instant::now();
    let report = eval::run_ablation(&cfg, &g, &d)?;
    let took = t.elapsed();
    print!("{}", report.to_table());
    let get = |name: &str, which: &str| -> f64 {
        let v = report.variant(name).expect("variant present");
        let m = if which == "se" { &v.se } else { &v.mean };
        m["recall@10"]
    };
    let full = get("full", "mean");
    let mut ok = report.variants.len() == 5 && report.seeds.len() == 5;
    let mut parts = vec![format!("full {full:.3}")];
    for v in ["-tree", "-user", "-align"] {
        let (m, se) = (get(v, "mean"), get(v, "se"));
        ok &= full >= m - se;
        parts.push(format!("{v} {m:.3}+-{se:.3}"));
    }
    Ok(outcome(ok, format!("recall@10 {}, {took:.2?}", parts.join(", "))))
}

fn sweeps() -> Result<Outcome> {
    let cfg = RunConfig::load(&configs().join("toy_sweep.toml"))?;
    let (g, d) = train::load_inputs(&cfg)?;
    let t = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for axis in [SweepAxis::TreeDepth, SweepAxis::TreeDegree, SweepAxis::Alpha, SweepAxis::Beta] {
        let table = eval::run_sweep(&cfg, axis, &g, &d)?.to_table();
        let (name, cols, rows) = eval::parse_sweep_table(&table)?;
        let xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        ok &= name == axis.as_str()
            && !cols.is_empty()
            && rows.len() == axis.values(&cfg).len()
            && xs.windows(2).all(|w| w[0] < w[1]);
        parts.push(format!("{name} {}x{}", rows.len(), cols.len()));
    }
    Ok(outcome(ok, format!("{}, {:.2?}", parts.join(", "), t.elapsed())))
}

fn determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| kgcrs::Error::Io(e.to_string()))?;
    let cfg = configs().join("toy_sweep.toml");
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_kgcrs"))
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| kgcrs::Error::Io(e.to_string()))?;
        if !status.status.success() {
            return Ok(outcome(false, format!("run {run} failed: {}", String::from_utf8_lossy(&status.stderr))));
        }
        let read = |f: &str| fs::read(out.join(f)).map_err(|e| kgcrs::Error::Io(e.to_string()));
        reports.push((read("metrics.json")?, read("train_log.jsonl")?));
    }
    let same = reports[0] == reports[1];
    Ok(outcome(same, format!("metrics.json and train_log.jsonl {}", if same { "identical" } else { "differ" })))
}

fn report(n: usize, name: &str, r: Result<Outcome>) -> bool {
    let o = r.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    println!("{} {n:>2} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    o.passed
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report(1, "metric oracles", metrics());
    ok &= report(2, "tree builder oracle", trees());
    ok &= report(3, "serialisation round trip", round_trip());
    ok &= report(4, "gradient suite", gradients());
    match toy_run() {
        Ok((frozen, fit)) => {
            ok &= report(5, "frozen backbone", Ok(frozen));
            ok &= report(6, "overfit on fixture", Ok(fit));
        }
        Err(e) => {
            ok &= report(5, "frozen backbone", Err(kgcrs::Error::Invalid(e.to_string())));
            ok &= report(6, "overfit on fixture", Err(e));
        }
    }
    ok &= report(7, "random baseline", random_baseline());
    ok &= report(8, "ablation direction", ablation());
    ok &= report(9, "sweep tables", sweeps());
    ok &= report(10, "determinism", determinism());
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
