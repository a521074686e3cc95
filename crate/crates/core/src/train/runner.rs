use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{analyze_model, argmax_rows, batch_tensor, AnalysisError, AnalysisOptions};
use crate::config::{Cell, ConfigError, ExperimentConfig, Matrix, Precision};
use crate::metrics::MechanismReport;
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::{Graph, Real, TensorError};
use crate::train::data::{Dataset, Split};
use crate::train::optim::{adamw_step, OptimError, OptimState, Schedule};
use crate::vit::{BackboneConfig, VitModel};

/// Batches excluded from the throughput measurement.
pub const THROUGHPUT_WARMUP_BATCHES: usize = 5;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("non-finite loss {loss} at step {step} (epoch {epoch})")]
    NonFiniteLoss { step: usize, epoch: usize, loss: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("rank sweep needs a complement variant")]
    NoComplement,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub host: String,
    pub seed: u64,
    pub config_hash: String,
    pub train_loss: Vec<f64>,
    pub test_acc: Vec<f64>,
    pub best_test_acc: f64,
    pub best_epoch: usize,
    /// Training images per second, excluding the first batches.
    pub throughput_img_s: f64,
    pub param_count: usize,
    pub steps: usize,
}

impl RunRecord {
    /// The record without its wall-clock field; identical across
    /// deterministic reruns.
    pub fn deterministic_view(&self) -> RunRecord {
        RunRecord {
            throughput_img_s: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
}

/// Mean cross-entropy and parameter gradients of one shard.
fn shard_grads<T: Real>(model: &VitModel<T>, split: &Split, idx: &[usize]) -> Result<(ParamGrads<T>, f64), TensorError> {
    let images = batch_tensor::<T>(split, idx);
    let labels: Vec<usize> = idx.iter().map(|&i| split.labels[i]).collect();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &images)?;
    let loss = g.cross_entropy(out.logits, &labels)?;
    g.backward(loss)?;
    let value = g.value(loss).data()[0].to_f64_lossy();
    Ok((g.param_grads(&model.params), value))
}

/// Batch loss and gradients. Shard boundaries are fixed and shards are
/// reduced in index order, so the result does not depend on thread count.
pub fn batch_grads<T: Real>(
    model: &VitModel<T>,
    split: &Split,
    idx: &[usize],
    shard_size: usize,
) -> Result<(ParamGrads<T>, f64), TensorError> {
    let shards: Vec<&[usize]> = idx.chunks(shard_size).collect();
    let parts: Vec<(ParamGrads<T>, f64)> = shards
        .par_iter()
        .map(|s| shard_grads(model, split, s))
        .collect::<Result<_, _>>()?;
    let n = idx.len() as f64;
    let mut total = ParamGrads::zeros_like(&model.params);
    let mut loss = 0.0;
    for ((mut grads, l), shard) in parts.into_iter().zip(&shards) {
        let w = shard.len() as f64 / n;
        grads.scale(T::lit(w));
        total.accumulate(&grads);
        loss += w * l;
    }
    Ok((total, loss))
}

pub fn accuracy<T: Real>(model: &VitModel<T>, split: &Split, batch: usize) -> Result<f64, TensorError> {
    let idx: Vec<usize> = (0..split.len()).collect();
    let correct: Vec<usize> = idx
        .chunks(batch.max(1))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|chunk| {
            let mut g = Graph::new();
            let out = model.forward(&mut g, &batch_tensor::<T>(split, chunk))?;
            let pred = argmax_rows(g.value(out.logits));
            Ok(pred.iter().zip(chunk.iter()).filter(|(p, &i)| **p == split.labels[i]).count())
        })
        .collect::<Result<_, TensorError>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / split.len() as f64)
}

pub struct TrainOutcome<T> {
    pub record: RunRecord,
    pub model: VitModel<T>,
}

/// Trains one seed. Parameters and batch order derive from `seed` alone.
pub fn train_seed<T: Real>(
    cfg: &ExperimentConfig,
    backbone: BackboneConfig,
    data: &Dataset,
    seed: u64,
    observer: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<T>, RunError> {
    let mut model = VitModel::<T>::init(backbone, seed).map_err(ConfigError::from)?;
    let o = cfg.optimizer;
    let n = data.train.len();
    let batches_per_epoch = n.div_ceil(o.batch_size);
    let total_steps = batches_per_epoch * o.epochs;
    let schedule = Schedule::new(o.peak_lr, o.warmup_frac, total_steps);
    let mut state = OptimState::new(&model.params, schedule, o.adamw());
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_5546_464c_4521);
    let mut order: Vec<usize> = (0..n).collect();

    let mut train_loss = Vec::with_capacity(o.epochs);
    let mut test_acc = Vec::with_capacity(o.epochs);
    let mut step = 0usize;
    let (mut timed, mut timed_images) = (Duration::ZERO, 0usize);
    let (mut all_time, mut all_images) = (Duration::ZERO, 0usize);
    for epoch in 0..o.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(o.batch_size) {
            let start = Instant::now();
            let (grads, loss) = batch_grads(&model, &data.train, batch, o.shard_size)?;
            if !loss.is_finite() {
                return Err(RunError::NonFiniteLoss { step, epoch, loss });
            }
            adamw_step(&mut model.params, &grads, &mut state)?;
            let dt = start.elapsed();
            all_time += dt;
            all_images += batch.len();
            if step >= THROUGHPUT_WARMUP_BATCHES {
                timed += dt;
                timed_images += batch.len();
            }
            epoch_loss += loss * batch.len() as f64;
            step += 1;
        }
        let loss = epoch_loss / n as f64;
        let acc = accuracy(&model, &data.test, cfg.analysis.batch_size)?;
        observer(&EpochLog {
            seed,
            epoch,
            train_loss: loss,
            test_acc: acc,
        });
        train_loss.push(loss);
        test_acc.push(acc);
    }
    // Too few batches to discard a warmup: fall back to all of them.
    let (t, imgs) = if timed_images > 0 { (timed, timed_images) } else { (all_time, all_images) };
    let throughput = imgs as f64 / t.as_secs_f64().max(1e-9);
    let (best_epoch, best) = test_acc
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, a)| if a > acc.1 { (i, a) } else { acc });
    let record = RunRecord {
        variant: backbone.ffn.label() + if backbone.use_pr_readout { "+pr" } else { "" },
        host: backbone.ffn.host.description(),
        seed,
        config_hash: cfg.hash(),
        train_loss,
        test_acc,
        best_test_acc: best,
        best_epoch,
        throughput_img_s: throughput,
        param_count: model.param_count(),
        steps: step,
    };
    Ok(TrainOutcome { record, model })
}

/// Serialized model parameters plus the architecture they belong to.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Checkpoint<T> {
    pub backbone: BackboneConfig,
    pub params: ParamStore<T>,
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub record: RunRecord,
    pub report: MechanismReport,
    pub dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub dir: PathBuf,
    pub seeds: Vec<SeedResult>,
}

impl ExperimentResult {
    pub fn records(&self) -> Vec<RunRecord> {
        self.seeds.iter().map(|s| s.record.clone()).collect()
    }

    pub fn summary(&self) -> Summary {
        Summary::of(&self.records())
    }
}

/// Seed mean and sample standard deviation of best accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub variant: String,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub params: usize,
    pub img_s: f64,
    pub n_seeds: usize,
}

impl Summary {
    pub fn of(records: &[RunRecord]) -> Self {
        let accs: Vec<f64> = records.iter().map(|r| r.best_test_acc).collect();
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let std = if accs.len() > 1 {
            (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            variant: records.first().map(|r| r.variant.clone()).unwrap_or_default(),
            acc_mean: mean,
            acc_std: std,
            params: records.first().map_or(0, |r| r.param_count),
            img_s: records.iter().map(|r| r.throughput_img_s).sum::<f64>() / n,
            n_seeds: records.len(),
        }
    }

    pub const HEADER: [&'static str; 6] = ["variant", "acc_mean", "acc_std", "params", "img_s", "n_seeds"];

    pub fn row(&self) -> Vec<String> {
        vec![
            self.variant.clone(),
            format!("{:.4}", self.acc_mean),
            format!("{:.4}", self.acc_std),
            self.params.to_string(),
            format!("{:.1}", self.img_s),
            self.n_seeds.to_string(),
        ]
    }

    /// `variant  acc mean±std  params  img/s`, in percent.
    pub fn table_line(&self) -> String {
        format!(
            "{:<36} {:>6.2} ± {:<5.2} {:>10} {:>9.1}",
            self.variant,
            100.0 * self.acc_mean,
            100.0 * self.acc_std,
            self.params,
            self.img_s
        )
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<S: serde::de::DeserializeOwned>(path: &Path) -> Result<S, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| RunError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), RunError> {
    let fmt = |e: csv::Error| RunError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(fmt)?;
    w.write_record(header).map_err(fmt)?;
    for r in rows {
        w.write_record(r).map_err(fmt)?;
    }
    w.flush().map_err(io_err(path))
}

fn run_seed_typed<T: Real>(
    cfg: &ExperimentConfig,
    backbone: BackboneConfig,
    data: &Dataset,
    seed: u64,
    dir: &Path,
    observer: &mut dyn FnMut(&EpochLog),
) -> Result<SeedResult, RunError> {
    let outcome = train_seed::<T>(cfg, backbone, data, seed, observer)?;
    let report = analyze_model(
        &outcome.model,
        &data.test,
        &AnalysisOptions {
            seed,
            max_samples: cfg.analysis.max_samples,
            batch_size: cfg.analysis.batch_size,
        },
    )?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join("record.json"), &outcome.record)?;
    write_json(&dir.join("mechanism.json"), &report)?;
    write_json(
        &dir.join("checkpoint.json"),
        &Checkpoint {
            backbone,
            params: outcome.model.params.clone(),
        },
    )?;
    Ok(SeedResult {
        record: outcome.record,
        report,
        dir: dir.to_path_buf(),
    })
}

/// Trains every seed of a single-variant config and writes
/// `<root>/<hash>/{config.toml, records.jsonl, summary.csv, mechanism.csv}`
/// plus `<root>/<hash>/<seed>/{record.json, mechanism.json, checkpoint.json}`.
pub fn run_experiment(cfg: &ExperimentConfig, observer: &mut dyn FnMut(&EpochLog)) -> Result<ExperimentResult, RunError> {
    cfg.validate()?;
    let data = cfg.dataset.load(cfg.backbone.image_size).map_err(ConfigError::from)?;
    run_with_data(cfg, &data, observer)
}

fn run_with_data(
    cfg: &ExperimentConfig,
    data: &Dataset,
    observer: &mut dyn FnMut(&EpochLog),
) -> Result<ExperimentResult, RunError> {
    let backbone = cfg.backbone_config(data.n_classes);
    backbone.validate().map_err(ConfigError::from)?;
    let dir = cfg.output_root().join(cfg.hash());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(io_err(&dir))?;

    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let sdir = dir.join(seed.to_string());
        let res = match cfg.precision {
            Precision::F32 => run_seed_typed::<f32>(cfg, backbone, data, seed, &sdir, observer)?,
            Precision::F64 => run_seed_typed::<f64>(cfg, backbone, data, seed, &sdir, observer)?,
        };
        seeds.push(res);
    }
    let result = ExperimentResult { dir: dir.clone(), seeds };

    let jsonl = dir.join("records.jsonl");
    let mut f = fs::File::create(&jsonl).map_err(io_err(&jsonl))?;
    for s in &result.seeds {
        writeln!(f, "{}", serde_json::to_string(&s.record).expect("serializable")).map_err(io_err(&jsonl))?;
    }
    write_csv(&dir.join("summary.csv"), &Summary::HEADER, &[result.summary().row()])?;
    let rows: Vec<Vec<String>> = result.seeds.iter().map(|s| s.report.csv_row()).collect();
    write_csv(&dir.join("mechanism.csv"), &MechanismReport::CSV_HEADER, &rows)?;
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub summary: Summary,
    pub result: ExperimentResult,
}

pub const DECOMPOSITION_HEADER: [&str; 8] =
    ["condition", "host", "variant", "acc_mean", "acc_std", "params", "img_s", "n_seeds"];

/// Runs the eight decomposition cells and writes `decomposition.csv` under
/// the parent config's directory.
pub fn run_decomposition(
    cfg: &ExperimentConfig,
    observer: &mut dyn FnMut(&EpochLog),
) -> Result<(PathBuf, Vec<CellResult>), RunError> {
    cfg.validate()?;
    let data = cfg.dataset.load(cfg.backbone.image_size).map_err(ConfigError::from)?;
    let mut out = Vec::with_capacity(8);
    for cell in cfg.decomposition_cells() {
        let result = run_with_data(&cell.config, &data, observer)?;
        out.push(CellResult {
            summary: result.summary(),
            cell,
            result,
        });
    }
    let dir = cfg.output_root().join(cfg.hash());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(io_err(&dir))?;
    let rows: Vec<Vec<String>> = out
        .iter()
        .map(|c| {
            let mut row = vec![c.cell.condition.label().to_string(), c.cell.host.label().to_string()];
            row.extend(c.summary.row());
            row
        })
        .collect();
    let path = dir.join("decomposition.csv");
    write_csv(&path, &DECOMPOSITION_HEADER, &rows)?;
    Ok((path, out))
}

pub const DEFAULT_SWEEP_RANKS: [usize; 4] = [16, 48, 56, 64];
pub const SWEEP_HEADER: [&str; 6] = ["rank", "acc_mean", "acc_std", "params", "img_s", "n_seeds"];

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub rank: usize,
    pub summary: Summary,
}

/// One accuracy row per rank over the config's seeds; writes `sweep.csv`.
pub fn rank_sweep(
    cfg: &ExperimentConfig,
    ranks: &[usize],
    observer: &mut dyn FnMut(&EpochLog),
) -> Result<(PathBuf, Vec<SweepRow>), RunError> {
    let base = cfg.variant.complement.ok_or(RunError::NoComplement)?;
    let mut configs = Vec::with_capacity(ranks.len());
    for &rank in ranks {
        let mut variant = cfg.variant;
        variant.complement = Some(crate::complement::ComplementConfig { rank, ..base });
        let c = cfg.derive(variant, cfg.backbone.use_pr_readout, Matrix::Single);
        c.validate()?;
        configs.push((rank, c));
    }
    let data = cfg.dataset.load(cfg.backbone.image_size).map_err(ConfigError::from)?;
    let mut rows = Vec::with_capacity(ranks.len());
    for (rank, c) in configs {
        let result = run_with_data(&c, &data, observer)?;
        rows.push(SweepRow {
            rank,
            summary: result.summary(),
        });
    }
    let dir = cfg.output_root().join(cfg.hash());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(io_err(&dir))?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![r.rank.to_string()];
            row.extend(r.summary.row().into_iter().skip(1));
            row
        })
        .collect();
    let path = dir.join("sweep.csv");
    write_csv(&path, &SWEEP_HEADER, &csv_rows)?;
    Ok((path, rows))
}

/// Rebuilds a seed's model from its checkpoint and recomputes its report.
pub fn analyze_seed_dir(cfg: &ExperimentConfig, seed_dir: &Path, data: &Dataset) -> Result<MechanismReport, RunError> {
    let seed: u64 = seed_dir
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| RunError::Format {
            path: seed_dir.to_path_buf(),
            message: "run directory name is not a seed".into(),
        })?;
    let ckpt = seed_dir.join("checkpoint.json");
    if !ckpt.is_file() {
        return Err(RunError::Io {
            path: ckpt,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing checkpoint"),
        });
    }
    let opts = AnalysisOptions {
        seed,
        max_samples: cfg.analysis.max_samples,
        batch_size: cfg.analysis.batch_size,
    };
    fn load<T: Real>(path: &Path, opts: &AnalysisOptions, data: &Dataset) -> Result<MechanismReport, RunError> {
        let c: Checkpoint<T> = read_json(path)?;
        let mut model = VitModel::<T>::init(c.backbone, 0).map_err(ConfigError::from)?;
        model.load_params(c.params).map_err(|e| RunError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(analyze_model(&model, &data.test, opts)?)
    }
    let report = match cfg.precision {
        Precision::F32 => load::<f32>(&ckpt, &opts, data)?,
        Precision::F64 => load::<f64>(&ckpt, &opts, data)?,
    };
    write_json(&seed_dir.join("mechanism.json"), &report)?;
    Ok(report)
}
