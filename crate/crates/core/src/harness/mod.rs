//! Experiment commands: pre-training, single fine-tuning cells, the strategy
//! matrix, the gamma sweep and the sparsification ablation.
//!
//! Every command writes its artifacts under the configured output root and
//! returns the in-memory result. Metric files never contain timings, so they
//! are bit-identical across reruns; timings go to separate columns/files.

mod config;
mod report;

pub use config::{DataConfig, ExperimentConfig, Overrides, Task, DEFAULT_OUTPUT_ROOT, OUTPUT_ROOT_ENV};
pub use report::{cmd_report, render_report};

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize};

use crate::checkpoint::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_atomic, CheckpointMeta};
use crate::data::{few_shot_split, generate_domain, Dataset, DomainSpec};
use crate::error::{CheckpointError, Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::sparsify::{StrategyConfig, StrategyKind};
use crate::train::{finetune_loop, pretrain_loop, TrainRecord};
use crate::unet::{build_unet, Model};

/// JSON has no NaN; failed cells serialize it as `null`.
fn nan_if_null<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn dataset(cfg: &ExperimentConfig, spec: &DomainSpec, n: usize, seed: u64) -> Result<Dataset> {
    if !cfg.data.cache {
        return generate_domain(spec, n, seed);
    }
    let path = cfg
        .output_root()
        .join("datasets")
        .join(format!("{}-{}px-{n}-{seed:016x}.dgst", spec.name, spec.size));
    if path.exists() {
        if let Ok((ds, cached)) = load_dataset(&path) {
            if &cached == spec && ds.seed == seed && ds.len() == n {
                return Ok(ds);
            }
        }
    }
    let ds = generate_domain(spec, n, seed)?;
    save_dataset(&path, &ds, spec)?;
    Ok(ds)
}

pub fn source_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let spec = DomainSpec::source(cfg.data.image_size);
    Ok((
        dataset(cfg, &spec, cfg.data.source_samples, cfg.data.source_seed())?,
        dataset(cfg, &spec, cfg.data.source_test_samples, cfg.data.source_test_seed())?,
    ))
}

pub fn task_dataset(cfg: &ExperimentConfig, task: Task) -> Result<Dataset> {
    dataset(
        cfg,
        &task.spec(cfg.data.image_size),
        cfg.data.downstream_samples,
        cfg.data.task_seed(task),
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub config: ExperimentConfig,
    pub checkpoint: PathBuf,
    pub source_test: MetricsReport,
    pub zero_shot: Vec<(Task, MetricsReport)>,
    pub first_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
}

/// Trains the foundation model on the source domain and writes
/// `foundation/foundation.ckpt`, the training record and a summary.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<(Model, PretrainSummary)> {
    cfg.validate()?;
    let (source, source_test) = source_datasets(cfg)?;
    let out = pretrain_loop(&cfg.model, &source.samples, &cfg.pretrain, cfg.pretrain_seed)?;
    let dir = cfg.output_root().join("foundation");
    let ckpt = dir.join("foundation.ckpt");
    let mut meta = CheckpointMeta::for_model(&out.model);
    meta.strategy = Some(StrategyConfig::new(StrategyKind::Full));
    meta.run_seed = Some(cfg.pretrain_seed);
    save_checkpoint(&ckpt, &out.model, &meta)?;
    write_json(&dir.join("record.json"), &out.record)?;

    let mut zero_shot = Vec::new();
    for task in [Task::NearDomain, Task::FarDomain] {
        let ds = task_dataset(cfg, task)?;
        let split = few_shot_split(&ds, 1, cfg.seeds[0])?;
        zero_shot.push((task, evaluate(&out.model, &split.test)?));
    }
    let summary = PretrainSummary {
        config: cfg.clone(),
        checkpoint: ckpt,
        source_test: evaluate(&out.model, &source_test.samples)?,
        zero_shot,
        first_loss: out.record.loss.first().copied().unwrap_or(f64::NAN),
        final_loss: out.record.loss.last().copied().unwrap_or(f64::NAN),
        iterations: out.record.iterations,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok((out.model, summary))
}

/// Loads the foundation checkpoint and checks it against the configured
/// architecture.
pub fn load_foundation(cfg: &ExperimentConfig) -> Result<Model> {
    let path = cfg.foundation_path();
    if !path.exists() {
        return Err(Error::Config(format!(
            "foundation checkpoint {} not found (run `pretrain` first or pass --foundation)",
            path.display()
        )));
    }
    let (model, _) = load_checkpoint(&path)?;
    let expected = build_unet(&cfg.model, 0)?.registry_digest();
    if model.extension().is_some() || model.registry_digest() != expected {
        return Err(CheckpointError::Digest {
            expected,
            found: model.registry_digest(),
        }
        .into());
    }
    Ok(model)
}

/// Foundation for a set of strategies; a from-scratch-only run does not need
/// a checkpoint.
fn foundation_for(cfg: &ExperimentConfig, kinds: &[StrategyKind]) -> Result<Model> {
    if kinds.iter().all(|k| !k.uses_foundation()) {
        return build_unet(&cfg.model, 0);
    }
    load_foundation(cfg)
}

/// One fine-tuning run of a cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: MetricsReport,
    pub mean_iteration_seconds: f64,
    pub wall_seconds: f64,
    pub checkpoint: Option<PathBuf>,
    pub loss: Vec<f64>,
}

/// One (task, strategy, shots) cell over all seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellResult {
    pub task: Task,
    pub strategy: StrategyConfig,
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedRun>,
    /// Per-case scores pooled over seeds.
    pub pooled: Option<MetricsReport>,
    #[serde(deserialize_with = "nan_if_null")]
    pub mean_iteration_seconds: f64,
    pub error: Option<String>,
}

impl CellResult {
    pub fn label(&self) -> String {
        label(&self.strategy)
    }
}

fn label(s: &StrategyConfig) -> String {
    if s.kind.is_per_kernel() {
        format!("{}-g{}", s.kind, s.gamma)
    } else {
        s.kind.to_string()
    }
}

#[derive(Clone, Debug)]
struct CellSpec {
    task: Task,
    strategy: StrategyConfig,
    shots: usize,
}

fn cell_dir(cfg: &ExperimentConfig, c: &CellSpec) -> PathBuf {
    cfg.output_root()
        .join("finetune")
        .join(c.task.name())
        .join(label(&c.strategy))
        .join(format!("{}-shot", c.shots))
}

fn run_seed(
    cfg: &ExperimentConfig,
    foundation: &Model,
    ds: &Dataset,
    c: &CellSpec,
    seed: u64,
    save: bool,
) -> Result<(SeedRun, TrainRecord)> {
    let start = Instant::now();
    let split = few_shot_split(ds, c.shots, seed)?;
    let out = finetune_loop(foundation, &split.train, &c.strategy, &cfg.finetune, seed)?;
    let metrics = evaluate(&out.model, &split.test)?;
    let checkpoint = if save {
        let dir = cell_dir(cfg, c).join(format!("seed-{seed}"));
        let path = dir.join("model.ckpt");
        let mut meta = CheckpointMeta::for_model(&out.model);
        meta.strategy = Some(c.strategy.clone());
        meta.run_seed = Some(seed);
        save_checkpoint(&path, &out.model, &meta)?;
        write_json(&dir.join("record.json"), &out.record)?;
        Some(path)
    } else {
        None
    };
    let run = SeedRun {
        seed,
        metrics,
        mean_iteration_seconds: out.record.mean_iteration_seconds,
        wall_seconds: start.elapsed().as_secs_f64(),
        checkpoint,
        loss: out.record.loss.clone(),
    };
    Ok((run, out.record))
}

fn run_cell(cfg: &ExperimentConfig, foundation: &Model, ds: &Dataset, c: &CellSpec, save: bool) -> CellResult {
    let mut result = CellResult {
        task: c.task,
        strategy: c.strategy.clone(),
        shots: c.shots,
        seeds: cfg.seeds.clone(),
        runs: Vec::new(),
        pooled: None,
        mean_iteration_seconds: f64::NAN,
        error: None,
    };
    for &seed in &cfg.seeds {
        match run_seed(cfg, foundation, ds, c, seed, save) {
            Ok((run, _)) => result.runs.push(run),
            Err(e) => {
                result.error = Some(format!("seed {seed}: {e}"));
                return result;
            }
        }
    }
    result.pooled = Some(MetricsReport::pooled(result.runs.iter().map(|r| &r.metrics)));
    let secs: Vec<f64> = result.runs.iter().map(|r| r.mean_iteration_seconds).collect();
    result.mean_iteration_seconds = secs.iter().sum::<f64>() / secs.len() as f64;
    result
}

/// Runs cells on up to `jobs` threads; results keep the input order.
fn run_cells(cfg: &ExperimentConfig, foundation: &Model, cells: &[CellSpec], save: bool) -> Result<Vec<CellResult>> {
    let mut datasets = Vec::new();
    for task in [Task::NearDomain, Task::FarDomain] {
        if cells.iter().any(|c| c.task == task) {
            datasets.push((task, task_dataset(cfg, task)?));
        }
    }
    let ds_for = |t: Task| &datasets.iter().find(|(k, _)| *k == t).expect("dataset loaded").1;
    let jobs = cfg.effective_jobs().min(cells.len()).max(1);
    if jobs == 1 {
        return Ok(cells
            .iter()
            .map(|c| run_cell(cfg, foundation, ds_for(c.task), c, save))
            .collect());
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(c) = cells.get(i) else { break };
                let r = run_cell(cfg, foundation, ds_for(c.task), c, save);
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    Ok(slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub config: ExperimentConfig,
    pub cell: CellResult,
    pub wall_seconds: f64,
}

/// Fine-tunes one (task, strategy, shots) cell over every configured seed.
pub fn cmd_finetune(cfg: &ExperimentConfig) -> Result<FinetuneSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let foundation = foundation_for(cfg, &[cfg.strategy.kind])?;
    let spec = CellSpec {
        task: cfg.task,
        strategy: cfg.strategy.clone(),
        shots: cfg.shots,
    };
    let cell = run_cells(cfg, &foundation, std::slice::from_ref(&spec), cfg.save_checkpoints)?.remove(0);
    if let Some(e) = &cell.error {
        return Err(Error::Strategy(format!("fine-tuning failed: {e}")));
    }
    let summary = FinetuneSummary {
        config: cfg.clone(),
        cell,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let dir = cell_dir(cfg, &spec);
    write_table_csv(
        &dir.join("metrics.csv"),
        &[TableRow::from_cell(&summary.cell, false)],
        false,
    )?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// One row of a result table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub task: Task,
    pub strategy: String,
    pub shots: usize,
    pub gamma: Option<usize>,
    pub seed_count: usize,
    #[serde(deserialize_with = "nan_if_null")]
    pub dsc_mean: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub dsc_std: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub nsd_mean: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub nsd_std: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub iter_duration_mean_s: f64,
    pub all_shot: bool,
    pub dsc_rank: Option<usize>,
    pub nsd_rank: Option<usize>,
    pub error: Option<String>,
}

impl TableRow {
    fn from_cell(c: &CellResult, all_shot: bool) -> Self {
        let (dm, ds, nm, ns) = match &c.pooled {
            Some(p) => (p.dsc_mean, p.dsc_std, p.nsd_mean, p.nsd_std),
            None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
        };
        Self {
            task: c.task,
            strategy: c.strategy.kind.to_string(),
            shots: c.shots,
            gamma: c.strategy.kind.is_per_kernel().then_some(c.strategy.gamma),
            seed_count: c.seeds.len(),
            dsc_mean: dm,
            dsc_std: ds,
            nsd_mean: nm,
            nsd_std: ns,
            iter_duration_mean_s: c.mean_iteration_seconds,
            all_shot,
            dsc_rank: None,
            nsd_rank: None,
            error: c.error.clone(),
        }
    }

    pub fn is_best_dsc(&self) -> bool {
        self.dsc_rank == Some(1)
    }

    pub fn is_second_dsc(&self) -> bool {
        self.dsc_rank == Some(2)
    }
}

const CSV_HEADER: [&str; 10] = [
    "task",
    "strategy",
    "shots",
    "gamma",
    "seed-count",
    "dsc-mean",
    "dsc-std",
    "nsd-mean",
    "nsd-std",
    "iter-duration-mean-s",
];

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// Writes `rows` as CSV. Without timing the duration column is omitted, so
/// the file is reproducible bit for bit.
pub fn write_table_csv(path: &Path, rows: &[TableRow], with_timing: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let cols = if with_timing { &CSV_HEADER[..] } else { &CSV_HEADER[..9] };
    let csv_err = |e: csv::Error| Error::Serde(e.to_string());
    w.write_record(cols).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.task.to_string(),
            if r.all_shot {
                format!("{}-all-shot", r.strategy)
            } else {
                r.strategy.clone()
            },
            r.shots.to_string(),
            r.gamma.map(|g| g.to_string()).unwrap_or_default(),
            r.seed_count.to_string(),
            fmt_f(r.dsc_mean),
            fmt_f(r.dsc_std),
            fmt_f(r.nsd_mean),
            fmt_f(r.nsd_std),
        ];
        if with_timing {
            rec.push(fmt_f(r.iter_duration_mean_s));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Ranks rows within each shots column by mean DSC and mean NSD (1 = best).
/// All-shot reference rows and failed rows are not ranked.
fn rank_columns(rows: &mut [TableRow]) {
    let mut shots: Vec<usize> = rows.iter().map(|r| r.shots).collect();
    shots.sort_unstable();
    shots.dedup();
    for k in shots {
        let idx: Vec<usize> = (0..rows.len())
            .filter(|&i| rows[i].shots == k && !rows[i].all_shot && rows[i].error.is_none())
            .collect();
        for metric in [0, 1] {
            let key = |r: &TableRow| if metric == 0 { r.dsc_mean } else { r.nsd_mean };
            let mut order = idx.clone();
            order.sort_by(|&a, &b| key(&rows[b]).total_cmp(&key(&rows[a])).then(a.cmp(&b)));
            for (rank, &i) in order.iter().enumerate() {
                if metric == 0 {
                    rows[i].dsc_rank = Some(rank + 1);
                } else {
                    rows[i].nsd_rank = Some(rank + 1);
                }
            }
        }
    }
}

/// Stable order (task, strategy, shots) for diffable output.
fn sort_rows(rows: &mut [TableRow]) {
    rows.sort_by(|a, b| {
        (a.task, &a.strategy, a.all_shot, a.shots, a.gamma).cmp(&(b.task, &b.strategy, b.all_shot, b.shots, b.gamma))
    });
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub task: Task,
    pub strategy: String,
    pub shots: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixReport {
    pub config: ExperimentConfig,
    pub manifest: Vec<ManifestEntry>,
    pub rows: Vec<TableRow>,
    pub cells: Vec<CellResult>,
    pub failed: usize,
}

fn manifest_for(cells: &[CellSpec], seeds: &[u64]) -> Vec<ManifestEntry> {
    cells
        .iter()
        .flat_map(|c| {
            seeds.iter().map(move |&seed| ManifestEntry {
                task: c.task,
                strategy: label(&c.strategy),
                shots: c.shots,
                seed,
            })
        })
        .collect()
}

/// The strategy grid of the matrix: every strategy at every shot setting,
/// plus a from-scratch row trained on the full pool.
pub fn matrix_cells(cfg: &ExperimentConfig) -> Vec<(StrategyConfig, usize, bool)> {
    let mut out = Vec::new();
    for k in cfg.shot_grid() {
        for kind in StrategyKind::ALL {
            let s = StrategyConfig {
                kind,
                ..cfg.strategy.clone()
            };
            out.push((s, k, false));
        }
    }
    out.push((
        StrategyConfig::new(StrategyKind::FromScratch),
        cfg.data.pool_size(),
        true,
    ));
    out
}

/// Matrix manifest without running anything.
pub fn plan_matrix(cfg: &ExperimentConfig) -> Vec<ManifestEntry> {
    let cells: Vec<CellSpec> = matrix_cells(cfg)
        .into_iter()
        .map(|(strategy, shots, _)| CellSpec {
            task: cfg.task,
            strategy,
            shots,
        })
        .collect();
    manifest_for(&cells, &cfg.seeds)
}

/// Runs the full strategy × shots × seeds grid. Failing cells are recorded
/// and do not stop the matrix.
pub fn cmd_matrix(cfg: &ExperimentConfig) -> Result<MatrixReport> {
    cfg.validate()?;
    let plan = matrix_cells(cfg);
    let foundation = load_foundation(cfg)?;
    let cells: Vec<CellSpec> = plan
        .iter()
        .map(|(strategy, shots, _)| CellSpec {
            task: cfg.task,
            strategy: strategy.clone(),
            shots: *shots,
        })
        .collect();
    let results = run_cells(cfg, &foundation, &cells, false)?;
    let mut rows: Vec<TableRow> = results
        .iter()
        .zip(&plan)
        .map(|(c, (_, _, all))| TableRow::from_cell(c, *all))
        .collect();
    rank_columns(&mut rows);
    sort_rows(&mut rows);
    let dir = cfg.output_root().join("matrix").join(cfg.task.name());
    write_table_csv(&dir.join("metrics.csv"), &rows, false)?;
    write_table_csv(&dir.join("matrix.csv"), &rows, true)?;
    let report = MatrixReport {
        config: cfg.clone(),
        manifest: manifest_for(&cells, &cfg.seeds),
        failed: results.iter().filter(|c| c.error.is_some()).count(),
        rows,
        cells: results,
    };
    write_json(&dir.join("manifest.json"), &report.manifest)?;
    write_json(&dir.join("matrix.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// `None` for the Full reference.
    pub gamma: Option<usize>,
    pub series: String,
    #[serde(deserialize_with = "nan_if_null")]
    pub dsc_mean: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub dsc_std: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub nsd_mean: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub nsd_std: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: ExperimentConfig,
    pub points: Vec<SweepPoint>,
    /// Whether the largest gamma lands closer to Full than the smallest.
    pub approaches_full: bool,
    pub cells: Vec<CellResult>,
}

/// DGST at every configured gamma plus the Full reference.
pub fn cmd_sweep_gamma(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let foundation = load_foundation(cfg)?;
    let mut cells: Vec<CellSpec> = cfg
        .gammas
        .iter()
        .map(|&g| CellSpec {
            task: cfg.task,
            strategy: StrategyConfig::new(StrategyKind::Dgst).with_gamma(g),
            shots: cfg.shots,
        })
        .collect();
    cells.push(CellSpec {
        task: cfg.task,
        strategy: StrategyConfig::new(StrategyKind::Full),
        shots: cfg.shots,
    });
    let results = run_cells(cfg, &foundation, &cells, false)?;
    if let Some(c) = results.iter().find(|c| c.error.is_some()) {
        return Err(Error::Strategy(format!(
            "{}: {}",
            c.label(),
            c.error.as_deref().unwrap_or("")
        )));
    }
    let points: Vec<SweepPoint> = results
        .iter()
        .map(|c| {
            let p = c.pooled.as_ref().expect("successful cell");
            SweepPoint {
                gamma: c.strategy.kind.is_per_kernel().then_some(c.strategy.gamma),
                series: c.label(),
                dsc_mean: p.dsc_mean,
                dsc_std: p.dsc_std,
                nsd_mean: p.nsd_mean,
                nsd_std: p.nsd_std,
            }
        })
        .collect();
    let full = points.last().expect("full reference").dsc_mean;
    let gammas: Vec<&SweepPoint> = points.iter().filter(|p| p.gamma.is_some()).collect();
    let lo = gammas.iter().min_by_key(|p| p.gamma).expect("non-empty");
    let hi = gammas.iter().max_by_key(|p| p.gamma).expect("non-empty");
    let approaches_full = (hi.dsc_mean - full).abs() <= (lo.dsc_mean - full).abs();

    let dir = cfg
        .output_root()
        .join("sweep")
        .join(cfg.task.name())
        .join(format!("{}-shot", cfg.shots));
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Serde(e.to_string());
    w.write_record(["series", "gamma", "dsc-mean", "dsc-std", "nsd-mean", "nsd-std"])
        .map_err(csv_err)?;
    for p in &points {
        w.write_record([
            p.series.clone(),
            p.gamma.map(|g| g.to_string()).unwrap_or_default(),
            fmt_f(p.dsc_mean),
            fmt_f(p.dsc_std),
            fmt_f(p.nsd_mean),
            fmt_f(p.nsd_std),
        ])
        .map_err(csv_err)?;
    }
    write_atomic(
        &dir.join("gamma.csv"),
        &w.into_inner().map_err(|e| Error::Serde(e.to_string()))?,
    )?;
    let report = SweepReport {
        config: cfg.clone(),
        points,
        approaches_full,
        cells: results,
    };
    write_json(&dir.join("gamma.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: ExperimentConfig,
    pub rows: Vec<TableRow>,
    /// Mean DGST iteration duration over mean Full iteration duration.
    #[serde(deserialize_with = "nan_if_null")]
    pub dgst_full_duration_ratio: f64,
    pub cells: Vec<CellResult>,
}

/// The seven sparsification strategies at the configured shot setting,
/// with iteration durations. Cells always run one at a time.
pub fn cmd_ablation(cfg: &ExperimentConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let foundation = load_foundation(cfg)?;
    let timing = ExperimentConfig {
        timing_exclusive: true,
        ..cfg.clone()
    };
    let cells: Vec<CellSpec> = StrategyKind::ABLATION
        .into_iter()
        .map(|kind| CellSpec {
            task: cfg.task,
            strategy: StrategyConfig {
                kind,
                ..cfg.strategy.clone()
            },
            shots: cfg.shots,
        })
        .collect();
    let results = run_cells(&timing, &foundation, &cells, false)?;
    let rows: Vec<TableRow> = results.iter().map(|c| TableRow::from_cell(c, false)).collect();
    let dur = |k: StrategyKind| {
        results
            .iter()
            .find(|c| c.strategy.kind == k)
            .map_or(f64::NAN, |c| c.mean_iteration_seconds)
    };
    let ratio = dur(StrategyKind::Dgst) / dur(StrategyKind::Full);
    let dir = cfg
        .output_root()
        .join("ablation")
        .join(cfg.task.name())
        .join(format!("{}-shot", cfg.shots));
    write_table_csv(&dir.join("metrics.csv"), &rows, false)?;
    write_table_csv(&dir.join("ablation.csv"), &rows, true)?;
    let report = AblationReport {
        config: cfg.clone(),
        rows,
        dgst_full_duration_ratio: ratio,
        cells: results,
    };
    write_json(&dir.join("ablation.json"), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_grid_arithmetic() {
        let cfg = ExperimentConfig::default();
        let plan = plan_matrix(&cfg);
        let all_shot = plan.iter().filter(|e| e.shots == 96).count();
        assert_eq!(plan.len() - all_shot, 13 * 3 * 5);
        assert_eq!(all_shot, 5);
    }

    #[test]
    fn ranking_skips_reference_and_failures() {
        let row = |s: &str, shots, d: f64, all, err: Option<&str>| TableRow {
            task: Task::FarDomain,
            strategy: s.into(),
            shots,
            gamma: None,
            seed_count: 1,
            dsc_mean: d,
            dsc_std: 0.0,
            nsd_mean: -d,
            nsd_std: 0.0,
            iter_duration_mean_s: 0.0,
            all_shot: all,
            dsc_rank: None,
            nsd_rank: None,
            error: err.map(String::from),
        };
        let mut rows = vec![
            row("a", 5, 0.5, false, None),
            row("b", 5, 0.7, false, None),
            row("c", 5, 0.9, false, Some("boom")),
            row("d", 5, 0.6, false, None),
            row("e", 96, 0.99, true, None),
        ];
        rank_columns(&mut rows);
        let ranks: Vec<_> = rows.iter().map(|r| r.dsc_rank).collect();
        assert_eq!(ranks, vec![Some(3), Some(1), None, Some(2), None]);
        assert_eq!(rows[0].nsd_rank, Some(1));
    }
}
