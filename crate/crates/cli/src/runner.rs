//! Experiment execution and the on-disk layout of its outputs:
//!
//! ```text
//! <out>/manifest.json
//! <out>/runs/run-0000/cell.json       sweep coordinates of the run
//! <out>/runs/run-0000/metrics.csv     one row per epoch (validation)
//! <out>/runs/run-0000/test.csv        one row, best checkpoint on test
//! <out>/runs/run-0000/best.ckpt
//! <out>/runs/run-0000/negatives.jsonl only with [diagnostics]
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use genni_core::data::{
    build_sequences, five_core_filter, parse_tsv, split_leave_one_out, write_tsv, EvalCase, Sequences, Split,
};
use genni_core::encoder::{final_states, save_checkpoint, EncoderParams};
use genni_core::evaluation::evaluate;
use genni_core::numcore::Scalar;
use genni_core::sampler::inspect_informative_negatives;
use genni_core::synthetic::generate;
use genni_core::training::{train_with, EpochMetrics, TrainData, METRICS_HEADER};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{parse_config, Cell, DataSource, ExperimentConfig, Precision, MAX_SWEEP_RUNS};
use crate::error::{CliError, CliResult};
use crate::sha256_hex;

pub const MANIFEST_FORMAT: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUNS_DIR: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRecord {
    pub source: String,
    /// SHA-256 of the interaction TSV (generated text for synthetic data).
    pub sha256: String,
    pub interactions: usize,
    pub malformed_lines: usize,
    pub duplicate_lines: usize,
    pub kept_interactions: usize,
    pub users: usize,
    pub items: usize,
    pub mean_len_before_truncation: f64,
    pub mean_len_after_truncation: f64,
    pub excluded_users: usize,
}

/// Filtered, indexed and split data shared by every run of a sweep.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sequences: Sequences,
    pub split: Split,
    /// Training-split interaction counts by item index.
    pub popularity: Vec<u64>,
    pub record: DataRecord,
}

pub fn prepare(source: &DataSource, max_len: usize) -> CliResult<Prepared> {
    let (bytes, label) = match (&source.path, &source.synthetic) {
        (Some(path), None) => (fs::read(path).map_err(|e| CliError::io(path, e))?, path.display().to_string()),
        (None, Some(spec)) => {
            let data = generate(spec)?;
            let mut buf = Vec::new();
            write_tsv(&data.log, &mut buf).map_err(|e| CliError::io("<synthetic>", e))?;
            (buf, "synthetic".to_string())
        }
        _ => return Err(CliError::Config("[data] needs exactly one of `path` or `synthetic`".into())),
    };
    let (log, report) = parse_tsv(bytes.as_slice())?;
    let filtered = five_core_filter(&log)?;
    let sequences = build_sequences(&filtered, max_len)?;
    let split = split_leave_one_out(&sequences.items);
    let mut popularity = vec![0u64; sequences.vocab.len() + 1];
    for s in &split.train {
        for &i in s {
            popularity[i as usize] += 1;
        }
    }
    let record = DataRecord {
        source: label,
        sha256: sha256_hex(&bytes),
        interactions: log.len(),
        malformed_lines: report.malformed,
        duplicate_lines: report.duplicates,
        kept_interactions: filtered.len(),
        users: sequences.users.len(),
        items: sequences.vocab.len(),
        mean_len_before_truncation: sequences.lengths.mean_before_truncation,
        mean_len_after_truncation: sequences.lengths.mean_after_truncation,
        excluded_users: split.excluded,
    };
    Ok(Prepared {
        sequences,
        split,
        popularity,
        record,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub users: usize,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub cell: Cell,
    pub best_epoch: Option<usize>,
    /// Validation NDCG@10 at the best epoch.
    pub best_valid_ndcg10: f64,
    pub final_alpha: f64,
    /// Wall-clock seconds per epoch, as written to `metrics.csv`.
    pub epoch_seconds: Vec<f64>,
    pub test_seconds: f64,
    /// SHA-256 of `metrics.csv` with the seconds column zeroed.
    pub metrics_sha256: String,
    pub test: TestSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub code_version: String,
    /// Effective config (after command-line overrides) as TOML.
    pub config: String,
    pub config_sha256: String,
    pub threads: usize,
    pub seeds: Vec<u64>,
    pub data: DataRecord,
    pub runs: Vec<RunRecord>,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    /// Manifest this run reproduced, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reproduces: Option<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> CliResult<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn run(&self, name: &str) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.name == name)
    }
}

pub fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub threads: usize,
    pub allow_large_sweep: bool,
    /// Print progress lines to stderr.
    pub verbose: bool,
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(path, e))
}

fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Prepared,
    out: &'a Path,
    config_sha: &'a str,
    verbose: bool,
}

/// Trains one sweep cell and writes its directory. With `replay`, the
/// wall-clock columns are copied from the recorded run and everything
/// else must hash to what was recorded.
fn run_cell<S: Scalar>(ctx: &Context, cell: &Cell, replay: Option<&RunRecord>) -> CliResult<RunRecord> {
    let name = cell.name();
    let dir = ctx.out.join(RUNS_DIR).join(&name);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let train_cfg = cell.apply(&ctx.cfg.train);
    let split = &ctx.data.split;
    let data = TrainData {
        train: &split.train,
        valid: &split.valid,
        n_items: ctx.data.sequences.vocab.len(),
        popularity: &ctx.data.popularity,
    };
    let probes: Vec<&EvalCase> = match &ctx.cfg.diagnostics {
        Some(d) => split.test.iter().take(d.probe_users).collect(),
        None => Vec::new(),
    };
    let top_n = ctx.cfg.diagnostics.as_ref().map_or(0, |d| d.top_n);
    let mut diagnostics = String::new();
    let mut probe_error = None;
    let outcome = train_with::<S>(&train_cfg, &data, &mut |row, params| {
        if ctx.verbose {
            eprintln!(
                "{name} epoch {} loss {:.5} alpha {:.3} beta {:.4} ndcg@10 {:.4} ({:.2}s)",
                row.epoch, row.loss, row.alpha, row.beta, row.ndcg10, row.seconds
            );
        }
        if let Err(e) = probe_lines(params, &probes, row, top_n, &ctx.data.sequences, &mut diagnostics) {
            probe_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = probe_error {
        return Err(e);
    }

    let mut rows = outcome.metrics.epochs.clone();
    let timeless: Vec<EpochMetrics> = rows.iter().map(EpochMetrics::without_time).collect();
    let metrics_sha256 = sha256_hex(metrics_csv(&timeless).as_bytes());
    let start = Instant::now();
    let test = evaluate(&outcome.best, &split.test, &[5, 10], train_cfg.filter_seen)?;
    let mut test_seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    if let Some(rec) = replay {
        if rec.metrics_sha256 != metrics_sha256 || rec.epoch_seconds.len() != rows.len() {
            return Err(CliError::Mismatch(format!("{name}: metrics differ from the manifest")));
        }
        for (row, &s) in rows.iter_mut().zip(&rec.epoch_seconds) {
            row.seconds = s;
        }
        test_seconds = rec.test_seconds;
    }
    write_file(&dir.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;

    let best_row = outcome.metrics.best().cloned();
    let test_row = EpochMetrics {
        epoch: outcome.metrics.best_epoch.unwrap_or(0),
        loss: best_row.as_ref().map_or(f64::NAN, |r| r.loss),
        alpha: best_row.as_ref().map_or(train_cfg.sampler.alpha, |r| r.alpha),
        beta: best_row.as_ref().map_or(train_cfg.sampler.beta, |r| r.beta),
        hr5: test.hr_at(5),
        hr10: test.hr_at(10),
        ndcg5: test.ndcg_at(5),
        ndcg10: test.ndcg_at(10),
        seconds: test_seconds,
    };
    write_file(&dir.join("test.csv"), metrics_csv(&[test_row]).as_bytes())?;

    let cell_json = serde_json::to_string_pretty(cell).expect("cell serializes");
    write_file(&dir.join("cell.json"), cell_json.as_bytes())?;
    let meta = serde_json::json!({
        "run": name,
        "config_sha256": ctx.config_sha,
        "best_epoch": outcome.metrics.best_epoch,
        "final_alpha": outcome.final_alpha,
        "items": ctx.data.sequences.vocab.item_ids(),
    });
    save_checkpoint(&outcome.best, &meta.to_string(), dir.join("best.ckpt"))?;
    if ctx.cfg.diagnostics.is_some() {
        write_file(&dir.join("negatives.jsonl"), diagnostics.as_bytes())?;
    }

    Ok(RunRecord {
        name,
        cell: cell.clone(),
        best_epoch: outcome.metrics.best_epoch,
        best_valid_ndcg10: best_row.as_ref().map_or(f64::NAN, |r| r.ndcg10),
        final_alpha: outcome.final_alpha,
        epoch_seconds: rows.iter().map(|r| r.seconds).collect(),
        test_seconds,
        metrics_sha256,
        test: TestSummary {
            users: test.n_users,
            hr5: test.hr_at(5),
            hr10: test.hr_at(10),
            ndcg5: test.ndcg_at(5),
            ndcg10: test.ndcg_at(10),
        },
    })
}

/// One line of `negatives.jsonl`: the most probable negatives for a probe
/// user's test context, with item ids in place of indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeLine {
    pub step: u64,
    pub position: usize,
    pub user: String,
    pub target: String,
    pub alpha: f64,
    pub topn: Vec<(String, f64)>,
}

pub fn negative_lines<S: Scalar>(
    params: &EncoderParams<S>,
    cases: &[&EvalCase],
    step: u64,
    alpha: f64,
    top_n: usize,
    sequences: &Sequences,
) -> CliResult<Vec<NegativeLine>> {
    if cases.is_empty() {
        return Ok(Vec::new());
    }
    let d = params.config.dim;
    let contexts: Vec<&[u32]> = cases.iter().map(|c| c.context.as_slice()).collect();
    let states = final_states(params, &contexts)?;
    let vocab = &sequences.vocab;
    cases
        .iter()
        .enumerate()
        .map(|(p, case)| {
            let h = &states[p * d..(p + 1) * d];
            let top = inspect_informative_negatives(h, &params.item_embeddings, alpha, Some(case.target), top_n)?;
            Ok(NegativeLine {
                step,
                position: p,
                user: sequences.users[case.user].clone(),
                target: vocab.item_id(case.target).to_string(),
                alpha,
                topn: top.into_iter().map(|(i, prob)| (vocab.item_id(i).to_string(), prob)).collect(),
            })
        })
        .collect()
}

fn probe_lines<S: Scalar>(
    params: &EncoderParams<S>,
    probes: &[&EvalCase],
    row: &EpochMetrics,
    top_n: usize,
    sequences: &Sequences,
    out: &mut String,
) -> CliResult<()> {
    for line in negative_lines(params, probes, row.epoch as u64, row.alpha, top_n, sequences)? {
        out.push_str(&serde_json::to_string(&line).expect("line serializes"));
        out.push('\n');
    }
    Ok(())
}

fn execute(cfg: &ExperimentConfig, out: &Path, opts: &RunOptions, replay: Option<&Manifest>) -> CliResult<Manifest> {
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let cells = cfg.sweep.cells(&cfg.train);
    if cells.len() > MAX_SWEEP_RUNS && !opts.allow_large_sweep {
        return Err(CliError::Config(format!(
            "sweep has {} runs, more than {MAX_SWEEP_RUNS}; pass --allow-large-sweep to run it anyway",
            cells.len()
        )));
    }
    let config = cfg.to_toml()?;
    let config_sha = sha256_hex(config.as_bytes());
    let data = prepare(&cfg.data, cfg.train.encoder.max_len)?;
    if let Some(m) = replay {
        if m.data.sha256 != data.record.sha256 {
            return Err(CliError::Mismatch("input data differs from the manifest".into()));
        }
        if m.runs.len() != cells.len() {
            return Err(CliError::Mismatch("manifest and config disagree on the run set".into()));
        }
    }
    fs::create_dir_all(out.join(RUNS_DIR)).map_err(|e| CliError::io(out, e))?;
    let ctx = Context {
        cfg,
        data: &data,
        out,
        config_sha: &config_sha,
        verbose: opts.verbose,
    };
    let runs: Vec<RunRecord> = cells
        .par_iter()
        .with_max_len(1)
        .map(|cell| {
            let rec = replay.map(|m| m.run(&cell.name()).ok_or_else(|| {
                CliError::Mismatch(format!("{} is missing from the manifest", cell.name()))
            }));
            let rec = rec.transpose()?;
            match cfg.dtype {
                Precision::F32 => run_cell::<f32>(&ctx, cell, rec),
                Precision::F64 => run_cell::<f64>(&ctx, cell, rec),
            }
        })
        .collect::<CliResult<_>>()?;
    let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let manifest = Manifest {
        format: MANIFEST_FORMAT,
        code_version: code_version(),
        config,
        config_sha256: config_sha,
        threads: opts.threads.max(1),
        seeds,
        data: data.record.clone(),
        runs,
        started_unix,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        reproduces: replay.map(|m| m.config_sha256.clone()),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&out.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

/// Runs every cell of the sweep and writes outputs under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, opts: &RunOptions) -> CliResult<Manifest> {
    cfg.validate()?;
    execute(cfg, out, opts, None)
}

/// Repeats the experiment recorded in a manifest into `out`, failing if any
/// run's metrics differ from the recorded ones.
pub fn rerun_manifest(manifest_path: &Path, out: &Path, opts: &RunOptions) -> CliResult<Manifest> {
    let manifest = Manifest::load(manifest_path)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(CliError::Config(format!("unsupported manifest format {}", manifest.format)));
    }
    if sha256_hex(manifest.config.as_bytes()) != manifest.config_sha256 {
        return Err(CliError::Mismatch("embedded config does not match its hash".into()));
    }
    let cfg = parse_config(&manifest.config, &format!("{} (embedded config)", manifest_path.display()))?;
    execute(&cfg, out, opts, Some(&manifest))
}

/// Where `run` writes when neither `--out` nor the config names a directory.
pub fn default_out_dir() -> PathBuf {
    PathBuf::from("genni-out")
}
