use std::path::{Path, PathBuf};

use genni_core::data::EvalCase;
use genni_core::encoder::{load_checkpoint, Checkpoint};
use genni_core::numcore::Scalar;

use crate::config::{load_config, parse_config, ExperimentConfig, Precision};
use crate::error::{CliError, CliResult};
use crate::runner::{negative_lines, prepare, Manifest, NegativeLine, Prepared, RUNS_DIR};

/// Where the model and its data come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    /// A run recorded in a manifest; `run` defaults to the first one.
    Manifest { path: PathBuf, run: Option<String> },
    Checkpoint { config: PathBuf, checkpoint: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct InspectRequest {
    pub source: ModelSource,
    /// Users to inspect by id; when empty the first `count` test users are used.
    pub users: Vec<String>,
    pub count: usize,
    /// Defaults to the α the checkpoint was trained with at its best epoch.
    pub alpha: Option<f64>,
    pub top_n: usize,
}

fn resolve(source: &ModelSource) -> CliResult<(ExperimentConfig, PathBuf)> {
    match source {
        ModelSource::Manifest { path, run } => {
            let manifest = Manifest::load(path)?;
            let cfg = parse_config(&manifest.config, &format!("{} (embedded config)", path.display()))?;
            let name = match run {
                Some(r) => manifest
                    .run(r)
                    .ok_or_else(|| CliError::Config(format!("no run {r} in {}", path.display())))?
                    .name
                    .clone(),
                None => manifest
                    .runs
                    .first()
                    .ok_or_else(|| CliError::Config(format!("{} lists no runs", path.display())))?
                    .name
                    .clone(),
            };
            let dir = path.parent().unwrap_or(Path::new("."));
            Ok((cfg, dir.join(RUNS_DIR).join(name).join("best.ckpt")))
        }
        ModelSource::Checkpoint { config, checkpoint } => Ok((load_config(config)?, checkpoint.clone())),
    }
}

fn cases<'a>(data: &'a Prepared, users: &[String], count: usize) -> CliResult<Vec<&'a EvalCase>> {
    if users.is_empty() {
        return Ok(data.split.test.iter().take(count).collect());
    }
    users
        .iter()
        .map(|u| {
            data.split
                .test
                .iter()
                .find(|c| data.sequences.users[c.user] == *u)
                .ok_or_else(|| CliError::Config(format!("user {u} has no test case after filtering")))
        })
        .collect()
}

fn inspect_with<S: Scalar>(req: &InspectRequest, data: &Prepared, checkpoint: &Path) -> CliResult<Vec<NegativeLine>> {
    let Checkpoint { params, metadata } = load_checkpoint::<S>(checkpoint)?;
    let vocab = &data.sequences.vocab;
    if params.config.n_items != vocab.len() {
        return Err(CliError::Config(format!(
            "checkpoint has {} items but the data has {}",
            params.config.n_items,
            vocab.len()
        )));
    }
    let meta: serde_json::Value = serde_json::from_str(&metadata).unwrap_or_default();
    if let Some(items) = meta.get("items").and_then(|v| v.as_array()) {
        let same = items.len() == vocab.len() && items.iter().zip(vocab.item_ids()).all(|(a, b)| a.as_str() == Some(b));
        if !same {
            return Err(CliError::Config("checkpoint vocabulary does not match the data".into()));
        }
    }
    let alpha = req
        .alpha
        .or_else(|| meta.get("final_alpha").and_then(|v| v.as_f64()))
        .unwrap_or(1.0);
    let chosen = cases(data, &req.users, req.count)?;
    negative_lines(&params, &chosen, 0, alpha, req.top_n, &data.sequences)
}

/// Most probable negatives for the test contexts of the requested users.
pub fn inspect_negatives(req: &InspectRequest) -> CliResult<Vec<NegativeLine>> {
    if req.top_n == 0 {
        return Err(CliError::Config("top-n must be >= 1".into()));
    }
    let (cfg, checkpoint) = resolve(&req.source)?;
    let data = prepare(&cfg.data, cfg.train.encoder.max_len)?;
    match cfg.dtype {
        Precision::F32 => inspect_with::<f32>(req, &data, &checkpoint),
        Precision::F64 => inspect_with::<f64>(req, &data, &checkpoint),
    }
}
