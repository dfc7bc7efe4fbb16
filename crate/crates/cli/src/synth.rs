use std::fs;
use std::path::{Path, PathBuf};

use genni_core::data::write_tsv;
use genni_core::synthetic::{generate, SyntheticSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// What was planted in a generated file, written next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedInfo {
    pub first: String,
    pub second: String,
    pub held_out: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub interactions: usize,
    pub planted: Option<PathBuf>,
}

pub fn planted_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".planted.json");
    out.with_file_name(name)
}

/// Writes the TSV for `spec` to `out`, plus a `.planted.json` sidecar in
/// planted-confounder mode.
pub fn write_synthetic(spec: &SyntheticSpec, out: &Path) -> CliResult<Generated> {
    let data = generate(spec)?;
    let mut buf = Vec::new();
    write_tsv(&data.log, &mut buf).map_err(|e| CliError::io(out, e))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(out, &buf).map_err(|e| CliError::io(out, e))?;
    let planted = match data.pair {
        Some((first, second)) => {
            let info = PlantedInfo {
                first,
                second,
                held_out: data.held_out,
            };
            let path = planted_path(out);
            let json = serde_json::to_string_pretty(&info).expect("planted info serializes");
            fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
            Some(path)
        }
        None => None,
    };
    Ok(Generated {
        interactions: data.log.len(),
        planted,
    })
}
