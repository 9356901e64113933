pub mod dataset;
pub mod edges;
pub mod eval;
pub mod infer;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use epan::model::checkpoint::Checkpoint;
use epan::Network;
use log::warn;

use crate::error::{CliError, CliResult};

/// PNG files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Validation(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| CliError::Validation(format!("{}: {e}", dir.display())))?
            .path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        warn!("no PNG files in {}", dir.display());
    }
    Ok(out)
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads a checkpoint for inference, along with any edge-detector settings
/// stored by `train`.
pub fn load_model(path: &Path) -> CliResult<(Network<f32>, Option<epan::edge::CannyParams>)> {
    let ck = Checkpoint::<f32>::load(path).map_err(CliError::validation)?;
    let canny = ck
        .extra
        .as_ref()
        .and_then(|v| v.get("canny"))
        .and_then(|v| serde_json::from_value(v.clone()).ok());
    let (network, _, _) = ck.into_network().map_err(CliError::validation)?;
    Ok((network, canny))
}

/// Reports per-file failures and turns any into a runtime error.
pub fn finish_batch(failures: Vec<String>, what: &str) -> CliResult<()> {
    if failures.is_empty() {
        return Ok(());
    }
    for f in &failures {
        eprintln!("error: {f}");
    }
    Err(CliError::Runtime(format!("{} of the {what} failed", failures.len())))
}
