use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::synthetic::{generate, SyntheticSpec};
use crate::graph::{load_dataset, Graph, LoadOptions};

/// Environment variable naming the dataset root directory.
pub const DATA_ENV: &str = "LPGNAS_DATA";

/// Built-in generated dataset with Cora's shape and statistics.
pub const CORA_SURROGATE: &str = "cora-surrogate";

/// Built-in small generated dataset for quick runs.
pub const TOY: &str = "toy";

/// Where a graph came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "path")]
pub enum DatasetOrigin {
    Disk(PathBuf),
    Generated,
}

fn builtin(name: &str) -> Option<Result<SyntheticSpec>> {
    let (base, seed) = match name.split_once(':') {
        Some((b, s)) => (b, Some(s)),
        None => (name, None),
    };
    let seed = match seed.map(str::parse::<u64>) {
        None => 0,
        Some(Ok(s)) => s,
        Some(Err(_)) => return Some(Err(Error::Argument(format!("bad generator seed in '{name}'")))),
    };
    match base {
        CORA_SURROGATE => Some(Ok(SyntheticSpec::cora_like(seed))),
        TOY => Some(Ok(SyntheticSpec {
            name: TOY.into(),
            seed,
            ..SyntheticSpec::default()
        })),
        _ => None,
    }
}

/// Opens a dataset by name: `cora-surrogate[:seed]` and `toy[:seed]` are
/// generated in memory, anything else is read from `root/<name>`.
pub fn open_dataset(root: Option<&Path>, name: &str, opts: &LoadOptions) -> Result<(Graph, DatasetOrigin)> {
    if let Some(spec) = builtin(name) {
        let raw = generate(&spec?)?;
        return Ok((Graph::from_raw(&raw, opts)?, DatasetOrigin::Generated));
    }
    let root = root.ok_or_else(|| {
        Error::Argument(format!(
            "dataset '{name}' needs a dataset root (--data or {DATA_ENV})"
        ))
    })?;
    let g = load_dataset(root, name, opts)?;
    Ok((g, DatasetOrigin::Disk(root.join(name))))
}

/// Cora from `root` when present, otherwise the generated surrogate.
pub fn cora_or_surrogate(root: Option<&Path>, opts: &LoadOptions) -> Result<(Graph, DatasetOrigin)> {
    if let Some(r) = root {
        if r.join("cora").join("meta.json").is_file() {
            return open_dataset(Some(r), "cora", opts);
        }
    }
    open_dataset(None, CORA_SURROGATE, opts)
}
