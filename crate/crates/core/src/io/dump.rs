use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

/// One exported head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadFile {
    pub head: usize,
    pub path: PathBuf,
}

/// JSON index written next to the CSV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpIndex {
    pub layer: String,
    pub axis: String,
    pub span: String,
    /// Lines per head (batch times the extent of the other axis).
    pub lines: usize,
    /// Length `L` of the attended axis; every matrix is `L x L`.
    pub len: usize,
    pub heads: Vec<HeadFile>,
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Writes the eval-mode attention weights of `layer` on `x` under `dir`:
/// one CSV per selected head with columns `line,query,k0..k{L-1}` and an
/// `index.json` carrying the run's config hash and seed.
pub fn dump_attention<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    layer: &str,
    heads: Option<&[usize]>,
    dir: &Path,
    run: Option<(&str, u64)>,
) -> Result<DumpIndex> {
    let plan = model
        .arch
        .attention_layers()
        .into_iter()
        .find(|a| a.name == layer)
        .cloned()
        .ok_or_else(|| {
            Error::Config(format!(
                "no attention layer named {layer}; available: {}",
                model.attention_layer_names().join(", ")
            ))
        })?;
    let weights = model.attention_weights(x, layer)?;
    let selected: Vec<usize> = match heads {
        Some(h) => h.to_vec(),
        None => (0..weights.heads).collect(),
    };
    if let Some(&bad) = selected.iter().find(|&&h| h >= weights.heads) {
        return Err(Error::Config(format!(
            "head {bad} out of range; {layer} has {} heads",
            weights.heads
        )));
    }
    std::fs::create_dir_all(dir)?;
    let stem = layer.replace('.', "_");
    let mut files = Vec::new();
    for &n in &selected {
        let mut csv = String::from("line,query");
        for p in 0..weights.len {
            let _ = write!(csv, ",k{p}");
        }
        csv.push('\n');
        for line in 0..weights.lines {
            for o in 0..weights.len {
                let _ = write!(csv, "{line},{o}");
                for w in weights.row(n, line, o) {
                    let _ = write!(csv, ",{w}");
                }
                csv.push('\n');
            }
        }
        let path = dir.join(format!("{stem}_head{n}.csv"));
        write_atomic(&path, csv.as_bytes())?;
        files.push(HeadFile { head: n, path });
    }
    let index = DumpIndex {
        layer: layer.to_string(),
        axis: plan.axis.name().to_string(),
        span: plan.span.to_string(),
        lines: weights.lines,
        len: weights.len,
        heads: files,
        config_hash: run.map(|r| r.0.to_string()),
        seed: run.map(|r| r.1),
    };
    write_atomic(&dir.join("index.json"), &serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}
