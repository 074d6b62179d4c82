//! Per-fold parameter snapshots as JSON.

use std::collections::BTreeMap;
use std::path::Path;

use hdmoe_core::rng;
use hdmoe_core::trainer::TrainedFold;
use hdmoe_core::{BinEdges, Matrix, ModelConfig, HDMoE};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::{read_file, write_file};

pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tensor {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub fold: usize,
    pub bin_edges: Vec<f64>,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_fold(t: &TrainedFold) -> Self {
        let params = t
            .model
            .store
            .iter()
            .map(|(name, m)| {
                let tensor = Tensor {
                    shape: [m.rows(), m.cols()],
                    data: m.as_slice().to_vec(),
                };
                (name.to_owned(), tensor)
            })
            .collect();
        Checkpoint {
            version: VERSION,
            fold: t.fold,
            bin_edges: t.bin_edges.edges().to_vec(),
            params,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(&read_file(path)?).map_err(|e| CliError::parse(path, e.to_string()))?;
        if ck.version != VERSION {
            return Err(CliError::parse(
                path,
                format!("checkpoint version {} (expected {VERSION})", ck.version),
            ));
        }
        Ok(ck)
    }

    /// Rebuild the fold; fails when any parameter's shape disagrees with `config`.
    pub fn into_fold(self, config: &ModelConfig) -> Result<TrainedFold> {
        let mut model = HDMoE::new(config.clone(), &mut rng::seeded(0))?;
        let mut values = BTreeMap::new();
        for (name, t) in self.params {
            let m = Matrix::new(t.shape[0], t.shape[1], t.data)
                .map_err(|e| CliError::config(format!("checkpoint parameter {name}: {e}")))?;
            values.insert(name, m);
        }
        model
            .load_params(&values)
            .map_err(|e| CliError::config(format!("checkpoint incompatible with config: {e}")))?;
        let bin_edges = BinEdges::new(self.bin_edges)?;
        if bin_edges.num_bins() != config.num_bins {
            return Err(CliError::config(format!(
                "checkpoint has {} bins, config num_bins = {}",
                bin_edges.num_bins(),
                config.num_bins
            )));
        }
        Ok(TrainedFold {
            fold: self.fold,
            model,
            bin_edges,
            curve: Vec::new(),
        })
    }
}
