//! Export of raw or head-mapped embeddings for external analysis.
//!
//! The output directory is itself a dataset (manifest plus matrix) holding
//! every record the split uses, in manifest order, alongside a copy of the
//! split and a roles sidecar.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    build_split, load_data, represent, AtStage, ExperimentConfig, Result, Stage, SPLIT_FILE,
};
use crate::io::write_atomic;
use crate::trainer::load_checkpoint;

pub const ROLES_FILE: &str = "roles.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum ExportStage {
    Raw,
    Trained { checkpoint: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRoles {
    pub scene_id: String,
    pub view_id: String,
    /// Any of `train`, `db`, `query`.
    pub roles: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub stage: ExportStage,
    pub dim: usize,
    pub record_count: usize,
    pub records: Vec<RecordRoles>,
}

/// Writes the split's records (raw, or through the checkpointed head) to
/// `out_dir` with `split.json` and `roles.json`.
pub fn export_embeddings(
    config: &ExperimentConfig,
    stage: &ExportStage,
    out_dir: &Path,
) -> Result<ExportSummary> {
    let data = load_data(&config.data)?;
    let split = build_split(config, &data)?;
    let head = match stage {
        ExportStage::Raw => None,
        ExportStage::Trained { checkpoint } => {
            Some(load_checkpoint(checkpoint).at(Stage::Export)?.0)
        }
    };

    let mut roles: std::collections::HashMap<(&str, &str), BTreeSet<&'static str>> =
        Default::default();
    for sc in &split.scenes {
        for (views, role) in [
            (&sc.train_views, "train"),
            (&sc.db_views, "db"),
            (&sc.query_views, "query"),
        ] {
            for v in views {
                roles
                    .entry((sc.scene_id.as_str(), v.as_str()))
                    .or_default()
                    .insert(role);
            }
        }
    }
    let rep = represent(&data, head.as_ref(), |s, v| roles.contains_key(&(s, v)))?;
    rep.write_to(out_dir).at(Stage::Export)?;
    split.save(out_dir.join(SPLIT_FILE)).at(Stage::Export)?;

    let mut records = Vec::with_capacity(rep.len());
    for i in 0..rep.len() {
        let (s, v) = rep.key(i).at(Stage::Export)?;
        let order = ["train", "db", "query"];
        let set = &roles[&(s, v)];
        records.push(RecordRoles {
            scene_id: s.to_string(),
            view_id: v.to_string(),
            roles: order
                .iter()
                .filter(|r| set.contains(*r))
                .map(|r| r.to_string())
                .collect(),
        });
    }
    let summary = ExportSummary {
        stage: stage.clone(),
        dim: rep.dim(),
        record_count: rep.len(),
        records,
    };
    let json = serde_json::to_vec_pretty(&summary).at(Stage::Export)?;
    write_atomic(&out_dir.join(ROLES_FILE), &json).at(Stage::Export)?;
    Ok(summary)
}
