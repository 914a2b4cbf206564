//! Task vectors (fine-tuned minus base weights) and the per-layer grouping of
//! parameter names.

use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Combine;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub task_id: String,
    pub deltas: Checkpoint,
}

pub fn compute_task_vector(
    fine: &Checkpoint,
    base: &Checkpoint,
    task_id: &str,
) -> Result<TaskVector> {
    base.check_compatible(fine)?;
    let deltas = fine.try_map(|name, f| f.combine(base.require(name)?, Combine::Sub, 1.0))?;
    Ok(TaskVector {
        task_id: task_id.to_string(),
        deltas,
    })
}

impl TaskVector {
    /// Container form, tagged with the task id and the digest of the base
    /// checkpoint file it was taken against.
    pub fn to_checkpoint(&self, base_sha: &str) -> Checkpoint {
        let mut ckpt = self.deltas.clone();
        ckpt.set_metadata("kind", "task_vector");
        ckpt.set_metadata("task_id", self.task_id.clone());
        ckpt.set_metadata("base_sha", base_sha);
        ckpt
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let meta = ckpt.metadata();
        if meta.get("kind").map(String::as_str) != Some("task_vector") {
            return Err(Error::InvalidArgument(
                "checkpoint metadata does not mark a task vector".into(),
            ));
        }
        let task_id = meta
            .get("task_id")
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("task vector without task_id".into()))?;
        Ok(Self {
            task_id,
            deltas: ckpt.with_metadata(BTreeMap::new()),
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.deltas.num_parameters()
    }
}

/// Parameter names grouped by layer; `layers[l - 1]` holds layer `l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPartition {
    layers: Vec<Vec<String>>,
}

impl LayerPartition {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Vec<String>] {
        &self.layers
    }

    /// 0-based layer slot of a parameter name.
    pub fn layer_of(&self, name: &str) -> Option<usize> {
        self.layers
            .iter()
            .position(|group| group.iter().any(|n| n == name))
    }
}

fn parse_layer_name(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("layer")?;
    let (index, kind) = rest.split_once('.')?;
    if !matches!(kind, "weight" | "bias") || index.is_empty() || index.starts_with('0') {
        return None;
    }
    if !index.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    index.parse().ok()
}

pub fn layer_partition(ckpt: &Checkpoint) -> Result<LayerPartition> {
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for name in ckpt.names() {
        let l =
            parse_layer_name(name).ok_or_else(|| Error::NamingConvention { name: name.clone() })?;
        groups.entry(l).or_default().push(name.clone());
    }
    let count = groups.keys().next_back().copied().unwrap_or(0);
    if count == 0 {
        return Err(Error::Empty("checkpoint has no parameters"));
    }
    if let Some(index) = (1..=count).find(|l| !groups.contains_key(l)) {
        return Err(Error::MissingLayer { index, count });
    }
    Ok(LayerPartition {
        layers: groups.into_values().collect(),
    })
}
