//! Single-file training checkpoints: a safetensors archive whose metadata
//! carries the config echo, step counter and best-metric snapshot.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const FORMAT: &str = "paaa-checkpoint";
pub const VERSION: u32 = 1;
const META_KEY: &str = "paaa";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestMetric {
    pub step: u64,
    pub iou: f64,
    pub ausde: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    /// Completed training steps.
    pub step: u64,
    pub config: RunConfig,
    pub best: Option<BestMetric>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(n, t)| {
                let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (n.clone(), raw, t.shape().to_vec())
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(n, raw, shape)| {
                let view = TensorView::new(Dtype::F32, shape.clone(), raw)
                    .map_err(|e| Error::Checkpoint(format!("tensor {n}: {e}")))?;
                Ok((n.clone(), view))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = serde_json::to_string(&self.meta).expect("metadata serializes");
        let info = HashMap::from([(META_KEY.to_string(), meta)]);
        let buf = safetensors::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, buf).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| bad("not a training checkpoint (no metadata)".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json).map_err(|e| bad(e.to_string()))?;
        if meta.format != FORMAT || meta.version != VERSION {
            return Err(bad(format!("unsupported format {} v{}", meta.format, meta.version)));
        }
        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut names: Vec<String> = st.names().into_iter().map(|s| s.to_string()).collect();
        names.sort();
        let mut tensors = Vec::with_capacity(names.len());
        for name in names {
            let view = st.tensor(&name).map_err(|e| bad(e.to_string()))?;
            let shape: [usize; 4] = view
                .shape()
                .try_into()
                .map_err(|_| bad(format!("tensor {name} is not 4-dimensional")))?;
            if view.dtype() != Dtype::F32 {
                return Err(bad(format!("tensor {name} is not f32")));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::from_vec(shape, data)));
        }
        Ok(Checkpoint { meta, tensors })
    }
}
