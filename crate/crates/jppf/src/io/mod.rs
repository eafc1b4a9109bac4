//! File formats: the binary tensor container, lossless label-map PNGs,
//! qualitative rendering, and the scene directory layout used by the CLI.

pub mod labelmap;
pub mod render;
pub mod tensor;

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instance::{InstancePrediction, PixelBox};
use crate::logits::{DenseLogits, LogitsError};
use tensor::{read_tensor, write_tensor, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SceneIoError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Logits(#[from] LogitsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("tensor at {path} has dims {dims:?}, expected {expected}")]
    BadShape { path: PathBuf, dims: Vec<u32>, expected: String },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskRef {
    pub h: u32,
    pub w: u32,
    pub tensor_ref: String,
}

/// One entry of an `instances.json` file; mask tensors live in sibling
/// container files referenced relative to the JSON.
#[derive(Debug, Serialize, Deserialize)]
pub struct InstanceEntry {
    #[serde(rename = "box")]
    pub bbox: [u32; 4],
    pub class_id: u32,
    pub confidence: f32,
    pub mask: MaskRef,
}

/// Writes a dense logit map as a rank-3 f32 tensor (channels first).
pub fn write_logits(logits: &DenseLogits, path: impl AsRef<Path>) -> Result<(), SceneIoError> {
    let v = logits.values();
    let dims = vec![logits.channels() as u32, logits.height() as u32, logits.width() as u32];
    let data = v.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| v.iter().copied().collect());
    write_tensor(&Tensor::F32 { dims, data }, path)?;
    Ok(())
}

/// Reads a dense logit map, binding channels to `channel_meta` (the caller
/// derives the expected channel order from the taxonomy).
pub fn read_logits(
    path: impl AsRef<Path>,
    channel_meta: Vec<u32>,
) -> Result<DenseLogits, SceneIoError> {
    let path = path.as_ref();
    let t = read_tensor(path)?;
    let dims = t.dims().to_vec();
    let Tensor::F32 { data, .. } = t else {
        return Err(SceneIoError::BadShape {
            path: path.to_path_buf(),
            dims,
            expected: "f32 tensor".into(),
        });
    };
    if dims.len() != 3 || dims[0] as usize != channel_meta.len() {
        return Err(SceneIoError::BadShape {
            path: path.to_path_buf(),
            dims,
            expected: format!("{} x H x W", channel_meta.len()),
        });
    }
    let arr = Array3::from_shape_vec(
        (dims[0] as usize, dims[1] as usize, dims[2] as usize),
        data,
    )
    .expect("element count checked by container");
    Ok(DenseLogits::new(arr, channel_meta)?)
}

/// Writes `instances.json` plus one mask tensor per instance under
/// `masks/` in the same directory.
pub fn write_instances(
    dir: impl AsRef<Path>,
    instances: &[InstancePrediction],
) -> Result<(), SceneIoError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut entries = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let rel = format!("masks/inst_{i:03}.jppt");
        let (h, w) = inst.mask.dim();
        write_tensor(
            &Tensor::F32 {
                dims: vec![h as u32, w as u32],
                data: inst.mask.iter().copied().collect(),
            },
            dir.join(&rel),
        )?;
        entries.push(InstanceEntry {
            bbox: [inst.bbox.x0, inst.bbox.y0, inst.bbox.x1, inst.bbox.y1],
            class_id: inst.class_id,
            confidence: inst.confidence,
            mask: MaskRef { h: h as u32, w: w as u32, tensor_ref: rel },
        });
    }
    let json = serde_json::to_string_pretty(&entries)?;
    std::fs::write(dir.join("instances.json"), json)?;
    Ok(())
}

/// Reads an `instances.json` file; mask references resolve relative to it.
pub fn read_instances(json_path: impl AsRef<Path>) -> Result<Vec<InstancePrediction>, SceneIoError> {
    let json_path = json_path.as_ref();
    let base = json_path.parent().unwrap_or(Path::new("."));
    let entries: Vec<InstanceEntry> =
        serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let mask_path = base.join(&e.mask.tensor_ref);
        let t = read_tensor(&mask_path)?;
        let dims = t.dims().to_vec();
        let Tensor::F32 { data, .. } = t else {
            return Err(SceneIoError::BadShape {
                path: mask_path,
                dims,
                expected: "f32 mask".into(),
            });
        };
        if dims != vec![e.mask.h, e.mask.w] {
            return Err(SceneIoError::BadShape {
                path: mask_path,
                dims,
                expected: format!("{} x {}", e.mask.h, e.mask.w),
            });
        }
        let mask =
            Array2::from_shape_vec((e.mask.h as usize, e.mask.w as usize), data).expect("checked");
        out.push(InstancePrediction {
            mask,
            bbox: PixelBox::new(e.bbox[0], e.bbox[1], e.bbox[2], e.bbox[3]),
            class_id: e.class_id,
            confidence: e.confidence,
        });
    }
    Ok(out)
}

/// Reads a rank-2 u32 tensor as a flat map (used for grouped-part-id maps).
pub fn read_u32_map(path: impl AsRef<Path>) -> Result<Array2<u32>, SceneIoError> {
    let path = path.as_ref();
    let t = read_tensor(path)?;
    let dims = t.dims().to_vec();
    let Tensor::U32 { data, .. } = t else {
        return Err(SceneIoError::BadShape {
            path: path.to_path_buf(),
            dims,
            expected: "u32 tensor".into(),
        });
    };
    if dims.len() != 2 {
        return Err(SceneIoError::BadShape {
            path: path.to_path_buf(),
            dims,
            expected: "H x W".into(),
        });
    }
    Ok(Array2::from_shape_vec((dims[0] as usize, dims[1] as usize), data).expect("checked"))
}

/// Writes a rank-2 u32 map.
pub fn write_u32_map(map: &Array2<u32>, path: impl AsRef<Path>) -> Result<(), SceneIoError> {
    let (h, w) = map.dim();
    write_tensor(
        &Tensor::U32 { dims: vec![h as u32, w as u32], data: map.iter().copied().collect() },
        path,
    )?;
    Ok(())
}
