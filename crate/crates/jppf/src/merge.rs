//! The uni-directional top-down baseline: trust the panoptic map, overlay the
//! part prediction, and assign void wherever the two disagree.

use ndarray::Array2;
use thiserror::Error;

use crate::label::{decode_label, encode_label, PanopticPartLabel, PanopticPartMap};
use crate::taxonomy::ClassTaxonomy;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MergeError {
    #[error("shape mismatch: panoptic {0}x{1} vs part map {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
}

/// A per-pixel `(s, id)` map with void, stored in the shared packed encoding
/// with the part byte zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticMap {
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl PanopticMap {
    pub fn new_void(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    /// Projects a panoptic-part map onto `(s, id)` by dropping the part byte.
    pub fn from_part_map(map: &PanopticPartMap) -> Self {
        let data = map.encoded().iter().map(|&v| v & !0xffu32).collect();
        Self { height: map.height(), width: map.width(), data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn encoded(&self) -> &[u32] {
        &self.data
    }

    /// `None` for void pixels.
    pub fn get(&self, y: usize, x: usize) -> Option<(u32, u32)> {
        match decode_label(self.data[y * self.width + x]) {
            PanopticPartLabel::Void => None,
            PanopticPartLabel::Segment { semantic, instance, .. } => Some((semantic, instance)),
        }
    }

    pub fn set(&mut self, y: usize, x: usize, semantic: u32, instance: u32) {
        let v = encode_label(PanopticPartLabel::segment(semantic, instance, 0))
            .expect("panoptic label fits encoding");
        self.data[y * self.width + x] = v;
    }

    pub fn set_void(&mut self, y: usize, x: usize) {
        self.data[y * self.width + x] = 0;
    }

    pub fn density(&self) -> f64 {
        if self.data.is_empty() {
            return 1.0;
        }
        self.data.iter().filter(|&&v| v != 0).count() as f64 / self.data.len() as f64
    }
}

/// Combines a panoptic map with a grouped-part-id map.
///
/// Non-partitionable pixels pass through with no part. For partitionable
/// pixels the part group must be one the class actually uses; the background
/// group or a foreign group counts as a conflict and yields void. The
/// `(s, id)` of every non-void output pixel is exactly the panoptic input's.
pub fn merge_top_down(
    panoptic: &PanopticMap,
    part_groups: &Array2<u32>,
    taxonomy: &ClassTaxonomy,
) -> Result<PanopticPartMap, MergeError> {
    let (ph, pw) = (panoptic.height(), panoptic.width());
    let (gh, gw) = part_groups.dim();
    if (ph, pw) != (gh, gw) {
        return Err(MergeError::ShapeMismatch(ph, pw, gh, gw));
    }
    let mut out = PanopticPartMap::new_void(ph, pw);
    for y in 0..ph {
        for x in 0..pw {
            let Some((semantic, instance)) = panoptic.get(y, x) else {
                continue;
            };
            let label = if !taxonomy.is_partitionable(semantic) {
                Some(PanopticPartLabel::segment(semantic, instance, 0))
            } else {
                let group = part_groups[[y, x]];
                taxonomy
                    .ungroup_part(semantic, group)
                    .ok()
                    .map(|p| PanopticPartLabel::segment(semantic, instance, p))
            };
            if let Some(l) = label {
                out.set(y, x, l).expect("merged label fits encoding");
            }
        }
    }
    Ok(out)
}
