//! Instance pre-processing: confidence filtering and sorting, pasting
//! box-local mask logits onto the full canvas, and greedy box-overlap NMS.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InstanceError {
    #[error("box {0:?} outside {1}x{2} canvas")]
    BoxOutOfCanvas(PixelBox, usize, usize),
    #[error("empty mask")]
    EmptyMask,
}

/// Axis-aligned pixel box; covers columns `x0..x1` and rows `y0..y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        (self.x1 - self.x0) as usize
    }

    pub fn height(&self) -> usize {
        (self.y1 - self.y0) as usize
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x0 as usize && x < self.x1 as usize && y >= self.y0 as usize && y < self.y1 as usize
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let ix0 = self.x0.max(other.x0);
        let iy0 = self.y0.max(other.y0);
        let ix1 = self.x1.min(other.x1);
        let iy1 = self.y1.min(other.y1);
        if ix0 >= ix1 || iy0 >= iy1 {
            return 0.0;
        }
        let inter = ((ix1 - ix0) as usize * (iy1 - iy0) as usize) as f64;
        let union = (self.area() + other.area()) as f64 - inter;
        inter / union
    }
}

/// One raw detection: box-local mask logits plus box, class and confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePrediction {
    pub mask: Array2<f32>,
    pub bbox: PixelBox,
    pub class_id: u32,
    pub confidence: f32,
}

/// An instance after pasting: full-canvas mask logits, zero outside the box,
/// with an id assigned after NMS (0 until then).
#[derive(Debug, Clone, PartialEq)]
pub struct CanvasInstance {
    pub mask: Array2<f32>,
    pub bbox: PixelBox,
    pub class_id: u32,
    pub confidence: f32,
    pub id: u32,
}

/// Drops predictions below `conf_threshold` and sorts the rest by confidence,
/// descending. The sort is stable, so ties keep input order.
pub fn filter_and_sort(
    preds: &[InstancePrediction],
    conf_threshold: f32,
) -> Vec<InstancePrediction> {
    let mut kept: Vec<InstancePrediction> =
        preds.iter().filter(|p| p.confidence >= conf_threshold).cloned().collect();
    kept.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    kept
}

/// Resizes the box-local mask to the box extent with bilinear interpolation
/// (half-pixel centers) and writes it into a zeroed `height x width` canvas.
pub fn paste_mask(
    pred: &InstancePrediction,
    height: usize,
    width: usize,
) -> Result<CanvasInstance, InstanceError> {
    let b = pred.bbox;
    if b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 as usize > width || b.y1 as usize > height {
        return Err(InstanceError::BoxOutOfCanvas(b, height, width));
    }
    let (mh, mw) = pred.mask.dim();
    if mh == 0 || mw == 0 {
        return Err(InstanceError::EmptyMask);
    }
    let mut canvas = Array2::zeros((height, width));
    let (bh, bw) = (b.height(), b.width());
    for oy in 0..bh {
        let sy = sample_coord(oy, bh, mh);
        for ox in 0..bw {
            let sx = sample_coord(ox, bw, mw);
            let v = bilinear(&pred.mask, sy, sx);
            canvas[[b.y0 as usize + oy, b.x0 as usize + ox]] = v;
        }
    }
    Ok(CanvasInstance {
        mask: canvas,
        bbox: b,
        class_id: pred.class_id,
        confidence: pred.confidence,
        id: 0,
    })
}

/// Source coordinate for output pixel `i` when scaling `src` samples to `dst`,
/// aligned on half-pixel centers and clamped to the valid range.
fn sample_coord(i: usize, dst: usize, src: usize) -> f32 {
    let c = (i as f32 + 0.5) * src as f32 / dst as f32 - 0.5;
    c.clamp(0.0, (src - 1) as f32)
}

fn bilinear(mask: &Array2<f32>, y: f32, x: f32) -> f32 {
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(mask.nrows() - 1);
    let x1 = (x0 + 1).min(mask.ncols() - 1);
    let fy = y - y0 as f32;
    let fx = x - x0 as f32;
    let top = mask[[y0, x0]] * (1.0 - fx) + mask[[y0, x1]] * fx;
    let bot = mask[[y1, x0]] * (1.0 - fx) + mask[[y1, x1]] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Greedy box NMS over a confidence-sorted pool: an instance is dropped iff
/// its box IoU with an already kept one exceeds `iou_threshold` (strict).
/// Survivors keep their order and receive ids `1..=N`.
pub fn overlap_nms(instances: Vec<CanvasInstance>, iou_threshold: f64) -> Vec<CanvasInstance> {
    let mut kept: Vec<CanvasInstance> = Vec::new();
    for mut cand in instances {
        if kept.iter().all(|k| k.bbox.iou(&cand.bbox) <= iou_threshold) {
            cand.id = kept.len() as u32 + 1;
            kept.push(cand);
        }
    }
    kept
}
