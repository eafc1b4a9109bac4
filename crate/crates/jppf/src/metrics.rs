//! Evaluation: mIoU, PQ-style segment matching, PartPQ and prediction
//! density.
//!
//! Segments are maximal `(semantic, instance)` groups: one segment per stuff
//! class and one per thing instance. A prediction matches a ground-truth
//! segment of the same class iff their IoU exceeds 0.5, which makes the
//! matching one-to-one. Ground-truth void pixels are excluded from every
//! denominator, and unmatched predicted segments lying mostly (> 50%) on
//! void are discarded rather than counted as false positives.

use std::collections::{BTreeMap, HashMap, HashSet};

use ndarray::Array2;
use thiserror::Error;

use crate::label::{PanopticPartLabel, PanopticPartMap};
use crate::taxonomy::ClassTaxonomy;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
}

/// Sentinel class value for void pixels in flat class maps.
pub const VOID_CLASS: u32 = u32::MAX;

/// Per-pixel semantic class of a panoptic-part map; void becomes
/// [`VOID_CLASS`].
pub fn semantic_map(map: &PanopticPartMap) -> Array2<u32> {
    let (h, w) = map.shape();
    let data = map
        .labels()
        .map(|l| match l {
            PanopticPartLabel::Void => VOID_CLASS,
            PanopticPartLabel::Segment { semantic, .. } => semantic,
        })
        .collect();
    Array2::from_shape_vec((h, w), data).expect("shape matches map")
}

/// Per-pixel grouped part id of a panoptic-part map: class-specific parts
/// are mapped back to their group, "no part" becomes the background group,
/// void becomes [`VOID_CLASS`].
pub fn part_group_map(map: &PanopticPartMap, taxonomy: &ClassTaxonomy) -> Array2<u32> {
    let (h, w) = map.shape();
    let bg = taxonomy.background_group();
    let data = map
        .labels()
        .map(|l| match l {
            PanopticPartLabel::Void => VOID_CLASS,
            PanopticPartLabel::Segment { part: 0, .. } => bg,
            PanopticPartLabel::Segment { semantic, part, .. } => {
                taxonomy.regroup_part(semantic, part).unwrap_or(bg)
            }
        })
        .collect();
    Array2::from_shape_vec((h, w), data).expect("shape matches map")
}

#[derive(Debug, Clone)]
pub struct MiouResult {
    /// Per class: `None` when the class occurs in neither map.
    pub per_class: Vec<(u32, Option<f64>)>,
    pub mean: f64,
}

/// Intersection-over-union per class plus the mean over classes present in at
/// least one of the maps. Pixels whose ground truth is [`VOID_CLASS`] are
/// ignored entirely.
pub fn miou(
    pred: &Array2<u32>,
    gt: &Array2<u32>,
    classes: &[u32],
) -> Result<MiouResult, MetricsError> {
    if pred.dim() != gt.dim() {
        let (ph, pw) = pred.dim();
        let (gh, gw) = gt.dim();
        return Err(MetricsError::ShapeMismatch(ph, pw, gh, gw));
    }
    let mut inter: HashMap<u32, usize> = HashMap::new();
    let mut pred_count: HashMap<u32, usize> = HashMap::new();
    let mut gt_count: HashMap<u32, usize> = HashMap::new();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if g == VOID_CLASS {
            continue;
        }
        *gt_count.entry(g).or_default() += 1;
        *pred_count.entry(p).or_default() += 1;
        if p == g {
            *inter.entry(p).or_default() += 1;
        }
    }
    let mut per_class = Vec::with_capacity(classes.len());
    let mut sum = 0.0;
    let mut n = 0usize;
    for &c in classes {
        let i = inter.get(&c).copied().unwrap_or(0);
        let union = pred_count.get(&c).copied().unwrap_or(0)
            + gt_count.get(&c).copied().unwrap_or(0)
            - i;
        if union == 0 {
            per_class.push((c, None));
        } else {
            let iou = i as f64 / union as f64;
            per_class.push((c, Some(iou)));
            sum += iou;
            n += 1;
        }
    }
    let mean = if n == 0 { 0.0 } else { sum / n as f64 };
    Ok(MiouResult { per_class, mean })
}

/// A `(semantic, instance)` segment identity; stuff segments use instance 0.
pub type SegmentKey = (u32, u32);

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPair {
    pub pred: SegmentKey,
    pub gt: SegmentKey,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassMatches {
    pub tp: Vec<MatchedPair>,
    pub fp: Vec<SegmentKey>,
    pub fn_: Vec<SegmentKey>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentMatchResult {
    pub per_class: BTreeMap<u32, ClassMatches>,
}

fn segment_key(label: PanopticPartLabel) -> Option<SegmentKey> {
    match label {
        PanopticPartLabel::Void => None,
        PanopticPartLabel::Segment { semantic, instance, .. } => Some((semantic, instance)),
    }
}

pub fn match_segments(
    pred: &PanopticPartMap,
    gt: &PanopticPartMap,
) -> Result<SegmentMatchResult, MetricsError> {
    if pred.shape() != gt.shape() {
        let (ph, pw) = pred.shape();
        let (gh, gw) = gt.shape();
        return Err(MetricsError::ShapeMismatch(ph, pw, gh, gw));
    }
    let mut pred_area: HashMap<SegmentKey, usize> = HashMap::new();
    let mut gt_area: HashMap<SegmentKey, usize> = HashMap::new();
    let mut inter: HashMap<(SegmentKey, SegmentKey), usize> = HashMap::new();
    let mut pred_on_void: HashMap<SegmentKey, usize> = HashMap::new();
    for (pl, gl) in pred.labels().zip(gt.labels()) {
        let pk = segment_key(pl);
        let gk = segment_key(gl);
        if let Some(p) = pk {
            *pred_area.entry(p).or_default() += 1;
            if gk.is_none() {
                *pred_on_void.entry(p).or_default() += 1;
            }
        }
        if let Some(g) = gk {
            *gt_area.entry(g).or_default() += 1;
        }
        if let (Some(p), Some(g)) = (pk, gk) {
            *inter.entry((p, g)).or_default() += 1;
        }
    }

    let mut result = SegmentMatchResult::default();
    let mut matched_pred: HashSet<SegmentKey> = HashSet::new();
    let mut matched_gt: HashSet<SegmentKey> = HashSet::new();
    let mut pairs: Vec<(&(SegmentKey, SegmentKey), &usize)> = inter.iter().collect();
    pairs.sort_by_key(|(k, _)| **k);
    for (&(p, g), &i) in pairs {
        if p.0 != g.0 {
            continue;
        }
        let void_overlap = pred_on_void.get(&p).copied().unwrap_or(0);
        let union = pred_area[&p] + gt_area[&g] - i - void_overlap;
        let iou = i as f64 / union as f64;
        if iou > 0.5 {
            matched_pred.insert(p);
            matched_gt.insert(g);
            result
                .per_class
                .entry(p.0)
                .or_default()
                .tp
                .push(MatchedPair { pred: p, gt: g, iou });
        }
    }
    let mut pred_keys: Vec<&SegmentKey> = pred_area.keys().collect();
    pred_keys.sort();
    for &p in pred_keys {
        if matched_pred.contains(&p) {
            continue;
        }
        let void_overlap = pred_on_void.get(&p).copied().unwrap_or(0);
        if void_overlap * 2 > pred_area[&p] {
            continue; // mostly over void: discarded, not a false positive
        }
        result.per_class.entry(p.0).or_default().fp.push(p);
    }
    let mut gt_keys: Vec<&SegmentKey> = gt_area.keys().collect();
    gt_keys.sort();
    for &g in gt_keys {
        if !matched_gt.contains(&g) {
            result.per_class.entry(g.0).or_default().fn_.push(g);
        }
    }
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct ClassQuality {
    pub class: u32,
    pub partitionable: bool,
    /// PQ-style score with the inner part quality for partitionable classes.
    pub part_pq: f64,
    /// Plain PQ score (segment IoU as pair quality).
    pub pq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone)]
pub struct PartPqResult {
    /// Mean over all classes present in prediction or ground truth.
    pub all: Option<f64>,
    /// Mean over partitionable classes.
    pub partitionable: Option<f64>,
    /// Mean over non-partitionable classes.
    pub non_partitionable: Option<f64>,
    /// Plain panoptic quality over the same classes.
    pub pq: Option<f64>,
    pub per_class: Vec<ClassQuality>,
}

/// Inner quality of one matched pair of a partitionable class: the mean part
/// IoU over the part classes present in either segment, computed on the union
/// of the pair's pixels (ground-truth void excluded). A pair in which neither
/// side carries any part falls back to the segment IoU.
fn pair_part_quality(
    pred: &PanopticPartMap,
    gt: &PanopticPartMap,
    pair: &MatchedPair,
    part_count: usize,
) -> f64 {
    let mut inter = vec![0usize; part_count + 1];
    let mut pred_cnt = vec![0usize; part_count + 1];
    let mut gt_cnt = vec![0usize; part_count + 1];
    for (pl, gl) in pred.labels().zip(gt.labels()) {
        if matches!(gl, PanopticPartLabel::Void) {
            continue;
        }
        let in_pred = segment_key(pl) == Some(pair.pred);
        let in_gt = segment_key(gl) == Some(pair.gt);
        if !in_pred && !in_gt {
            continue;
        }
        let pp = match (in_pred, pl) {
            (true, PanopticPartLabel::Segment { part, .. }) => part as usize,
            _ => 0,
        };
        let gp = match (in_gt, gl) {
            (true, PanopticPartLabel::Segment { part, .. }) => part as usize,
            _ => 0,
        };
        if in_pred && pp > 0 && pp <= part_count {
            pred_cnt[pp] += 1;
        }
        if in_gt && gp > 0 && gp <= part_count {
            gt_cnt[gp] += 1;
        }
        if in_pred && in_gt && pp == gp && pp > 0 && pp <= part_count {
            inter[pp] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for p in 1..=part_count {
        let union = pred_cnt[p] + gt_cnt[p] - inter[p];
        if union > 0 {
            sum += inter[p] as f64 / union as f64;
            present += 1;
        }
    }
    if present == 0 {
        pair.iou
    } else {
        sum / present as f64
    }
}

pub fn part_pq(
    pred: &PanopticPartMap,
    gt: &PanopticPartMap,
    taxonomy: &ClassTaxonomy,
) -> Result<PartPqResult, MetricsError> {
    let matches = match_segments(pred, gt)?;
    let mut per_class = Vec::new();
    for (&class, m) in &matches.per_class {
        let denom = m.tp.len() as f64 + 0.5 * m.fp.len() as f64 + 0.5 * m.fn_.len() as f64;
        if denom == 0.0 {
            continue;
        }
        let partitionable = taxonomy.is_partitionable(class);
        let part_count = taxonomy.part_count(class);
        let mut q_sum = 0.0;
        let mut iou_sum = 0.0;
        for pair in &m.tp {
            iou_sum += pair.iou;
            q_sum += if partitionable {
                pair_part_quality(pred, gt, pair, part_count)
            } else {
                pair.iou
            };
        }
        per_class.push(ClassQuality {
            class,
            partitionable,
            part_pq: q_sum / denom,
            pq: iou_sum / denom,
            tp: m.tp.len(),
            fp: m.fp.len(),
            fn_: m.fn_.len(),
        });
    }
    let mean = |xs: &mut dyn Iterator<Item = f64>| -> Option<f64> {
        let v: Vec<f64> = xs.collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let all = mean(&mut per_class.iter().map(|c| c.part_pq));
    let partitionable =
        mean(&mut per_class.iter().filter(|c| c.partitionable).map(|c| c.part_pq));
    let non_partitionable =
        mean(&mut per_class.iter().filter(|c| !c.partitionable).map(|c| c.part_pq));
    let pq = mean(&mut per_class.iter().map(|c| c.pq));
    Ok(PartPqResult { all, partitionable, non_partitionable, pq, per_class })
}

/// Fraction of pixels carrying a non-void label.
pub fn density(map: &PanopticPartMap) -> f64 {
    map.density()
}
