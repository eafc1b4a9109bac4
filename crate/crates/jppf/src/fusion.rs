//! Joint fusion of semantic, instance and part predictions.
//!
//! Per pre-processed instance, the class channel of the semantic map and the
//! matching part channels are masked to the instance box and fused with the
//! instance mask. Stuff classes are fused full-canvas with the part
//! background channel. All fused channels compete per pixel; the winning
//! channel's `(s, id, p)` identity resolves the output map.
//!
//! The fusion operation multiplies the sum of the sigmoids of the layers with
//! the sum of the layers, with no normalization over the layer count. Stuff
//! channels therefore fuse two layers where thing channels fuse three (or
//! more); the resulting scale imbalance between the two pools is inherent to
//! the operation and left as is.

use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instance::{filter_and_sort, overlap_nms, paste_mask, CanvasInstance, InstanceError, InstancePrediction, PixelBox};
use crate::label::{PanopticPartLabel, PanopticPartMap};
use crate::logits::{DenseLogits, LogitsError};
use crate::merge::PanopticMap;
use crate::taxonomy::{ClassTaxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("class {0} is not a thing class")]
    NotAThingClass(u32),
    #[error("part logits carry no background channel")]
    MissingBackgroundChannel,
    #[error("masked logit stack has no layers")]
    EmptyStack,
    #[error(transparent)]
    Logits(#[from] LogitsError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

/// Fusion parameters; defaults follow the reference pipeline
/// (minimum stuff area 2048 pixels, both thresholds 0.5).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub min_stuff_area: usize,
    pub conf_threshold: f32,
    pub iou_threshold: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { min_stuff_area: 2048, conf_threshold: 0.5, iou_threshold: 0.5 }
    }
}

/// The `(s, id, p)` identity a fused channel votes for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelId {
    pub semantic: u32,
    pub instance: u32,
    pub part: u32,
}

impl ChannelId {
    pub fn is_thing(&self) -> bool {
        self.instance != 0
    }
}

/// Which head a masked layer came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSource {
    Semantic,
    Instance,
    Part,
}

/// Equally shaped layers to be fused for one candidate channel.
///
/// For thing candidates the layers are cropped to the instance box; the true
/// masked value outside the box is zero everywhere, and since fusing all-zero
/// layers yields exactly zero, the crop loses nothing. Replicating the
/// semantic and instance layers across a class' part channels is realized by
/// sharing the same layer allocation.
#[derive(Debug, Clone)]
pub struct MaskedLogitStack {
    pub layers: Vec<(LayerSource, Arc<Array2<f32>>)>,
    /// `None` for full-canvas (stuff) stacks.
    pub region: Option<PixelBox>,
}

/// One candidate channel before fusion.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub id: ChannelId,
    pub stack: MaskedLogitStack,
}

/// One fused candidate channel. `scores` covers `region` when boxed, the full
/// canvas otherwise; the implicit score outside a boxed region is zero.
#[derive(Debug, Clone)]
pub struct CandidateChannel {
    pub id: ChannelId,
    pub region: Option<PixelBox>,
    pub scores: Array2<f32>,
}

/// The assembled competition: stuff channels first (taxonomy order), then
/// per-instance thing channels in instance id order.
#[derive(Debug, Clone)]
pub struct CandidateStack {
    pub height: usize,
    pub width: usize,
    pub channels: Vec<CandidateChannel>,
    pub n_things: usize,
    pub n_things_nonpart: usize,
}

impl CandidateStack {
    pub fn n_pp(&self) -> usize {
        self.channels.len()
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// The fusion operation on one pixel: `(sum of sigmoids) * (sum of values)`.
pub fn fuse_values(values: &[f32]) -> f32 {
    let mut sig = 0.0f32;
    let mut sum = 0.0f32;
    for &v in values {
        sig += sigmoid(v);
        sum += v;
    }
    sig * sum
}

/// Applies the fusion operation element-wise over the stack's layers.
pub fn fuse_logits(stack: &MaskedLogitStack) -> Result<Array2<f32>, FusionError> {
    let Some((_, first)) = stack.layers.first() else {
        return Err(FusionError::EmptyStack);
    };
    let shape = first.dim();
    for (_, layer) in &stack.layers[1..] {
        if layer.dim() != shape {
            return Err(FusionError::ShapeMismatch { expected: shape, got: layer.dim() });
        }
    }
    let mut out = Array2::zeros(shape);
    {
        let out_slice = out.as_slice_mut().expect("contiguous");
        let layers: Vec<&[f32]> = stack
            .layers
            .iter()
            .map(|(_, l)| l.as_slice().expect("contiguous"))
            .collect();
        for (i, o) in out_slice.iter_mut().enumerate() {
            let mut sig = 0.0f32;
            let mut sum = 0.0f32;
            for layer in &layers {
                let v = layer[i];
                sig += sigmoid(v);
                sum += v;
            }
            *o = sig * sum;
        }
    }
    Ok(out)
}

fn crop(full: ndarray::ArrayView2<f32>, b: PixelBox) -> Array2<f32> {
    full.slice(ndarray::s![
        b.y0 as usize..b.y1 as usize,
        b.x0 as usize..b.x1 as usize
    ])
    .to_owned()
}

/// Builds the candidate channels one instance contributes: one per part of
/// its class, or a single channel against the part background for
/// non-partitionable classes.
pub fn build_thing_candidates(
    inst: &CanvasInstance,
    semantic: &DenseLogits,
    parts: &DenseLogits,
    taxonomy: &ClassTaxonomy,
) -> Result<Vec<Candidate>, FusionError> {
    let class = inst.class_id;
    if !taxonomy.is_thing(class) {
        return Err(FusionError::NotAThingClass(class));
    }
    let b = inst.bbox;
    let sem_channel = semantic.channel_of(class)?;
    let mls = Arc::new(crop(semantic.values().index_axis(ndarray::Axis(0), sem_channel), b));
    let mli = Arc::new(crop(inst.mask.view(), b));

    let background = [taxonomy.background_group()];
    let groups: &[u32] = taxonomy.parts_of(class).unwrap_or(&background);
    let mut out = Vec::with_capacity(groups.len());
    for &g in groups {
        let part_channel = parts
            .channel_of(g)
            .map_err(|_| if g == taxonomy.background_group() {
                FusionError::MissingBackgroundChannel
            } else {
                FusionError::Logits(LogitsError::MissingChannel(g))
            })?;
        let mlp = Arc::new(crop(parts.values().index_axis(ndarray::Axis(0), part_channel), b));
        let part = if g == taxonomy.background_group() {
            0
        } else {
            taxonomy.ungroup_part(class, g)?
        };
        out.push(Candidate {
            id: ChannelId { semantic: class, instance: inst.id, part },
            stack: MaskedLogitStack {
                layers: vec![
                    (LayerSource::Semantic, Arc::clone(&mls)),
                    (LayerSource::Instance, Arc::clone(&mli)),
                    (LayerSource::Part, mlp),
                ],
                region: Some(b),
            },
        });
    }
    Ok(out)
}

/// Builds the full-canvas stuff channels: each stuff class paired with the
/// part background channel. Partitionable stuff expands into one channel per
/// part instead, mirroring the thing path without an instance layer.
pub fn build_stuff_candidates(
    semantic: &DenseLogits,
    parts: &DenseLogits,
    taxonomy: &ClassTaxonomy,
) -> Result<Vec<Candidate>, FusionError> {
    let bg = taxonomy.background_group();
    let bg_channel = parts.channel_of(bg).map_err(|_| FusionError::MissingBackgroundChannel)?;
    let bg_layer =
        Arc::new(parts.values().index_axis(ndarray::Axis(0), bg_channel).to_owned());
    let mut out = Vec::new();
    for &s in &taxonomy.stuff_classes {
        let sem_channel = semantic.channel_of(s)?;
        let mls =
            Arc::new(semantic.values().index_axis(ndarray::Axis(0), sem_channel).to_owned());
        match taxonomy.parts_of(s) {
            None => out.push(Candidate {
                id: ChannelId { semantic: s, instance: 0, part: 0 },
                stack: MaskedLogitStack {
                    layers: vec![
                        (LayerSource::Semantic, mls),
                        (LayerSource::Part, Arc::clone(&bg_layer)),
                    ],
                    region: None,
                },
            }),
            Some(groups) => {
                for &g in groups {
                    let pc = parts.channel_of(g)?;
                    let mlp =
                        Arc::new(parts.values().index_axis(ndarray::Axis(0), pc).to_owned());
                    out.push(Candidate {
                        id: ChannelId {
                            semantic: s,
                            instance: 0,
                            part: taxonomy.ungroup_part(s, g)?,
                        },
                        stack: MaskedLogitStack {
                            layers: vec![
                                (LayerSource::Semantic, Arc::clone(&mls)),
                                (LayerSource::Part, mlp),
                            ],
                            region: None,
                        },
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Fuses and concatenates candidates into the channel competition.
/// `thing_candidates` must already be in instance id order.
pub fn assemble(
    height: usize,
    width: usize,
    stuff_candidates: &[Candidate],
    thing_candidates: &[Candidate],
    n_things: usize,
    n_things_nonpart: usize,
) -> Result<CandidateStack, FusionError> {
    let all: Vec<&Candidate> = stuff_candidates.iter().chain(thing_candidates.iter()).collect();
    let channels: Vec<CandidateChannel> = all
        .par_iter()
        .map(|cand| {
            let scores = fuse_logits(&cand.stack)?;
            let expected = match cand.stack.region {
                Some(b) => (b.height(), b.width()),
                None => (height, width),
            };
            if scores.dim() != expected {
                return Err(FusionError::ShapeMismatch { expected, got: scores.dim() });
            }
            Ok(CandidateChannel { id: cand.id, region: cand.stack.region, scores })
        })
        .collect::<Result<_, _>>()?;
    Ok(CandidateStack { height, width, channels, n_things, n_things_nonpart })
}

/// Closed-form candidate count for a set of surviving instances:
/// stuff channels plus one channel per non-partitionable instance plus the
/// part count of every partitionable instance.
pub fn expected_candidate_count(taxonomy: &ClassTaxonomy, instance_classes: &[u32]) -> usize {
    let stuff: usize = taxonomy
        .stuff_classes
        .iter()
        .map(|&s| taxonomy.parts_of(s).map_or(1, |p| p.len()))
        .sum();
    let things: usize = instance_classes
        .iter()
        .map(|&c| taxonomy.parts_of(c).map_or(1, |p| p.len()))
        .sum();
    stuff + things
}

/// Per-pixel winner over the channel competition: channel index and score.
/// Boxed channels score zero outside their region; ties go to the lowest
/// channel index.
fn argmax_channels(stack: &CandidateStack) -> (Vec<u32>, Vec<f32>) {
    let n = stack.height * stack.width;
    if stack.channels.is_empty() {
        return (vec![u32::MAX; n], vec![0.0; n]);
    }
    // Channel 0 is the baseline winner everywhere (its implicit score outside
    // a boxed region is 0); later channels must strictly exceed the best.
    let mut best_idx = vec![0u32; n];
    let mut best_score = vec![0.0f32; n];
    for (idx, ch) in stack.channels.iter().enumerate() {
        match ch.region {
            None => {
                let scores = ch.scores.as_slice().expect("contiguous");
                for i in 0..n {
                    let s = scores[i];
                    if s > best_score[i] {
                        best_score[i] = s;
                        best_idx[i] = idx as u32;
                    }
                }
            }
            Some(b) => {
                for (by, row) in ch.scores.outer_iter().enumerate() {
                    let y = b.y0 as usize + by;
                    let base = y * stack.width + b.x0 as usize;
                    for (bx, &s) in row.iter().enumerate() {
                        let i = base + bx;
                        if s > best_score[i] {
                            best_score[i] = s;
                            best_idx[i] = idx as u32;
                        }
                    }
                }
            }
        }
    }
    (best_idx, best_score)
}

/// Semantic fallback table: `(class, channel index in S)` in the given order.
fn fallback_channels(
    semantic: &DenseLogits,
    classes: &[u32],
) -> Result<Vec<(u32, usize)>, FusionError> {
    classes
        .iter()
        .map(|&s| Ok((s, semantic.channel_of(s)?)))
        .collect()
}

fn resolve_with_fallback(
    stack: &CandidateStack,
    semantic: &DenseLogits,
    fallback: &[(u32, usize)],
    cfg: &FusionConfig,
    taxonomy: &ClassTaxonomy,
    keep_parts: bool,
) -> Result<PanopticPartMap, FusionError> {
    let (h, w) = (stack.height, stack.width);
    if (semantic.height(), semantic.width()) != (h, w) {
        return Err(FusionError::ShapeMismatch {
            expected: (h, w),
            got: (semantic.height(), semantic.width()),
        });
    }
    let (best_idx, _) = argmax_channels(stack);
    let mut map = PanopticPartMap::new_void(h, w);
    for i in 0..h * w {
        let (y, x) = (i / w, i % w);
        let idx = best_idx[i];
        if idx == u32::MAX {
            continue; // empty competition stays void
        }
        let winner = &stack.channels[idx as usize];
        let label = if winner.id.is_thing() {
            PanopticPartLabel::segment(
                winner.id.semantic,
                winner.id.instance,
                if keep_parts { winner.id.part } else { 0 },
            )
        } else {
            // Stuff identity comes from the raw semantic map, not the fused
            // stuff channels.
            let mut best = f32::NEG_INFINITY;
            let mut cls = None;
            for &(s, c) in fallback {
                let v = semantic.at(c, y, x);
                if v > best {
                    best = v;
                    cls = Some(s);
                }
            }
            match cls {
                Some(s) => PanopticPartLabel::segment(s, 0, 0),
                None => PanopticPartLabel::Void,
            }
        };
        map.set(y, x, label).expect("resolved label fits encoding");
    }
    filter_small_stuff_regions(&mut map, cfg.min_stuff_area, taxonomy);
    Ok(map)
}

/// Resolves the fused competition into the output label map: global argmax
/// over all channels, thing winners keep their identity, stuff winners take
/// the best raw semantic stuff class, then small stuff regions become void.
pub fn resolve(
    stack: &CandidateStack,
    semantic: &DenseLogits,
    cfg: &FusionConfig,
    taxonomy: &ClassTaxonomy,
) -> Result<PanopticPartMap, FusionError> {
    let fallback = fallback_channels(semantic, &taxonomy.stuff_classes)?;
    resolve_with_fallback(stack, semantic, &fallback, cfg, taxonomy, true)
}

/// Turns every 4-connected region of one stuff class smaller than `min_area`
/// into void. Thing and void pixels act as region boundaries.
pub fn filter_small_stuff_regions(
    map: &mut PanopticPartMap,
    min_area: usize,
    taxonomy: &ClassTaxonomy,
) {
    if min_area <= 1 {
        return;
    }
    let (h, w) = map.shape();
    let is_stuff_px = |v: u32| -> Option<u32> {
        match crate::label::decode_label(v) {
            PanopticPartLabel::Segment { semantic, instance: 0, .. }
                if taxonomy.is_stuff(semantic) =>
            {
                Some(semantic)
            }
            _ => None,
        }
    };
    let mut visited = vec![false; h * w];
    let mut queue = Vec::new();
    let mut component = Vec::new();
    for start in 0..h * w {
        if visited[start] {
            continue;
        }
        let Some(class) = is_stuff_px(map.encoded()[start]) else {
            visited[start] = true;
            continue;
        };
        visited[start] = true;
        queue.clear();
        component.clear();
        queue.push(start);
        component.push(start);
        while let Some(i) = queue.pop() {
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if !visited[j] && is_stuff_px(map.encoded()[j]) == Some(class) {
                    visited[j] = true;
                    queue.push(j);
                    component.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        if component.len() < min_area {
            for &i in &component {
                map.set_encoded(i / w, i % w, 0);
            }
        }
    }
}

/// Pre-processing shared by both pipelines: confidence filter + sort, paste
/// to canvas, greedy NMS, id assignment.
pub fn preprocess_instances(
    raw: &[InstancePrediction],
    cfg: &FusionConfig,
    height: usize,
    width: usize,
) -> Result<Vec<CanvasInstance>, FusionError> {
    let sorted = filter_and_sort(raw, cfg.conf_threshold);
    let pasted = sorted
        .iter()
        .map(|p| paste_mask(p, height, width))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(overlap_nms(pasted, cfg.iou_threshold))
}

fn check_same_canvas(a: &DenseLogits, b: &DenseLogits) -> Result<(), FusionError> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(FusionError::ShapeMismatch {
            expected: (a.height(), a.width()),
            got: (b.height(), b.width()),
        });
    }
    Ok(())
}

/// The complete joint fusion pipeline, raw predictions to panoptic-part map.
pub fn jppf_pipeline(
    semantic: &DenseLogits,
    parts: &DenseLogits,
    raw_instances: &[InstancePrediction],
    cfg: &FusionConfig,
    taxonomy: &ClassTaxonomy,
) -> Result<PanopticPartMap, FusionError> {
    check_same_canvas(semantic, parts)?;
    let (h, w) = (semantic.height(), semantic.width());
    let survivors = preprocess_instances(raw_instances, cfg, h, w)?;
    fuse_candidates(semantic, parts, &survivors, cfg, taxonomy)
}

/// Builds and fuses the full candidate competition for pre-processed
/// instances.
pub fn build_candidate_stack(
    semantic: &DenseLogits,
    parts: &DenseLogits,
    instances: &[CanvasInstance],
    taxonomy: &ClassTaxonomy,
) -> Result<CandidateStack, FusionError> {
    check_same_canvas(semantic, parts)?;
    let (h, w) = (semantic.height(), semantic.width());
    let stuff = build_stuff_candidates(semantic, parts, taxonomy)?;
    let mut ordered: Vec<&CanvasInstance> = instances.iter().collect();
    ordered.sort_by_key(|i| i.id);
    let per_instance: Vec<Vec<Candidate>> = ordered
        .par_iter()
        .map(|inst| build_thing_candidates(inst, semantic, parts, taxonomy))
        .collect::<Result<_, _>>()?;
    let n_things_nonpart =
        ordered.iter().filter(|i| !taxonomy.is_partitionable(i.class_id)).count();
    let things: Vec<Candidate> = per_instance.into_iter().flatten().collect();
    let stack = assemble(h, w, &stuff, &things, ordered.len(), n_things_nonpart)?;
    debug_assert_eq!(
        stack.n_pp(),
        expected_candidate_count(
            taxonomy,
            &ordered.iter().map(|i| i.class_id).collect::<Vec<_>>()
        )
    );
    Ok(stack)
}

/// Fusion and resolution for already pre-processed instances.
pub fn fuse_candidates(
    semantic: &DenseLogits,
    parts: &DenseLogits,
    instances: &[CanvasInstance],
    cfg: &FusionConfig,
    taxonomy: &ClassTaxonomy,
) -> Result<PanopticPartMap, FusionError> {
    let stack = build_candidate_stack(semantic, parts, instances, taxonomy)?;
    resolve(&stack, semantic, cfg, taxonomy)
}

/// Panoptic-only fusion: thing channels fuse semantic and instance layers,
/// stuff channels pass the raw semantic logits through, and the fallback for
/// non-thing winners is the argmax over all semantic classes.
pub fn panoptic_fuse(
    semantic: &DenseLogits,
    raw_instances: &[InstancePrediction],
    cfg: &FusionConfig,
    taxonomy: &ClassTaxonomy,
) -> Result<PanopticMap, FusionError> {
    let (h, w) = (semantic.height(), semantic.width());
    let survivors = preprocess_instances(raw_instances, cfg, h, w)?;
    panoptic_fuse_candidates(semantic, &survivors, cfg, taxonomy)
}

/// Panoptic fusion for already pre-processed instances.
pub fn panoptic_fuse_candidates(
    semantic: &DenseLogits,
    instances: &[CanvasInstance],
    cfg: &FusionConfig,
    taxonomy: &ClassTaxonomy,
) -> Result<PanopticMap, FusionError> {
    let (h, w) = (semantic.height(), semantic.width());
    let mut channels = Vec::new();
    for &s in &taxonomy.stuff_classes {
        let c = semantic.channel_of(s)?;
        channels.push(CandidateChannel {
            id: ChannelId { semantic: s, instance: 0, part: 0 },
            region: None,
            scores: semantic.values().index_axis(ndarray::Axis(0), c).to_owned(),
        });
    }
    let mut ordered: Vec<&CanvasInstance> = instances.iter().collect();
    ordered.sort_by_key(|i| i.id);
    for inst in &ordered {
        if !taxonomy.is_thing(inst.class_id) {
            return Err(FusionError::NotAThingClass(inst.class_id));
        }
        let b = inst.bbox;
        let sem_channel = semantic.channel_of(inst.class_id)?;
        let stack = MaskedLogitStack {
            layers: vec![
                (
                    LayerSource::Semantic,
                    Arc::new(crop(semantic.values().index_axis(ndarray::Axis(0), sem_channel), b)),
                ),
                (LayerSource::Instance, Arc::new(crop(inst.mask.view(), b))),
            ],
            region: Some(b),
        };
        channels.push(CandidateChannel {
            id: ChannelId { semantic: inst.class_id, instance: inst.id, part: 0 },
            region: Some(b),
            scores: fuse_logits(&stack)?,
        });
    }
    let n_things = ordered.len();
    let stack = CandidateStack { height: h, width: w, channels, n_things, n_things_nonpart: n_things };
    let order = taxonomy.semantic_channel_order();
    let fallback = fallback_channels(semantic, &order)?;
    let map = resolve_with_fallback(&stack, semantic, &fallback, cfg, taxonomy, false)?;
    Ok(PanopticMap::from_part_map(&map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use ndarray::{Array3, Axis};
    use proptest::prelude::*;

    fn logits_const(meta: Vec<u32>, h: usize, w: usize, v: f32) -> DenseLogits {
        DenseLogits::new(Array3::from_elem((meta.len(), h, w), v), meta).unwrap()
    }

    fn canvas_instance(
        class_id: u32,
        id: u32,
        b: PixelBox,
        h: usize,
        w: usize,
        inside: f32,
    ) -> CanvasInstance {
        let mut mask = Array2::zeros((h, w));
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                mask[(y as usize, x as usize)] = inside;
            }
        }
        CanvasInstance { mask, bbox: b, class_id, confidence: 0.9, id }
    }

    #[test]
    fn fuse_values_golden() {
        assert_eq!(fuse_values(&[]), 0.0);
        assert_eq!(fuse_values(&[0.0, 0.0]), 0.0);
        // (2 * sigmoid(0.8)) * 1.6
        assert!((fuse_values(&[0.8, 0.8]) - 2.2079183).abs() < 1e-6);
        // (2 * sigmoid(2) + sigmoid(0)) * 4
        assert!((fuse_values(&[2.0, 2.0, 0.0]) - 9.0463766).abs() < 1e-5);
    }

    #[test]
    fn consistent_three_layer_stack_outscores_two_layers() {
        // a thing channel with full agreement beats a stuff channel with full
        // agreement, purely from the extra layer
        assert!(fuse_values(&[1.0, 1.0, 1.0]) > fuse_values(&[1.0, 1.0]));
    }

    proptest! {
        #[test]
        fn fuse_is_monotone_in_each_layer(
            a in 0.0f32..=1.0,
            b in 0.0f32..=1.0,
            c in 0.0f32..=1.0,
            bump in 0.01f32..=0.5,
        ) {
            let base = fuse_values(&[a, b, c]);
            let up = fuse_values(&[(a + bump).min(1.5), b, c]);
            prop_assert!(up > base);
        }

        #[test]
        fn fuse_is_permutation_invariant_up_to_rounding(
            a in 0.0f32..=1.0,
            b in 0.0f32..=1.0,
            c in 0.0f32..=1.0,
        ) {
            let x = fuse_values(&[a, b, c]);
            let y = fuse_values(&[c, a, b]);
            prop_assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn fuse_logits_matches_scalar_operation() {
        let l1 = Arc::new(Array2::from_elem((2, 2), 0.8f32));
        let l2 = Arc::new(Array2::from_elem((2, 2), 0.8f32));
        let stack = MaskedLogitStack {
            layers: vec![(LayerSource::Semantic, l1), (LayerSource::Part, l2)],
            region: None,
        };
        let fused = fuse_logits(&stack).unwrap();
        assert!(fused.iter().all(|&v| (v - fuse_values(&[0.8, 0.8])).abs() == 0.0));
    }

    #[test]
    fn fuse_logits_rejects_mismatched_layers() {
        let stack = MaskedLogitStack {
            layers: vec![
                (LayerSource::Semantic, Arc::new(Array2::zeros((2, 2)))),
                (LayerSource::Part, Arc::new(Array2::zeros((2, 3)))),
            ],
            region: None,
        };
        assert!(matches!(fuse_logits(&stack), Err(FusionError::ShapeMismatch { .. })));
        let empty = MaskedLogitStack { layers: vec![], region: None };
        assert!(matches!(fuse_logits(&empty), Err(FusionError::EmptyStack)));
    }

    #[test]
    fn thing_candidates_expand_parts() {
        let t = fixtures::cpp();
        let sem = logits_const(t.semantic_channel_order(), 6, 6, 0.5);
        let parts = logits_const(t.part_groups.clone(), 6, 6, 0.5);
        let person = canvas_instance(12, 1, PixelBox::new(1, 1, 5, 4), 6, 6, 0.9);
        let cands = build_thing_candidates(&person, &sem, &parts, &t).unwrap();
        assert_eq!(cands.len(), 4);
        assert_eq!(
            cands.iter().map(|c| c.id.part).collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
        for c in &cands {
            assert_eq!(c.id.semantic, 12);
            assert_eq!(c.id.instance, 1);
            assert_eq!(c.stack.layers.len(), 3);
            assert_eq!(c.stack.region, Some(PixelBox::new(1, 1, 5, 4)));
            assert_eq!(c.stack.layers[0].1.dim(), (3, 4));
        }
        // semantic and instance layers are shared across the part channels
        assert!(Arc::ptr_eq(&cands[0].stack.layers[0].1, &cands[3].stack.layers[0].1));
        assert!(Arc::ptr_eq(&cands[0].stack.layers[1].1, &cands[3].stack.layers[1].1));
    }

    #[test]
    fn non_partitionable_thing_gets_one_background_channel() {
        let t = fixtures::cpp();
        let sem = logits_const(t.semantic_channel_order(), 4, 4, 0.5);
        let parts = logits_const(t.part_groups.clone(), 4, 4, 0.5);
        let inst = canvas_instance(17, 2, PixelBox::new(0, 0, 4, 4), 4, 4, 0.9);
        let cands = build_thing_candidates(&inst, &sem, &parts, &t).unwrap();
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].id, ChannelId { semantic: 17, instance: 2, part: 0 });
    }

    #[test]
    fn stuff_instance_is_rejected() {
        let t = fixtures::cpp();
        let sem = logits_const(t.semantic_channel_order(), 4, 4, 0.5);
        let parts = logits_const(t.part_groups.clone(), 4, 4, 0.5);
        let inst = canvas_instance(1, 1, PixelBox::new(0, 0, 2, 2), 4, 4, 0.9);
        assert!(matches!(
            build_thing_candidates(&inst, &sem, &parts, &t),
            Err(FusionError::NotAThingClass(1))
        ));
    }

    #[test]
    fn stuff_candidates_cover_the_taxonomy() {
        let t = fixtures::cpp();
        let sem = logits_const(t.semantic_channel_order(), 4, 4, 0.5);
        let parts = logits_const(t.part_groups.clone(), 4, 4, 0.5);
        let cands = build_stuff_candidates(&sem, &parts, &t).unwrap();
        assert_eq!(cands.len(), t.stuff_classes.len());
        for (c, &s) in cands.iter().zip(&t.stuff_classes) {
            assert_eq!(c.id, ChannelId { semantic: s, instance: 0, part: 0 });
            assert_eq!(c.stack.layers.len(), 2);
            assert!(c.stack.region.is_none());
        }
    }

    #[test]
    fn missing_background_channel_is_reported() {
        let t = fixtures::cpp();
        let sem = logits_const(t.semantic_channel_order(), 4, 4, 0.5);
        let no_bg: Vec<u32> = t.part_groups.iter().copied().filter(|&g| g != 0).collect();
        let parts = logits_const(no_bg, 4, 4, 0.5);
        assert!(matches!(
            build_stuff_candidates(&sem, &parts, &t),
            Err(FusionError::MissingBackgroundChannel)
        ));
    }

    #[test]
    fn candidate_count_closed_form() {
        let t = fixtures::cpp();
        // stuff only
        assert_eq!(expected_candidate_count(&t, &[]), 11);
        // person (4 parts) + car (5 parts) + one non-partitionable thing
        assert_eq!(expected_candidate_count(&t, &[12, 14, 17]), 11 + 4 + 5 + 1);
        let sem = logits_const(t.semantic_channel_order(), 8, 8, 0.5);
        let parts = logits_const(t.part_groups.clone(), 8, 8, 0.5);
        let insts = vec![
            canvas_instance(12, 1, PixelBox::new(0, 0, 4, 4), 8, 8, 0.9),
            canvas_instance(14, 2, PixelBox::new(4, 4, 8, 8), 8, 8, 0.9),
            canvas_instance(17, 3, PixelBox::new(2, 2, 6, 6), 8, 8, 0.9),
        ];
        let stack = build_candidate_stack(&sem, &parts, &insts, &t).unwrap();
        assert_eq!(stack.n_pp(), 21);
        assert_eq!(stack.n_things, 3);
        assert_eq!(stack.n_things_nonpart, 1);
        // stuff channels first, then instances in id order
        assert_eq!(stack.channels[11].id, ChannelId { semantic: 12, instance: 1, part: 1 });
        assert_eq!(stack.channels[15].id, ChannelId { semantic: 14, instance: 2, part: 1 });
        assert_eq!(stack.channels[20].id, ChannelId { semantic: 17, instance: 3, part: 0 });
    }

    #[test]
    fn thing_wins_inside_its_box_and_keeps_its_part() {
        let t = fixtures::cpp();
        let (h, w) = (8usize, 8usize);
        let order = t.semantic_channel_order();
        let mut sem_vals = Array3::zeros((order.len(), h, w));
        let sky = order.iter().position(|&c| c == 1).unwrap();
        let person = order.iter().position(|&c| c == 12).unwrap();
        sem_vals.index_axis_mut(Axis(0), sky).fill(0.9);
        for y in 2..6 {
            for x in 2..6 {
                sem_vals[(sky, y, x)] = 0.1;
                sem_vals[(person, y, x)] = 0.9;
            }
        }
        let sem = DenseLogits::new(sem_vals, order).unwrap();
        let mut part_vals = Array3::zeros((t.part_groups.len(), h, w));
        part_vals.index_axis_mut(Axis(0), 0).fill(0.9); // background
        for y in 2..6 {
            for x in 2..6 {
                part_vals[(0, y, x)] = 0.1;
                // head above torso inside the box
                part_vals[(if y < 4 { 1 } else { 2 }, y, x)] = 0.9;
            }
        }
        let parts = DenseLogits::new(part_vals, t.part_groups.clone()).unwrap();
        let inst = canvas_instance(12, 1, PixelBox::new(2, 2, 6, 6), h, w, 0.9);
        let cfg = FusionConfig { min_stuff_area: 0, ..FusionConfig::default() };
        let map = fuse_candidates(&sem, &parts, &[inst], &cfg, &t).unwrap();
        assert_eq!(map.get(0, 0), PanopticPartLabel::segment(1, 0, 0));
        assert_eq!(map.get(2, 3), PanopticPartLabel::segment(12, 1, 1));
        assert_eq!(map.get(5, 3), PanopticPartLabel::segment(12, 1, 2));
        assert_eq!(map.density(), 1.0);
    }

    #[test]
    fn stuff_winner_takes_raw_semantic_identity() {
        let t = fixtures::cpp();
        let (h, w) = (4usize, 4usize);
        let order = t.semantic_channel_order();
        // fused stuff channels all tie (identical layers), so channel 0 (class
        // 1) wins the competition; the raw semantic map still points at class
        // 2, which must become the output identity
        let mut sem_vals = Array3::from_elem((order.len(), h, w), 0.2f32);
        let road = order.iter().position(|&c| c == 2).unwrap();
        sem_vals.index_axis_mut(Axis(0), road).fill(0.8);
        let sem = DenseLogits::new(sem_vals, order).unwrap();
        let parts = logits_const(t.part_groups.clone(), h, w, 0.5);
        let cfg = FusionConfig { min_stuff_area: 0, ..FusionConfig::default() };
        let map = fuse_candidates(&sem, &parts, &[], &cfg, &t).unwrap();
        for l in map.labels() {
            assert_eq!(l, PanopticPartLabel::segment(2, 0, 0));
        }
    }

    #[test]
    fn exact_tie_goes_to_the_lower_channel() {
        let t = fixtures::cpp();
        let (h, w) = (4usize, 4usize);
        // all channels carry identical values, so every fused score ties;
        // stuff channel 0 wins and the raw-semantic fallback also ties, which
        // resolves to the first stuff class in channel order
        let sem = logits_const(t.semantic_channel_order(), h, w, 0.6);
        let parts = logits_const(t.part_groups.clone(), h, w, 0.6);
        let cfg = FusionConfig { min_stuff_area: 0, ..FusionConfig::default() };
        let map = fuse_candidates(&sem, &parts, &[], &cfg, &t).unwrap();
        for l in map.labels() {
            assert_eq!(l, PanopticPartLabel::segment(t.stuff_classes[0], 0, 0));
        }
    }

    #[test]
    fn small_stuff_regions_become_void() {
        let t = fixtures::cpp();
        let mut map = PanopticPartMap::new_void(4, 4);
        // a 3-pixel region of class 1 and a 13-pixel region of class 2
        for (y, x) in [(0, 0), (0, 1), (1, 0)] {
            map.set(y, x, PanopticPartLabel::segment(1, 0, 0)).unwrap();
        }
        for y in 0..4 {
            for x in 0..4 {
                if map.get(y, x) == PanopticPartLabel::Void {
                    map.set(y, x, PanopticPartLabel::segment(2, 0, 0)).unwrap();
                }
            }
        }
        filter_small_stuff_regions(&mut map, 4, &t);
        assert_eq!(map.get(0, 0), PanopticPartLabel::Void);
        assert_eq!(map.get(1, 0), PanopticPartLabel::Void);
        assert_eq!(map.get(3, 3), PanopticPartLabel::segment(2, 0, 0));
    }

    #[test]
    fn area_threshold_is_strict() {
        let t = fixtures::cpp();
        let mut exact = PanopticPartMap::new_void(2, 2);
        for y in 0..2 {
            for x in 0..2 {
                exact.set(y, x, PanopticPartLabel::segment(1, 0, 0)).unwrap();
            }
        }
        let mut under = exact.clone();
        under.set(1, 1, PanopticPartLabel::Void).unwrap();
        filter_small_stuff_regions(&mut exact, 4, &t);
        filter_small_stuff_regions(&mut under, 4, &t);
        // exactly min_area survives, min_area - 1 does not
        assert_eq!(exact.get(0, 0), PanopticPartLabel::segment(1, 0, 0));
        assert_eq!(under.get(0, 0), PanopticPartLabel::Void);
    }

    #[test]
    fn thing_pixels_split_stuff_components() {
        let t = fixtures::cpp();
        let mut map = PanopticPartMap::new_void(1, 7);
        for x in 0..7 {
            map.set(0, x, PanopticPartLabel::segment(1, 0, 0)).unwrap();
        }
        // a thing pixel in the middle cuts the stuff run into 3 + 3
        map.set(0, 3, PanopticPartLabel::segment(12, 1, 0)).unwrap();
        filter_small_stuff_regions(&mut map, 4, &t);
        assert_eq!(map.get(0, 0), PanopticPartLabel::Void);
        assert_eq!(map.get(0, 6), PanopticPartLabel::Void);
        assert_eq!(map.get(0, 3), PanopticPartLabel::segment(12, 1, 0));
    }

    #[test]
    fn pipeline_matches_manual_stages() {
        let t = fixtures::cpp();
        let spec = crate::synth::random_scene(7, &t, 32, 32, 2, true);
        let scene = crate::synth::generate(&spec, &t).unwrap();
        let cfg = FusionConfig { min_stuff_area: 16, ..FusionConfig::default() };
        let direct = jppf_pipeline(&scene.semantic, &scene.parts, &scene.instances, &cfg, &t)
            .unwrap();
        let survivors = preprocess_instances(&scene.instances, &cfg, 32, 32).unwrap();
        let stack = build_candidate_stack(&scene.semantic, &scene.parts, &survivors, &t).unwrap();
        let staged = resolve(&stack, &scene.semantic, &cfg, &t).unwrap();
        assert_eq!(direct, staged);
    }

    #[test]
    fn panoptic_fuse_ignores_part_logits() {
        let t = fixtures::cpp();
        let (h, w) = (8usize, 8usize);
        let order = t.semantic_channel_order();
        let mut sem_vals = Array3::zeros((order.len(), h, w));
        let sky = order.iter().position(|&c| c == 1).unwrap();
        let person = order.iter().position(|&c| c == 12).unwrap();
        sem_vals.index_axis_mut(Axis(0), sky).fill(0.9);
        for y in 2..6 {
            for x in 2..6 {
                sem_vals[(sky, y, x)] = 0.1;
                sem_vals[(person, y, x)] = 0.9;
            }
        }
        let sem = DenseLogits::new(sem_vals, order).unwrap();
        let inst = canvas_instance(12, 1, PixelBox::new(2, 2, 6, 6), h, w, 0.9);
        let cfg = FusionConfig { min_stuff_area: 0, ..FusionConfig::default() };
        let pan = panoptic_fuse_candidates(&sem, &[inst], &cfg, &t).unwrap();
        assert_eq!(pan.get(0, 0), Some((1, 0)));
        assert_eq!(pan.get(3, 3), Some((12, 1)));
    }

    #[test]
    fn mismatched_canvases_are_rejected() {
        let t = fixtures::cpp();
        let sem = logits_const(t.semantic_channel_order(), 4, 4, 0.5);
        let parts = logits_const(t.part_groups.clone(), 4, 5, 0.5);
        assert!(matches!(
            build_candidate_stack(&sem, &parts, &[], &t),
            Err(FusionError::ShapeMismatch { .. })
        ));
    }
}
