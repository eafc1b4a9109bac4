//! Synthetic scenes for property-based testing: deterministic ground truth,
//! logit inputs with a controllable noise model, a conflict suite that
//! recreates the void-ring pathology of top-down merging, and a naive
//! per-pixel reference fusion used for equivalence checks.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::FusionConfig;
use crate::instance::{CanvasInstance, InstancePrediction, PixelBox};
use crate::label::{PanopticPartLabel, PanopticPartMap};
use crate::logits::DenseLogits;
use crate::taxonomy::ClassTaxonomy;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
}

/// Noise applied to the generated logits. `temperature` softens the one-hot
/// activations (small values approach exact one-hot), `flip_prob` replaces the
/// true class with a random other one per pixel, `conf_jitter` lowers
/// instance confidences by up to its value.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseModel {
    pub temperature: f32,
    pub flip_prob: f32,
    pub conf_jitter: f32,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { temperature: 0.05, flip_prob: 0.0, conf_jitter: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ThingSpec {
    pub class_id: u32,
    pub bbox: PixelBox,
    /// Pixels to erode the instance mask by when rendering the part logits;
    /// the ground truth stays crisp, so erosion manufactures part predictions
    /// that disagree with the object contour.
    #[serde(default)]
    pub part_erosion: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub stuff_regions: usize,
    pub things: Vec<ThingSpec>,
    #[serde(default)]
    pub noise: NoiseModel,
}

/// A generated scene: ground truth plus the predictions a network would have
/// produced for it.
#[derive(Debug, Clone)]
pub struct Scene {
    pub gt: PanopticPartMap,
    pub semantic: DenseLogits,
    pub parts: DenseLogits,
    pub instances: Vec<InstancePrediction>,
}

fn validate_spec(spec: &SceneSpec, taxonomy: &ClassTaxonomy) -> Result<(), SynthError> {
    let err = |m: String| Err(SynthError::InvalidSpec(m));
    if spec.height == 0 || spec.width == 0 {
        return err("empty canvas".into());
    }
    if spec.stuff_regions == 0 || spec.stuff_regions > spec.width {
        return err(format!("stuff_regions {} not in 1..=width", spec.stuff_regions));
    }
    if !(spec.noise.temperature >= 0.02) {
        return err(format!("temperature {} below 0.02", spec.noise.temperature));
    }
    if !(0.0..1.0).contains(&spec.noise.flip_prob) {
        return err(format!("flip_prob {} outside [0, 1)", spec.noise.flip_prob));
    }
    if !(0.0..=1.0).contains(&spec.noise.conf_jitter) {
        return err(format!("conf_jitter {} outside [0, 1]", spec.noise.conf_jitter));
    }
    for t in &spec.things {
        let b = t.bbox;
        if b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 as usize > spec.width || b.y1 as usize > spec.height
        {
            return err(format!("box {b:?} outside {}x{} canvas", spec.height, spec.width));
        }
        if !taxonomy.is_thing(t.class_id) {
            return err(format!("class {} is not a thing", t.class_id));
        }
    }
    Ok(())
}

/// Soft one-hot activation levels for `n` channels at temperature `tau`,
/// computed as a softmax over a unit one-hot vector.
fn softmax_levels(n: usize, tau: f32) -> (f32, f32) {
    let hi = (1.0f64 / tau as f64).exp();
    let denom = hi + (n as f64 - 1.0);
    ((hi / denom) as f32, (1.0 / denom) as f32)
}

fn erode(mask: &[bool], h: usize, w: usize, rounds: u32) -> Vec<bool> {
    let mut cur = mask.to_vec();
    for _ in 0..rounds {
        let prev = cur.clone();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !prev[i] {
                    continue;
                }
                let edge = y == 0
                    || x == 0
                    || y + 1 == h
                    || x + 1 == w
                    || !prev[i - 1]
                    || !prev[i + 1]
                    || !prev[i - w]
                    || !prev[i + w];
                if edge {
                    cur[i] = false;
                }
            }
        }
    }
    cur
}

/// Deterministically renders a scene from its spec. With zero noise the
/// logits are one-hot-like, masks are exact and confidences are 1.0, so the
/// full pipeline reproduces the ground truth bit for bit.
pub fn generate(spec: &SceneSpec, taxonomy: &ClassTaxonomy) -> Result<Scene, SynthError> {
    validate_spec(spec, taxonomy)?;
    let (h, w) = (spec.height, spec.width);
    let n = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // ground-truth layers
    let mut gt_sem = vec![0u32; n];
    let mut gt_inst = vec![0u32; n];
    let mut gt_part = vec![0u32; n];
    let stripe_w = w.div_ceil(spec.stuff_regions);
    for i in 0..n {
        let x = i % w;
        let stripe = (x / stripe_w).min(spec.stuff_regions - 1);
        gt_sem[i] = taxonomy.stuff_classes[stripe % taxonomy.stuff_classes.len()];
    }
    // part logits see an eroded object; observed_group tracks that view
    let bg = taxonomy.background_group();
    let mut observed_group = vec![bg; n];
    for (k, thing) in spec.things.iter().enumerate() {
        let id = (k + 1) as u32;
        let b = thing.bbox;
        let margin = if b.width() > 6 && b.height() > 6 { 1usize } else { 0 };
        let parts = taxonomy.parts_of(thing.class_id);
        for y in b.y0 as usize + margin..b.y1 as usize - margin {
            for x in b.x0 as usize + margin..b.x1 as usize - margin {
                let i = y * w + x;
                gt_sem[i] = thing.class_id;
                gt_inst[i] = id;
                gt_part[i] = match parts {
                    None => 0,
                    Some(list) => {
                        let band = (y - b.y0 as usize) * list.len() / b.height();
                        band.min(list.len() - 1) as u32 + 1
                    }
                };
            }
        }
        // observed part groups follow the (possibly eroded) mask
        let mask: Vec<bool> = (0..n).map(|i| gt_inst[i] == id).collect();
        let eroded = erode(&mask, h, w, thing.part_erosion);
        for i in 0..n {
            if mask[i] {
                observed_group[i] = if eroded[i] {
                    match parts {
                        None => bg,
                        Some(list) => list[gt_part[i] as usize - 1],
                    }
                } else {
                    bg
                };
            }
        }
    }

    let mut gt = PanopticPartMap::new_void(h, w);
    for i in 0..n {
        gt.set(
            i / w,
            i % w,
            PanopticPartLabel::segment(gt_sem[i], gt_inst[i], gt_part[i]),
        )
        .map_err(|e| SynthError::InvalidSpec(format!("label overflow: {e}")))?;
    }

    // semantic logits
    let sem_order = taxonomy.semantic_channel_order();
    let n_sem = sem_order.len();
    let (sem_hi, sem_lo) = softmax_levels(n_sem, spec.noise.temperature);
    let mut sem_vals = Array3::from_elem((n_sem, h, w), sem_lo);
    for i in 0..n {
        let mut observed = gt_sem[i];
        if spec.noise.flip_prob > 0.0 && rng.gen::<f32>() < spec.noise.flip_prob {
            let alt = sem_order[rng.gen_range(0..n_sem)];
            if alt != observed {
                observed = alt;
            }
        }
        let c = sem_order.iter().position(|&s| s == observed).expect("declared class");
        sem_vals[[c, i / w, i % w]] = sem_hi;
    }
    let semantic = DenseLogits::new(sem_vals, sem_order.clone())
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;

    // part logits over the grouped part channels
    let n_groups = taxonomy.part_groups.len();
    let (part_hi, part_lo) = softmax_levels(n_groups, spec.noise.temperature);
    let mut part_vals = Array3::from_elem((n_groups, h, w), part_lo);
    for i in 0..n {
        let mut observed = observed_group[i];
        if spec.noise.flip_prob > 0.0 && rng.gen::<f32>() < spec.noise.flip_prob {
            let alt = taxonomy.part_groups[rng.gen_range(0..n_groups)];
            if alt != observed {
                observed = alt;
            }
        }
        let c = taxonomy.part_groups.iter().position(|&g| g == observed).expect("group");
        part_vals[[c, i / w, i % w]] = part_hi;
    }
    let parts = DenseLogits::new(part_vals, taxonomy.part_groups.clone())
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;

    // instance predictions: box-local masks over the ground-truth instance
    let (mask_hi, mask_lo) = softmax_levels(2, spec.noise.temperature);
    let mut instances = Vec::with_capacity(spec.things.len());
    for (k, thing) in spec.things.iter().enumerate() {
        let id = (k + 1) as u32;
        let b = thing.bbox;
        let mut mask = Array2::from_elem((b.height(), b.width()), mask_lo);
        for by in 0..b.height() {
            for bx in 0..b.width() {
                let i = (b.y0 as usize + by) * w + b.x0 as usize + bx;
                let mut on = gt_inst[i] == id;
                if spec.noise.flip_prob > 0.0 && rng.gen::<f32>() < spec.noise.flip_prob {
                    on = !on;
                }
                if on {
                    mask[[by, bx]] = mask_hi;
                }
            }
        }
        let confidence = 1.0 - spec.noise.conf_jitter * rng.gen::<f32>();
        instances.push(InstancePrediction {
            mask,
            bbox: b,
            class_id: thing.class_id,
            confidence,
        });
    }

    Ok(Scene { gt, semantic, parts, instances })
}

/// Naive reference fusion: enumerates every candidate label per pixel,
/// evaluates the fusion operation scalar by scalar in the same channel order
/// as the engine, and applies the same tie and post-processing rules. Shares
/// no code with the fusion engine.
pub fn oracle_fuse(
    semantic: &DenseLogits,
    parts: &DenseLogits,
    instances: &[CanvasInstance],
    cfg: &FusionConfig,
    taxonomy: &ClassTaxonomy,
) -> PanopticPartMap {
    fn sig(x: f32) -> f32 {
        1.0 / (1.0 + (-x).exp())
    }
    fn fl3(a: f32, b: f32, c: f32) -> f32 {
        (sig(a) + sig(b) + sig(c)) * (a + b + c)
    }
    fn fl2(a: f32, b: f32) -> f32 {
        (sig(a) + sig(b)) * (a + b)
    }

    let (h, w) = (semantic.height(), semantic.width());
    let bg = taxonomy.background_group();
    let bg_ch = parts.channel_of(bg).expect("background channel");
    let mut ordered: Vec<&CanvasInstance> = instances.iter().collect();
    ordered.sort_by_key(|i| i.id);

    let mut out = PanopticPartMap::new_void(h, w);
    for y in 0..h {
        for x in 0..w {
            // enumerate candidates in stack order, keeping the first maximum
            let mut best = f32::NEG_INFINITY;
            let mut winner: Option<(u32, u32, u32)> = None;
            let mut consider = |score: f32, ident: (u32, u32, u32)| {
                if score > best {
                    best = score;
                    winner = Some(ident);
                }
            };
            for &s in &taxonomy.stuff_classes {
                let sv = semantic.at(semantic.channel_of(s).unwrap(), y, x);
                match taxonomy.parts_of(s) {
                    None => {
                        consider(fl2(sv, parts.at(bg_ch, y, x)), (s, 0, 0));
                    }
                    Some(groups) => {
                        for (gi, &g) in groups.iter().enumerate() {
                            let pv = parts.at(parts.channel_of(g).unwrap(), y, x);
                            consider(fl2(sv, pv), (s, 0, gi as u32 + 1));
                        }
                    }
                }
            }
            for inst in &ordered {
                let inside = inst.bbox.contains(y, x);
                let sv = if inside {
                    semantic.at(semantic.channel_of(inst.class_id).unwrap(), y, x)
                } else {
                    0.0
                };
                let mv = if inside { inst.mask[[y, x]] } else { 0.0 };
                match taxonomy.parts_of(inst.class_id) {
                    None => {
                        let pv = if inside { parts.at(bg_ch, y, x) } else { 0.0 };
                        consider(fl3(sv, mv, pv), (inst.class_id, inst.id, 0));
                    }
                    Some(groups) => {
                        for (gi, &g) in groups.iter().enumerate() {
                            let pv = if inside {
                                parts.at(parts.channel_of(g).unwrap(), y, x)
                            } else {
                                0.0
                            };
                            consider(fl3(sv, mv, pv), (inst.class_id, inst.id, gi as u32 + 1));
                        }
                    }
                }
            }
            let label = match winner {
                None => PanopticPartLabel::Void,
                Some((_, id, p)) if id != 0 => {
                    let (s, _, _) = winner.unwrap();
                    PanopticPartLabel::segment(s, id, p)
                }
                Some(_) => {
                    // stuff winner: identity from the raw semantic map
                    let mut best_v = f32::NEG_INFINITY;
                    let mut cls = None;
                    for &s in &taxonomy.stuff_classes {
                        let v = semantic.at(semantic.channel_of(s).unwrap(), y, x);
                        if v > best_v {
                            best_v = v;
                            cls = Some(s);
                        }
                    }
                    match cls {
                        Some(s) => PanopticPartLabel::segment(s, 0, 0),
                        None => PanopticPartLabel::Void,
                    }
                }
            };
            out.set(y, x, label).expect("oracle label fits encoding");
        }
    }

    // independent minimum-area filter for stuff regions
    if cfg.min_stuff_area > 1 {
        let stuff_class = |v: u32| match crate::label::decode_label(v) {
            PanopticPartLabel::Segment { semantic: s, instance: 0, .. }
                if taxonomy.is_stuff(s) =>
            {
                Some(s)
            }
            _ => None,
        };
        let mut seen = vec![false; h * w];
        for start in 0..h * w {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let Some(class) = stuff_class(out.encoded()[start]) else {
                continue;
            };
            let mut frontier = vec![start];
            let mut members = vec![start];
            while let Some(i) = frontier.pop() {
                let (y, x) = (i / w, i % w);
                for (dy, dx) in [(0i64, -1i64), (0, 1), (-1, 0), (1, 0)] {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && stuff_class(out.encoded()[j]) == Some(class) {
                        seen[j] = true;
                        frontier.push(j);
                        members.push(j);
                    }
                }
            }
            if members.len() < cfg.min_stuff_area {
                for &i in &members {
                    out.set_encoded(i / w, i % w, 0);
                }
            }
        }
    }
    out
}

/// A random scene spec with non-overlapping instance boxes (grid placement).
pub fn random_scene(
    seed: u64,
    taxonomy: &ClassTaxonomy,
    height: usize,
    width: usize,
    max_things: usize,
    noisy: bool,
) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (2usize, 3usize);
    let (ch, cw) = (height / rows, width / cols);
    let mut cells: Vec<(usize, usize)> =
        (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
    let n_things = rng.gen_range(0..=max_things.min(cells.len()));
    let mut things = Vec::with_capacity(n_things);
    for _ in 0..n_things {
        let cell = cells.remove(rng.gen_range(0..cells.len()));
        let (y0, x0) = (cell.0 * ch, cell.1 * cw);
        let bw = rng.gen_range(2..=cw.max(3) - 1);
        let bh = rng.gen_range(2..=ch.max(3) - 1);
        let bx = x0 + rng.gen_range(0..=cw - bw);
        let by = y0 + rng.gen_range(0..=ch - bh);
        let class_id = taxonomy.thing_classes[rng.gen_range(0..taxonomy.thing_classes.len())];
        things.push(ThingSpec {
            class_id,
            bbox: PixelBox::new(bx as u32, by as u32, (bx + bw) as u32, (by + bh) as u32),
            part_erosion: 0,
        });
    }
    let noise = if noisy {
        NoiseModel {
            temperature: 0.05 + rng.gen::<f32>() * 0.25,
            flip_prob: rng.gen::<f32>() * 0.1,
            conf_jitter: rng.gen::<f32>() * 0.3,
        }
    } else {
        NoiseModel::default()
    };
    SceneSpec {
        height,
        width,
        seed: rng.gen(),
        stuff_regions: rng.gen_range(1..=3.min(width)),
        things,
        noise,
    }
}

/// Scene specs engineered so the part prediction disagrees with the object
/// contours: instance masks are eroded before rendering part logits, which
/// makes top-down merging emit void rings while the joint fusion does not.
/// Roughly one member in ten is conflict-free as a control.
pub fn conflict_suite(n: usize, seed: u64, taxonomy: &ClassTaxonomy) -> Vec<SceneSpec> {
    assert!(n >= 1);
    let partitionable: Vec<u32> = taxonomy
        .thing_classes
        .iter()
        .copied()
        .filter(|&c| taxonomy.is_partitionable(c))
        .collect();
    assert!(!partitionable.is_empty(), "conflict suite needs partitionable things");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let erosion = if i % 10 == 9 { 0 } else { rng.gen_range(1..=2) };
            let (h, w) = (48usize, 48usize);
            let n_things = rng.gen_range(1..=3);
            let cells = [(0u32, 0u32), (0, 24), (24, 0), (24, 24)];
            let mut order: Vec<usize> = (0..cells.len()).collect();
            let mut things = Vec::new();
            for _ in 0..n_things {
                let cell = cells[order.remove(rng.gen_range(0..order.len()))];
                let size = rng.gen_range(12..=20u32);
                let (cy, cx) = cell;
                let by = cy + rng.gen_range(0..=24 - size.min(24));
                let bx = cx + rng.gen_range(0..=24 - size.min(24));
                things.push(ThingSpec {
                    class_id: partitionable[rng.gen_range(0..partitionable.len())],
                    bbox: PixelBox::new(bx, by, bx + size, by + size),
                    part_erosion: erosion,
                });
            }
            SceneSpec {
                height: h,
                width: w,
                seed: rng.gen(),
                stuff_regions: 2,
                things,
                noise: NoiseModel::default(),
            }
        })
        .collect()
}

/// Per-pixel argmax over the grouped part channels, the part input expected
/// by the top-down baseline.
pub fn argmax_part_groups(parts: &DenseLogits) -> Array2<u32> {
    let (h, w) = (parts.height(), parts.width());
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = f32::NEG_INFINITY;
        let mut group = parts.channel_meta()[0];
        for (c, &g) in parts.channel_meta().iter().enumerate() {
            let v = parts.at(c, y, x);
            if v > best {
                best = v;
                group = g;
            }
        }
        group
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::fusion;

    fn clean_spec() -> SceneSpec {
        SceneSpec {
            height: 24,
            width: 24,
            seed: 7,
            stuff_regions: 2,
            things: vec![ThingSpec {
                class_id: 12,
                bbox: PixelBox::new(4, 4, 16, 16),
                part_erosion: 0,
            }],
            noise: NoiseModel::default(),
        }
    }

    fn small_cfg() -> FusionConfig {
        FusionConfig { min_stuff_area: 0, ..FusionConfig::default() }
    }

    #[test]
    fn generate_is_deterministic() {
        let t = fixtures::cpp();
        let a = generate(&clean_spec(), &t).unwrap();
        let b = generate(&clean_spec(), &t).unwrap();
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.semantic, b.semantic);
        assert_eq!(a.parts, b.parts);
        assert_eq!(a.instances, b.instances);
    }

    #[test]
    fn clean_scene_reproduces_ground_truth() {
        let t = fixtures::cpp();
        let scene = generate(&clean_spec(), &t).unwrap();
        let out = fusion::jppf_pipeline(
            &scene.semantic,
            &scene.parts,
            &scene.instances,
            &small_cfg(),
            &t,
        )
        .unwrap();
        assert_eq!(out, scene.gt);
    }

    #[test]
    fn zero_things_means_pure_stuff() {
        let t = fixtures::cpp();
        let mut spec = clean_spec();
        spec.things.clear();
        let scene = generate(&spec, &t).unwrap();
        assert!(scene.instances.is_empty());
        assert!(scene.gt.labels().all(|l| match l {
            PanopticPartLabel::Segment { semantic, instance, part } =>
                t.is_stuff(semantic) && instance == 0 && part == 0,
            PanopticPartLabel::Void => false,
        }));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let t = fixtures::cpp();
        let mut spec = clean_spec();
        spec.things[0].bbox = PixelBox::new(4, 4, 40, 16);
        assert!(matches!(generate(&spec, &t), Err(SynthError::InvalidSpec(_))));
        let mut spec = clean_spec();
        spec.noise.flip_prob = 1.0;
        assert!(generate(&spec, &t).is_err());
        let mut spec = clean_spec();
        spec.things[0].class_id = 1; // stuff
        assert!(generate(&spec, &t).is_err());
    }

    #[test]
    fn oracle_agrees_on_a_noisy_scene() {
        let t = fixtures::cpp();
        let spec = random_scene(99, &t, 32, 32, 4, true);
        let scene = generate(&spec, &t).unwrap();
        let cfg = small_cfg();
        let survivors = fusion::preprocess_instances(
            &scene.instances,
            &cfg,
            scene.semantic.height(),
            scene.semantic.width(),
        )
        .unwrap();
        let engine =
            fusion::fuse_candidates(&scene.semantic, &scene.parts, &survivors, &cfg, &t).unwrap();
        let oracle = oracle_fuse(&scene.semantic, &scene.parts, &survivors, &cfg, &t);
        assert_eq!(engine, oracle);
    }

    #[test]
    fn oracle_empty_competition_is_void() {
        use crate::taxonomy::ClassTaxonomy;
        use std::collections::HashMap;
        // a taxonomy with no stuff is invalid for the pipeline, but the
        // oracle itself degrades to an all-void map
        let t = ClassTaxonomy {
            stuff_classes: vec![],
            thing_classes: vec![],
            part_groups: vec![0],
            class_parts: HashMap::new(),
            names: HashMap::new(),
            part_names: HashMap::new(),
        };
        let sem = DenseLogits::new(Array3::from_elem((1, 2, 2), 0.5), vec![99]).unwrap();
        let parts = DenseLogits::new(Array3::from_elem((1, 2, 2), 0.5), vec![0]).unwrap();
        let out = oracle_fuse(&sem, &parts, &[], &small_cfg(), &t);
        assert!(out.labels().all(|l| l.is_void()));
    }

    #[test]
    fn conflict_suite_members_produce_void_rings_under_topdown() {
        let t = fixtures::cpp();
        let specs = conflict_suite(3, 11, &t);
        let spec = specs.iter().find(|s| s.things[0].part_erosion > 0).unwrap();
        let scene = generate(spec, &t).unwrap();
        let cfg = small_cfg();
        let pan =
            fusion::panoptic_fuse(&scene.semantic, &scene.instances, &cfg, &t).unwrap();
        let part_map = argmax_part_groups(&scene.parts);
        let merged = crate::merge::merge_top_down(&pan, &part_map, &t).unwrap();
        let jppf = fusion::jppf_pipeline(
            &scene.semantic,
            &scene.parts,
            &scene.instances,
            &cfg,
            &t,
        )
        .unwrap();
        assert!(merged.density() < 1.0, "expected void ring in top-down output");
        assert_eq!(jppf.density(), 1.0);
    }
}
