//! Command-line surface: fuse, panoptic, merge, eval, synth, render,
//! validate. Exit codes: 0 ok, 2 bad input, 3 internal invariant violation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use jppf::fusion::{self, FusionConfig};
use jppf::instance::InstancePrediction;
use jppf::io::{self, labelmap, render as render_io};
use jppf::logits::DenseLogits;
use jppf::metrics;
use jppf::synth;
use jppf::taxonomy::ClassTaxonomy;
use jppf::PanopticMap;

#[derive(Parser)]
#[command(name = "jppf", version, about = "Joint panoptic-part fusion toolkit")]
struct Cli {
    /// Worker threads (0 = all cores). Output is thread-count independent.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct FusionFlags {
    /// JSON file with fusion parameters; CLI flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    min_stuff_area: Option<usize>,
    #[arg(long)]
    conf_threshold: Option<f32>,
    #[arg(long)]
    iou_threshold: Option<f64>,
}

impl FusionFlags {
    fn resolve(&self) -> Result<FusionConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => serde_json::from_str(&read_text(path)?)
                .map_err(|e| CliError::bad(format!("bad fusion config: {e}")))?,
            None => FusionConfig::default(),
        };
        if let Some(v) = self.min_stuff_area {
            cfg.min_stuff_area = v;
        }
        if let Some(v) = self.conf_threshold {
            cfg.conf_threshold = v;
        }
        if let Some(v) = self.iou_threshold {
            cfg.iou_threshold = v;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fuse semantic, part and instance predictions into a panoptic-part map.
    Fuse {
        #[arg(long)]
        semantic: PathBuf,
        #[arg(long)]
        parts: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write every fused candidate channel into this directory.
        #[arg(long)]
        dump_candidates: Option<PathBuf>,
        #[command(flatten)]
        fusion: FusionFlags,
    },
    /// Panoptic-only fusion of semantic and instance predictions.
    Panoptic {
        #[arg(long)]
        semantic: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        fusion: FusionFlags,
    },
    /// Top-down baseline: overlay a grouped-part map on a panoptic map.
    Merge {
        /// Panoptic map as a label-map PNG (part byte ignored).
        #[arg(long)]
        panoptic: PathBuf,
        /// Grouped part ids as an H x W u32 tensor.
        #[arg(long)]
        parts_map: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Evaluate a prediction against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        /// Metrics JSON (stdout when omitted).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Optional per-class CSV.
        #[arg(long)]
        per_class: Option<PathBuf>,
    },
    /// Generate a synthetic scene directory from a scene spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Overrides the seed in the spec file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a label map to an 8-bit color PNG.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Lint a taxonomy config and, optionally, a scene directory.
    Validate {
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        scene: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    BadInput(String),
    Internal(String),
}

impl CliError {
    fn bad(msg: impl Into<String>) -> Self {
        Self::BadInput(msg.into())
    }
}

macro_rules! impl_bad_input {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::BadInput(e.to_string())
            }
        }
    )*};
}

impl_bad_input!(
    jppf::taxonomy::TaxonomyError,
    jppf::io::SceneIoError,
    jppf::io::labelmap::LabelMapError,
    jppf::io::tensor::TensorError,
    jppf::logits::LogitsError,
    jppf::synth::SynthError,
    jppf::merge::MergeError,
    jppf::metrics::MetricsError,
    std::io::Error,
    image::ImageError
);

impl From<jppf::fusion::FusionError> for CliError {
    fn from(e: jppf::fusion::FusionError) -> Self {
        // shape inconsistencies between validated inputs indicate a broken
        // invariant rather than a malformed file
        match e {
            jppf::fusion::FusionError::ShapeMismatch { .. } => CliError::Internal(e.to_string()),
            _ => CliError::BadInput(e.to_string()),
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::bad(format!("cannot read {}: {e}", path.display())))
}

fn load_taxonomy(path: &Path) -> Result<ClassTaxonomy, CliError> {
    ClassTaxonomy::from_json(&read_text(path)?).map_err(CliError::from)
}

fn load_semantic(path: &Path, taxonomy: &ClassTaxonomy) -> Result<DenseLogits, CliError> {
    Ok(io::read_logits(path, taxonomy.semantic_channel_order())?)
}

fn load_parts(path: &Path, taxonomy: &ClassTaxonomy) -> Result<DenseLogits, CliError> {
    Ok(io::read_logits(path, taxonomy.part_groups.clone())?)
}

fn load_instances(path: &Path) -> Result<Vec<InstancePrediction>, CliError> {
    Ok(io::read_instances(path)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build();
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::BadInput(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Fuse { semantic, parts, instances, taxonomy, output, dump_candidates, fusion } => {
            let t = load_taxonomy(&taxonomy)?;
            let cfg = fusion.resolve()?;
            let s = load_semantic(&semantic, &t)?;
            let p = load_parts(&parts, &t)?;
            let raw = load_instances(&instances)?;
            let survivors =
                fusion::preprocess_instances(&raw, &cfg, s.height(), s.width())?;
            let stack = fusion::build_candidate_stack(&s, &p, &survivors, &t)?;
            let map = fusion::resolve(&stack, &s, &cfg, &t)?;
            labelmap::write_labelmap_png(&map, &output)?;
            if let Some(dir) = dump_candidates {
                dump_stack(&stack, &dir)?;
            }
            Ok(())
        }
        Command::Panoptic { semantic, instances, taxonomy, output, fusion } => {
            let t = load_taxonomy(&taxonomy)?;
            let cfg = fusion.resolve()?;
            let s = load_semantic(&semantic, &t)?;
            let raw = load_instances(&instances)?;
            let pan = fusion::panoptic_fuse(&s, &raw, &cfg, &t)?;
            labelmap::write_labelmap_png(&panoptic_to_part_map(&pan), &output)?;
            Ok(())
        }
        Command::Merge { panoptic, parts_map, taxonomy, output } => {
            let t = load_taxonomy(&taxonomy)?;
            let pan_map = labelmap::read_labelmap_png(&panoptic)?;
            let pan = PanopticMap::from_part_map(&pan_map);
            let groups = io::read_u32_map(&parts_map)?;
            let merged = jppf::merge_top_down(&pan, &groups, &t)?;
            labelmap::write_labelmap_png(&merged, &output)?;
            Ok(())
        }
        Command::Eval { pred, gt, taxonomy, output, per_class } => {
            let t = load_taxonomy(&taxonomy)?;
            let pred_map = labelmap::read_labelmap_png(&pred)?;
            let gt_map = labelmap::read_labelmap_png(&gt)?;
            let part_pq = metrics::part_pq(&pred_map, &gt_map, &t)?;
            let sem_classes = t.semantic_channel_order();
            let miou_sem = metrics::miou(
                &metrics::semantic_map(&pred_map),
                &metrics::semantic_map(&gt_map),
                &sem_classes,
            )?;
            let miou_part = metrics::miou(
                &metrics::part_group_map(&pred_map, &t),
                &metrics::part_group_map(&gt_map, &t),
                &t.part_groups,
            )?;
            let report = json!({
                "PartPQ": {
                    "All": part_pq.all,
                    "P": part_pq.partitionable,
                    "NP": part_pq.non_partitionable,
                },
                "PQ": part_pq.pq,
                "mIoU_semantic": miou_sem.mean,
                "mIoU_part": miou_part.mean,
                "density": metrics::density(&pred_map),
            });
            let text = serde_json::to_string_pretty(&report).expect("serializable");
            match output {
                Some(path) => std::fs::write(path, text)?,
                None => println!("{text}"),
            }
            if let Some(path) = per_class {
                let mut csv = String::from("class,name,partitionable,part_pq,pq,tp,fp,fn\n");
                for c in &part_pq.per_class {
                    let name = t.names.get(&c.class).map(String::as_str).unwrap_or("");
                    csv.push_str(&format!(
                        "{},{},{},{:.6},{:.6},{},{},{}\n",
                        c.class, name, c.partitionable, c.part_pq, c.pq, c.tp, c.fp, c.fn_
                    ));
                }
                std::fs::write(path, csv)?;
            }
            Ok(())
        }
        Command::Synth { spec, taxonomy, output, seed } => {
            let t = load_taxonomy(&taxonomy)?;
            let mut scene_spec: synth::SceneSpec = serde_json::from_str(&read_text(&spec)?)
                .map_err(|e| CliError::bad(format!("bad scene spec: {e}")))?;
            if let Some(s) = seed {
                scene_spec.seed = s;
            }
            let scene = synth::generate(&scene_spec, &t)?;
            std::fs::create_dir_all(&output)?;
            io::write_logits(&scene.semantic, output.join("semantic.jppt"))?;
            io::write_logits(&scene.parts, output.join("parts.jppt"))?;
            io::write_instances(&output, &scene.instances)?;
            labelmap::write_labelmap_png(&scene.gt, output.join("gt.png"))
                .map_err(|e| CliError::Internal(e.to_string()))?;
            io::write_u32_map(
                &synth::argmax_part_groups(&scene.parts),
                output.join("part_groups.jppt"),
            )?;
            let spec_text = serde_json::to_string_pretty(&scene_spec).expect("serializable");
            std::fs::write(output.join("spec.json"), spec_text)?;
            Ok(())
        }
        Command::Render { input, taxonomy, output } => {
            let t = load_taxonomy(&taxonomy)?;
            let map = labelmap::read_labelmap_png(&input)?;
            render_io::render_to_png(&map, &t, &output)?;
            Ok(())
        }
        Command::Validate { taxonomy, scene } => {
            let t = load_taxonomy(&taxonomy)?;
            println!("taxonomy ok: {} stuff, {} things, {} partitionable",
                t.stuff_classes.len(), t.thing_classes.len(), t.class_parts.len());
            if let Some(dir) = scene {
                validate_scene(&dir, &t)?;
                println!("scene ok: {}", dir.display());
            }
            Ok(())
        }
    }
}

fn panoptic_to_part_map(pan: &PanopticMap) -> jppf::PanopticPartMap {
    jppf::PanopticPartMap::from_encoded(
        pan.height(),
        pan.width(),
        pan.encoded().to_vec(),
    )
}

fn dump_stack(stack: &jppf::fusion::CandidateStack, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    let mut identities = Vec::new();
    for (i, ch) in stack.channels.iter().enumerate() {
        // boxed channels are written as full-canvas maps, zero outside
        let mut full = vec![0.0f32; stack.height * stack.width];
        match ch.region {
            None => full.copy_from_slice(ch.scores.as_slice().expect("contiguous")),
            Some(b) => {
                for (by, row) in ch.scores.outer_iter().enumerate() {
                    let y = b.y0 as usize + by;
                    for (bx, &v) in row.iter().enumerate() {
                        full[y * stack.width + b.x0 as usize + bx] = v;
                    }
                }
            }
        }
        io::tensor::write_tensor(
            &io::tensor::Tensor::F32 {
                dims: vec![stack.height as u32, stack.width as u32],
                data: full,
            },
            dir.join(format!("channel_{i:03}.jppt")),
        )?;
        identities.push(json!({
            "channel": i,
            "semantic": ch.id.semantic,
            "instance": ch.id.instance,
            "part": ch.id.part,
        }));
    }
    std::fs::write(
        dir.join("channels.json"),
        serde_json::to_string_pretty(&identities).expect("serializable"),
    )?;
    Ok(())
}

fn validate_scene(dir: &Path, taxonomy: &ClassTaxonomy) -> Result<(), CliError> {
    let semantic = load_semantic(&dir.join("semantic.jppt"), taxonomy)?;
    let parts = load_parts(&dir.join("parts.jppt"), taxonomy)?;
    if (semantic.height(), semantic.width()) != (parts.height(), parts.width()) {
        return Err(CliError::bad("semantic and part maps disagree on canvas size"));
    }
    let instances = load_instances(&dir.join("instances.json"))?;
    for (i, inst) in instances.iter().enumerate() {
        if !taxonomy.is_thing(inst.class_id) {
            return Err(CliError::bad(format!("instance {i}: class {} is not a thing", inst.class_id)));
        }
        if inst.bbox.x1 as usize > semantic.width() || inst.bbox.y1 as usize > semantic.height() {
            return Err(CliError::bad(format!("instance {i}: box outside canvas")));
        }
        if inst.mask.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CliError::bad(format!("instance {i}: mask values outside [0, 1]")));
        }
    }
    let gt_path = dir.join("gt.png");
    if gt_path.exists() {
        let gt = labelmap::read_labelmap_png(&gt_path)?;
        let issues = gt.validate(taxonomy);
        if !issues.is_empty() {
            return Err(CliError::bad(format!(
                "ground truth violates label invariants: {}",
                issues.join("; ")
            )));
        }
    }
    Ok(())
}
