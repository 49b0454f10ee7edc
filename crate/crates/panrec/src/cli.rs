//! The `panrec` command line.
//!
//! Every subcommand except `evaluate` prints a JSON manifest naming the files
//! it wrote. When a required input flag is missing and stdin is piped, the
//! manifest of the previous stage fills the gap, so stages chain with `|`:
//!
//! ```text
//! panrec synth-scene --seed 7 | panrec make-gt | panrec evaluate
//! ```
//!
//! Optional inputs are only taken from a manifest that was already read for a
//! required one, so a run with every required flag never touches stdin.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{IsTerminal, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use panrec_core::assembly::{assemble_panoptic_surface, AssemblyConfig};
use panrec_core::clustering::{cluster_instances, SurfacePoint};
use panrec_core::hierarchy::{run_coarse_to_fine, HierarchyConfig};
use panrec_core::lifting::{lift, LiftedVolumes};
use panrec_core::propagation::InstanceChannelVolume;
use panrec_core::supervision::{
    class_weights_inverse_log, depth_loss_log_l1, loss_geometry, loss_instance, loss_semantic, loss_total,
    mesh_to_tsdf_gt, volumetric_fuse_depths, ClassWeightTable, DepthFrame, FusionConfig, LevelLosses, LossParts,
    LossWeights,
};
use panrec_core::volume::extract_surface_mesh;
use panrec_core::{
    CameraIntrinsics, CategoryId, GridSpec, Label, PanopticVoxel, Raster, RigidTransform, SparseVolume, TriangleMesh,
    Vec3, VoxelMask,
};

use crate::config::{Profile, RunConfig};
use crate::error::{Error, IoContext, Result};
use crate::evaluate::{evaluate, pair_inputs, write_csv, EvalOptions, ScenePair};
use crate::formats::masks::{decode_rle, read_mask_set, write_mask_set};
use crate::formats::mesh::{read_mesh, write_mesh};
use crate::formats::raster::{read_depth, read_raster, write_depth, write_raster};
use crate::formats::spvl::{self, PayloadKind};
use crate::formats::{open, read_json, write_json};
use crate::replay::{read_replay, write_gt_hierarchy};
use crate::synth::{self, SynthConfig, SyntheticScene};

#[derive(Parser, Debug)]
#[command(
    name = "panrec",
    version,
    about = "Panoptic 3D scene reconstruction from a single RGB-D view"
)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Option<Command>,
}

/// Run configuration flags, accepted by every subcommand.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Dataset profile; fixes the voxel size and category table
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    /// Start from a configuration written by --dump-config
    #[arg(long, global = true, value_name = "FILE")]
    run_config: Option<PathBuf>,
    /// Print the effective configuration as JSON and exit
    #[arg(long, global = true)]
    dump_config: bool,
    /// Voxel size in meters
    #[arg(long, global = true)]
    voxel: Option<f32>,
    /// Grid size in voxels, one value or three comma-separated
    #[arg(long, global = true, value_delimiter = ',', num_args = 1..=3)]
    dims: Option<Vec<u32>>,
    /// Truncation in voxels
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Surface band of assembly and evaluation, in voxels
    #[arg(long, global = true)]
    tau_s: Option<f64>,
    /// Occupancy threshold of the hierarchy
    #[arg(long, global = true)]
    theta_occ: Option<f64>,
    /// Segment IoU needed for a match
    #[arg(long, global = true)]
    iou: Option<f64>,
    #[arg(long, global = true)]
    max_instances: Option<usize>,
    /// Clustering radius in meters
    #[arg(long, global = true)]
    radius: Option<f64>,
    /// Hierarchy levels
    #[arg(long, global = true)]
    levels: Option<usize>,
}

impl ConfigArgs {
    fn explicit_grid(&self) -> bool {
        self.voxel.is_some() || self.dims.is_some()
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match (&self.run_config, self.profile) {
            (Some(_), Some(_)) => return Err(Error::usage("--profile and --run-config cannot be combined")),
            (Some(path), None) => {
                let text = std::fs::read_to_string(path).at(path)?;
                RunConfig::from_json(&text).map_err(|e| Error::format(path, e.to_string()))?
            }
            (None, p) => RunConfig::for_profile(p.unwrap_or(Profile::Synthetic)),
        };
        if let Some(v) = self.voxel {
            c.voxel = v;
        }
        if let Some(d) = &self.dims {
            c.grid_dims = match d[..] {
                [n] => [n; 3],
                [x, y, z] => [x, y, z],
                _ => return Err(Error::usage("--dims takes one or three values")),
            };
        }
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field { c.$target = v; })*
            };
        }
        set!(tau => tau, tau_s => tau_s, theta_occ => theta_occ, iou => theta_iou,
             max_instances => max_instances, radius => radius, levels => levels);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a box-world room: mesh, depth, 2D masks and features
    SynthScene(SynthArgs),
    /// Truncated signed distance ground truth from a labeled mesh
    MakeGt(MakeGtArgs),
    /// Lift a depth map, features and masks into the camera frustum grid
    Backproject(BackprojectArgs),
    /// Coarse-to-fine generation followed by panoptic surface assembly
    Assemble(AssembleArgs),
    /// Fuse depth frames into a truncated distance volume
    Fuse(FuseArgs),
    /// Group things surface points into instances
    Cluster(ClusterArgs),
    /// PRQ / RSQ / RRQ of predictions against ground truth
    Evaluate(EvaluateArgs),
    /// Evaluate the training objective on stored predictions and targets
    Loss(LossArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Scene seed [default: the configured seed]
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 4)]
    boxes: usize,
    /// Output directory [default: scene-<seed>]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MakeGtArgs {
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Panoptic volume to write
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for the replayable level hierarchy [default: <out>_hierarchy]
    #[arg(long)]
    hierarchy_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BackprojectArgs {
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Per-pixel feature raster
    #[arg(long)]
    features: Option<PathBuf>,
    /// Mask set manifest (.json) or mask logit raster
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Distance volume; features and instances go next to it
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed of the per-voxel pixel choice [default: the configured seed]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct AssembleArgs {
    /// Lifted distance volume written by backproject
    #[arg(long = "seed", value_name = "VOL")]
    lifted: Option<PathBuf>,
    /// Level predictor, `replay:<hierarchy dir>`
    #[arg(long)]
    predictor: Option<String>,
    /// Camera whose frustum bounds the coarsest level
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Labeled surface mesh of the result
    #[arg(long)]
    mesh_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Frame list: {"grid"?, "frames": [{"depth", "intrinsics", "pose"?, "valid"?}]}
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    /// Panoptic or label volume, or a labeled mesh
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Prediction file or directory
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Ground-truth file or directory
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Restrict evaluation to this camera's frustum
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// JSON report file; the report is printed either way
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Average per scene instead of pooling matches
    #[arg(long)]
    per_scene_macro: bool,
}

#[derive(Args, Debug)]
struct LossArgs {
    /// Loss description: {"levels": [...], "depth"?, "weights"?, "class_counts"?, "intrinsics"?}
    #[arg(long)]
    config: PathBuf,
}

impl Command {
    fn paths(&self) -> (Vec<PathBuf>, Option<PathBuf>) {
        let some = |v: &[&Option<PathBuf>]| v.iter().filter_map(|p| (*p).clone()).collect();
        match self {
            Command::SynthScene(a) => (vec![], a.out.clone()),
            Command::MakeGt(a) => (some(&[&a.mesh, &a.intrinsics]), a.out.clone()),
            Command::Backproject(a) => (some(&[&a.depth, &a.intrinsics, &a.features, &a.masks]), a.out.clone()),
            Command::Assemble(a) => (some(&[&a.lifted, &a.intrinsics]), a.out.clone()),
            Command::Fuse(a) => (vec![a.frames.clone()], a.out.clone()),
            Command::Cluster(a) => (some(&[&a.input]), a.out.clone()),
            Command::Evaluate(a) => (some(&[&a.pred, &a.gt, &a.intrinsics]), a.out.clone()),
            Command::Loss(a) => (vec![a.config.clone()], None),
        }
    }
}

/// Files produced so far by a chain of stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Manifest {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mesh: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masks: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_logits: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hierarchy: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lifted: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred_mesh: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fused: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segments: Option<PathBuf>,
}

impl Manifest {
    fn out_dir(&self) -> PathBuf {
        self.dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

/// Manifest of the previous stage, read from stdin on first need.
#[derive(Default)]
struct Upstream(Option<Option<Manifest>>);

impl Upstream {
    fn load(&mut self) -> Result<Option<&Manifest>> {
        if self.0.is_none() {
            self.0 = Some(read_stdin_manifest()?);
        }
        Ok(self.0.as_ref().and_then(Option::as_ref))
    }

    /// The manifest if an earlier lookup already read it.
    fn loaded(&self) -> Option<&Manifest> {
        self.0.as_ref().and_then(Option::as_ref)
    }

    fn require(
        &mut self,
        flag: &Option<PathBuf>,
        name: &str,
        field: fn(&Manifest) -> &Option<PathBuf>,
    ) -> Result<PathBuf> {
        if let Some(p) = flag {
            return Ok(p.clone());
        }
        self.load()?
            .and_then(|m| field(m).clone())
            .ok_or_else(|| Error::usage(format!("--{name} is required (no upstream manifest provides it)")))
    }

    fn optional(&self, flag: &Option<PathBuf>, field: fn(&Manifest) -> &Option<PathBuf>) -> Option<PathBuf> {
        flag.clone().or_else(|| self.loaded().and_then(|m| field(m).clone()))
    }

    fn into_manifest(self) -> Manifest {
        self.0.flatten().unwrap_or_default()
    }
}

fn read_stdin_manifest() -> Result<Option<Manifest>> {
    let stdin = std::io::stdin();
    if stdin.is_terminal() {
        return Ok(None);
    }
    let path = Path::new("<stdin>");
    let mut text = String::new();
    stdin.lock().read_to_string(&mut text).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(None);
    }
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::format(path, e.to_string()))
}

fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let k: CameraIntrinsics = read_json(path)?;
    k.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(k)
}

/// Grid from the flags when given, else from the manifest, else the default.
fn grid_for(cfg: &RunConfig, explicit: bool, upstream: &Upstream) -> Result<GridSpec> {
    match upstream.loaded().and_then(|m| m.grid) {
        Some(g) if !explicit => Ok(g),
        _ => cfg.camera_grid(),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn relative_to(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn synth_scene(a: &SynthArgs, cfg: &RunConfig) -> Result<Manifest> {
    let seed = a.seed.unwrap_or(cfg.seed);
    let dir = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("scene-{seed}")));
    let sc = SynthConfig {
        intrinsics: synth::default_camera(),
        grid: cfg.camera_grid()?,
        tau: cfg.tau,
        categories: cfg.categories.clone(),
    };
    let scene = SyntheticScene::generate(seed, a.boxes, &sc);
    let hits = scene.render();
    let depth = synth::depth_map(&scene.intrinsics, &hits);
    let masks = synth::visible_masks(&scene, &hits);
    let m = Manifest {
        dir: Some(dir.clone()),
        seed: Some(seed),
        grid: Some(sc.grid),
        mesh: Some(dir.join("scene.ply")),
        depth: Some(dir.join("depth.dpth")),
        intrinsics: Some(dir.join("intrinsics.json")),
        masks: Some(dir.join("masks.json")),
        mask_logits: Some(dir.join("mask_logits.dpth")),
        features: Some(dir.join("features.dpth")),
        ..Manifest::default()
    };
    write_mesh(m.mesh.as_deref().unwrap(), &scene.mesh())?;
    write_depth(m.depth.as_deref().unwrap(), &depth)?;
    write_json(m.intrinsics.as_deref().unwrap(), &scene.intrinsics)?;
    write_mask_set(m.masks.as_deref().unwrap(), &masks)?;
    write_raster(m.mask_logits.as_deref().unwrap(), &synth::mask_logits(&masks))?;
    write_raster(
        m.features.as_deref().unwrap(),
        &synth::semantic_features(&scene, &hits, &cfg.categories),
    )?;
    write_json(&dir.join("manifest.json"), &m)?;
    Ok(m)
}

fn make_gt(a: &MakeGtArgs, cfg: &RunConfig, explicit_grid: bool, mut up: Upstream) -> Result<Manifest> {
    let mesh_path = up.require(&a.mesh, "mesh", |m| &m.mesh)?;
    let k_path = up.require(&a.intrinsics, "intrinsics", |m| &m.intrinsics)?;
    let grid = grid_for(cfg, explicit_grid, &up)?;
    let mut m = up.into_manifest();
    let out = a.out.clone().unwrap_or_else(|| m.out_dir().join("gt.spvl"));
    let hierarchy = a.hierarchy_out.clone().unwrap_or_else(|| sibling(&out, "_hierarchy"));
    let mesh = read_mesh(&mesh_path)?;
    if mesh.labels.is_none() {
        return Err(Error::format(&mesh_path, "ground truth needs a labeled mesh"));
    }
    let k = read_intrinsics(&k_path)?;
    let gt = mesh_to_tsdf_gt(&mesh, &k, &grid, cfg.tau)?;
    spvl::write(&out, &gt)?;
    write_gt_hierarchy(&hierarchy, &gt, &cfg.categories, cfg.levels)?;
    log::info!("ground truth has {} voxels", gt.len());
    m.grid = Some(grid);
    m.gt = Some(out);
    m.hierarchy = Some(hierarchy);
    m.intrinsics = Some(k_path);
    Ok(m)
}

fn backproject(a: &BackprojectArgs, cfg: &RunConfig, explicit_grid: bool, mut up: Upstream) -> Result<Manifest> {
    let depth_path = up.require(&a.depth, "depth", |m| &m.depth)?;
    let k_path = up.require(&a.intrinsics, "intrinsics", |m| &m.intrinsics)?;
    let features_path = up.optional(&a.features, |m| &m.features);
    let masks_path = up
        .optional(&a.masks, |m| &m.mask_logits)
        .or_else(|| up.optional(&None, |m| &m.masks));
    let grid = grid_for(cfg, explicit_grid, &up)?;
    let seed = a.seed.or(up.loaded().and_then(|m| m.seed)).unwrap_or(cfg.seed);

    let depth = read_depth(&depth_path)?;
    let k = read_intrinsics(&k_path)?;
    let features = match &features_path {
        Some(p) => read_raster(p)?,
        None => Raster::zeros(depth.width, depth.height, 0),
    };
    let masks = match &masks_path {
        Some(p) if p.extension().is_some_and(|e| e == "json") => synth::mask_logits(&read_mask_set(p)?),
        Some(p) => read_raster(p)?,
        None => Raster::zeros(depth.width, depth.height, 0),
    };
    let lifted = lift(&depth, &k, &grid, cfg.tau, &features, &masks, cfg.max_instances, seed)?;

    let mut m = up.into_manifest();
    let out = a.out.clone().unwrap_or_else(|| m.out_dir().join("lifted.spvl"));
    spvl::write(&out, &lifted.distance)?;
    spvl::write(&sibling(&out, ".features.spvl"), &lifted.features)?;
    spvl::write_as(
        &sibling(&out, ".instances.spvl"),
        lifted.instances.volume(),
        PayloadKind::Logits,
    )?;
    log::info!("lifted {} voxels", lifted.distance.len());
    m.grid = Some(grid);
    m.lifted = Some(out);
    m.intrinsics = Some(k_path);
    Ok(m)
}

fn read_lifted(path: &Path) -> Result<LiftedVolumes> {
    let distance: SparseVolume<f32> = spvl::read(path)?;
    let features: SparseVolume<Vec<f32>> = spvl::read(&sibling(path, ".features.spvl"))?;
    let inst_path = sibling(path, ".instances.spvl");
    let instances = InstanceChannelVolume::from_volume(spvl::read(&inst_path)?)?;
    if !distance.same_support(&features) || !distance.same_support(instances.volume()) {
        return Err(Error::format(path, "lifted volumes do not share one support"));
    }
    Ok(LiftedVolumes {
        distance,
        features,
        instances,
    })
}

fn assemble(a: &AssembleArgs, cfg: &RunConfig, mut up: Upstream) -> Result<Manifest> {
    let lifted_path = up.require(&a.lifted, "seed", |m| &m.lifted)?;
    let predictor = match &a.predictor {
        Some(p) => p.clone(),
        None => match up.load()?.and_then(|m| m.hierarchy.clone()) {
            Some(h) => format!("replay:{}", h.display()),
            None => {
                return Err(Error::usage(
                    "--predictor is required (no upstream manifest provides it)",
                ))
            }
        },
    };
    let Some(dir) = predictor.strip_prefix("replay:") else {
        return Err(Error::usage(format!(
            "unknown predictor {predictor:?}; expected replay:<dir>"
        )));
    };
    let k_path = up.optional(&a.intrinsics, |m| &m.intrinsics);

    let seed = read_lifted(&lifted_path)?;
    let mut replay = read_replay(Path::new(dir))?;
    if replay.levels().len() != cfg.levels {
        return Err(Error::usage(format!(
            "the stored hierarchy has {} levels but {} are configured",
            replay.levels().len(),
            cfg.levels
        )));
    }
    let hcfg = HierarchyConfig {
        levels: cfg.levels,
        theta_occ: cfg.theta_occ,
        frustum: k_path.as_deref().map(read_intrinsics).transpose()?.map(|k| k.frustum()),
        categories: cfg.categories.clone(),
    };
    let result = run_coarse_to_fine(&seed, &mut replay, &hcfg)?;
    let h = &result.heads;
    let acfg = AssemblyConfig::new(cfg.tau_s, cfg.categories.clone())?;
    let (panoptic, stats) = assemble_panoptic_surface(&h.distance, &h.semantic, &h.instances, &acfg)?;
    log::info!("assembly: {stats:?}");

    let mut m = up.into_manifest();
    let out = a.out.clone().unwrap_or_else(|| m.out_dir().join("pred.spvl"));
    spvl::write(&out, &panoptic)?;
    if let Some(mesh_out) = &a.mesh_out {
        write_mesh(mesh_out, &extract_surface_mesh(&panoptic, cfg.tau_s))?;
        m.pred_mesh = Some(mesh_out.clone());
    }
    m.pred = Some(out);
    Ok(m)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FramesFile {
    #[serde(default)]
    grid: Option<GridSpec>,
    frames: Vec<FrameEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameEntry {
    depth: PathBuf,
    intrinsics: PathBuf,
    /// Camera-to-world; identity when absent.
    #[serde(default)]
    pose: Option<RigidTransform>,
    /// Run-length mask of the pixels allowed to contribute.
    #[serde(default)]
    valid: Option<PathBuf>,
}

/// Voxel-aligned box around every backprojected pixel, padded by the band.
fn fusion_grid(frames: &[DepthFrame], voxel: f32, tau: f64) -> Result<GridSpec> {
    let mut lo = Vec3::splat(f64::INFINITY);
    let mut hi = Vec3::splat(f64::NEG_INFINITY);
    for f in frames {
        for v in 0..f.depth.height {
            for u in 0..f.depth.width {
                let Some(d) = f.depth.get(u, v) else { continue };
                let p = f.pose.apply(f.intrinsics.unproject_pixel(u as f64, v as f64, d)?);
                lo = lo.min(p);
                hi = hi.max(p);
            }
        }
    }
    if !lo.is_finite() {
        return Err(Error::usage("no frame has a valid depth pixel; pass an explicit grid"));
    }
    let h = voxel as f64;
    let pad = (tau + 1.0) * h;
    let origin = (lo - Vec3::splat(pad)).to_array().map(|x| (x / h).floor() * h);
    let top = (hi + Vec3::splat(pad)).to_array();
    let dims = [0, 1, 2].map(|a| ((top[a] - origin[a]) / h).ceil().max(1.0) as u32);
    Ok(GridSpec::new(voxel, origin.map(|x| x as f32), dims)?)
}

fn fuse(a: &FuseArgs, cfg: &RunConfig, up: Upstream) -> Result<Manifest> {
    let spec: FramesFile = read_json(&a.frames)?;
    let base = a.frames.parent().unwrap_or(Path::new("."));
    let mut frames = Vec::with_capacity(spec.frames.len());
    for f in &spec.frames {
        let depth = read_depth(&relative_to(base, &f.depth))?;
        let valid = match &f.valid {
            Some(v) => {
                let path = relative_to(base, v);
                let (w, h, pixels) = decode_rle(&mut open(&path)?).at(&path)?;
                if (w, h) != (depth.width, depth.height) {
                    return Err(Error::format(&path, "validity mask size differs from the depth map"));
                }
                Some(pixels)
            }
            None => None,
        };
        frames.push(DepthFrame {
            depth,
            intrinsics: read_intrinsics(&relative_to(base, &f.intrinsics))?,
            pose: f.pose.unwrap_or_default(),
            valid,
        });
    }
    let grid = match spec.grid {
        Some(g) => g,
        None => fusion_grid(&frames, cfg.voxel, cfg.tau)?,
    };
    let fused = volumetric_fuse_depths(
        &frames,
        &FusionConfig {
            spec: grid,
            tau: cfg.tau,
        },
    )?;
    let mut m = up.into_manifest();
    let out = a.out.clone().unwrap_or_else(|| base.join("fused.spvl"));
    spvl::write(&out, &fused)?;
    m.fused = Some(out);
    Ok(m)
}

/// Points spaced at most `step` apart on the things triangles of `mesh`.
fn sample_mesh(mesh: &TriangleMesh, step: f64, cfg: &RunConfig) -> Vec<SurfacePoint> {
    let mut out = Vec::new();
    for t in 0..mesh.triangles.len() {
        let Some(l) = mesh.label(t).filter(|l| cfg.categories.is_things(l.category)) else {
            continue;
        };
        let [a, b, c] = mesh.triangle(t);
        let edge = (b - a).norm().max((c - a).norm()).max((c - b).norm());
        let n = (edge / step).ceil().max(1.0) as usize;
        for i in 0..=n {
            for j in 0..=n - i {
                let (s, r) = (i as f64 / n as f64, j as f64 / n as f64);
                out.push(SurfacePoint {
                    position: a + (b - a) * s + (c - a) * r,
                    category: l.category,
                    probability: 1.0,
                });
            }
        }
    }
    out
}

#[derive(Serialize)]
struct ClusterRow {
    id: u32,
    category: CategoryId,
    name: String,
    points: usize,
    confidence: f64,
    min: [f64; 3],
    max: [f64; 3],
}

fn cluster(a: &ClusterArgs, cfg: &RunConfig, mut up: Upstream) -> Result<Manifest> {
    let input = up.require(&a.input, "input", |m| &m.pred)?;
    let (points, radius) = if input.extension().is_some_and(|e| e == "spvl") {
        let labels: SparseVolume<Label> = match spvl::read_header(&input)?.kind {
            PayloadKind::Panoptic => spvl::read::<PanopticVoxel>(&input)?.surface_labels(cfg.tau_s),
            PayloadKind::Label => spvl::read(&input)?,
            k => return Err(Error::format(&input, format!("cannot cluster a {} volume", k.name()))),
        };
        let spec = *labels.spec();
        let points: Vec<SurfacePoint> = labels
            .iter()
            .map(|(c, l)| SurfacePoint {
                position: spec.center(c),
                category: l.category,
                probability: 1.0,
            })
            .collect();
        // Voxel centres of diagonal neighbours must still connect.
        let diagonal = spec.voxel_size as f64 * 3f64.sqrt() * 1.001;
        (points, cfg.radius.max(diagonal))
    } else {
        (sample_mesh(&read_mesh(&input)?, cfg.radius / 2.0, cfg), cfg.radius)
    };
    let clusters = cluster_instances(&points, radius, &cfg.categories)?;
    let rows: Vec<ClusterRow> = clusters
        .iter()
        .zip(1..)
        .map(|(c, id)| {
            let (mut lo, mut hi) = (Vec3::splat(f64::INFINITY), Vec3::splat(f64::NEG_INFINITY));
            for &n in &c.members {
                lo = lo.min(points[n].position);
                hi = hi.max(points[n].position);
            }
            ClusterRow {
                id,
                category: c.category,
                name: cfg
                    .categories
                    .get(c.category)
                    .map_or_else(String::new, |x| x.name.clone()),
                points: c.members.len(),
                confidence: c.confidence,
                min: lo.to_array(),
                max: hi.to_array(),
            }
        })
        .collect();
    let mut m = up.into_manifest();
    let out = a.out.clone().unwrap_or_else(|| sibling(&input, ".segments.json"));
    write_json(
        &out,
        &json!({ "radius": radius, "points": points.len(), "clusters": rows }),
    )?;
    m.segments = Some(out);
    Ok(m)
}

fn run_evaluate(a: &EvaluateArgs, cfg: &RunConfig, mut up: Upstream) -> Result<serde_json::Value> {
    let gt = up.require(&a.gt, "gt", |m| &m.gt)?;
    let pred = match &a.pred {
        Some(p) => p.clone(),
        None => match up.load()?.and_then(|m| m.pred.clone()) {
            Some(p) => p,
            None => {
                log::warn!("no prediction given; evaluating the ground truth against itself");
                gt.clone()
            }
        },
    };
    let frustum = up
        .optional(&a.intrinsics, |m| &m.intrinsics)
        .as_deref()
        .map(read_intrinsics)
        .transpose()?;
    let opts = EvalOptions {
        voxel: cfg.voxel,
        iou: cfg.theta_iou,
        tau_s: cfg.tau_s,
        categories: cfg.categories.clone(),
        frustum,
        per_scene_macro: a.per_scene_macro,
    };
    let pairs: Vec<ScenePair> = pair_inputs(&pred, &gt)?;
    let report = evaluate(&pairs, &opts)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    if let Some(csv) = &a.csv {
        write_csv(csv, &report, &cfg.categories)?;
    }
    Ok(serde_json::to_value(&report).expect("report serializes"))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairSpec {
    pred: PathBuf,
    target: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelSpec {
    occupancy: PairSpec,
    #[serde(default)]
    distance: Option<PairSpec>,
    #[serde(default)]
    semantic: Option<PairSpec>,
    #[serde(default)]
    instance: Option<PairSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LossSpec {
    levels: Vec<LevelSpec>,
    /// Predicted and ground-truth depth rasters for the 2D depth term.
    #[serde(default)]
    depth: Option<PairSpec>,
    /// 2D instance segmentation loss, computed outside this tool.
    #[serde(default)]
    instance_2d: f64,
    #[serde(default)]
    weights: LossWeights,
    /// Per-category voxel counts for inverse-log class weights.
    #[serde(default)]
    class_counts: Option<BTreeMap<CategoryId, u64>>,
    /// Camera whose frustum masks every volumetric term.
    #[serde(default)]
    intrinsics: Option<PathBuf>,
}

/// Label volumes give categories directly; channel volumes index the table.
fn semantic_targets(path: &Path, cfg: &RunConfig) -> Result<SparseVolume<CategoryId>> {
    match spvl::read_header(path)?.kind {
        PayloadKind::Label => Ok(spvl::read::<Label>(path)?.map(|_, l| l.category)),
        PayloadKind::Channel => {
            let channels: SparseVolume<u32> = spvl::read(path)?;
            let mut out = SparseVolume::new(*channels.spec());
            for (c, &ch) in channels.iter() {
                let id = cfg.categories.id_at(ch as usize).ok_or_else(|| {
                    Error::format(
                        path,
                        format!("channel {ch} exceeds the {} categories", cfg.categories.len()),
                    )
                })?;
                out.insert(c, id)?;
            }
            Ok(out)
        }
        k => Err(Error::format(
            path,
            format!("semantic targets cannot be a {} volume", k.name()),
        )),
    }
}

fn loss(a: &LossArgs, cfg: &RunConfig) -> Result<serde_json::Value> {
    let spec: LossSpec = read_json(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let path = |p: &Path| relative_to(base, p);
    let k = spec
        .intrinsics
        .as_deref()
        .map(|p| read_intrinsics(&path(p)))
        .transpose()?;
    let weights = match &spec.class_counts {
        Some(counts) => class_weights_inverse_log(counts, &cfg.categories)?,
        None => ClassWeightTable::uniform(&cfg.categories, 1.0),
    };
    let mut levels = Vec::with_capacity(spec.levels.len());
    for (h, l) in spec.levels.iter().enumerate() {
        let occ_pred: SparseVolume<f32> = spvl::read(&path(&l.occupancy.pred))?;
        let occ_gt: SparseVolume<f32> = spvl::read(&path(&l.occupancy.target))?;
        let mask = match &k {
            Some(k) => VoxelMask::frustum(k, *occ_pred.spec()),
            None => VoxelMask::All,
        };
        let sdf = match &l.distance {
            Some(d) => Some((spvl::read::<f32>(&path(&d.pred))?, spvl::read::<f32>(&path(&d.target))?)),
            None => None,
        };
        let geometry = loss_geometry(&occ_pred, &occ_gt, sdf.as_ref().map(|(p, t)| (p, t)), h, &mask)?;
        let semantic = match &l.semantic {
            Some(s) => {
                let logits: SparseVolume<Vec<f32>> = spvl::read(&path(&s.pred))?;
                loss_semantic(
                    &logits,
                    &semantic_targets(&path(&s.target), cfg)?,
                    &weights,
                    &cfg.categories,
                    &mask,
                )?
            }
            None => 0.0,
        };
        let instance = match &l.instance {
            Some(s) => {
                let logits: SparseVolume<Vec<f32>> = spvl::read(&path(&s.pred))?;
                loss_instance(&logits, &spvl::read(&path(&s.target))?, &mask)?
            }
            None => 0.0,
        };
        levels.push(LevelLosses {
            geometry,
            semantic,
            instance,
        });
    }
    let depth = match &spec.depth {
        Some(d) => depth_loss_log_l1(&read_depth(&path(&d.pred))?, &read_depth(&path(&d.target))?)?,
        None => 0.0,
    };
    let parts = LossParts {
        depth,
        instance_2d: spec.instance_2d,
        levels,
    };
    let total = loss_total(&parts, &spec.weights, parts.levels.len())?;
    Ok(json!({ "parts": parts, "weights": spec.weights, "total": total }))
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("PANREC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::usage(format!("PANREC_THREADS={v:?} is not a positive integer")))?;
    // A second call in one process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn execute(cli: Cli) -> Result<serde_json::Value> {
    configure_threads()?;
    let mut cfg = cli.config.resolve()?;
    if let Some(command) = &cli.command {
        (cfg.inputs, cfg.output) = command.paths();
    }
    if cli.config.dump_config {
        return Ok(serde_json::to_value(&cfg).expect("config serializes"));
    }
    let Some(command) = &cli.command else {
        return Err(Error::usage("a subcommand is required; see --help"));
    };
    let explicit = cli.config.explicit_grid();
    let up = Upstream::default();
    let manifest = match command {
        Command::SynthScene(a) => synth_scene(a, &cfg)?,
        Command::MakeGt(a) => make_gt(a, &cfg, explicit, up)?,
        Command::Backproject(a) => backproject(a, &cfg, explicit, up)?,
        Command::Assemble(a) => assemble(a, &cfg, up)?,
        Command::Fuse(a) => fuse(a, &cfg, up)?,
        Command::Cluster(a) => cluster(a, &cfg, up)?,
        Command::Evaluate(a) => return run_evaluate(a, &cfg, up),
        Command::Loss(a) => return loss(a, &cfg),
    };
    Ok(serde_json::to_value(&manifest).expect("manifest serializes"))
}

fn report_error(kind: &str, message: &str, code: i32) -> i32 {
    let body = json!({ "error": kind, "message": message, "exit_code": code });
    eprintln!("{body}");
    code
}

/// Runs one invocation and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => return report_error("usage", e.render().to_string().trim(), 2),
    };
    match execute(cli) {
        Ok(value) => {
            let mut out = std::io::stdout().lock();
            let text = serde_json::to_string_pretty(&value).expect("json serializes");
            // A closed pipe downstream is not a failure of this stage.
            let _ = writeln!(out, "{text}").and_then(|_| out.flush());
            0
        }
        Err(e) => report_error(e.kind(), &e.to_string(), e.exit_code()),
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}
