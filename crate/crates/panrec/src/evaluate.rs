//! File-level evaluation: pairing predictions with ground truth, loading
//! volumes or meshes, and JSON / CSV report emission.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use panrec_core::metrics::{match_volumes, ClassReport, PooledCounts, Quality, QualityCounts};
use panrec_core::volume::voxelize_mesh;
use panrec_core::{
    CameraIntrinsics, CategoryTable, GridSpec, Label, PanopticVoxel, SparseVolume, TriangleMesh, Vec3, VoxelMask,
};

use crate::error::{Error, Result};
use crate::formats::mesh::read_mesh;
use crate::formats::spvl::{self, PayloadKind};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Voxel size used when both sides are meshes.
    pub voxel: f32,
    pub iou: f64,
    /// Surface band applied to panoptic volumes.
    pub tau_s: f64,
    pub categories: CategoryTable,
    /// Restricts matching to voxels whose centers lie in this camera's frustum.
    pub frustum: Option<CameraIntrinsics>,
    /// Average per scene instead of pooling counts.
    pub per_scene_macro: bool,
}

/// A loaded prediction or ground truth.
#[derive(Clone, Debug)]
pub enum Input {
    Labels(SparseVolume<Label>),
    Mesh(TriangleMesh),
}

pub fn load_input(path: &Path, tau_s: f64) -> Result<Input> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("spvl") => {
            let h = spvl::read_header(path)?;
            match h.kind {
                PayloadKind::Panoptic => {
                    let v: SparseVolume<PanopticVoxel> = spvl::read(path)?;
                    Ok(Input::Labels(v.surface_labels(tau_s)))
                }
                PayloadKind::Label => Ok(Input::Labels(spvl::read(path)?)),
                k => Err(Error::format(path, format!("cannot evaluate a {} volume", k.name()))),
            }
        }
        _ => {
            let m = read_mesh(path)?;
            if m.labels.is_none() {
                return Err(Error::format(path, "mesh has no face labels"));
            }
            Ok(Input::Mesh(m))
        }
    }
}

/// Grid covering both meshes, aligned to multiples of `voxel`.
fn mesh_grid(a: &TriangleMesh, b: &TriangleMesh, voxel: f32) -> Result<GridSpec> {
    let mut lo = Vec3::splat(f64::INFINITY);
    let mut hi = Vec3::splat(f64::NEG_INFINITY);
    for v in a.vertices.iter().chain(&b.vertices) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !lo.is_finite() {
        return Ok(GridSpec::new(voxel, [0.0; 3], [1; 3])?);
    }
    let h = voxel as f64;
    let origin = lo.to_array().map(|x| ((x / h).floor() - 1.0) * h);
    let dims = [0, 1, 2].map(|i| (((hi.to_array()[i] - origin[i]) / h).ceil() as u32 + 2).max(1));
    Ok(GridSpec::new(voxel, origin.map(|x| x as f32), dims)?)
}

pub fn to_labels(pred: Input, gt: Input, voxel: f32) -> Result<(SparseVolume<Label>, SparseVolume<Label>)> {
    Ok(match (pred, gt) {
        (Input::Labels(p), Input::Labels(g)) => {
            if p.spec() != g.spec() {
                return Err(Error::Core(panrec_core::Error::InvalidArgument(format!(
                    "prediction grid {:?} differs from ground-truth grid {:?}",
                    p.spec(),
                    g.spec()
                ))));
            }
            (p, g)
        }
        (Input::Mesh(p), Input::Labels(g)) => (voxelize_mesh(&p, g.spec()), g),
        (Input::Labels(p), Input::Mesh(g)) => {
            let g = voxelize_mesh(&g, p.spec());
            (p, g)
        }
        (Input::Mesh(p), Input::Mesh(g)) => {
            let spec = mesh_grid(&p, &g, voxel)?;
            (voxelize_mesh(&p, &spec), voxelize_mesh(&g, &spec))
        }
    })
}

/// One evaluation unit; `pred` is `None` when the prediction is missing.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub name: String,
    pub pred: Option<PathBuf>,
    pub gt: PathBuf,
}

fn is_scene_file(p: &Path) -> bool {
    p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("spvl" | "ply" | "obj"))
}

fn scene_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if !is_scene_file(&p) {
            continue;
        }
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(prev) = out.insert(stem.clone(), p.clone()) {
            return Err(Error::format(
                &p,
                format!("scene {stem} also stored as {}", prev.display()),
            ));
        }
    }
    Ok(out)
}

/// Pairs files by stem when both paths are directories.
pub fn pair_inputs(pred: &Path, gt: &Path) -> Result<Vec<ScenePair>> {
    match (pred.is_dir(), gt.is_dir()) {
        (true, true) => {
            let (p, g) = (scene_files(pred)?, scene_files(gt)?);
            for name in p.keys().filter(|n| !g.contains_key(*n)) {
                log::warn!("prediction {name} has no ground truth and is skipped");
            }
            Ok(g.into_iter()
                .map(|(name, gt)| {
                    let pred = p.get(&name).cloned();
                    if pred.is_none() {
                        log::warn!("ground truth {name} has no prediction; every segment counts as missed");
                    }
                    ScenePair { name, pred, gt }
                })
                .collect())
        }
        (false, false) => {
            for p in [pred, gt] {
                if !p.exists() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
                    ));
                }
            }
            let name = gt.file_stem().and_then(|s| s.to_str()).unwrap_or("scene").to_string();
            Ok(vec![ScenePair {
                name,
                pred: Some(pred.to_path_buf()),
                gt: gt.to_path_buf(),
            }])
        }
        _ => Err(Error::usage(
            "--pred and --gt must both be files or both be directories",
        )),
    }
}

/// Match counts of one scene.
pub fn evaluate_pair(pair: &ScenePair, opts: &EvalOptions) -> Result<PooledCounts> {
    let gt = load_input(&pair.gt, opts.tau_s)?;
    let pred = match &pair.pred {
        Some(p) => load_input(p, opts.tau_s)?,
        None => Input::Labels(SparseVolume::new(match &gt {
            Input::Labels(g) => *g.spec(),
            Input::Mesh(m) => mesh_grid(m, m, opts.voxel)?,
        })),
    };
    let (p, g) = to_labels(pred, gt, opts.voxel)?;
    let mask = match &opts.frustum {
        Some(k) => VoxelMask::frustum(k, *g.spec()),
        None => VoxelMask::All,
    };
    let m = match_volumes(&p, &g, &mask, &opts.categories, opts.iou);
    Ok(PooledCounts::from_match(&m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub id: u32,
    pub name: String,
    #[serde(flatten)]
    pub quality: Quality,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counts: Option<QualityCounts>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub per_category: Vec<CategoryRow>,
    pub all: Option<Quality>,
    pub things: Option<Quality>,
    pub stuff: Option<Quality>,
}

impl Table {
    fn new(r: &ClassReport, counts: Option<&PooledCounts>, categories: &CategoryTable) -> Self {
        Self {
            per_category: r
                .per_category
                .iter()
                .map(|(&id, &quality)| CategoryRow {
                    id,
                    name: categories.get(id).map_or_else(|| id.to_string(), |c| c.name.clone()),
                    quality,
                    counts: counts.and_then(|c| c.per_category.get(&id).copied()),
                })
                .collect(),
            all: r.all,
            things: r.things,
            stuff: r.stuff,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub name: String,
    pub report: Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub iou: f64,
    pub voxel: f32,
    /// `pooled` or `macro`.
    pub aggregation: String,
    pub aggregate: Table,
    pub scenes: Vec<SceneReport>,
}

pub fn evaluate(pairs: &[ScenePair], opts: &EvalOptions) -> Result<EvaluationReport> {
    let counts: Vec<PooledCounts> = pairs
        .par_iter()
        .map(|p| evaluate_pair(p, opts))
        .collect::<Result<_>>()?;
    let cats = &opts.categories;
    let reports: Vec<ClassReport> = counts.iter().map(|c| ClassReport::from_counts(c, cats)).collect();
    let mut pooled = PooledCounts::default();
    for c in &counts {
        pooled.merge(c);
    }
    let aggregate = if opts.per_scene_macro {
        Table::new(&ClassReport::macro_average(&reports, cats), None, cats)
    } else {
        Table::new(&ClassReport::from_counts(&pooled, cats), Some(&pooled), cats)
    };
    Ok(EvaluationReport {
        iou: opts.iou,
        voxel: opts.voxel,
        aggregation: if opts.per_scene_macro { "macro" } else { "pooled" }.into(),
        aggregate,
        scenes: pairs
            .iter()
            .zip(reports.iter().zip(&counts))
            .map(|(p, (r, c))| SceneReport {
                name: p.name.clone(),
                report: Table::new(r, Some(c), cats),
            })
            .collect(),
    })
}

type Metric = (&'static str, fn(&Quality) -> f64);

/// Table mirror: one row per metric, one column per category plus the
/// all / things / stuff aggregates. Categories without segments stay blank.
pub fn write_csv(path: &Path, report: &EvaluationReport, categories: &CategoryTable) -> Result<()> {
    let fail = |e: csv::Error| Error::format(path, e.to_string());
    let file = crate::formats::create(path)?;
    let mut w = csv::Writer::from_writer(file);
    let cats: Vec<_> = categories
        .iter()
        .filter(|c| c.kind != panrec_core::CategoryKind::Freespace)
        .collect();
    let mut header = vec!["metric".to_string()];
    header.extend(cats.iter().map(|c| c.name.clone()));
    header.extend(["all", "things", "stuff"].map(String::from));
    w.write_record(&header).map_err(fail)?;
    let t = &report.aggregate;
    let cell = |q: Option<&Quality>, f: fn(&Quality) -> f64| q.map_or(String::new(), |q| format!("{:.2}", f(q)));
    let metrics: [Metric; 3] = [("PRQ", |q| q.prq), ("RSQ", |q| q.rsq), ("RRQ", |q| q.rrq)];
    for (name, f) in metrics {
        let mut row = vec![name.to_string()];
        for c in &cats {
            row.push(cell(
                t.per_category.iter().find(|r| r.id == c.id).map(|r| &r.quality),
                f,
            ));
        }
        for agg in [&t.all, &t.things, &t.stuff] {
            row.push(cell(agg.as_ref(), f));
        }
        w.write_record(&row).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
