//! Parametric box-world rooms with an analytic raycaster. They stand in for
//! rendered indoor views in tests and demos.
//!
//! Camera space: x right, y down, z forward. The camera sits 0.75 m above the
//! floor and looks along +z into a room closed by four wall slabs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use panrec_core::categories::{FLOOR, WALL};
use panrec_core::propagation::{Mask2D, MaskSet2D};
use panrec_core::rng::KeyedStream;
use panrec_core::supervision::mesh_to_tsdf_gt;
use panrec_core::{
    CameraIntrinsics, CategoryId, CategoryKind, CategoryTable, DepthMap, GridSpec, Label, PanopticVolume, Raster,
    TriangleMesh, Vec3,
};

use crate::error::Result;

/// Key that separates scene layout draws from other consumers of the seed.
const LAYOUT_KEY: u64 = 0x5ce4e;

pub const FLOOR_Y: f64 = 0.75;
/// Boxes float this far above the floor so slabs never touch.
pub const BOX_CLEARANCE: f64 = 0.01;
/// Logit magnitude of the rendered mask rasters.
pub const MASK_LOGIT: f32 = 4.0;

/// Axis-aligned labeled box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Slab {
    pub min: Vec3,
    pub max: Vec3,
    pub label: Label,
}

impl Slab {
    /// Strictly inside.
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p.to_array()[a] > self.min.to_array()[a] && p.to_array()[a] < self.max.to_array()[a])
    }

    /// Entry parameter of the ray `t * dir` from the origin, if it hits in front.
    pub fn intersect(&self, dir: Vec3) -> Option<f64> {
        let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            let (d, lo, hi) = (dir.to_array()[a], self.min.to_array()[a], self.max.to_array()[a]);
            if d == 0.0 {
                if !(lo <= 0.0 && 0.0 <= hi) {
                    return None;
                }
                continue;
            }
            let (t1, t2) = (lo / d, hi / d);
            near = near.max(t1.min(t2));
            far = far.min(t1.max(t2));
        }
        (near <= far && near > 0.0).then_some(near)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Depth along the optical axis.
    pub depth: f64,
    pub slab: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// Room slabs first, then the boxes in placement order.
    pub slabs: Vec<Slab>,
    pub room_slabs: usize,
    pub intrinsics: CameraIntrinsics,
    pub grid: GridSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub intrinsics: CameraIntrinsics,
    pub grid: GridSpec,
    pub tau: f64,
    pub categories: CategoryTable,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            intrinsics: default_camera(),
            grid: GridSpec::camera_aligned(0.03, [128; 3]).expect("valid grid"),
            tau: panrec_core::lifting::DEFAULT_TAU,
            categories: CategoryTable::synthetic(),
        }
    }
}

/// 320x240 pinhole camera with a 60 degree horizontal field of view.
pub fn default_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(277.0, 277.0, 160.0, 120.0, 320, 240, 0.1, 6.0).expect("valid camera")
}

fn room() -> Vec<Slab> {
    let slab = |min: [f64; 3], max: [f64; 3], category| Slab {
        min: Vec3::new(min[0], min[1], min[2]),
        max: Vec3::new(max[0], max[1], max[2]),
        label: Label::stuff(category),
    };
    vec![
        slab([-1.59, FLOOR_Y, -0.29], [1.59, 0.85, 3.29], FLOOR),
        slab([-1.7, -2.5, 3.3], [1.7, 0.85, 3.4], WALL),
        slab([-1.7, -2.5, -0.39], [-1.6, 0.85, 3.29], WALL),
        slab([1.6, -2.5, -0.39], [1.7, 0.85, 3.29], WALL),
        slab([-1.7, -2.5, -0.5], [1.7, 0.85, -0.4], WALL),
    ]
}

/// Footprints on the floor, at least `GAP` apart.
fn place_boxes(seed: u64, n: usize, things: &[CategoryId]) -> Vec<Slab> {
    const GAP: f64 = 0.1;
    const ATTEMPTS: usize = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(KeyedStream::new(seed).split(LAYOUT_KEY).next_u64());
    let mut out: Vec<Slab> = Vec::with_capacity(n);
    for _ in 0..n {
        for _ in 0..ATTEMPTS {
            let (wx, wz, h) = (
                rng.random_range(0.25..0.7),
                rng.random_range(0.25..0.7),
                rng.random_range(0.25..0.9),
            );
            let x = rng.random_range(-1.45 + wx / 2.0..1.45 - wx / 2.0);
            let z = rng.random_range(1.0 + wz / 2.0..3.1 - wz / 2.0);
            let category = things[rng.random_range(0..things.len())];
            let bottom = FLOOR_Y - BOX_CLEARANCE;
            let cand = Slab {
                min: Vec3::new(x - wx / 2.0, bottom - h, z - wz / 2.0),
                max: Vec3::new(x + wx / 2.0, bottom, z + wz / 2.0),
                label: Label::thing(category, out.len() as u32 + 1),
            };
            let clear = out.iter().all(|o| {
                cand.min.x > o.max.x + GAP
                    || o.min.x > cand.max.x + GAP
                    || cand.min.z > o.max.z + GAP
                    || o.min.z > cand.max.z + GAP
            });
            if clear {
                out.push(cand);
                break;
            }
        }
    }
    out
}

impl SyntheticScene {
    pub fn generate(seed: u64, n_boxes: usize, cfg: &SynthConfig) -> Self {
        let things: Vec<CategoryId> = cfg
            .categories
            .iter()
            .filter(|c| c.kind == CategoryKind::Things)
            .map(|c| c.id)
            .collect();
        let mut slabs = room();
        let room_slabs = slabs.len();
        if !things.is_empty() {
            slabs.extend(place_boxes(seed, n_boxes, &things));
        }
        Self {
            slabs,
            room_slabs,
            intrinsics: cfg.intrinsics,
            grid: cfg.grid,
        }
    }

    pub fn boxes(&self) -> &[Slab] {
        &self.slabs[self.room_slabs..]
    }

    pub fn mesh(&self) -> TriangleMesh {
        let mut m = TriangleMesh {
            labels: Some(Vec::new()),
            ..Default::default()
        };
        for s in &self.slabs {
            m.append(&TriangleMesh::axis_aligned_box(s.min, s.max, Some(s.label)));
        }
        m
    }

    /// Nearest slab along the ray through pixel `(u, v)`; ties go to the
    /// lower slab index.
    pub fn raycast(&self, u: f64, v: f64) -> Option<Hit> {
        let dir = self.intrinsics.pixel_ray(u, v);
        let mut best: Option<Hit> = None;
        for (n, s) in self.slabs.iter().enumerate() {
            if let Some(t) = s.intersect(dir) {
                if best.is_none_or(|b| t < b.depth) {
                    best = Some(Hit { depth: t, slab: n });
                }
            }
        }
        best
    }

    /// Hit per pixel, row-major.
    pub fn render(&self) -> Vec<Option<Hit>> {
        let k = &self.intrinsics;
        (0..k.height)
            .flat_map(|v| (0..k.width).map(move |u| (u, v)))
            .map(|(u, v)| self.raycast(u as f64, v as f64))
            .collect()
    }
}

pub fn depth_map(k: &CameraIntrinsics, hits: &[Option<Hit>]) -> DepthMap {
    let values = hits
        .iter()
        .map(|h| h.map_or(DepthMap::INVALID, |h| h.depth as f32))
        .collect();
    DepthMap::new(k.width, k.height, values).expect("one hit per pixel")
}

/// One mask per box with at least one visible pixel, in box order.
pub fn visible_masks(scene: &SyntheticScene, hits: &[Option<Hit>]) -> MaskSet2D {
    let k = &scene.intrinsics;
    let mut set = MaskSet2D::new(k.width, k.height);
    for (n, b) in scene.boxes().iter().enumerate() {
        let slab = scene.room_slabs + n;
        let pixels: Vec<bool> = hits.iter().map(|h| h.is_some_and(|h| h.slab == slab)).collect();
        if pixels.iter().any(|&p| p) {
            set.push(Mask2D {
                id: b.label.instance.expect("boxes are things"),
                category: b.label.category,
                score: 1.0,
                pixels,
            })
            .expect("sized and non-empty");
        }
    }
    set
}

/// One logit channel per mask: `+4` inside, `-4` outside.
pub fn mask_logits(masks: &MaskSet2D) -> Raster {
    let n = masks.len();
    let mut r = Raster::zeros(masks.width, masks.height, n as u32);
    for p in 0..(masks.width * masks.height) as usize {
        for (c, m) in masks.masks.iter().enumerate() {
            r.pixel_mut(p)[c] = if m.pixels[p] { MASK_LOGIT } else { -MASK_LOGIT };
        }
    }
    r
}

/// One-hot semantic channel per pixel; pixels without a hit stay zero.
pub fn semantic_features(scene: &SyntheticScene, hits: &[Option<Hit>], categories: &CategoryTable) -> Raster {
    let k = &scene.intrinsics;
    let mut r = Raster::zeros(k.width, k.height, categories.len() as u32);
    for (p, h) in hits.iter().enumerate() {
        if let Some(c) = h.and_then(|h| categories.channel_of(scene.slabs[h.slab].label.category)) {
            r.pixel_mut(p)[c] = 1.0;
        }
    }
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub scene: SyntheticScene,
    pub mesh: TriangleMesh,
    pub depth: DepthMap,
    pub gt: PanopticVolume,
    pub masks: MaskSet2D,
    pub hits: Vec<Option<Hit>>,
}

/// Scene, exact depth, ground-truth volume and visible instance masks.
pub fn synth_scene(seed: u64, n_boxes: usize) -> Result<SynthOutput> {
    synth_scene_with(seed, n_boxes, &SynthConfig::default())
}

pub fn synth_scene_with(seed: u64, n_boxes: usize, cfg: &SynthConfig) -> Result<SynthOutput> {
    let scene = SyntheticScene::generate(seed, n_boxes, cfg);
    let mesh = scene.mesh();
    let hits = scene.render();
    let depth = depth_map(&scene.intrinsics, &hits);
    let gt = mesh_to_tsdf_gt(&mesh, &scene.intrinsics, &scene.grid, cfg.tau)?;
    let masks = visible_masks(&scene, &hits);
    Ok(SynthOutput {
        scene,
        mesh,
        depth,
        gt,
        masks,
        hits,
    })
}
