//! Sparse voxel containers and the operations over them.
//!
//! A [`SparseVolume`] maps integer voxel coordinates to a payload. Cells are
//! kept in canonical order, lexicographic by `(k, j, i)`, so iteration and
//! serialization are deterministic.

mod surface;
mod voxelize;

use alloc::collections::btree_map::{self, BTreeMap};
use alloc::collections::BTreeSet;
use alloc::format;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::categories::{CategoryId, InstanceId, Label};
use crate::error::{invalid, Result};
use crate::geometry::{CameraIntrinsics, Frustum};
use crate::math::{floor, Vec3};

pub use surface::extract_surface_mesh;
pub use voxelize::{triangle_overlaps_voxel, voxelize_mesh};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct VoxelCoord {
    pub i: i32,
    pub j: i32,
    pub k: i32,
}

impl VoxelCoord {
    pub const fn new(i: i32, j: i32, k: i32) -> Self {
        Self { i, j, k }
    }

    pub fn offset(self, di: i32, dj: i32, dk: i32) -> Self {
        Self::new(self.i + di, self.j + dj, self.k + dk)
    }

    pub fn axis(self, a: usize) -> i32 {
        match a {
            0 => self.i,
            1 => self.j,
            _ => self.k,
        }
    }

    pub fn to_array(self) -> [i32; 3] {
        [self.i, self.j, self.k]
    }

    pub fn distance_squared(self, o: VoxelCoord) -> i64 {
        let d = |a: i32, b: i32| (a as i64 - b as i64).pow(2);
        d(self.i, o.i) + d(self.j, o.j) + d(self.k, o.k)
    }

    /// Coordinate of the enclosing cell after downsampling by `factor`.
    pub fn coarsen(self, factor: i32) -> Self {
        Self::new(
            self.i.div_euclid(factor),
            self.j.div_euclid(factor),
            self.k.div_euclid(factor),
        )
    }

    /// The `factor^3` cells covered by this cell at a finer resolution.
    pub fn children(self, factor: i32) -> impl Iterator<Item = VoxelCoord> {
        let base = VoxelCoord::new(self.i * factor, self.j * factor, self.k * factor);
        (0..factor)
            .flat_map(move |dk| (0..factor).flat_map(move |dj| (0..factor).map(move |di| base.offset(di, dj, dk))))
    }
}

impl From<[i32; 3]> for VoxelCoord {
    fn from(a: [i32; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl Ord for VoxelCoord {
    fn cmp(&self, o: &Self) -> core::cmp::Ordering {
        (self.k, self.j, self.i).cmp(&(o.k, o.j, o.i))
    }
}

impl PartialOrd for VoxelCoord {
    fn partial_cmp(&self, o: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(o))
    }
}

/// Regular grid placement. Voxel `(i, j, k)` spans
/// `origin + [i, i + 1) * voxel_size` per axis; its center is at `i + 0.5`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct GridSpec {
    pub voxel_size: f32,
    pub origin: [f32; 3],
    pub dims: [u32; 3],
}

impl GridSpec {
    pub fn new(voxel_size: f32, origin: [f32; 3], dims: [u32; 3]) -> Result<Self> {
        let s = Self {
            voxel_size,
            origin,
            dims,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(invalid("voxel size must be positive"));
        }
        if self.dims.iter().any(|&d| d == 0 || d > i32::MAX as u32) {
            return Err(invalid(format!("grid dims {:?} must be positive", self.dims)));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(invalid("grid origin must be finite"));
        }
        Ok(())
    }

    /// Grid in front of the camera: centered on the optical axis in x and y,
    /// starting at the camera plane in z.
    pub fn camera_aligned(voxel_size: f32, dims: [u32; 3]) -> Result<Self> {
        let half = |d: u32| -(d as f32) * voxel_size / 2.0;
        Self::new(voxel_size, [half(dims[0]), half(dims[1]), 0.0], dims)
    }

    pub fn size(&self) -> f64 {
        self.voxel_size as f64
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::new(self.origin[0] as f64, self.origin[1] as f64, self.origin[2] as f64)
    }

    pub fn voxel_count(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }

    pub fn contains(&self, c: VoxelCoord) -> bool {
        (0..3).all(|a| c.axis(a) >= 0 && (c.axis(a) as u32) < self.dims[a])
    }

    pub fn center(&self, c: VoxelCoord) -> Vec3 {
        self.corner(c) + Vec3::splat(0.5 * self.size())
    }

    /// Minimum corner of a voxel.
    pub fn corner(&self, c: VoxelCoord) -> Vec3 {
        let h = self.size();
        self.origin() + Vec3::new(c.i as f64 * h, c.j as f64 * h, c.k as f64 * h)
    }

    /// Continuous grid coordinates of a point (voxel `i` spans `[i, i + 1)`).
    pub fn to_grid(&self, p: Vec3) -> Vec3 {
        (p - self.origin()) / self.size()
    }

    pub fn voxel_of(&self, p: Vec3) -> VoxelCoord {
        let g = self.to_grid(p);
        VoxelCoord::new(floor(g.x) as i32, floor(g.y) as i32, floor(g.z) as i32)
    }

    pub fn coarsen(&self, factor: u32) -> Result<GridSpec> {
        if factor == 0 || self.dims.iter().any(|d| d % factor != 0) {
            return Err(invalid(format!(
                "grid dims {:?} are not divisible by {factor}",
                self.dims
            )));
        }
        Ok(GridSpec {
            voxel_size: self.voxel_size * factor as f32,
            origin: self.origin,
            dims: self.dims.map(|d| d / factor),
        })
    }

    pub fn refine(&self, factor: u32) -> GridSpec {
        GridSpec {
            voxel_size: self.voxel_size / factor as f32,
            origin: self.origin,
            dims: self.dims.map(|d| d * factor),
        }
    }

    /// Every coordinate of the grid in canonical order.
    pub fn coords(&self) -> impl Iterator<Item = VoxelCoord> {
        let [di, dj, dk] = self.dims.map(|d| d as i32);
        (0..dk).flat_map(move |k| (0..dj).flat_map(move |j| (0..di).map(move |i| VoxelCoord::new(i, j, k))))
    }
}

/// Association from voxel coordinates to a payload, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVolume<P> {
    spec: GridSpec,
    cells: BTreeMap<VoxelCoord, P>,
}

impl<P> SparseVolume<P> {
    pub fn new(spec: GridSpec) -> Self {
        Self {
            spec,
            cells: BTreeMap::new(),
        }
    }

    pub fn from_cells(spec: GridSpec, cells: impl IntoIterator<Item = (VoxelCoord, P)>) -> Result<Self> {
        let mut v = Self::new(spec);
        for (c, p) in cells {
            v.insert(c, p)?;
        }
        Ok(v)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Insert or replace a payload. Coordinates outside the grid are rejected.
    pub fn insert(&mut self, c: VoxelCoord, p: P) -> Result<Option<P>> {
        if !self.spec.contains(c) {
            return Err(invalid(format!(
                "voxel {c:?} lies outside grid dims {:?}",
                self.spec.dims
            )));
        }
        Ok(self.cells.insert(c, p))
    }

    pub(crate) fn entry(&mut self, c: VoxelCoord) -> btree_map::Entry<'_, VoxelCoord, P> {
        debug_assert!(self.spec.contains(c));
        self.cells.entry(c)
    }

    pub fn get(&self, c: VoxelCoord) -> Option<&P> {
        self.cells.get(&c)
    }

    pub fn get_mut(&mut self, c: VoxelCoord) -> Option<&mut P> {
        self.cells.get_mut(&c)
    }

    pub fn remove(&mut self, c: VoxelCoord) -> Option<P> {
        self.cells.remove(&c)
    }

    pub fn contains(&self, c: VoxelCoord) -> bool {
        self.cells.contains_key(&c)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (VoxelCoord, &P)> {
        self.cells.iter().map(|(c, p)| (*c, p))
    }

    pub fn coords(&self) -> impl Iterator<Item = VoxelCoord> + '_ {
        self.cells.keys().copied()
    }

    pub fn support(&self) -> BTreeSet<VoxelCoord> {
        self.cells.keys().copied().collect()
    }

    pub fn same_support<Q>(&self, other: &SparseVolume<Q>) -> bool {
        self.cells.len() == other.cells.len() && self.cells.keys().eq(other.cells.keys())
    }

    pub fn retain(&mut self, mut f: impl FnMut(VoxelCoord, &P) -> bool) {
        self.cells.retain(|c, p| f(*c, p));
    }

    pub fn map<Q>(&self, mut f: impl FnMut(VoxelCoord, &P) -> Q) -> SparseVolume<Q> {
        SparseVolume {
            spec: self.spec,
            cells: self.cells.iter().map(|(c, p)| (*c, f(*c, p))).collect(),
        }
    }

    pub fn filter_map<Q>(&self, mut f: impl FnMut(VoxelCoord, &P) -> Option<Q>) -> SparseVolume<Q> {
        SparseVolume {
            spec: self.spec,
            cells: self
                .cells
                .iter()
                .filter_map(|(c, p)| f(*c, p).map(|q| (*c, q)))
                .collect(),
        }
    }
}

impl<P> IntoIterator for SparseVolume<P> {
    type Item = (VoxelCoord, P);
    type IntoIter = btree_map::IntoIter<VoxelCoord, P>;

    fn into_iter(self) -> Self::IntoIter {
        self.cells.into_iter()
    }
}

/// Panoptic payload: signed distance in voxel units, semantic category and
/// optional instance id.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PanopticVoxel {
    pub sdf: f32,
    pub semantic: CategoryId,
    pub instance: Option<InstanceId>,
}

impl PanopticVoxel {
    pub fn new(sdf: f32, label: Label) -> Self {
        Self {
            sdf,
            semantic: label.category,
            instance: label.instance,
        }
    }

    pub fn label(&self) -> Label {
        Label::new(self.semantic, self.instance)
    }
}

pub type PanopticVolume = SparseVolume<PanopticVoxel>;

impl SparseVolume<PanopticVoxel> {
    /// Labels of the voxels with `|sdf| < tau_s`.
    pub fn surface_labels(&self, tau_s: f64) -> SparseVolume<Label> {
        self.filter_map(|_, v| ((v.sdf as f64).abs() < tau_s).then(|| v.label()))
    }
}

/// Region of interest over grid coordinates, used for frustum masking.
#[derive(Clone, Debug, PartialEq)]
pub enum VoxelMask {
    All,
    Set(BTreeSet<VoxelCoord>),
    /// Voxels whose centers lie inside the frustum.
    Frustum {
        frustum: Frustum,
        spec: GridSpec,
    },
}

impl VoxelMask {
    pub fn frustum(k: &CameraIntrinsics, spec: GridSpec) -> Self {
        VoxelMask::Frustum {
            frustum: k.frustum(),
            spec,
        }
    }

    pub fn contains(&self, c: VoxelCoord) -> bool {
        match self {
            VoxelMask::All => true,
            VoxelMask::Set(s) => s.contains(&c),
            VoxelMask::Frustum { frustum, spec } => frustum.contains(spec.center(c)),
        }
    }
}

/// Occupancy after downsampling: a coarse voxel is occupied iff any of its
/// `factor^3` children is.
pub fn downsample_occupancy<P>(v: &SparseVolume<P>, factor: u32) -> Result<SparseVolume<()>> {
    if factor != 2 && factor != 4 {
        return Err(invalid(format!("downsampling factor {factor} is not 2 or 4")));
    }
    let spec = v.spec().coarsen(factor)?;
    let mut out = SparseVolume::new(spec);
    for c in v.coords() {
        out.insert(c.coarsen(factor as i32), ())?;
    }
    Ok(out)
}

/// `|a ∩ b| / |a ∪ b|`.
pub fn iou_voxel_sets(a: &BTreeSet<VoxelCoord>, b: &BTreeSet<VoxelCoord>) -> Result<f64> {
    if a.is_empty() && b.is_empty() {
        return Err(crate::Error::UndefinedIou);
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|c| large.contains(c)).count();
    Ok(inter as f64 / (a.len() + b.len() - inter) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn spec(n: u32) -> GridSpec {
        GridSpec::new(0.03, [0.0; 3], [n; 3]).unwrap()
    }

    #[test]
    fn canonical_order_is_k_major() {
        let mut v = SparseVolume::new(spec(4));
        for c in [[1, 0, 0], [0, 0, 1], [0, 1, 0], [0, 0, 0]] {
            v.insert(c.into(), ()).unwrap();
        }
        let order: Vec<[i32; 3]> = v.coords().map(|c| c.to_array()).collect();
        assert_eq!(order, [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]);
    }

    #[test]
    fn insert_rejects_out_of_bounds() {
        let mut v = SparseVolume::new(spec(4));
        assert!(v.insert(VoxelCoord::new(4, 0, 0), 1.0f32).is_err());
        assert!(v.insert(VoxelCoord::new(-1, 0, 0), 1.0f32).is_err());
        assert!(v.is_empty());
    }

    #[test]
    fn voxel_centers_and_lookup() {
        let s = GridSpec::new(0.5, [1.0, 0.0, -1.0], [4; 3]).unwrap();
        let c = VoxelCoord::new(1, 2, 3);
        assert_eq!(s.center(c), Vec3::new(1.75, 1.25, 0.75));
        assert_eq!(s.voxel_of(s.center(c)), c);
    }

    #[test]
    fn downsample_examples() {
        let mut v = SparseVolume::new(spec(8));
        v.insert(VoxelCoord::new(5, 5, 5), ()).unwrap();
        let d = downsample_occupancy(&v, 4).unwrap();
        assert_eq!(d.coords().collect::<Vec<_>>(), [VoxelCoord::new(1, 1, 1)]);
        assert_eq!(d.spec().dims, [2; 3]);

        assert!(downsample_occupancy(&SparseVolume::<()>::new(spec(8)), 4)
            .unwrap()
            .is_empty());

        let mut block = SparseVolume::new(spec(8));
        for c in VoxelCoord::new(0, 0, 0).children(4) {
            block.insert(c, ()).unwrap();
        }
        assert_eq!(block.len(), 64);
        assert_eq!(downsample_occupancy(&block, 4).unwrap().len(), 1);
    }

    #[test]
    fn downsample_rejects_indivisible_dims_and_bad_factor() {
        let v = SparseVolume::<()>::new(spec(6));
        assert!(downsample_occupancy(&v, 4).is_err());
        assert!(downsample_occupancy(&v, 3).is_err());
    }

    #[test]
    fn iou_examples() {
        let set = |r: core::ops::Range<i32>| r.map(|i| VoxelCoord::new(i, 0, 0)).collect::<BTreeSet<_>>();
        assert_eq!(iou_voxel_sets(&set(0..5), &set(0..5)).unwrap(), 1.0);
        assert_eq!(iou_voxel_sets(&set(0..5), &set(5..9)).unwrap(), 0.0);
        // |a| = 30, |b| = 25, overlap 20
        let iou = iou_voxel_sets(&set(0..30), &set(10..35)).unwrap();
        assert!((iou - 20.0 / 35.0).abs() < 1e-15);
        assert_eq!(
            iou_voxel_sets(&BTreeSet::new(), &BTreeSet::new()),
            Err(crate::Error::UndefinedIou)
        );
    }

    proptest! {
        #[test]
        fn downsample_twice_by_two_equals_by_four(cells in proptest::collection::vec((0i32..16, 0i32..16, 0i32..16), 0..64)) {
            let mut v = SparseVolume::new(spec(16));
            for (i, j, k) in cells {
                v.insert(VoxelCoord::new(i, j, k), ()).unwrap();
            }
            let twice = downsample_occupancy(&downsample_occupancy(&v, 2).unwrap(), 2).unwrap();
            let once = downsample_occupancy(&v, 4).unwrap();
            prop_assert_eq!(twice.support(), once.support());
            prop_assert_eq!(twice.spec(), once.spec());
        }
    }
}
