//! Density grids, iso-surfaces and surface masks.

mod marching_cubes;

pub use marching_cubes::{marching_cubes, SurfaceMesh};

use serde::{Deserialize, Serialize};

use crate::generator::RadianceModel;
use crate::math::Vec3;
use crate::{Error, Result};

pub const DEFAULT_BOUND: f64 = 1.1;

/// Axis-aligned lattice of `k^3` cell centers, x-fastest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub k: usize,
    pub lo: Vec3,
    pub hi: Vec3,
}

impl GridGeometry {
    pub fn new(k: usize, lo: Vec3, hi: Vec3) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidGrid(format!("resolution must be >= 2, got {k}")));
        }
        if !(lo.x < hi.x && lo.y < hi.y && lo.z < hi.z) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidGrid(format!("degenerate bounds {lo:?} .. {hi:?}")));
        }
        Ok(GridGeometry { k, lo, hi })
    }

    /// The default `[-1.1, 1.1]^3` cube.
    pub fn cube(k: usize) -> Result<Self> {
        Self::new(k, Vec3::splat(-DEFAULT_BOUND), Vec3::splat(DEFAULT_BOUND))
    }

    pub fn len(&self) -> usize {
        self.k * self.k * self.k
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> Vec3 {
        let k = self.k as f64;
        Vec3::new(
            (self.hi.x - self.lo.x) / k,
            (self.hi.y - self.lo.y) / k,
            (self.hi.z - self.lo.z) / k,
        )
    }

    pub fn index(&self, i: usize, j: usize, l: usize) -> usize {
        i + self.k * (j + self.k * l)
    }

    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        (idx % self.k, (idx / self.k) % self.k, idx / (self.k * self.k))
    }

    pub fn point(&self, i: usize, j: usize, l: usize) -> Vec3 {
        let h = self.spacing();
        Vec3::new(
            self.lo.x + (i as f64 + 0.5) * h.x,
            self.lo.y + (j as f64 + 0.5) * h.y,
            self.lo.z + (l as f64 + 0.5) * h.z,
        )
    }

    pub fn points(&self) -> impl Iterator<Item = Vec3> + '_ {
        (0..self.len()).map(move |idx| {
            let (i, j, l) = self.coords(idx);
            self.point(i, j, l)
        })
    }

    /// Continuous lattice coordinate of a world point (cell centers are integers).
    pub fn lattice_coords(&self, p: Vec3) -> Vec3 {
        let h = self.spacing();
        Vec3::new(
            (p.x - self.lo.x) / h.x - 0.5,
            (p.y - self.lo.y) / h.y - 0.5,
            (p.z - self.lo.z) / h.z - 0.5,
        )
    }

    pub fn voxel_diagonal(&self) -> f64 {
        self.spacing().norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub geometry: GridGeometry,
    pub data: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(geometry: GridGeometry) -> Self {
        VoxelGrid {
            geometry,
            data: vec![0.0; geometry.len()],
        }
    }

    pub fn from_data(geometry: GridGeometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::InvalidGrid(format!(
                "{} values for a grid of {} cells",
                data.len(),
                geometry.len()
            )));
        }
        if data.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidGrid("densities must be finite and >= 0".into()));
        }
        Ok(VoxelGrid { geometry, data })
    }

    pub fn k(&self) -> usize {
        self.geometry.k
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Rounds every density to single precision (the on-disk format).
    pub fn quantized(mut self) -> Self {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
        self
    }

    pub fn ensure_same_geometry(&self, other: &GridGeometry) -> Result<()> {
        if &self.geometry != other {
            return Err(Error::GeometryMismatch(format!(
                "grid {:?} vs {:?}",
                self.geometry, other
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrid {
    pub geometry: GridGeometry,
    pub data: Vec<bool>,
}

impl MaskGrid {
    pub fn empty(geometry: GridGeometry) -> Self {
        MaskGrid {
            geometry,
            data: vec![false; geometry.len()],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn ensure_same_geometry(&self, other: &GridGeometry) -> Result<()> {
        if &self.geometry != other {
            return Err(Error::GeometryMismatch(format!(
                "mask {:?} vs {:?}",
                self.geometry, other
            )));
        }
        Ok(())
    }
}

/// Samples the field density at every cell center.
pub fn voxelize<M: RadianceModel>(model: &M, prep: &M::Prepared, geometry: &GridGeometry) -> VoxelGrid {
    VoxelGrid {
        geometry: *geometry,
        data: geometry.points().map(|p| model.eval(prep, p).density.max(0.0)).collect(),
    }
}

/// Accumulates `d_grid^T * d(grid)/d(params)` into `grad`; cells with a zero
/// cotangent are skipped.
pub fn voxelize_backward<M: RadianceModel>(
    model: &M,
    prep: &M::Prepared,
    geometry: &GridGeometry,
    d_grid: &[f64],
    grad: &mut M::Grad,
) -> Result<()> {
    if d_grid.len() != geometry.len() {
        return Err(Error::ShapeMismatch(format!(
            "grid cotangent has {} entries, grid has {}",
            d_grid.len(),
            geometry.len()
        )));
    }
    let mut tape = model.new_tape();
    for (idx, &g) in d_grid.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let (i, j, l) = geometry.coords(idx);
        model.eval_taped(prep, geometry.point(i, j, l), &mut tape);
        model.backward(prep, &tape, g, [0.0; 3], grad);
    }
    Ok(())
}

/// How the iso level of a reference grid is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum IsoRule {
    /// Quantile in `[0, 1]` of the grid's positive densities (values above
    /// `1e-6 * max`), clamped below the maximum.
    Percentile(f64),
    Absolute(f64),
    FractionOfMax(f64),
}

impl Default for IsoRule {
    fn default() -> Self {
        IsoRule::Percentile(0.9)
    }
}

impl IsoRule {
    pub fn resolve(&self, grid: &VoxelGrid) -> f64 {
        let max = grid.max();
        match *self {
            IsoRule::Absolute(v) => v,
            IsoRule::FractionOfMax(f) => f * max,
            IsoRule::Percentile(q) => {
                let floor = 1e-6 * max;
                let mut pos: Vec<f64> = grid.data.iter().copied().filter(|&v| v > floor).collect();
                if pos.is_empty() {
                    return f64::INFINITY;
                }
                pos.sort_by(f64::total_cmp);
                let rank = ((q.clamp(0.0, 1.0) * pos.len() as f64).ceil() as usize).clamp(1, pos.len());
                pos[rank - 1].min(max * (1.0 - 1e-9))
            }
        }
    }
}

/// Interior cells (`density >= iso`) plus every cell whose center lies within
/// Chebyshev distance `dilation` (in cells) of a marching-cubes vertex.
pub fn surface_mask(grid: &VoxelGrid, iso: f64, dilation: usize) -> MaskGrid {
    let g = grid.geometry;
    let mut mask = MaskGrid {
        geometry: g,
        data: grid.data.iter().map(|&v| v >= iso).collect(),
    };
    let mesh = marching_cubes(grid, iso);
    let k = g.k as i64;
    let d = dilation as f64;
    for v in &mesh.vertices {
        let c = g.lattice_coords(*v);
        // lattice cells whose centers lie within `d` of the vertex along every axis
        let range = |x: f64| ((x - d).ceil().max(0.0) as i64, ((x + d).floor() as i64).min(k - 1));
        let ((i0, i1), (j0, j1), (l0, l1)) = (range(c.x), range(c.y), range(c.z));
        for l in l0..=l1 {
            for j in j0..=j1 {
                for i in i0..=i1 {
                    mask.data[g.index(i as usize, j as usize, l as usize)] = true;
                }
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{BlobDesc, BlobGenerator, GeneratorSpec};

    fn sphere_grid(k: usize, amp: f64, r: f64) -> VoxelGrid {
        let g = GridGeometry::cube(k).unwrap();
        let data = g
            .points()
            .map(|p| amp * (-p.norm_squared() / (2.0 * r * r)).exp())
            .collect();
        VoxelGrid::from_data(g, data).unwrap()
    }

    #[test]
    fn geometry_validation() {
        assert!(GridGeometry::cube(1).is_err());
        assert!(GridGeometry::new(4, Vec3::splat(1.0), Vec3::splat(1.0)).is_err());
        assert!(GridGeometry::new(4, Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, -1.0, 1.0)).is_err());
    }

    #[test]
    fn index_roundtrip_is_x_fastest() {
        let g = GridGeometry::cube(5).unwrap();
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 5);
        assert_eq!(g.index(0, 0, 1), 25);
        for idx in [0, 7, 63, 124] {
            let (i, j, l) = g.coords(idx);
            assert_eq!(g.index(i, j, l), idx);
        }
    }

    #[test]
    fn negligible_field_gives_negligible_grid() {
        let gen = BlobGenerator::new(&GeneratorSpec::blob(1)).unwrap();
        let z = gen
            .encode(&[BlobDesc {
                center: Vec3::ZERO,
                radius: 0.1,
                amplitude: 1e-300,
                color: [0.5; 3],
            }])
            .unwrap();
        let prep = gen.prepare(&gen.map_latent(&z).unwrap()).unwrap();
        let grid = voxelize(&gen, &prep, &GridGeometry::cube(8).unwrap());
        assert!(grid.data.iter().all(|&v| (0.0..1e-290).contains(&v)));
    }

    #[test]
    fn blob_argmax_contains_origin() {
        let gen = BlobGenerator::new(&GeneratorSpec::blob(1)).unwrap();
        let z = gen
            .encode(&[BlobDesc {
                center: Vec3::ZERO,
                radius: 0.1,
                amplitude: 10.0,
                color: [0.5; 3],
            }])
            .unwrap();
        let prep = gen.prepare(&gen.map_latent(&z).unwrap()).unwrap();
        let geom = GridGeometry::new(9, Vec3::splat(-1.0), Vec3::splat(1.0)).unwrap();
        let grid = voxelize(&gen, &prep, &geom);
        let argmax = (0..grid.data.len()).max_by(|&a, &b| grid.data[a].total_cmp(&grid.data[b])).unwrap();
        assert_eq!(geom.coords(argmax), (4, 4, 4));
    }

    #[test]
    fn percentile_rule_stays_below_max() {
        let grid = sphere_grid(16, 5.0, 0.3);
        let iso = IsoRule::Percentile(1.0).resolve(&grid);
        assert!(iso < grid.max());
        let iso90 = IsoRule::Percentile(0.9).resolve(&grid);
        let above = grid.data.iter().filter(|&&v| v >= iso90).count();
        let positive = grid.data.iter().filter(|&&v| v > 5e-6 * grid.max()).count();
        assert!((above as f64 / positive as f64 - 0.1).abs() < 0.02);
    }

    #[test]
    fn mask_edge_cases() {
        let g = GridGeometry::cube(8).unwrap();
        let zero = VoxelGrid::zeros(g);
        assert_eq!(surface_mask(&zero, 0.5, 1).count(), 0);
        let full = VoxelGrid::from_data(g, vec![2.0; g.len()]).unwrap();
        assert_eq!(surface_mask(&full, 1.0, 1).count(), g.len());
    }

    #[test]
    fn mask_is_monotone_in_dilation_and_contains_interior() {
        let grid = sphere_grid(20, 3.0, 0.4);
        let iso = 3.0 * (-0.5f64).exp();
        let mut prev = surface_mask(&grid, iso, 0);
        for (v, m) in grid.data.iter().zip(&prev.data) {
            if *v >= iso {
                assert!(*m);
            }
        }
        for d in 1..4 {
            let next = surface_mask(&grid, iso, d);
            assert!(prev.data.iter().zip(&next.data).all(|(a, b)| !*a || *b));
            prev = next;
        }
    }

    #[test]
    fn sphere_mask_volume_near_dilated_ball() {
        let r = 0.5;
        let grid = sphere_grid(32, 1.0, r);
        let mask = surface_mask(&grid, (-0.5f64).exp(), 1);
        let h = grid.geometry.spacing().x;
        let ball = 4.0 / 3.0 * std::f64::consts::PI * (r + h).powi(3);
        let vol = mask.count() as f64 * h * h * h;
        assert!((vol / ball - 1.0).abs() < 0.2, "mask volume {vol} vs ball {ball}");
    }
}
