//! The 3-D geometry prior and the comparison regularizers.
//!
//! The prior compares the iterate's density grid with every reference grid
//! outside that reference's surface mask, then blends the distances with
//! softmax weights `softmax(-delta * L)`. As `delta` grows the blend
//! approaches the hard minimum over references.

use serde::{Deserialize, Serialize};

use crate::generator::{LatentCode, StyleParams};
use crate::geometry::{GridGeometry, IsoRule, MaskGrid, VoxelGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEntry {
    pub latent: LatentCode,
    /// Seed that produced `latent`, when it was sampled.
    pub seed: Option<u64>,
    pub grid: VoxelGrid,
    pub mask: MaskGrid,
    pub iso: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub geometry: GridGeometry,
    pub iso_rule: IsoRule,
    pub dilation: usize,
    pub entries: Vec<ReferenceEntry>,
}

impl ReferenceSet {
    pub fn new(
        geometry: GridGeometry,
        iso_rule: IsoRule,
        dilation: usize,
        entries: Vec<ReferenceEntry>,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyReferenceSet);
        }
        for e in &entries {
            e.grid.ensure_same_geometry(&geometry)?;
            e.mask.ensure_same_geometry(&geometry)?;
        }
        Ok(ReferenceSet {
            geometry,
            iso_rule,
            dilation,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The first `n` entries.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        Self::new(
            self.geometry,
            self.iso_rule,
            self.dilation,
            self.entries.iter().take(n).cloned().collect(),
        )
    }
}

/// `|| (grid - ref.grid) * (1 - ref.mask) ||_F`.
pub fn masked_distance(grid: &VoxelGrid, reference: &ReferenceEntry) -> Result<f64> {
    check_pair(grid, reference)?;
    Ok(masked_sq(grid, reference).sqrt())
}

fn check_pair(grid: &VoxelGrid, reference: &ReferenceEntry) -> Result<()> {
    grid.ensure_same_geometry(&reference.grid.geometry)?;
    reference.mask.ensure_same_geometry(&grid.geometry)
}

fn masked_sq(grid: &VoxelGrid, reference: &ReferenceEntry) -> f64 {
    grid.data
        .iter()
        .zip(&reference.grid.data)
        .zip(&reference.mask.data)
        .filter(|(_, &m)| !m)
        .map(|((a, b), _)| (a - b) * (a - b))
        .sum()
}

/// Adds `scale * d(masked_distance)/d(grid)` into `out`.
fn masked_distance_grad(grid: &VoxelGrid, reference: &ReferenceEntry, dist: f64, scale: f64, out: &mut [f64]) {
    if dist == 0.0 || scale == 0.0 {
        return;
    }
    let s = scale / dist;
    for (((o, a), b), &m) in out
        .iter_mut()
        .zip(&grid.data)
        .zip(&reference.grid.data)
        .zip(&reference.mask.data)
    {
        if !m {
            *o += s * (a - b);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorDiagnostics {
    pub distances: Vec<f64>,
    pub weights: Vec<f64>,
    /// Nats.
    pub entropy: f64,
    pub max_weight: f64,
    pub argmax: usize,
}

/// Softmax of `-delta * distances` with max-shift, plus its entropy.
pub fn soft_weights(distances: &[f64], delta: f64) -> PriorDiagnostics {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let logits: Vec<f64> = distances.iter().map(|&l| -delta * (l - min)).collect();
    let z: f64 = logits.iter().map(|x| x.exp()).sum();
    let log_z = z.ln();
    let weights: Vec<f64> = logits.iter().map(|x| (x - log_z).exp()).collect();
    let entropy = -logits
        .iter()
        .zip(&weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(x, w)| w * (x - log_z))
        .sum::<f64>();
    let (argmax, max_weight) = weights
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, w)| if w > acc.1 { (i, w) } else { acc });
    PriorDiagnostics {
        distances: distances.to_vec(),
        weights,
        entropy: entropy.max(0.0),
        max_weight,
        argmax,
    }
}

/// Softmax-weighted mean of the distances, computed as
/// `min + sum_i w_i (L_i - min)` to keep the hard-min limit exact.
pub fn soft_value(diag: &PriorDiagnostics) -> f64 {
    let min = diag.distances.iter().copied().fold(f64::INFINITY, f64::min);
    min + diag
        .weights
        .iter()
        .zip(&diag.distances)
        .map(|(w, l)| w * (l - min))
        .sum::<f64>()
}

pub fn soft_prior(grid: &VoxelGrid, refs: &ReferenceSet, delta: f64) -> Result<(f64, PriorDiagnostics)> {
    let (v, d, _) = soft_prior_impl(grid, refs, delta, false)?;
    Ok((v, d))
}

/// Soft prior with its gradient with respect to the grid densities.
pub fn soft_prior_with_grad(
    grid: &VoxelGrid,
    refs: &ReferenceSet,
    delta: f64,
) -> Result<(f64, PriorDiagnostics, Vec<f64>)> {
    soft_prior_impl(grid, refs, delta, true)
}

fn soft_prior_impl(
    grid: &VoxelGrid,
    refs: &ReferenceSet,
    delta: f64,
    with_grad: bool,
) -> Result<(f64, PriorDiagnostics, Vec<f64>)> {
    if refs.entries.is_empty() {
        return Err(Error::EmptyReferenceSet);
    }
    if !(delta >= 0.0) {
        return Err(Error::InvalidConfig(format!("delta must be >= 0, got {delta}")));
    }
    let mut distances = Vec::with_capacity(refs.len());
    for e in &refs.entries {
        check_pair(grid, e)?;
        distances.push(masked_sq(grid, e).sqrt());
    }
    let diag = soft_weights(&distances, delta);
    let value = soft_value(&diag);
    let mut grad = Vec::new();
    if with_grad {
        grad = vec![0.0; grid.data.len()];
        // d value / d L_j = w_j (1 - delta (L_j - value))
        for ((e, &l), &w) in refs.entries.iter().zip(&distances).zip(&diag.weights) {
            let coeff = w * (1.0 - delta * (l - value));
            masked_distance_grad(grid, e, l, coeff, &mut grad);
        }
    }
    Ok((value, diag, grad))
}

/// Piecewise-constant inverse-temperature schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    pub values: Vec<f64>,
    /// Step at which each value after the first takes effect.
    pub steps: Vec<usize>,
}

impl AnnealSchedule {
    /// `[100, 150, ..., 400, 500, 550]` switching every 100 steps.
    pub fn standard() -> Self {
        AnnealSchedule {
            values: vec![100.0, 150.0, 200.0, 250.0, 300.0, 350.0, 400.0, 500.0, 550.0],
            steps: (1..=8).map(|i| 100 * i).collect(),
        }
    }

    pub fn constant(delta: f64) -> Self {
        AnnealSchedule {
            values: vec![delta],
            steps: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.steps.len() + 1 {
            return Err(Error::InvalidConfig(format!(
                "schedule needs one more value than boundaries ({} values, {} steps)",
                self.values.len(),
                self.steps.len()
            )));
        }
        if self.values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig("schedule values must be finite and >= 0".into()));
        }
        if self.values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidConfig("schedule values must be nondecreasing".into()));
        }
        if self.steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("schedule steps must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Value of the segment containing `step`; the last value holds forever.
    pub fn delta(&self, step: usize) -> f64 {
        let seg = self.steps.partition_point(|&b| b <= step);
        self.values[seg]
    }
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self::standard()
    }
}

pub fn anneal_delta(schedule: &AnnealSchedule, step: usize) -> f64 {
    schedule.delta(step)
}

fn check_same_shape(a: &StyleParams, b: &StyleParams) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch("style parameter shapes differ".into()));
    }
    Ok(())
}

/// `sum_l |freq_l - avg_freq_l|^2 + |phase_l - avg_phase_l|^2`, with gradient.
pub fn pigan_reg(params: &StyleParams, avg: &StyleParams) -> Result<(f64, StyleParams)> {
    check_same_shape(params, avg)?;
    let mut grad = params.clone();
    grad.axpy(-1.0, avg);
    let value = grad.dot(&grad);
    grad.scale(2.0);
    Ok((value, grad))
}

/// Sum over layer pairs of the great-circle angle between the normalized
/// `(freq_l, phase_l)` vectors, with gradient.
///
/// At (numerically) coincident pairs the angle is not differentiable and the
/// pair contributes no gradient.
pub fn geodesic_reg(params: &StyleParams) -> Result<(f64, StyleParams)> {
    let n = params.num_layers();
    if n < 2 {
        return Err(Error::InvalidDimension(format!("geodesic loss needs >= 2 layers, got {n}")));
    }
    let vecs: Vec<Vec<f64>> = (0..n).map(|l| params.layer_vector(l)).collect();
    let len = vecs[0].len();
    if vecs.iter().any(|v| v.len() != len) {
        return Err(Error::ShapeMismatch("geodesic loss needs equal layer sizes".into()));
    }
    let mut units = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    for (l, v) in vecs.iter().enumerate() {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNormLayer(l));
        }
        norms.push(norm);
        units.push(v.iter().map(|x| x / norm).collect::<Vec<f64>>());
    }
    let mut value = 0.0;
    let mut g_units = vec![vec![0.0; len]; n];
    for i in 0..n {
        for j in i + 1..n {
            let (u, v) = (&units[i], &units[j]);
            let c: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            // tangent components: t_u = v - c u, t_v = u - c v, |t| = sin(angle)
            let tu: Vec<f64> = v.iter().zip(u).map(|(b, a)| b - c * a).collect();
            let tv: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - c * b).collect();
            let s = tu.iter().map(|x| x * x).sum::<f64>().sqrt();
            value += s.atan2(c);
            // the angle has a kink at coincident directions; use the zero subgradient there
            if s > 1e-12 {
                for k in 0..len {
                    g_units[i][k] -= tu[k] / s;
                    g_units[j][k] -= tv[k] / s;
                }
            }
        }
    }
    let mut flat = Vec::with_capacity(params.len());
    for l in 0..n {
        // the unit-sphere tangent gradient scales by 1/|v| back to raw space
        flat.extend(g_units[l].iter().map(|g| g / norms[l]));
    }
    Ok((value, StyleParams::unflatten(&params.shape(), &flat)?))
}

/// `|| grid * (1 - mask) ||_F`: penalizes every density outside the mask.
pub fn l2_outside_mask(grid: &VoxelGrid, mask: &MaskGrid) -> Result<f64> {
    mask.ensure_same_geometry(&grid.geometry)?;
    Ok(grid
        .data
        .iter()
        .zip(&mask.data)
        .filter(|(_, &m)| !m)
        .map(|(v, _)| v * v)
        .sum::<f64>()
        .sqrt())
}

/// Gradient of [`l2_outside_mask`] with respect to the grid.
pub fn l2_outside_mask_grad(grid: &VoxelGrid, mask: &MaskGrid) -> Result<(f64, Vec<f64>)> {
    let value = l2_outside_mask(grid, mask)?;
    let grad = grid
        .data
        .iter()
        .zip(&mask.data)
        .map(|(v, &m)| if m || value == 0.0 { 0.0 } else { v / value })
        .collect();
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rng;
    use rand::Rng;

    fn geom() -> GridGeometry {
        GridGeometry::cube(2).unwrap()
    }

    fn entry(grid: Vec<f64>, mask: Vec<bool>) -> ReferenceEntry {
        ReferenceEntry {
            latent: LatentCode(vec![]),
            seed: None,
            grid: VoxelGrid::from_data(geom(), grid).unwrap(),
            mask: MaskGrid {
                geometry: geom(),
                data: mask,
            },
            iso: 0.5,
        }
    }

    fn set_of(distances_to_zero: &[f64]) -> (VoxelGrid, ReferenceSet) {
        // reference i holds value L_i in cell 0; the iterate is all zeros
        let entries = distances_to_zero
            .iter()
            .map(|&l| {
                let mut g = vec![0.0; 8];
                g[0] = l;
                entry(g, vec![false; 8])
            })
            .collect();
        (
            VoxelGrid::zeros(geom()),
            ReferenceSet::new(geom(), IsoRule::default(), 1, entries).unwrap(),
        )
    }

    #[test]
    fn masked_distance_cases() {
        let r = entry(vec![1.0; 8], vec![false; 8]);
        assert_eq!(masked_distance(&r.grid, &r).unwrap(), 0.0);
        let all = entry(vec![1.0; 8], vec![true; 8]);
        assert_eq!(masked_distance(&VoxelGrid::zeros(geom()), &all).unwrap(), 0.0);
        let mut g = vec![1.0; 8];
        g[2] = 4.0;
        g[5] = 4.0;
        let d = masked_distance(&VoxelGrid::from_data(geom(), g).unwrap(), &r).unwrap();
        assert!((d - 18f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn masked_distance_rejects_other_geometry() {
        let r = entry(vec![1.0; 8], vec![false; 8]);
        let other = VoxelGrid::zeros(GridGeometry::cube(3).unwrap());
        assert!(matches!(masked_distance(&other, &r), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn soft_prior_reference_values() {
        let (g, s) = set_of(&[1.0, 2.0, 4.0]);
        let (v, d) = soft_prior(&g, &s, 0.0).unwrap();
        assert!((v - 7.0 / 3.0).abs() < 1e-14);
        assert!(d.weights.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));

        let (g1, s1) = set_of(&[3.5]);
        let (v1, d1) = soft_prior(&g1, &s1, 123.0).unwrap();
        assert_eq!(v1, 3.5);
        assert_eq!(d1.weights, vec![1.0]);

        let (g2, s2) = set_of(&[1.0, 2.0]);
        let (v2, d2) = soft_prior(&g2, &s2, 4f64.ln()).unwrap();
        assert!((d2.weights[0] - 0.8).abs() < 1e-14);
        assert!((d2.weights[1] - 0.2).abs() < 1e-14);
        assert!((v2 - 1.2).abs() < 1e-14);
        let (v3, _) = soft_prior(&g2, &s2, 1e3).unwrap();
        assert!(v3 - 1.0 < 1e-6);
    }

    #[test]
    fn soft_prior_rejects_bad_inputs() {
        let (g, s) = set_of(&[1.0]);
        assert!(soft_prior(&g, &s, -1.0).is_err());
        let mut empty = s.clone();
        empty.entries.clear();
        assert!(matches!(soft_prior(&g, &empty, 1.0), Err(Error::EmptyReferenceSet)));
    }

    #[test]
    fn soft_prior_grad_matches_fd() {
        let mut r = rng(3);
        let entries = (0..4)
            .map(|_| {
                let g = (0..8).map(|_| r.gen_range(0.0..3.0)).collect();
                let m = (0..8).map(|_| r.gen_bool(0.3)).collect();
                entry(g, m)
            })
            .collect();
        let set = ReferenceSet::new(geom(), IsoRule::default(), 1, entries).unwrap();
        let grid = VoxelGrid::from_data(geom(), (0..8).map(|_| r.gen_range(0.0..3.0)).collect()).unwrap();
        let delta = 0.7;
        let (_, _, grad) = soft_prior_with_grad(&grid, &set, delta).unwrap();
        for i in 0..8 {
            let h = 1e-6;
            let mut p = grid.clone();
            let mut m = grid.clone();
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (soft_prior(&p, &set, delta).unwrap().0 - soft_prior(&m, &set, delta).unwrap().0) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-6 * fd.abs().max(1e-6), "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn schedule_lookup() {
        let s = AnnealSchedule::standard();
        s.validate().unwrap();
        assert_eq!(anneal_delta(&s, 0), 100.0);
        assert_eq!(anneal_delta(&s, 99), 100.0);
        assert_eq!(anneal_delta(&s, 100), 150.0);
        assert_eq!(anneal_delta(&s, 150), 150.0);
        assert_eq!(anneal_delta(&s, 700), 500.0);
        assert_eq!(anneal_delta(&s, 800), 550.0);
        assert_eq!(anneal_delta(&s, 1_000_000), 550.0);
        assert_eq!(AnnealSchedule::constant(3.0).delta(55), 3.0);
        let bad = AnnealSchedule {
            values: vec![2.0, 1.0],
            steps: vec![10],
        };
        assert!(bad.validate().is_err());
    }

    fn one_layer(f: Vec<f64>, p: Vec<f64>) -> StyleParams {
        StyleParams {
            freqs: vec![f],
            phases: vec![p],
        }
    }

    #[test]
    fn pigan_reg_cases() {
        let avg = one_layer(vec![1.0, 1.0], vec![0.5]);
        assert_eq!(pigan_reg(&avg, &avg).unwrap().0, 0.0);
        let p = one_layer(vec![4.0, 5.0], vec![0.5]);
        assert_eq!(pigan_reg(&p, &avg).unwrap().0, 25.0);
        let p2 = one_layer(vec![7.0, 9.0], vec![0.5]);
        assert_eq!(pigan_reg(&p2, &avg).unwrap().0, 100.0);
        assert!(pigan_reg(&one_layer(vec![1.0], vec![]), &avg).is_err());
    }

    #[test]
    fn geodesic_cases() {
        let same = StyleParams {
            freqs: vec![vec![1.0, 2.0]; 3],
            phases: vec![vec![0.5]; 3],
        };
        assert_eq!(geodesic_reg(&same).unwrap().0, 0.0);
        let orth = StyleParams {
            freqs: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            phases: vec![vec![0.0], vec![0.0]],
        };
        assert!((geodesic_reg(&orth).unwrap().0 - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        let mut scaled = orth.clone();
        scaled.freqs[1] = vec![0.0, 7.5];
        assert_eq!(geodesic_reg(&scaled).unwrap().0, geodesic_reg(&orth).unwrap().0);
        let zero = StyleParams {
            freqs: vec![vec![0.0, 0.0], vec![0.0, 1.0]],
            phases: vec![vec![0.0], vec![0.0]],
        };
        assert!(matches!(geodesic_reg(&zero), Err(Error::ZeroNormLayer(0))));
        assert!(geodesic_reg(&one_layer(vec![1.0], vec![1.0])).is_err());
    }

    #[test]
    fn geodesic_grad_matches_fd() {
        let mut r = rng(5);
        let p = StyleParams {
            freqs: (0..3).map(|_| (0..4).map(|_| r.gen_range(-1.0..1.0)).collect()).collect(),
            phases: (0..3).map(|_| (0..2).map(|_| r.gen_range(-1.0..1.0)).collect()).collect(),
        };
        let (_, g) = geodesic_reg(&p).unwrap();
        let flat = p.flatten();
        let gf = g.flatten();
        for i in 0..flat.len() {
            let h = 1e-6;
            let mut a = flat.clone();
            let mut b = flat.clone();
            a[i] += h;
            b[i] -= h;
            let fa = geodesic_reg(&StyleParams::unflatten(&p.shape(), &a).unwrap()).unwrap().0;
            let fb = geodesic_reg(&StyleParams::unflatten(&p.shape(), &b).unwrap()).unwrap().0;
            let fd = (fa - fb) / (2.0 * h);
            assert!((fd - gf[i]).abs() < 1e-6 * fd.abs().max(1e-3), "{i}: {fd} vs {}", gf[i]);
        }
    }

    #[test]
    fn l2_outside_cases() {
        let g = geom();
        assert_eq!(l2_outside_mask(&VoxelGrid::zeros(g), &MaskGrid::empty(g)).unwrap(), 0.0);
        let full = MaskGrid {
            geometry: g,
            data: vec![true; 8],
        };
        assert_eq!(l2_outside_mask(&VoxelGrid::from_data(g, vec![5.0; 8]).unwrap(), &full).unwrap(), 0.0);
        let mut d = vec![0.0; 8];
        d[1] = 3.0;
        d[6] = 3.0;
        let v = l2_outside_mask(&VoxelGrid::from_data(g, d).unwrap(), &MaskGrid::empty(g)).unwrap();
        assert!((v - 18f64.sqrt()).abs() < 1e-15);
    }
}
