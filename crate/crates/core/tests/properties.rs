use nerfprior::curation::{consistency_from_scores, plausibility_from_scores, Class, Thresholds};
use nerfprior::generator::LatentCode;
use nerfprior::geometry::{surface_mask, GridGeometry, IsoRule, MaskGrid, VoxelGrid};
use nerfprior::math::Vec3;
use nerfprior::operators::{ForwardOperator, OperatorSpec};
use nerfprior::regularizer::{masked_distance, soft_value, soft_weights, ReferenceEntry};
use nerfprior::renderer::composite;
use nerfprior::generator::RadianceSample;
use proptest::prelude::*;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 64,
        ..ProptestConfig::default()
    }
}

fn distances() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..100.0, 1..12)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn blob_grid(k: usize, centers: &[(f64, f64, f64)], r: f64) -> VoxelGrid {
    let g = GridGeometry::cube(k).unwrap();
    let data = g
        .points()
        .map(|p| {
            centers
                .iter()
                .map(|&(x, y, z)| (-(p - Vec3::new(x, y, z)).norm_squared() / (2.0 * r * r)).exp())
                .sum()
        })
        .collect();
    VoxelGrid::from_data(g, data).unwrap()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn soft_value_lies_between_min_and_mean(l in distances(), delta in 0.0f64..1e4) {
        let v = soft_value(&soft_weights(&l, delta));
        let min = l.iter().copied().fold(f64::INFINITY, f64::min);
        let tol = 1e-12 * mean(&l).max(1.0);
        prop_assert!(v >= min - tol && v <= mean(&l) + tol, "{v} not in [{min}, {}]", mean(&l));
    }

    #[test]
    fn soft_value_nonincreasing_in_delta(l in distances(), a in 0.0f64..50.0, b in 0.0f64..50.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        let v_lo = soft_value(&soft_weights(&l, lo));
        let v_hi = soft_value(&soft_weights(&l, hi));
        prop_assert!(v_hi <= v_lo + 1e-12 * v_lo.abs().max(1.0));
    }

    #[test]
    fn large_delta_recovers_hard_min(l in prop::collection::vec(0.0f64..100.0, 2..12)) {
        let mut sorted = l.clone();
        sorted.sort_by(f64::total_cmp);
        let gap = sorted[1] - sorted[0];
        prop_assume!(gap > 1e-6);
        let delta = 40.0 / gap;
        let v = soft_value(&soft_weights(&l, delta));
        prop_assert!((v - sorted[0]).abs() <= 1e-12 * sorted[0].abs() + 1e-15, "{v} vs {}", sorted[0]);
    }

    #[test]
    fn smallest_distance_carries_largest_weight(l in distances(), delta in 0.0f64..1e3) {
        let d = soft_weights(&l, delta);
        let imin = (0..l.len()).fold(0, |a, i| if l[i] < l[a] { i } else { a });
        prop_assert!(d.weights.iter().all(|&w| w <= d.weights[imin]));
        prop_assert!((d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_cells_do_not_affect_distance(
        vals in prop::collection::vec(0.0f64..5.0, 64),
        refs in prop::collection::vec(0.0f64..5.0, 64),
        mask in prop::collection::vec(any::<bool>(), 64),
        noise in prop::collection::vec(0.0f64..1e3, 64),
    ) {
        let g = GridGeometry::cube(4).unwrap();
        let entry = ReferenceEntry {
            latent: LatentCode(vec![0.0]),
            seed: None,
            grid: VoxelGrid::from_data(g, refs).unwrap(),
            mask: MaskGrid { geometry: g, data: mask.clone() },
            iso: 0.0,
        };
        let a = VoxelGrid::from_data(g, vals.clone()).unwrap();
        let perturbed: Vec<f64> = vals.iter().zip(&mask).zip(&noise)
            .map(|((&v, &m), &n)| if m { v + n } else { v })
            .collect();
        let b = VoxelGrid::from_data(g, perturbed).unwrap();
        prop_assert_eq!(
            masked_distance(&a, &entry).unwrap().to_bits(),
            masked_distance(&b, &entry).unwrap().to_bits()
        );
    }

    #[test]
    fn mask_grows_with_dilation_and_contains_interior(
        cx in -0.5f64..0.5, cy in -0.5f64..0.5, r in 0.08f64..0.3, q in 0.3f64..0.95,
    ) {
        let grid = blob_grid(16, &[(cx, cy, 0.1), (-cx, 0.2, -0.3)], r);
        let iso = IsoRule::Percentile(q).resolve(&grid);
        let mut prev = surface_mask(&grid, iso, 0);
        for (v, &m) in grid.data.iter().zip(&prev.data) {
            prop_assert!(*v < iso || m);
        }
        for d in 1..3 {
            let next = surface_mask(&grid, iso, d);
            prop_assert!(prev.data.iter().zip(&next.data).all(|(&a, &b)| !a || b));
            prev = next;
        }
    }

    #[test]
    fn composite_telescopes_and_transmittance_falls(
        dens in prop::collection::vec(0.0f64..20.0, 2..64),
        bump in 0.0f64..10.0,
        at in 0usize..64,
        delta in 0.001f64..0.2,
    ) {
        let samples: Vec<RadianceSample> = dens.iter()
            .map(|&d| RadianceSample { color: [0.3, 0.6, 0.9], density: d })
            .collect();
        let mut w = vec![0.0; samples.len()];
        let (_, t) = composite(&samples, delta, [0.0; 3], &mut w);
        prop_assert!((w.iter().sum::<f64>() + t - 1.0).abs() < 1e-12);

        // transmittance before each sample, with and without extra density at `at`
        let trans = |s: &[RadianceSample]| {
            let mut out = Vec::with_capacity(s.len() + 1);
            let mut t = 1.0;
            for x in s {
                out.push(t);
                t *= (-x.density * delta).exp();
            }
            out.push(t);
            out
        };
        let mut denser = samples.clone();
        let i = at % denser.len();
        denser[i].density += bump;
        let (before, after) = (trans(&samples), trans(&denser));
        for j in i + 1..before.len() {
            prop_assert!(after[j] <= before[j]);
        }
    }

    #[test]
    fn consistency_and_plausibility_laws(
        scores in prop::collection::vec(-1.0f64..1.0, 2..10),
        extra in -1.0f64..1.0,
    ) {
        let w = consistency_from_scores(&scores).unwrap();
        prop_assert!(w >= 0.0);
        prop_assert_eq!(w == 0.0, scores.iter().all(|&s| s == scores[0]));
        let c = plausibility_from_scores(&scores).unwrap();
        let mut more = scores.clone();
        more.push(extra);
        prop_assert!(plausibility_from_scores(&more).unwrap() <= c);
        prop_assert!(consistency_from_scores(&more).unwrap() >= w);
    }

    #[test]
    fn classes_are_disjoint_with_bad_precedence(
        w in 0.0f64..0.05, c in -1.0f64..1.0, flip in any::<bool>(),
    ) {
        let t = Thresholds { flip_plausibility: flip, ..Thresholds::default() };
        let class = t.classify(w, c);
        if w > t.bad_consistency {
            prop_assert_eq!(class, Class::Bad);
        }
        if class == Class::Good {
            prop_assert!(w <= t.good_consistency);
        }
    }
}

fn operator_specs() -> Vec<OperatorSpec> {
    vec![
        OperatorSpec::Identity,
        OperatorSpec::PixelMask { ratio: 0.3 },
        OperatorSpec::BoxMask { x0: 2, y0: 3, w: 4, h: 3 },
        OperatorSpec::GaussianCs { m: 40 },
        OperatorSpec::Downsample { factor: 2 },
    ]
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn operators_are_linear_with_matching_adjoints(
        seed in any::<u64>(),
        x1 in prop::collection::vec(-1.0f64..1.0, 192),
        x2 in prop::collection::vec(-1.0f64..1.0, 192),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        for spec in operator_specs() {
            let op = ForwardOperator::realize(&spec, 8, 8, seed).unwrap();
            let combo: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| a * p + b * q).collect();
            let (y1, y2) = (op.apply_vec(&x1).unwrap(), op.apply_vec(&x2).unwrap());
            let y = op.apply_vec(&combo).unwrap();
            for i in 0..y.len() {
                let want = a * y1[i] + b * y2[i];
                prop_assert!((y[i] - want).abs() <= 1e-12 * (1.0 + want.abs()), "{spec}");
            }
            let r: Vec<f64> = y2.iter().map(|v| v.sin() + 0.5).collect();
            let lhs: f64 = y1.iter().zip(&r).map(|(p, q)| p * q).sum();
            let rhs: f64 = x1.iter().zip(&op.adjoint_vec(&r).unwrap()).map(|(p, q)| p * q).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-12), "{spec}: {lhs} vs {rhs}");
        }
    }
}
