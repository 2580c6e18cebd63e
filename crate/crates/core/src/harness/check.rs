//! Fast self-test of the core oracles, run by the `check` CLI verb.

use rand::Rng;

use super::PropertyCheck;
use crate::generator::{Generator, GeneratorSpec, LatentCode, RadianceSample};
use crate::geometry::{marching_cubes, GridGeometry, VoxelGrid};
use crate::inversion::{grad_check, total_loss, GradCheckOptions, LossWeights, Problem};
use crate::math::rng;
use crate::operators::{ForwardOperator, OperatorSpec};
use crate::regularizer::{soft_value, soft_weights};
use crate::renderer::{composite, render_style, Camera, RenderConfig};
use crate::Result;

fn check(name: &str, passed: bool, detail: String) -> PropertyCheck {
    PropertyCheck {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn telescoping() -> PropertyCheck {
    let mut r = rng(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = r.gen_range(2..64);
        let samples: Vec<RadianceSample> = (0..n)
            .map(|_| RadianceSample {
                color: [0.0; 3],
                density: r.gen_range(0.0..20.0),
            })
            .collect();
        let mut w = vec![0.0; n];
        let (_, t) = composite(&samples, r.gen_range(0.001..0.2), [0.0; 3], &mut w);
        worst = worst.max((w.iter().sum::<f64>() + t - 1.0).abs());
    }
    check("compositing weights telescope to one", worst < 1e-12, format!("max err {worst:.2e}"))
}

fn homogeneous() -> PropertyCheck {
    let (sigma, near, far, n) = (1.7, 0.0, 3.0, 256);
    let samples = vec![
        RadianceSample {
            color: [1.0; 3],
            density: sigma
        };
        n
    ];
    let mut w = vec![0.0; n];
    let (c, _) = composite(&samples, (far - near) / n as f64, [0.0; 3], &mut w);
    let exact = 1.0 - f64::exp(-sigma * (far - near));
    let err = (c[0] - exact).abs();
    check("homogeneous opacity matches closed form", err < 1e-3, format!("err {err:.2e}"))
}

fn soft_limits() -> PropertyCheck {
    let mut r = rng(12);
    let mut ok = true;
    for _ in 0..1000 {
        let l: Vec<f64> = (0..r.gen_range(1..10)).map(|_| r.gen_range(0.0..10.0)).collect();
        let mean = l.iter().sum::<f64>() / l.len() as f64;
        let min = l.iter().copied().fold(f64::INFINITY, f64::min);
        let mut prev = f64::INFINITY;
        for d in [0.0, 0.1, 1.0, 10.0, 100.0, 1e4] {
            let v = soft_value(&soft_weights(&l, d));
            ok &= v >= min - 1e-12 && v <= mean + 1e-12 && v <= prev + 1e-12;
            prev = v;
        }
    }
    check("soft prior between min and mean, monotone in delta", ok, String::new())
}

fn adjoints() -> Result<PropertyCheck> {
    let (w, h) = (8, 8);
    let mut r = rng(13);
    let mut worst = 0.0f64;
    for spec in [
        OperatorSpec::Identity,
        OperatorSpec::PixelMask { ratio: 0.3 },
        OperatorSpec::BoxMask { x0: 2, y0: 1, w: 3, h: 4 },
        OperatorSpec::GaussianCs { m: 40 },
        OperatorSpec::Downsample { factor: 2 },
    ] {
        let op = ForwardOperator::realize(&spec, w, h, 5)?;
        for _ in 0..20 {
            let x: Vec<f64> = (0..op.input_len()).map(|_| r.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..op.output_shape().len()).map(|_| r.gen_range(-1.0..1.0)).collect();
            let lhs: f64 = op.apply_vec(&x)?.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(op.adjoint_vec(&y)?).map(|(a, b)| a * b).sum();
            worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300));
        }
    }
    Ok(check("operator adjoint identity", worst < 1e-10, format!("max rel err {worst:.2e}")))
}

fn sphere_mesh() -> Result<PropertyCheck> {
    let g = GridGeometry::cube(32)?;
    let data = g.points().map(|p| (1.0 - p.norm() / 1.2).max(0.0)).collect();
    let grid = VoxelGrid::from_data(g, data)?;
    let mesh = marching_cubes(&grid, 0.5);
    let worst = mesh.vertices.iter().map(|v| (v.norm() - 0.6).abs()).fold(0.0, f64::max);
    let tol = 1.5 * g.voxel_diagonal();
    Ok(check(
        "marching cubes recovers a sphere",
        !mesh.is_empty() && worst < tol,
        format!("max radius err {worst:.3e}, tolerance {tol:.3e}"),
    ))
}

fn gradient() -> Result<PropertyCheck> {
    let gen = Generator::new(&GeneratorSpec::blob(2))?;
    let cfg = RenderConfig {
        samples: 12,
        ..RenderConfig::default()
    };
    let cam = Camera::frontal(6, 6)?;
    let target = gen.map_latent(&LatentCode(vec![0.3; 16]))?;
    let x = crate::with_model!(&gen, m => render_style(m, &target, &cam, &cfg))?.image;
    let op = ForwardOperator::realize(&OperatorSpec::Identity, 6, 6, 0)?;
    let y = op.apply(&x)?;
    let problem = Problem {
        generator: &gen,
        render: &cfg,
        camera: &cam,
        op: &op,
        y: &y,
        refs: None,
        avg: None,
        perceptual: None,
    };
    let wts = LossWeights {
        geodesic: 0.1,
        ..LossWeights::data_only()
    };
    let start = gen.map_latent(&LatentCode((0..16).map(|i| (i as f64 * 0.7).sin()).collect()))?;
    let shape = start.shape();
    let err = grad_check(
        &start.flatten(),
        |t| {
            let p = crate::generator::StyleParams::unflatten(&shape, t)?;
            let e = total_loss(&problem, &p, 100.0, &wts)?;
            Ok((e.components.total, e.grad.flatten()))
        },
        GradCheckOptions::default(),
    )?;
    Ok(check("loss gradient matches finite differences", err < 1e-4, format!("max rel err {err:.2e}")))
}

/// Runs every quick oracle.
pub fn run_checks() -> Result<Vec<PropertyCheck>> {
    Ok(vec![
        telescoping(),
        homogeneous(),
        soft_limits(),
        adjoints()?,
        sphere_mesh()?,
        gradient()?,
    ])
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run_checks().unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
