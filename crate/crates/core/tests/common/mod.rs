#![allow(dead_code)]

use nerfprior::generator::{sample_latent, Generator, GeneratorSpec, RadianceModel, StyleParams};
use nerfprior::geometry::{GridGeometry, IsoRule};
use nerfprior::harness::references_from_seeds;
use nerfprior::inversion::{grad_check, total_loss, GradCheckOptions, LossWeights, PerceptualLoss, Problem};
use nerfprior::operators::{ForwardOperator, OperatorSpec};
use nerfprior::regularizer::soft_prior;
use nerfprior::renderer::{render_style, Camera, RenderConfig};
use nerfprior::{with_model, Result};

/// Squared difference of the per-channel means of prediction and target.
pub struct MeanColorLoss;

impl PerceptualLoss for MeanColorLoss {
    fn name(&self) -> &str {
        "mean-color"
    }

    fn eval(&self, pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = pred.len() as f64;
        let d = (pred.iter().sum::<f64>() - target.iter().sum::<f64>()) / n;
        Ok((d * d, vec![2.0 * d / n; pred.len()]))
    }
}

pub fn small_blob() -> GeneratorSpec {
    GeneratorSpec::blob(3)
}

pub fn small_siren(seed: u64) -> GeneratorSpec {
    GeneratorSpec::siren(3, 16, 16, seed)
}

/// Named weight configurations covering every loss term alone and together.
pub fn weight_configs() -> Vec<(&'static str, LossWeights)> {
    let zero = LossWeights {
        measurement: 0.0,
        ..LossWeights::data_only()
    };
    vec![
        ("data", LossWeights::data_only()),
        ("prior", LossWeights { prior: 1.0, ..zero }),
        ("geodesic", LossWeights { geodesic: 1.0, ..zero }),
        ("mean-style", LossWeights { pigan: 1.0, ..zero }),
        ("perceptual", LossWeights { perceptual: 1.0, ..zero }),
        (
            "all",
            LossWeights {
                measurement: 1.0,
                prior: 0.01,
                geodesic: 0.1,
                pigan: 0.05,
                perceptual: 0.5,
            },
        ),
    ]
}

/// Worst relative gradient error of `total_loss` over `coords` random
/// coordinates for one (generator, operator, weights, seed) case. Prior
/// cases are checked at two temperatures: one with blended weights and one
/// at the start of the default schedule.
pub fn gradient_case_with(
    probe: &mut dyn FnMut(&dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)>, &[f64]),

    spec: &GeneratorSpec,
    op_spec: &OperatorSpec,
    wts: &LossWeights,
    seed: u64,
    coords: usize,
) -> Result<f64> {
    let gen = Generator::new(spec)?;
    let d = gen.latent_dim();
    let (w, h) = (8, 8);
    let cam = Camera::at(85.0, 95.0, w, h)?;
    let cfg = RenderConfig {
        samples: 16,
        ..RenderConfig::default()
    };
    let target = with_model!(&gen, m => render_style(m, &gen.map_latent(&sample_latent(seed + 100, d)?)?, &cam, &cfg))?;
    let op = ForwardOperator::realize(op_spec, w, h, seed)?;
    let y = op.apply(&target.image)?;
    let geometry = GridGeometry::cube(8)?;
    let refs = references_from_seeds(&gen, &[seed + 1, seed + 2, seed + 3], &geometry, IsoRule::Percentile(0.9), 1)?;
    let avg = gen.average_style(64, seed)?;
    // mapped styles repeat across layers, where the geodesic term has a kink;
    // probe a generic nearby point instead
    let mapped = gen.map_latent(&sample_latent(seed + 200, d)?)?;
    let jitter = sample_latent(seed + 300, mapped.len())?;
    let flat: Vec<f64> = mapped.flatten().iter().zip(&jitter.0).map(|(v, j)| v + 0.1 * j).collect();
    let params = StyleParams::unflatten(&mapped.shape(), &flat)?;
    let problem = Problem {
        generator: &gen,
        render: &cfg,
        camera: &cam,
        op: &op,
        y: &y,
        refs: Some(&refs),
        avg: Some(&avg),
        perceptual: Some(&MeanColorLoss),
    };
    let deltas = if wts.prior > 0.0 {
        let grid = with_model!(&gen, m => {
            let prep = m.prepare(&params)?;
            nerfprior::geometry::voxelize(m, &prep, &geometry)
        });
        let l = soft_prior(&grid, &refs, 0.0)?.1.distances;
        let spread = l.iter().copied().fold(f64::NEG_INFINITY, f64::max) - l.iter().copied().fold(f64::INFINITY, f64::min);
        vec![1.0 / spread.max(1e-12), 100.0]
    } else {
        vec![100.0]
    };
    let shape = params.shape();
    let mut worst = 0.0f64;
    for delta in deltas {
        let loss = |t: &[f64]| -> Result<(f64, Vec<f64>)> {
            let p = StyleParams::unflatten(&shape, t)?;
            let e = total_loss(&problem, &p, delta, wts)?;
            Ok((e.components.total, e.grad.flatten()))
        };
        let opts = GradCheckOptions {
            coords,
            seed,
            ..GradCheckOptions::default()
        };
        probe(&loss, &params.flatten());
        worst = worst.max(grad_check(&params.flatten(), loss, opts)?);
    }
    Ok(worst)
}

pub fn gradient_case(
    spec: &GeneratorSpec,
    op_spec: &OperatorSpec,
    wts: &LossWeights,
    seed: u64,
    coords: usize,
) -> Result<f64> {
    gradient_case_with(&mut |_, _| {}, spec, op_spec, wts, seed, coords)
}
