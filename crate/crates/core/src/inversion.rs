//! Loss assembly and the Adam-based inversion loop over style parameters.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::generator::{Generator, GeneratorSpec, RadianceModel, StyleParams};
use crate::geometry::{voxelize, voxelize_backward};
use crate::math::{derive_seed, fmt_f64, rng};
use crate::operators::{ForwardOperator, Measurements};
use crate::regularizer::{geodesic_reg, pigan_reg, soft_prior_with_grad, AnnealSchedule, PriorDiagnostics, ReferenceSet};
use crate::renderer::{render, render_backward, Camera, Image, RenderConfig};
use crate::with_model;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub measurement: f64,
    pub prior: f64,
    pub geodesic: f64,
    pub pigan: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            measurement: 1.0,
            prior: 0.1,
            geodesic: 0.1,
            pigan: 0.0,
            perceptual: 0.0,
        }
    }
}

impl LossWeights {
    /// Measurement term only.
    pub fn data_only() -> Self {
        LossWeights {
            measurement: 1.0,
            prior: 0.0,
            geodesic: 0.0,
            pigan: 0.0,
            perceptual: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.measurement, self.prior, self.geodesic, self.pigan, self.perceptual];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Pluggable image-similarity term over measurement vectors.
pub trait PerceptualLoss {
    fn name(&self) -> &str;
    /// Value and gradient with respect to `pred`.
    fn eval(&self, pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// Mean style of `n` latents drawn from the init seed.
    Average { n: usize },
    /// Mean style plus i.i.d. Gaussian noise of `std` on every coordinate.
    Perturbed { n: usize, std: f64 },
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec::Average { n: 10_000 }
    }
}

impl InitSpec {
    fn n(&self) -> usize {
        match *self {
            InitSpec::Average { n } | InitSpec::Perturbed { n, .. } => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    pub lr_half_life: usize,
    pub weight_decay: f64,
    pub anneal: AnnealSchedule,
    pub weights: LossWeights,
    /// Steps between re-voxelizations of the iterate.
    pub cadence: usize,
    pub generator: GeneratorSpec,
    pub render: RenderConfig,
    /// Fraction of the final steps eligible for the flat-loss rule.
    pub flat_window: f64,
    /// Relative tolerance of the flat-loss rule.
    pub flat_tolerance: f64,
    pub init: InitSpec,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            steps: 800,
            lr: 0.01,
            lr_half_life: 200,
            weight_decay: 0.0,
            anneal: AnnealSchedule::standard(),
            weights: LossWeights::default(),
            cadence: 5,
            generator: GeneratorSpec::default(),
            render: RenderConfig::default(),
            flat_window: 0.25,
            flat_tolerance: 0.02,
            init: InitSpec::default(),
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.cadence == 0 {
            return Err(Error::InvalidConfig("voxelization cadence must be >= 1".into()));
        }
        if self.lr_half_life == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("need lr > 0 and half-life >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight decay must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.flat_window) || !(self.flat_tolerance >= 0.0) {
            return Err(Error::InvalidConfig("flat window must be in [0,1], tolerance >= 0".into()));
        }
        match self.init {
            InitSpec::Average { n } | InitSpec::Perturbed { n, .. } if n == 0 => {
                return Err(Error::InvalidConfig("init needs n >= 1".into()))
            }
            InitSpec::Perturbed { std, .. } if !(std >= 0.0 && std.is_finite()) => {
                return Err(Error::InvalidConfig("init std must be >= 0".into()))
            }
            _ => {}
        }
        self.weights.validate()?;
        self.anneal.validate()?;
        self.render.validate()
    }

    /// `lr * 2^-floor(step / half_life)`.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * 0.5f64.powi((step / self.lr_half_life) as i32)
    }
}

/// Everything the loss needs besides the parameters.
pub struct Problem<'a> {
    pub generator: &'a Generator,
    pub render: &'a RenderConfig,
    pub camera: &'a Camera,
    pub op: &'a ForwardOperator,
    pub y: &'a Measurements,
    pub refs: Option<&'a ReferenceSet>,
    /// Anchor of the mean-style regularizer.
    pub avg: Option<&'a StyleParams>,
    pub perceptual: Option<&'a dyn PerceptualLoss>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    /// Weighted sum of the terms below.
    pub total: f64,
    /// Unweighted mean squared measurement error.
    pub measurement: f64,
    pub prior: f64,
    pub geodesic: f64,
    pub pigan: f64,
    pub perceptual: f64,
}

#[derive(Debug, Clone)]
pub struct LossEval {
    pub components: LossComponents,
    pub diagnostics: Option<PriorDiagnostics>,
    pub grad: StyleParams,
}

/// Prior value, diagnostics and weighted-by-one gradient at a voxelization.
#[derive(Debug, Clone)]
struct PriorTerm {
    value: f64,
    diag: PriorDiagnostics,
    grad: StyleParams,
}

impl<'a> Problem<'a> {
    fn check(&self, wts: &LossWeights) -> Result<()> {
        wts.validate()?;
        if wts.prior > 0.0 && self.refs.is_none() {
            return Err(Error::InvalidConfig("prior weight > 0 needs a reference set".into()));
        }
        if wts.pigan > 0.0 && self.avg.is_none() {
            return Err(Error::InvalidConfig("mean-style weight > 0 needs an average style".into()));
        }
        if wts.perceptual > 0.0 && self.perceptual.is_none() {
            return Err(Error::InvalidConfig("perceptual weight > 0 but no perceptual loss supplied".into()));
        }
        if self.y.shape != self.op.output_shape() {
            return Err(Error::ShapeMismatch("measurements do not match the operator".into()));
        }
        Ok(())
    }

    /// Renders the iterate from the problem camera.
    pub fn render(&self, params: &StyleParams) -> Result<Image> {
        with_model!(self.generator, m => {
            let prep = m.prepare(params)?;
            Ok(render(m, &prep, self.camera, self.render)?.image)
        })
    }

    /// Data terms: `(mse, perceptual, d(w_meas*mse + w_perc*perc)/dparams)`.
    fn data_terms(&self, params: &StyleParams, wts: &LossWeights) -> Result<(f64, f64, StyleParams)> {
        with_model!(self.generator, m => {
            let prep = m.prepare(params)?;
            let img = render(m, &prep, self.camera, self.render)?.image;
            let pred = self.op.apply_vec(&img.data)?;
            let n = pred.len() as f64;
            let resid: Vec<f64> = pred.iter().zip(&self.y.values).map(|(a, b)| a - b).collect();
            let mse = resid.iter().map(|r| r * r).sum::<f64>() / n;
            let mut d_pred: Vec<f64> = resid.iter().map(|r| wts.measurement * 2.0 * r / n).collect();
            let mut perc = 0.0;
            if let Some(p) = self.perceptual {
                if wts.perceptual > 0.0 {
                    let (v, g) = p.eval(&pred, &self.y.values)?;
                    perc = v;
                    for (d, gi) in d_pred.iter_mut().zip(g) {
                        *d += wts.perceptual * gi;
                    }
                }
            }
            let d_img = self.op.adjoint_vec(&d_pred)?;
            let mut acc = m.zero_grad(&prep);
            render_backward(m, &prep, self.camera, self.render, &d_img, &mut acc)?;
            Ok((mse, perc, m.finish_grad(&prep, acc)))
        })
    }

    fn prior_term(&self, params: &StyleParams, delta: f64) -> Result<PriorTerm> {
        let refs = self.refs.ok_or(Error::EmptyReferenceSet)?;
        with_model!(self.generator, m => {
            let prep = m.prepare(params)?;
            let grid = voxelize(m, &prep, &refs.geometry);
            let (value, diag, d_grid) = soft_prior_with_grad(&grid, refs, delta)?;
            let mut acc = m.zero_grad(&prep);
            voxelize_backward(m, &prep, &refs.geometry, &d_grid, &mut acc)?;
            Ok(PriorTerm { value, diag, grad: m.finish_grad(&prep, acc) })
        })
    }

    /// Style-space regularizers, gradient already weighted.
    fn style_terms(&self, params: &StyleParams, wts: &LossWeights) -> Result<(f64, f64, StyleParams)> {
        let mut grad = params.zeros_like();
        let mut geo = 0.0;
        let mut pig = 0.0;
        if wts.geodesic > 0.0 {
            let (v, g) = geodesic_reg(params)?;
            geo = v;
            grad.axpy(wts.geodesic, &g);
        }
        if wts.pigan > 0.0 {
            let (v, g) = pigan_reg(params, self.avg.expect("checked"))?;
            pig = v;
            grad.axpy(wts.pigan, &g);
        }
        Ok((geo, pig, grad))
    }
}

fn assemble(
    wts: &LossWeights,
    data: (f64, f64, StyleParams),
    prior: Option<&PriorTerm>,
    style: (f64, f64, StyleParams),
) -> LossEval {
    let (mse, perc, mut grad) = data;
    let (geo, pig, g_style) = style;
    grad.axpy(1.0, &g_style);
    let prior_value = prior.map_or(0.0, |p| p.value);
    if let Some(p) = prior {
        grad.axpy(wts.prior, &p.grad);
    }
    let total = wts.measurement * mse
        + wts.prior * prior_value
        + wts.geodesic * geo
        + wts.pigan * pig
        + wts.perceptual * perc;
    LossEval {
        components: LossComponents {
            total,
            measurement: mse,
            prior: prior_value,
            geodesic: geo,
            pigan: pig,
            perceptual: perc,
        },
        diagnostics: prior.map(|p| p.diag.clone()),
        grad,
    }
}

/// Full objective and its gradient at `params`, voxelizing afresh.
pub fn total_loss(problem: &Problem<'_>, params: &StyleParams, delta: f64, wts: &LossWeights) -> Result<LossEval> {
    problem.check(wts)?;
    params.ensure_shape(&problem.generator.style_shape())?;
    let data = problem.data_terms(params, wts)?;
    let prior = if wts.prior > 0.0 {
        Some(problem.prior_term(params, delta)?)
    } else {
        None
    };
    let style = problem.style_terms(params, wts)?;
    Ok(assemble(wts, data, prior.as_ref(), style))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub delta: f64,
    pub total: f64,
    pub measurement: f64,
    pub prior: f64,
    pub geodesic: f64,
    pub max_weight: Option<f64>,
    pub entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "step",
            "lr",
            "delta",
            "loss_total",
            "loss_meas",
            "loss_prior",
            "loss_geo",
            "max_weight",
            "entropy",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| fmt_f64(x)).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                fmt_f64(r.lr),
                fmt_f64(r.delta),
                fmt_f64(r.total),
                fmt_f64(r.measurement),
                fmt_f64(r.prior),
                fmt_f64(r.geodesic),
                opt(r.max_weight),
                opt(r.entropy),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<trace>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    /// Parameters at the selected step.
    pub params: StyleParams,
    pub loss: f64,
    pub selected_step: usize,
    /// Parameters after the last step.
    pub final_params: StyleParams,
    pub trace: Trace,
}

/// Picks the step to return.
///
/// Steps in the final `window` fraction whose total loss lies within
/// `tolerance` (relative) of the global minimum qualify, as does the minimum
/// itself; among them the largest `delta` wins, later steps breaking ties.
/// Without any qualifying window step the global minimum is returned.
pub fn select_result(trace: &Trace, window: f64, tolerance: f64) -> Option<usize> {
    let rows = &trace.rows;
    if rows.is_empty() {
        return None;
    }
    let best = (0..rows.len())
        .filter(|&i| !rows[i].total.is_nan())
        .min_by(|&a, &b| rows[a].total.total_cmp(&rows[b].total))
        .unwrap_or(rows.len() - 1);
    let min = rows[best].total;
    let n_window = ((window * rows.len() as f64).ceil() as usize).min(rows.len());
    let start = rows.len() - n_window;
    let within = |i: usize| (rows[i].total - min).abs() <= tolerance * min.abs();
    let qualifying: Vec<usize> = (start..rows.len()).filter(|&i| within(i)).collect();
    if qualifying.is_empty() {
        return Some(best);
    }
    qualifying
        .into_iter()
        .chain(std::iter::once(best))
        .max_by(|&a, &b| rows[a].delta.total_cmp(&rows[b].delta).then(a.cmp(&b)))
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * theta[i]);
        }
    }
}

/// Initial parameters and the average style they derive from.
pub fn initial_params(gen: &Generator, init: &InitSpec, seed: u64) -> Result<(StyleParams, StyleParams)> {
    let avg = gen.average_style(init.n(), seed)?;
    let params = match *init {
        InitSpec::Average { .. } => avg.clone(),
        InitSpec::Perturbed { std, .. } => {
            let mut flat = avg.flatten();
            if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("validated std");
                let mut r = rng(derive_seed(seed, 0x69_6e));
                for v in &mut flat {
                    *v += normal.sample(&mut r);
                }
            }
            StyleParams::unflatten(&avg.shape(), &flat)?
        }
    };
    Ok((params, avg))
}

/// Builds the generator and initialization from `cfg`, then optimizes.
pub fn invert(
    cfg: &InversionConfig,
    y: &Measurements,
    op: &ForwardOperator,
    cam: &Camera,
    refs: Option<&ReferenceSet>,
    init_seed: u64,
) -> Result<InversionResult> {
    cfg.validate()?;
    let gen = Generator::new(&cfg.generator)?;
    let (init, avg) = initial_params(&gen, &cfg.init, init_seed)?;
    let problem = Problem {
        generator: &gen,
        render: &cfg.render,
        camera: cam,
        op,
        y,
        refs,
        avg: Some(&avg),
        perceptual: None,
    };
    invert_from(&problem, cfg, init)
}

/// Optimizes from explicit initial parameters.
///
/// Between voxelizations the last prior value and gradient are reused.
pub fn invert_from(problem: &Problem<'_>, cfg: &InversionConfig, init: StyleParams) -> Result<InversionResult> {
    cfg.validate()?;
    let wts = &cfg.weights;
    problem.check(wts)?;
    let shape = problem.generator.style_shape();
    init.ensure_shape(&shape)?;
    let mut theta = init.flatten();
    let mut adam = Adam::new(theta.len(), cfg.weight_decay);
    let mut trace = Trace::default();
    let mut snapshots: Vec<Vec<f64>> = Vec::with_capacity(cfg.steps + 1);
    let mut cached: Option<(f64, PriorTerm)> = None;

    for step in 0..=cfg.steps {
        let params = StyleParams::unflatten(&shape, &theta)?;
        let delta = cfg.anneal.delta(step);
        let lr = cfg.lr_at(step);
        let data = problem.data_terms(&params, wts)?;
        if wts.prior > 0.0 {
            let stale = match &cached {
                None => true,
                Some((d, _)) => *d != delta || step % cfg.cadence == 0,
            };
            if stale {
                cached = Some((delta, problem.prior_term(&params, delta)?));
            }
        }
        let style = problem.style_terms(&params, wts)?;
        let eval = assemble(wts, data, cached.as_ref().map(|(_, p)| p), style);
        let c = eval.components;
        trace.rows.push(TraceRow {
            step,
            lr,
            delta,
            total: c.total,
            measurement: c.measurement,
            prior: c.prior,
            geodesic: c.geodesic,
            max_weight: eval.diagnostics.as_ref().map(|d| d.max_weight),
            entropy: eval.diagnostics.as_ref().map(|d| d.entropy),
        });
        snapshots.push(theta.clone());
        let grad = eval.grad.flatten();
        if !c.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                trace: Box::new(trace),
            });
        }
        if step == cfg.steps {
            break;
        }
        adam.step(&mut theta, &grad, lr);
    }

    let selected = select_result(&trace, cfg.flat_window, cfg.flat_tolerance).expect("nonempty trace");
    Ok(InversionResult {
        params: StyleParams::unflatten(&shape, &snapshots[selected])?,
        loss: trace.rows[selected].total,
        selected_step: selected,
        final_params: StyleParams::unflatten(&shape, &theta)?,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub coords: usize,
    pub seed: u64,
    /// Denominators are at least `floor_rel * max |analytic gradient|`.
    pub floor_rel: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            coords: 50,
            seed: 0,
            floor_rel: 1e-6,
        }
    }
}

/// Max relative error between the analytic gradient and fourth-order central
/// differences with step `1e-4 (1 + |theta_i|)` over randomly chosen
/// coordinates.
pub fn grad_check<F>(theta: &[f64], mut loss: F, opts: GradCheckOptions) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (f0, grad) = loss(theta)?;
    if !f0.is_finite() {
        return Err(Error::InvalidConfig("gradient check at a non-finite loss".into()));
    }
    if grad.len() != theta.len() {
        return Err(Error::ShapeMismatch("gradient length differs from parameters".into()));
    }
    let n = theta.len();
    let idx: Vec<usize> = if opts.coords >= n {
        (0..n).collect()
    } else {
        let mut v = sample(&mut rng(opts.seed), n, opts.coords).into_vec();
        v.sort_unstable();
        v
    };
    let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let floor = (opts.floor_rel * gmax).max(f64::MIN_POSITIVE);
    let mut worst = 0.0f64;
    let mut x = theta.to_vec();
    for i in idx {
        let h = 1e-4 * (1.0 + theta[i].abs());
        let mut at = |d: f64| {
            x[i] = theta[i] + d;
            let v = loss(&x).map(|r| r.0);
            x[i] = theta[i];
            v
        };
        let (f1, f2) = (at(h)? - at(-h)?, at(2.0 * h)? - at(-2.0 * h)?);
        let fd = (8.0 * f1 - f2) / (12.0 * h);
        let a = grad[i];
        let err = (a - fd).abs();
        if err > 0.0 {
            worst = worst.max(err / a.abs().max(fd.abs()).max(floor));
        }
    }
    Ok(worst)
}
