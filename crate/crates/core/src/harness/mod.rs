//! Experiment configuration, runners and artifact output.
//!
//! An experiment is described by one TOML file (see [`ExperimentSpec`]).
//! Every run synthesizes in-range targets by rendering sampled latents from
//! the frontal camera, corrupts them with the task's operators, inverts with
//! each method arm and scores the recovered parameters against ground-truth
//! renders from every evaluation view.

pub mod check;
pub mod io;
pub mod metrics;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::curation::{build_reference_set, curate, default_camera_grid, default_view_scorer, reference_entry};
use crate::curation::{Candidate, CurationReport, Thresholds};
use crate::generator::{sample_latent, Generator, RadianceModel, StyleParams};
use crate::geometry::{voxelize, GridGeometry, IsoRule};
use crate::inversion::{invert, InversionConfig, InversionResult, LossWeights};
use crate::math::{derive_seed, fmt_f64, Vec3};
use crate::operators::{ForwardOperator, OperatorSpec};
use crate::regularizer::{AnnealSchedule, ReferenceSet};
use crate::renderer::{render, Camera, Image, RenderConfig, FRONTAL};
use crate::with_model;
use crate::{Error, Result};

use self::io::{load_reference_set, save_png, save_reference_set, write_grid};
use self::metrics::{mse, psnr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Invert,
    InpaintSweep,
    BoxInpaint,
    CsSweep,
    SuperresSweep,
    RefCountAblation,
    AnnealAblation,
    RegularizerCompare,
    Curation,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        toml::Value::String(s.to_string())
            .try_into()
            .map_err(|_| Error::InvalidConfig(format!("unknown task '{s}'")))
    }
}

/// A method under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arm {
    /// Reference prior (plus geodesic term when weighted).
    #[serde(rename = "ours")]
    Ours,
    /// Reference prior at a constant, final inverse temperature.
    #[serde(rename = "ours-noanneal")]
    OursNoAnneal,
    /// Measurement term only.
    #[serde(rename = "baseline")]
    Baseline,
    /// Mean-style anchor.
    #[serde(rename = "pigan")]
    Pigan,
    #[serde(rename = "geodesic")]
    Geodesic,
}

impl Arm {
    pub fn name(&self) -> &'static str {
        match self {
            Arm::Ours => "ours",
            Arm::OursNoAnneal => "ours-noanneal",
            Arm::Baseline => "baseline",
            Arm::Pigan => "pigan",
            Arm::Geodesic => "geodesic",
        }
    }

    /// The inversion config this arm runs with.
    pub fn config(&self, base: &InversionConfig) -> InversionConfig {
        let w = base.weights;
        let only = |f: fn(&mut LossWeights, &LossWeights)| {
            let mut x = LossWeights {
                measurement: w.measurement,
                ..LossWeights::data_only()
            };
            f(&mut x, &w);
            x
        };
        let mut cfg = base.clone();
        cfg.weights = match self {
            Arm::Ours | Arm::OursNoAnneal => LossWeights { pigan: 0.0, ..w },
            Arm::Baseline => only(|_, _| {}),
            Arm::Pigan => only(|x, w| x.pigan = w.pigan),
            Arm::Geodesic => only(|x, w| x.geodesic = w.geodesic),
        };
        if *self == Arm::OursNoAnneal {
            let last = *base.anneal.values.last().expect("validated schedule");
            cfg.anneal = AnnealSchedule::constant(last);
        }
        cfg
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        toml::Value::String(s.to_string())
            .try_into()
            .map_err(|_| Error::InvalidConfig(format!("unknown arm '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    /// Observed-pixel ratios for `inpaint_sweep`.
    pub ratios: Vec<f64>,
    /// Measurement counts for `cs_sweep`.
    pub ms: Vec<usize>,
    /// Downsampling factors for `superres_sweep`.
    pub factors: Vec<usize>,
    /// Reference-set sizes for `ref_count_ablation`.
    pub counts: Vec<usize>,
    /// `[x0, y0, w, h]` for `box_inpaint`; defaults to the central quarter.
    pub box_rect: Option<[usize; 4]>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            ratios: vec![0.1, 0.25, 0.5, 0.75, 1.0],
            ms: vec![256, 576, 1024],
            factors: vec![2, 4],
            counts: vec![4, 8, 16, 32],
            box_rect: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSpec {
    /// Load an existing set instead of curating one.
    pub path: Option<PathBuf>,
    /// Candidate latents are seeds `seed_base .. seed_base + candidates`.
    pub candidates: usize,
    pub seed_base: u64,
    /// Entries kept (the first good candidates).
    pub count: usize,
    pub k: usize,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub iso: IsoRule,
    pub dilation: usize,
    /// Classify candidates before keeping them.
    pub curate: bool,
    /// Side length of the curation renders.
    pub view_size: usize,
    pub thresholds: Thresholds,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        ReferenceSpec {
            path: None,
            candidates: 32,
            seed_base: 1_000_000,
            count: 16,
            k: 32,
            lo: [-1.1; 3],
            hi: [1.1; 3],
            iso: IsoRule::default(),
            dilation: 1,
            curate: true,
            view_size: 32,
            thresholds: Thresholds::default(),
        }
    }
}

impl ReferenceSpec {
    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::new(self.k, Vec3::from_slice(&self.lo), Vec3::from_slice(&self.hi))
    }
}

fn default_views() -> Vec<[f64; 2]> {
    vec![[90.0, 90.0], [77.0, 90.0], [103.0, 90.0], [90.0, 99.0]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub task: Task,
    /// Target latents are `sample_latent(seed, d)` for each seed.
    #[serde(default = "ExperimentSpec::default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "ExperimentSpec::default_size")]
    pub width: usize,
    #[serde(default = "ExperimentSpec::default_size")]
    pub height: usize,
    #[serde(default)]
    pub noise_std: f64,
    /// Evaluation views as `[pitch, yaw]` degrees; must include `[90, 90]`.
    #[serde(default = "default_views")]
    pub views: Vec<[f64; 2]>,
    /// Empty means the task's default arms.
    #[serde(default)]
    pub arms: Vec<Arm>,
    /// Operator for `invert`, `anneal_ablation`, `regularizer_compare` and
    /// `ref_count_ablation`, in CLI syntax.
    #[serde(default = "ExperimentSpec::default_operator")]
    pub operator: String,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub inversion: InversionConfig,
    #[serde(default)]
    pub references: ReferenceSpec,
    /// Also write each recovered density grid.
    #[serde(default)]
    pub save_grids: bool,
}

impl ExperimentSpec {
    fn default_seeds() -> Vec<u64> {
        vec![0]
    }
    fn default_size() -> usize {
        64
    }
    fn default_operator() -> String {
        "identity".into()
    }

    pub fn new(task: Task) -> Self {
        toml::from_str(&format!("task = \"{}\"", task_name(task))).expect("minimal spec parses")
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn default_arms(task: Task) -> Vec<Arm> {
        match task {
            Task::Invert | Task::BoxInpaint | Task::InpaintSweep | Task::CsSweep | Task::SuperresSweep => {
                vec![Arm::Ours, Arm::Baseline]
            }
            Task::RefCountAblation => vec![Arm::Ours],
            Task::AnnealAblation => vec![Arm::OursNoAnneal, Arm::Ours],
            Task::RegularizerCompare => vec![Arm::Pigan, Arm::Geodesic, Arm::Ours],
            Task::Curation => vec![],
        }
    }

    pub fn arms(&self) -> Vec<Arm> {
        if self.arms.is_empty() {
            Self::default_arms(self.task)
        } else {
            self.arms.clone()
        }
    }

    /// Operator settings of the task, with the reference count each uses.
    pub fn settings(&self) -> Result<Vec<Setting>> {
        let single = |op: OperatorSpec| vec![Setting { op, refs: None }];
        let s = &self.sweep;
        Ok(match self.task {
            Task::Invert | Task::AnnealAblation | Task::RegularizerCompare => single(self.operator.parse()?),
            Task::BoxInpaint => {
                let [x0, y0, w, h] = s
                    .box_rect
                    .unwrap_or([self.width / 4, self.height / 4, self.width / 2, self.height / 2]);
                single(OperatorSpec::BoxMask { x0, y0, w, h })
            }
            Task::InpaintSweep => s
                .ratios
                .iter()
                .map(|&ratio| Setting {
                    op: OperatorSpec::PixelMask { ratio },
                    refs: None,
                })
                .collect(),
            Task::CsSweep => s
                .ms
                .iter()
                .map(|&m| Setting {
                    op: OperatorSpec::GaussianCs { m },
                    refs: None,
                })
                .collect(),
            Task::SuperresSweep => s
                .factors
                .iter()
                .map(|&factor| Setting {
                    op: OperatorSpec::Downsample { factor },
                    refs: None,
                })
                .collect(),
            Task::RefCountAblation => {
                let op: OperatorSpec = self.operator.parse()?;
                s.counts
                    .iter()
                    .map(|&c| Setting {
                        op: op.clone(),
                        refs: Some(c),
                    })
                    .collect()
            }
            Task::Curation => Vec::new(),
        })
    }

    /// Checks everything a run needs before any compute.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.seeds.is_empty() && self.task != Task::Curation {
            return bad("at least one seed is required".into());
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if !self.views.iter().any(|v| (v[0], v[1]) == FRONTAL) {
            return bad("views must include the frontal view [90, 90]".into());
        }
        for v in &self.views {
            Camera::at(v[0], v[1], 1, 1)?;
        }
        self.inversion.validate()?;
        Generator::new(&self.inversion.generator)?;
        let r = &self.references;
        r.geometry()?;
        r.thresholds.validate()?;
        if r.path.is_none() && (r.count == 0 || r.candidates < r.count) {
            return bad(format!("need 1 <= references.count <= candidates, got {} of {}", r.count, r.candidates));
        }
        let settings = self.settings()?;
        if self.task != Task::Curation && settings.is_empty() {
            return bad(format!("task {:?} has an empty sweep", self.task));
        }
        for s in &settings {
            ForwardOperator::realize(&s.op, self.width, self.height, 0)?;
            if s.refs == Some(0) {
                return bad("reference counts must be >= 1".into());
            }
        }
        for arm in self.arms() {
            let w = arm.config(&self.inversion).weights;
            if arm == Arm::Pigan && w.pigan == 0.0 {
                return bad("the pigan arm needs inversion.weights.pigan > 0".into());
            }
            if arm == Arm::Geodesic && w.geodesic == 0.0 {
                return bad("the geodesic arm needs inversion.weights.geodesic > 0".into());
            }
            if w.perceptual > 0.0 {
                return bad("no perceptual loss is available to experiments".into());
            }
        }
        if self.task == Task::RefCountAblation && r.path.is_none() {
            if let Some(&c) = self.sweep.counts.iter().max() {
                if c > r.count {
                    return bad(format!("reference count {c} exceeds references.count {}", r.count));
                }
            }
        }
        Ok(())
    }

    fn needs_references(&self) -> bool {
        self.task == Task::Curation || self.arms().iter().any(|a| a.config(&self.inversion).weights.prior > 0.0)
    }
}

fn task_name(task: Task) -> String {
    toml::Value::try_from(task)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Setting {
    pub op: OperatorSpec,
    /// Use only the first `n` references.
    pub refs: Option<usize>,
}

impl Setting {
    pub fn label(&self) -> String {
        match self.refs {
            Some(n) => format!("{}|refs={n}", self.op),
            None => self.op.to_string(),
        }
    }

    fn dir_name(&self) -> String {
        self.label().replace([':', ',', '|', '='], "_")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub seed: u64,
    pub arm: Arm,
    pub op: String,
    pub view_pitch: f64,
    pub view_yaw: f64,
    pub mse: f64,
    pub psnr: f64,
    pub steps: usize,
    pub final_delta: f64,
    pub final_max_weight: Option<f64>,
}

pub const SUMMARY_COLUMNS: [&str; 10] = [
    "seed",
    "arm",
    "op",
    "view_pitch",
    "view_yaw",
    "mse",
    "psnr",
    "steps",
    "final_delta",
    "final_max_weight",
];

fn write_summary(rows: &[&SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.arm.to_string(),
            r.op.clone(),
            r.view_pitch.to_string(),
            r.view_yaw.to_string(),
            fmt_f64(r.mse),
            fmt_f64(r.psnr),
            r.steps.to_string(),
            fmt_f64(r.final_delta),
            r.final_max_weight.map(|v| fmt_f64(v)).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub seed: u64,
    pub arm: Arm,
    pub setting: Setting,
    pub result: InversionResult,
    /// `(pitch, yaw, mse)` per evaluation view.
    pub view_mse: Vec<(f64, f64, f64)>,
}

impl RunRecord {
    pub fn frontal_mse(&self) -> f64 {
        self.view_mse
            .iter()
            .find(|v| (v.0, v.1) == FRONTAL)
            .map(|v| v.2)
            .expect("frontal view is always evaluated")
    }

    /// Mean MSE over the non-frontal views.
    pub fn novel_mse(&self) -> f64 {
        let novel: Vec<f64> = self
            .view_mse
            .iter()
            .filter(|v| (v.0, v.1) != FRONTAL)
            .map(|v| v.2)
            .collect();
        novel.iter().sum::<f64>() / novel.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub seed: u64,
    pub arm: Arm,
    pub op: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub runs: Vec<RunRecord>,
    pub rows: Vec<SummaryRow>,
    pub failures: Vec<Failure>,
    pub checks: Vec<PropertyCheck>,
    pub curation: Option<CurationReport>,
    pub references: Option<ReferenceSet>,
}

impl ExperimentOutcome {
    pub fn success(&self) -> bool {
        self.failures.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn angle_name(pitch: f64, yaw: f64) -> String {
    format!("{pitch}_{yaw}.png")
}

/// Renders `params` from each `(pitch, yaw)`; with `dir` set, writes one PNG
/// per view named `{pitch}_{yaw}.png`.
pub fn render_views(
    gen: &Generator,
    params: &StyleParams,
    views: &[[f64; 2]],
    width: usize,
    height: usize,
    cfg: &RenderConfig,
    dir: Option<&Path>,
) -> Result<Vec<Image>> {
    let images = with_model!(gen, m => {
        let prep = m.prepare(params)?;
        views
            .iter()
            .map(|v| Ok(render(m, &prep, &Camera::at(v[0], v[1], width, height)?, cfg)?.image))
            .collect::<Result<Vec<Image>>>()
    })?;
    if let Some(dir) = dir {
        create_dir(dir)?;
        for (v, img) in views.iter().zip(&images) {
            save_png(img, &dir.join(angle_name(v[0], v[1])))?;
        }
    }
    Ok(images)
}

/// Curates candidates and builds the reference set described by `spec`.
/// Writes `curation.csv`, contact sheets and the set itself under `dir`.
pub fn curate_references(
    gen: &Generator,
    spec: &ReferenceSpec,
    render_cfg: &RenderConfig,
    dir: &Path,
) -> Result<(CurationReport, ReferenceSet)> {
    create_dir(dir)?;
    let d = gen.latent_dim();
    let candidates = (0..spec.candidates as u64)
        .map(|i| {
            let seed = spec.seed_base + i;
            Ok(Candidate {
                seed: Some(seed),
                latent: sample_latent(seed, d)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cams = default_camera_grid(spec.view_size, spec.view_size)?;
    let sheets = dir.join("sheets");
    create_dir(&sheets)?;
    let thresholds = if spec.curate {
        spec.thresholds
    } else {
        Thresholds {
            good_consistency: f64::INFINITY,
            good_plausibility: f64::INFINITY,
            bad_consistency: f64::INFINITY,
            flip_plausibility: false,
        }
    };
    let mut report = curate(gen, &candidates, &cams, render_cfg, &default_view_scorer(), thresholds, Some(&sheets))?;
    if !spec.curate {
        for e in &mut report.entries {
            e.class = crate::curation::Class::Good;
        }
    }
    report.save_csv(&dir.join("curation.csv"))?;
    let geometry = spec.geometry()?;
    let mut set = build_reference_set(&report, gen, &geometry, spec.iso, spec.dilation)?;
    set.entries.truncate(spec.count);
    let set = ReferenceSet::new(set.geometry, set.iso_rule, set.dilation, set.entries)?;
    save_reference_set(&set, &dir.join("set"))?;
    Ok((report, set))
}

struct Target {
    seed: u64,
    truth: Vec<Image>,
    frontal: Image,
}

fn make_target(spec: &ExperimentSpec, gen: &Generator, seed: u64, dir: &Path) -> Result<Target> {
    let z = sample_latent(seed, gen.latent_dim())?;
    let params = gen.map_latent(&z)?;
    let truth = render_views(
        gen,
        &params,
        &spec.views,
        spec.width,
        spec.height,
        &spec.inversion.render,
        Some(&dir.join("targets").join(format!("seed_{seed}"))),
    )?;
    let fi = spec.views.iter().position(|v| (v[0], v[1]) == FRONTAL).expect("validated");
    Ok(Target {
        seed,
        frontal: truth[fi].clone(),
        truth,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    spec: &ExperimentSpec,
    gen: &Generator,
    target: &Target,
    setting: &Setting,
    arm: Arm,
    refs: Option<&ReferenceSet>,
    run_dir: &Path,
) -> Result<(RunRecord, Vec<SummaryRow>)> {
    let seed = target.seed;
    let cfg = arm.config(&spec.inversion);
    let label = setting.label();
    let op = ForwardOperator::realize(&setting.op, spec.width, spec.height, derive_seed(seed, 0x6f70))?;
    let y = op.corrupt(&target.frontal, spec.noise_std, derive_seed(seed, 0x6e73))?;
    let cam = Camera::frontal(spec.width, spec.height)?;
    let refs_owned;
    let refs = match (refs, setting.refs) {
        (Some(r), Some(n)) => {
            refs_owned = r.truncated(n)?;
            Some(&refs_owned)
        }
        (r, _) => r,
    };
    let refs = if cfg.weights.prior > 0.0 { refs } else { None };
    let result = invert(&cfg, &y, &op, &cam, refs, derive_seed(seed, 0x696e))?;
    create_dir(run_dir)?;
    result.trace.save_csv(&run_dir.join("trace.csv"))?;
    let images = render_views(
        gen,
        &result.params,
        &spec.views,
        spec.width,
        spec.height,
        &cfg.render,
        Some(&run_dir.join("views")),
    )?;
    if spec.save_grids {
        let geometry = spec.references.geometry()?;
        let grid = with_model!(gen, m => {
            let prep = m.prepare(&result.params)?;
            voxelize(m, &prep, &geometry)
        });
        write_grid(&grid, &run_dir.join("grid.f32"))?;
    }
    let last = result.trace.rows.last().expect("nonempty trace");
    let mut rows = Vec::new();
    let mut view_mse = Vec::new();
    for ((v, img), truth) in spec.views.iter().zip(&images).zip(&target.truth) {
        let e = mse(img, truth)?;
        view_mse.push((v[0], v[1], e));
        rows.push(SummaryRow {
            seed,
            arm,
            op: label.clone(),
            view_pitch: v[0],
            view_yaw: v[1],
            mse: e,
            psnr: psnr(img, truth)?,
            steps: cfg.steps,
            final_delta: last.delta,
            final_max_weight: last.max_weight,
        });
    }
    Ok((
        RunRecord {
            seed,
            arm,
            setting: setting.clone(),
            result,
            view_mse,
        },
        rows,
    ))
}

/// Runs `spec`, writing every artifact under `out`. Per-run failures are
/// recorded and the sweep continues.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<ExperimentOutcome> {
    spec.validate()?;
    create_dir(out)?;
    let spec_path = out.join("spec.toml");
    fs::write(&spec_path, spec.to_toml_string()?).map_err(|e| Error::io(&spec_path, e))?;
    let gen = Generator::new(&spec.inversion.generator)?;

    let mut curation = None;
    let mut references = None;
    if spec.needs_references() {
        match &spec.references.path {
            Some(p) if spec.task != Task::Curation => references = Some(load_reference_set(p)?),
            _ => {
                let (report, set) =
                    curate_references(&gen, &spec.references, &spec.inversion.render, &out.join("references"))?;
                curation = Some(report);
                references = Some(set);
            }
        }
    }
    let mut outcome = ExperimentOutcome {
        dir: out.to_path_buf(),
        runs: Vec::new(),
        rows: Vec::new(),
        failures: Vec::new(),
        checks: Vec::new(),
        curation,
        references,
    };
    if spec.task == Task::Curation {
        return Ok(outcome);
    }

    let settings = spec.settings()?;
    let arms = spec.arms();
    for &seed in &spec.seeds {
        let target = make_target(spec, &gen, seed, out)?;
        for setting in &settings {
            for &arm in &arms {
                let run_dir = out
                    .join("runs")
                    .join(format!("seed_{seed}"))
                    .join(arm.name())
                    .join(setting.dir_name());
                match run_one(spec, &gen, &target, setting, arm, outcome.references.as_ref(), &run_dir) {
                    Ok((rec, rows)) => {
                        log::info!(
                            "seed {seed} {arm} {}: frontal {:.3e} novel {:.3e}",
                            setting.label(),
                            rec.frontal_mse(),
                            rec.novel_mse()
                        );
                        outcome.runs.push(rec);
                        outcome.rows.extend(rows);
                    }
                    Err(e) => {
                        log::warn!("seed {seed} {arm} {} failed: {e}", setting.label());
                        outcome.failures.push(Failure {
                            seed,
                            arm,
                            op: setting.label(),
                            error: e.to_string(),
                        });
                    }
                }
            }
        }
    }

    write_summary(&outcome.rows.iter().collect::<Vec<_>>(), &out.join("summary.csv"))?;
    for &arm in &arms {
        let rows: Vec<&SummaryRow> = outcome.rows.iter().filter(|r| r.arm == arm).collect();
        write_summary(&rows, &out.join(format!("arm_{}.csv", arm.name())))?;
    }
    if !outcome.failures.is_empty() {
        let path = out.join("failures.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["seed", "arm", "op", "error"])?;
        for f in &outcome.failures {
            w.write_record([f.seed.to_string(), f.arm.to_string(), f.op.clone(), f.error.clone()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if spec.task == Task::AnnealAblation {
        write_anneal_table(spec, &outcome.runs, &out.join("anneal_table.csv"))?;
    }
    outcome.checks = sweep_checks(spec, &outcome);
    if !outcome.checks.is_empty() {
        let path = out.join("checks.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["check", "passed", "detail"])?;
        for c in &outcome.checks {
            w.write_record([c.name.clone(), c.passed.to_string(), c.detail.clone()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(outcome)
}

/// Mean MSE per view for the non-annealed and annealed arms, one row per view.
fn write_anneal_table(spec: &ExperimentSpec, runs: &[RunRecord], path: &Path) -> Result<()> {
    let mean = |arm: Arm, i: usize| {
        let v: Vec<f64> = runs.iter().filter(|r| r.arm == arm).map(|r| r.view_mse[i].2).collect();
        if v.is_empty() {
            String::new()
        } else {
            fmt_f64(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let mut order: Vec<usize> = (0..spec.views.len()).collect();
    order.sort_by(|&a, &b| {
        let (va, vb) = (spec.views[a], spec.views[b]);
        va[1].total_cmp(&vb[1]).then(va[0].total_cmp(&vb[0]))
    });
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["view_pitch", "view_yaw", "no_annealing", "annealing"])?;
    for i in order {
        let v = spec.views[i];
        w.write_record([
            v[0].to_string(),
            v[1].to_string(),
            mean(Arm::OursNoAnneal, i),
            mean(Arm::Ours, i),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Mean frontal MSE per setting label for one arm.
fn frontal_means(runs: &[RunRecord], arm: Arm) -> BTreeMap<String, (f64, usize)> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.arm == arm) {
        let e = acc.entry(r.setting.label()).or_default();
        e.0 += r.frontal_mse();
        e.1 += 1;
    }
    acc
}

fn sweep_checks(spec: &ExperimentSpec, outcome: &ExperimentOutcome) -> Vec<PropertyCheck> {
    let mut checks = Vec::new();
    let settings = spec.settings().unwrap_or_default();
    let labels: Vec<String> = settings.iter().map(Setting::label).collect();
    for arm in spec.arms() {
        let means = frontal_means(&outcome.runs, arm);
        let series: Vec<Option<f64>> = labels
            .iter()
            .map(|l| means.get(l).map(|(s, n)| s / *n as f64))
            .collect();
        match spec.task {
            Task::InpaintSweep => {
                let (lo, hi) = match (spec.sweep.ratios.iter().copied().reduce(f64::min), spec.sweep.ratios.iter().copied().reduce(f64::max)) {
                    (Some(a), Some(b)) => (a, b),
                    _ => continue,
                };
                let lo_label = OperatorSpec::PixelMask { ratio: lo }.to_string();
                let hi_label = OperatorSpec::PixelMask { ratio: hi }.to_string();
                let mut passed = true;
                let mut detail = Vec::new();
                for &seed in &spec.seeds {
                    let get = |l: &str| {
                        outcome
                            .runs
                            .iter()
                            .find(|r| r.seed == seed && r.arm == arm && r.setting.label() == l)
                            .map(RunRecord::frontal_mse)
                    };
                    match (get(&hi_label), get(&lo_label)) {
                        (Some(h), Some(l)) => {
                            passed &= h <= l;
                            detail.push(format!("{seed}:{h:.3e}<={l:.3e}"));
                        }
                        _ => {
                            passed = false;
                            detail.push(format!("{seed}:missing"));
                        }
                    }
                }
                checks.push(PropertyCheck {
                    name: format!("inpaint frontal mse at ratio {hi} <= ratio {lo} per seed ({arm})"),
                    passed,
                    detail: detail.join(" "),
                });
            }
            Task::CsSweep | Task::SuperresSweep => {
                // settings ordered by increasing information content
                let mut idx: Vec<usize> = (0..settings.len()).collect();
                match spec.task {
                    Task::CsSweep => idx.sort_by_key(|&i| spec.sweep.ms[i]),
                    _ => idx.sort_by_key(|&i| std::cmp::Reverse(spec.sweep.factors[i])),
                }
                let ordered: Vec<Option<f64>> = idx.iter().map(|&i| series[i]).collect();
                let passed = ordered.iter().all(Option::is_some)
                    && ordered.windows(2).all(|w| w[1].unwrap() <= w[0].unwrap());
                let detail = idx
                    .iter()
                    .map(|&i| format!("{}={}", labels[i], series[i].map_or("missing".into(), |v| format!("{v:.3e}"))))
                    .collect::<Vec<_>>()
                    .join(" ");
                checks.push(PropertyCheck {
                    name: format!("{} mean frontal mse nonincreasing with information ({arm})", task_name(spec.task)),
                    passed,
                    detail,
                });
            }
            _ => {}
        }
    }
    checks
}

/// Builds a reference set straight from latent seeds without curation.
pub fn references_from_seeds(
    gen: &Generator,
    seeds: &[u64],
    geometry: &GridGeometry,
    iso: IsoRule,
    dilation: usize,
) -> Result<ReferenceSet> {
    let d = gen.latent_dim();
    let entries = seeds
        .iter()
        .map(|&s| reference_entry(gen, &sample_latent(s, d)?, Some(s), geometry, iso, dilation))
        .collect::<Result<Vec<_>>>()?;
    ReferenceSet::new(*geometry, iso, dilation, entries)
}
