//! Reference-set curation: multi-view scoring of candidate latents and
//! good/bad partitioning.
//!
//! A latent's consistency cost `w_z` is the largest score difference between
//! any two of its views; its plausibility cost `c_z` is its lowest view score.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::generator::{Generator, LatentCode, RadianceModel};
use crate::math::fmt_f64;
use crate::geometry::{surface_mask, voxelize, GridGeometry, IsoRule};
use crate::harness::io::{contact_sheet, save_png};
use crate::regularizer::{ReferenceEntry, ReferenceSet};
use crate::renderer::{render, Camera, Image, RenderConfig};
use crate::with_model;
use crate::{Error, Result};

/// Scores a rendered view; higher means more plausible.
pub trait ViewScorer {
    fn name(&self) -> &str;
    /// `opacity` is the per-pixel accumulated opacity, row-major.
    fn score(&self, image: &Image, opacity: &[f64]) -> f64;
}

/// Penalizes opaque pixels outside a centered disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterDiskScorer {
    /// Disk radius as a fraction of `min(width, height)`.
    pub radius_frac: f64,
    pub opacity_threshold: f64,
}

pub fn default_view_scorer() -> CenterDiskScorer {
    CenterDiskScorer {
        radius_frac: 0.4,
        opacity_threshold: 0.5,
    }
}

impl ViewScorer for CenterDiskScorer {
    fn name(&self) -> &str {
        "center-disk"
    }

    /// Minus the fraction of all pixels that are opaque and outside the disk.
    fn score(&self, image: &Image, opacity: &[f64]) -> f64 {
        let (w, h) = (image.width, image.height);
        let r = self.radius_frac * w.min(h) as f64;
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let mut outside = 0usize;
        for row in 0..h {
            for col in 0..w {
                let (dx, dy) = (col as f64 + 0.5 - cx, row as f64 + 0.5 - cy);
                if opacity[row * w + col] > self.opacity_threshold && dx * dx + dy * dy > r * r {
                    outside += 1;
                }
            }
        }
        -(outside as f64) / (w * h) as f64
    }
}

/// The 3x3 grid pitch {76.5, 90, 103.5} x yaw {81, 90, 99}, row by row.
pub fn default_camera_grid(width: usize, height: usize) -> Result<Vec<Camera>> {
    let mut cams = Vec::with_capacity(9);
    for pitch in [76.5, 90.0, 103.5] {
        for yaw in [81.0, 90.0, 99.0] {
            cams.push(Camera::at(pitch, yaw, width, height)?);
        }
    }
    Ok(cams)
}

/// Renders `z` from every camera and scores each view.
pub fn view_scores(
    gen: &Generator,
    z: &LatentCode,
    cameras: &[Camera],
    cfg: &RenderConfig,
    scorer: &dyn ViewScorer,
) -> Result<(Vec<f64>, Vec<Image>)> {
    let params = gen.map_latent(z)?;
    with_model!(gen, m => {
        let prep = m.prepare(&params)?;
        let mut scores = Vec::with_capacity(cameras.len());
        let mut images = Vec::with_capacity(cameras.len());
        for cam in cameras {
            let out = render(m, &prep, cam, cfg)?;
            scores.push(scorer.score(&out.image, &out.opacity));
            images.push(out.image);
        }
        Ok((scores, images))
    })
}

/// Largest pairwise difference of view scores.
pub fn consistency_from_scores(scores: &[f64]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::InvalidConfig(format!("consistency needs >= 2 views, got {}", scores.len())));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

/// Lowest view score.
pub fn plausibility_from_scores(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidConfig("plausibility needs >= 1 view".into()));
    }
    Ok(scores.iter().copied().fold(f64::INFINITY, f64::min))
}

pub fn consistency_cost(
    gen: &Generator,
    z: &LatentCode,
    cameras: &[Camera],
    cfg: &RenderConfig,
    scorer: &dyn ViewScorer,
) -> Result<f64> {
    if cameras.len() < 2 {
        return Err(Error::InvalidConfig("consistency needs >= 2 cameras".into()));
    }
    consistency_from_scores(&view_scores(gen, z, cameras, cfg, scorer)?.0)
}

pub fn plausibility_cost(
    gen: &Generator,
    z: &LatentCode,
    cameras: &[Camera],
    cfg: &RenderConfig,
    scorer: &dyn ViewScorer,
) -> Result<f64> {
    plausibility_from_scores(&view_scores(gen, z, cameras, cfg, scorer)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Good needs `w_z <= good_consistency`.
    pub good_consistency: f64,
    /// Good needs `c_z <= good_plausibility` (or `>=` when flipped).
    pub good_plausibility: f64,
    /// Bad is `w_z >= bad_consistency`.
    pub bad_consistency: f64,
    pub flip_plausibility: bool,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            good_consistency: 0.01,
            good_plausibility: 0.0,
            bad_consistency: 0.02,
            flip_plausibility: false,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let t = [self.good_consistency, self.good_plausibility, self.bad_consistency];
        if t.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidConfig("curation thresholds must not be NaN".into()));
        }
        Ok(())
    }

    pub fn classify(&self, w: f64, c: f64) -> Class {
        let plausible = if self.flip_plausibility {
            c >= self.good_plausibility
        } else {
            c <= self.good_plausibility
        };
        if w >= self.bad_consistency {
            Class::Bad
        } else if w <= self.good_consistency && plausible {
            Class::Good
        } else {
            Class::Unclassified
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Good,
    Bad,
    Unclassified,
}

impl Class {
    pub fn as_str(&self) -> &'static str {
        match self {
            Class::Good => "good",
            Class::Bad => "bad",
            Class::Unclassified => "unclassified",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub seed: Option<u64>,
    pub latent: LatentCode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurationEntry {
    pub candidate: Candidate,
    pub scores: Vec<f64>,
    pub consistency: f64,
    pub plausibility: f64,
    pub class: Class,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurationReport {
    pub thresholds: Thresholds,
    pub scorer: String,
    pub entries: Vec<CurationEntry>,
}

impl CurationReport {
    pub fn of_class(&self, class: Class) -> impl Iterator<Item = &CurationEntry> {
        self.entries.iter().filter(move |e| e.class == class)
    }

    pub fn good(&self) -> Vec<&CurationEntry> {
        self.of_class(Class::Good).collect()
    }

    pub fn bad(&self) -> Vec<&CurationEntry> {
        self.of_class(Class::Bad).collect()
    }

    pub fn bad_fraction(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.bad().len() as f64 / self.entries.len() as f64
    }

    /// Columns: seed, w_z, c_z, class. Inline latents have an empty seed.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["seed", "w_z", "c_z", "class"])?;
        for e in &self.entries {
            w.write_record([
                e.candidate.seed.map(|s| s.to_string()).unwrap_or_default(),
                fmt_f64(e.consistency),
                fmt_f64(e.plausibility),
                e.class.as_str().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Scores and classifies every candidate. With `sheet_dir` set, writes one
/// contact sheet of all views per candidate.
pub fn curate(
    gen: &Generator,
    candidates: &[Candidate],
    cameras: &[Camera],
    cfg: &RenderConfig,
    scorer: &dyn ViewScorer,
    thresholds: Thresholds,
    sheet_dir: Option<&Path>,
) -> Result<CurationReport> {
    thresholds.validate()?;
    if cameras.len() < 2 {
        return Err(Error::InvalidConfig("curation needs >= 2 cameras".into()));
    }
    let mut entries = Vec::with_capacity(candidates.len());
    for (i, cand) in candidates.iter().enumerate() {
        let (scores, images) = view_scores(gen, &cand.latent, cameras, cfg, scorer)?;
        let w = consistency_from_scores(&scores)?;
        let c = plausibility_from_scores(&scores)?;
        if let Some(dir) = sheet_dir {
            let name = match cand.seed {
                Some(s) => format!("seed_{s}.png"),
                None => format!("candidate_{i}.png"),
            };
            save_png(&contact_sheet(&images, 3)?, &dir.join(name))?;
        }
        entries.push(CurationEntry {
            candidate: cand.clone(),
            scores,
            consistency: w,
            plausibility: c,
            class: thresholds.classify(w, c),
        });
    }
    Ok(CurationReport {
        thresholds,
        scorer: scorer.name().to_string(),
        entries,
    })
}

/// One reference entry: voxelized density (rounded to `f32`), iso level and
/// surface mask.
pub fn reference_entry(
    gen: &Generator,
    latent: &LatentCode,
    seed: Option<u64>,
    geometry: &GridGeometry,
    iso_rule: IsoRule,
    dilation: usize,
) -> Result<ReferenceEntry> {
    let params = gen.map_latent(latent)?;
    let grid = with_model!(gen, m => {
        let prep = m.prepare(&params)?;
        voxelize(m, &prep, geometry)
    })
    .quantized();
    let iso = iso_rule.resolve(&grid);
    let mask = surface_mask(&grid, iso, dilation);
    Ok(ReferenceEntry {
        latent: latent.clone(),
        seed,
        grid,
        mask,
        iso,
    })
}

/// Voxelizes every good latent of `report`.
pub fn build_reference_set(
    report: &CurationReport,
    gen: &Generator,
    geometry: &GridGeometry,
    iso_rule: IsoRule,
    dilation: usize,
) -> Result<ReferenceSet> {
    let good = report.good();
    if good.is_empty() {
        return Err(Error::EmptyReferenceSet);
    }
    let entries = good
        .iter()
        .map(|e| reference_entry(gen, &e.candidate.latent, e.candidate.seed, geometry, iso_rule, dilation))
        .collect::<Result<Vec<_>>>()?;
    ReferenceSet::new(*geometry, iso_rule, dilation, entries)
}
