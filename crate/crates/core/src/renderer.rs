//! Orbit cameras and differentiable emission-absorption volume rendering.
//!
//! Each ray is split into `samples` equal bins over `[near, far]`. With
//! `T_i = exp(-sum_{j<i} sigma_j delta)` and `alpha_i = 1 - exp(-sigma_i delta)`
//! a pixel is `sum_i T_i alpha_i c_i + T_{N+1} * background`, so the
//! compositing weights plus the final transmittance telescope to one.

use serde::{Deserialize, Serialize};

use crate::generator::{RadianceModel, RadianceSample, StyleParams};
use crate::math::{derive_seed, rng, Vec3};
use crate::{Error, Result};

use rand::Rng;

pub const FRONTAL: (f64, f64) = (90.0, 90.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub pitch: f64,
    pub yaw: f64,
    pub radius: f64,
    pub fov: f64,
    pub width: usize,
    pub height: usize,
    pub eye: Vec3,
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
}

/// Camera on a sphere of `radius` looking at the origin, world up `+y`.
///
/// Angles are degrees: `eye = r (sin p cos y, cos p, sin p sin y)`, so
/// `(90, 90)` sits on the `+z` axis looking down `-z`.
pub fn camera_from_angles(
    pitch: f64,
    yaw: f64,
    radius: f64,
    fov: f64,
    width: usize,
    height: usize,
) -> Result<Camera> {
    if !(pitch > 0.0 && pitch < 180.0) {
        return Err(Error::InvalidCamera(format!("pitch {pitch} outside (0, 180)")));
    }
    if !(yaw > 0.0 && yaw <= 360.0) {
        return Err(Error::InvalidCamera(format!("yaw {yaw} outside (0, 360]")));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidCamera(format!("radius {radius} must be positive")));
    }
    if !(fov > 0.0 && fov < 180.0) {
        return Err(Error::InvalidCamera(format!("fov {fov} outside (0, 180)")));
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidCamera("image size must be at least 1x1".into()));
    }
    let (p, y) = (pitch.to_radians(), yaw.to_radians());
    let eye = Vec3::new(p.sin() * y.cos(), p.cos(), p.sin() * y.sin()) * radius;
    let forward = (-eye).normalized();
    let right = forward.cross(Vec3::new(0.0, 1.0, 0.0)).normalized();
    let up = right.cross(forward);
    Ok(Camera {
        pitch,
        yaw,
        radius,
        fov,
        width,
        height,
        eye,
        forward,
        right,
        up,
    })
}

impl Camera {
    /// Frontal camera with the default orbit radius and field of view.
    pub fn frontal(width: usize, height: usize) -> Result<Camera> {
        Self::at(FRONTAL.0, FRONTAL.1, width, height)
    }

    pub fn at(pitch: f64, yaw: f64, width: usize, height: usize) -> Result<Camera> {
        camera_from_angles(pitch, yaw, DEFAULT_RADIUS, DEFAULT_FOV, width, height)
    }

    /// Unit direction through continuous image coordinates (`(0,0)` is the
    /// top-left corner, `(width, height)` the bottom-right).
    pub fn direction(&self, px: f64, py: f64) -> Vec3 {
        let half = (self.fov.to_radians() * 0.5).tan();
        let aspect = self.width as f64 / self.height as f64;
        let sx = (2.0 * px / self.width as f64 - 1.0) * half * aspect;
        let sy = (1.0 - 2.0 * py / self.height as f64) * half;
        (self.forward + self.right * sx + self.up * sy).normalized()
    }

    pub fn pixel_direction(&self, col: usize, row: usize) -> Vec3 {
        self.direction(col as f64 + 0.5, row as f64 + 0.5)
    }
}

pub const DEFAULT_RADIUS: f64 = 2.0;
pub const DEFAULT_FOV: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    #[serde(default = "RenderConfig::default_samples")]
    pub samples: usize,
    #[serde(default = "RenderConfig::default_near")]
    pub near: f64,
    #[serde(default = "RenderConfig::default_far")]
    pub far: f64,
    #[serde(default)]
    pub background: [f64; 3],
    #[serde(default)]
    pub jitter: bool,
    #[serde(default)]
    pub jitter_seed: u64,
}

impl RenderConfig {
    fn default_samples() -> usize {
        48
    }
    fn default_near() -> f64 {
        0.5
    }
    fn default_far() -> f64 {
        3.5
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::InvalidRenderConfig(format!(
                "need at least 2 samples per ray, got {}",
                self.samples
            )));
        }
        // near = 0 is allowed so rays may start at the eye.
        if !(self.near >= 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::InvalidRenderConfig(format!(
                "need 0 <= near < far, got near {} far {}",
                self.near, self.far
            )));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidRenderConfig("background outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        (self.far - self.near) / self.samples as f64
    }
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples: Self::default_samples(),
            near: Self::default_near(),
            far: Self::default_far(),
            background: [0.0; 3],
            jitter: false,
            jitter_seed: 0,
        }
    }
}

/// Row-major interleaved RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn pixel(&self, col: usize, row: usize) -> [f64; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Image,
    /// Accumulated opacity `1 - T_{N+1}` per pixel, row-major.
    pub opacity: Vec<f64>,
}

/// Composites samples front to back. Writes per-sample weights `T_i alpha_i`
/// into `weights` and returns `(color, final transmittance)`.
pub fn composite(
    samples: &[RadianceSample],
    delta: f64,
    background: [f64; 3],
    weights: &mut [f64],
) -> ([f64; 3], f64) {
    let mut t = 1.0;
    let mut color = [0.0; 3];
    for (s, w) in samples.iter().zip(weights.iter_mut()) {
        let keep = (-s.density * delta).exp();
        *w = t * (1.0 - keep);
        for k in 0..3 {
            color[k] += *w * s.color[k];
        }
        t *= keep;
    }
    for k in 0..3 {
        color[k] += t * background[k];
    }
    (color, t)
}

/// Sample distances along pixel ray `pixel` (row-major index).
fn sample_offsets(cfg: &RenderConfig, pixel: usize, out: &mut [f64]) {
    let delta = cfg.bin_width();
    if cfg.jitter {
        let mut r = rng(derive_seed(cfg.jitter_seed, pixel as u64));
        for (i, t) in out.iter_mut().enumerate() {
            *t = cfg.near + (i as f64 + r.gen::<f64>()) * delta;
        }
    } else {
        for (i, t) in out.iter_mut().enumerate() {
            *t = cfg.near + (i as f64 + 0.5) * delta;
        }
    }
}

pub fn render<M: RadianceModel>(
    model: &M,
    prep: &M::Prepared,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    cfg.validate()?;
    let n = cfg.samples;
    let delta = cfg.bin_width();
    let mut image = Image::new(cam.width, cam.height);
    let mut opacity = vec![0.0; cam.width * cam.height];
    let mut ts = vec![0.0; n];
    let mut samples = vec![
        RadianceSample {
            color: [0.0; 3],
            density: 0.0
        };
        n
    ];
    let mut weights = vec![0.0; n];
    for row in 0..cam.height {
        for col in 0..cam.width {
            let pixel = row * cam.width + col;
            let dir = cam.pixel_direction(col, row);
            sample_offsets(cfg, pixel, &mut ts);
            for (s, &t) in samples.iter_mut().zip(&ts) {
                *s = model.eval(prep, cam.eye + dir * t);
            }
            let (c, t_end) = composite(&samples, delta, cfg.background, &mut weights);
            for k in 0..3 {
                image.data[3 * pixel + k] = c[k].clamp(0.0, 1.0);
            }
            opacity[pixel] = 1.0 - t_end;
        }
    }
    Ok(RenderOutput { image, opacity })
}

/// Accumulates `d_image^T * d(image)/d(params)` into `grad`.
pub fn render_backward<M: RadianceModel>(
    model: &M,
    prep: &M::Prepared,
    cam: &Camera,
    cfg: &RenderConfig,
    d_image: &[f64],
    grad: &mut M::Grad,
) -> Result<()> {
    cfg.validate()?;
    if d_image.len() != 3 * cam.width * cam.height {
        return Err(Error::ShapeMismatch(format!(
            "image cotangent has {} entries, camera needs {}",
            d_image.len(),
            3 * cam.width * cam.height
        )));
    }
    let n = cfg.samples;
    let delta = cfg.bin_width();
    let mut ts = vec![0.0; n];
    let mut tapes = vec![model.new_tape(); n];
    let mut samples = vec![
        RadianceSample {
            color: [0.0; 3],
            density: 0.0
        };
        n
    ];
    let mut weights = vec![0.0; n];
    for row in 0..cam.height {
        for col in 0..cam.width {
            let pixel = row * cam.width + col;
            let g = [d_image[3 * pixel], d_image[3 * pixel + 1], d_image[3 * pixel + 2]];
            if g == [0.0; 3] {
                continue;
            }
            let dir = cam.pixel_direction(col, row);
            sample_offsets(cfg, pixel, &mut ts);
            for ((s, tape), &t) in samples.iter_mut().zip(tapes.iter_mut()).zip(&ts) {
                *s = model.eval_taped(prep, cam.eye + dir * t, tape);
            }
            let (_, t_end) = composite(&samples, delta, cfg.background, &mut weights);
            // g . (everything composited behind sample i)
            let mut behind = t_end * dot3(g, cfg.background);
            let mut t_next = t_end;
            for i in (0..n).rev() {
                let s = &samples[i];
                let w = weights[i];
                let d_sigma = delta * (t_next * dot3(g, s.color) - behind);
                let d_color = [w * g[0], w * g[1], w * g[2]];
                model.backward(prep, &tapes[i], d_sigma, d_color, grad);
                behind += w * dot3(g, s.color);
                t_next += w;
            }
        }
    }
    Ok(())
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Prepares `params` and renders.
pub fn render_style<M: RadianceModel>(
    model: &M,
    params: &StyleParams,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    let prep = model.prepare(params)?;
    render(model, &prep, cam, cfg)
}

/// Vector-Jacobian product of the rendered image with respect to `params`.
pub fn render_vjp<M: RadianceModel>(
    model: &M,
    params: &StyleParams,
    cam: &Camera,
    cfg: &RenderConfig,
    d_image: &[f64],
) -> Result<StyleParams> {
    let prep = model.prepare(params)?;
    let mut acc = model.zero_grad(&prep);
    render_backward(model, &prep, cam, cfg, d_image, &mut acc)?;
    Ok(model.finish_grad(&prep, acc))
}
