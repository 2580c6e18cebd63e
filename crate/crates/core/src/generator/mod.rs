//! Latent-conditioned radiance fields.
//!
//! Two generator kinds share one contract: a seeded affine map from a latent
//! code to per-layer style parameters (frequencies and phase shifts), and a
//! field `position -> (color, density)` conditioned on those style parameters.
//! Each kind implements [`RadianceModel`], which also carries a hand-written
//! reverse pass so losses can be differentiated with respect to the style.

mod blob;
mod siren;

pub use blob::{BlobDesc, BlobGenerator};
pub use siren::{AffineMap, SirenGenerator};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::math::{rng, Vec3};
use crate::{Error, Result};

/// A latent vector `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Draws `d` standard-normal values from the ChaCha8 stream keyed by `seed`.
pub fn sample_latent(seed: u64, d: usize) -> Result<LatentCode> {
    if d == 0 {
        return Err(Error::InvalidDimension("latent dimension must be >= 1".into()));
    }
    let mut r = rng(seed);
    Ok(LatentCode(draw_normals(&mut r, d)))
}

fn draw_normals<R: Rng>(r: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

/// Per-layer frequencies and phase shifts.
///
/// Also used as the gradient container for the same parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub freqs: Vec<Vec<f64>>,
    pub phases: Vec<Vec<f64>>,
}

impl StyleParams {
    pub fn zeros(shape: &StyleShape) -> Self {
        StyleParams {
            freqs: shape.freq_dims.iter().map(|&n| vec![0.0; n]).collect(),
            phases: shape.phase_dims.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape())
    }

    pub fn shape(&self) -> StyleShape {
        StyleShape {
            freq_dims: self.freqs.iter().map(Vec::len).collect(),
            phase_dims: self.phases.iter().map(Vec::len).collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.freqs.len()
    }

    pub fn len(&self) -> usize {
        self.shape().total()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Layer-major concatenation: `freq_0, phase_0, freq_1, phase_1, ...`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (f, p) in self.freqs.iter().zip(&self.phases) {
            out.extend_from_slice(f);
            out.extend_from_slice(p);
        }
        out
    }

    pub fn unflatten(shape: &StyleShape, flat: &[f64]) -> Result<Self> {
        if flat.len() != shape.total() {
            return Err(Error::ShapeMismatch(format!(
                "flat style has {} entries, shape needs {}",
                flat.len(),
                shape.total()
            )));
        }
        let mut out = StyleParams::zeros(shape);
        let mut at = 0;
        for (f, p) in out.freqs.iter_mut().zip(out.phases.iter_mut()) {
            let (nf, np) = (f.len(), p.len());
            f.copy_from_slice(&flat[at..at + nf]);
            at += nf;
            p.copy_from_slice(&flat[at..at + np]);
            at += np;
        }
        Ok(out)
    }

    /// Concatenated `(freq_l, phase_l)` vector of one layer.
    pub fn layer_vector(&self, l: usize) -> Vec<f64> {
        let mut v = self.freqs[l].clone();
        v.extend_from_slice(&self.phases[l]);
        v
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.freqs.iter().zip(&self.phases).flat_map(|(f, p)| f.iter().chain(p))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.freqs
            .iter_mut()
            .zip(self.phases.iter_mut())
            .flat_map(|(f, p)| f.iter_mut().chain(p.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &StyleParams) {
        for (x, y) in self.values_mut().zip(other.values()) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for x in self.values_mut() {
            *x *= a;
        }
    }

    pub fn dot(&self, other: &StyleParams) -> f64 {
        self.values().zip(other.values()).map(|(a, b)| a * b).sum()
    }

    pub fn ensure_shape(&self, shape: &StyleShape) -> Result<()> {
        if &self.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "style shape {:?} does not match generator shape {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StyleShape {
    pub freq_dims: Vec<usize>,
    pub phase_dims: Vec<usize>,
}

impl StyleShape {
    pub fn total(&self) -> usize {
        self.freq_dims.iter().sum::<usize>() + self.phase_dims.iter().sum::<usize>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadianceSample {
    pub color: [f64; 3],
    pub density: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Siren,
    Blob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    /// SIREN layers; ignored by the blob kind (one layer per blob).
    #[serde(default = "defaults::depth")]
    pub depth: usize,
    #[serde(default = "defaults::width")]
    pub width: usize,
    #[serde(default = "defaults::latent_dim")]
    pub latent_dim: usize,
    #[serde(default)]
    pub weight_seed: u64,
    #[serde(default = "defaults::mapping_seed")]
    pub mapping_seed: u64,
}

mod defaults {
    pub fn depth() -> usize {
        4
    }
    pub fn width() -> usize {
        64
    }
    pub fn latent_dim() -> usize {
        64
    }
    pub fn mapping_seed() -> u64 {
        1
    }
}

impl GeneratorSpec {
    pub fn siren(depth: usize, width: usize, latent_dim: usize, weight_seed: u64) -> Self {
        GeneratorSpec {
            kind: GeneratorKind::Siren,
            depth,
            width,
            latent_dim,
            weight_seed,
            mapping_seed: weight_seed.wrapping_add(1),
        }
    }

    pub fn blob(n_blobs: usize) -> Self {
        GeneratorSpec {
            kind: GeneratorKind::Blob,
            depth: n_blobs,
            width: 0,
            latent_dim: 8 * n_blobs,
            weight_seed: 0,
            mapping_seed: 0,
        }
    }
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec::siren(4, 64, 64, 0)
    }
}

/// A radiance field conditioned on style parameters, with a reverse pass.
///
/// `prepare` turns style parameters into whatever per-evaluation constants the
/// model needs. `eval_taped` records what `backward` needs to push
/// `(d loss / d density, d loss / d color)` into a model-specific gradient
/// accumulator, which `finish_grad` converts back into style space.
pub trait RadianceModel: Sync {
    type Prepared: Sync;
    type Tape: Clone + Send;
    type Grad: Send;

    fn style_shape(&self) -> StyleShape;

    fn prepare(&self, params: &StyleParams) -> Result<Self::Prepared>;

    fn eval(&self, prep: &Self::Prepared, p: Vec3) -> RadianceSample;

    fn new_tape(&self) -> Self::Tape;

    fn eval_taped(&self, prep: &Self::Prepared, p: Vec3, tape: &mut Self::Tape) -> RadianceSample;

    fn backward(
        &self,
        prep: &Self::Prepared,
        tape: &Self::Tape,
        d_density: f64,
        d_color: [f64; 3],
        grad: &mut Self::Grad,
    );

    fn zero_grad(&self, prep: &Self::Prepared) -> Self::Grad;

    fn finish_grad(&self, prep: &Self::Prepared, grad: Self::Grad) -> StyleParams;
}

/// Either generator kind, built from a [`GeneratorSpec`].
#[derive(Debug, Clone)]
pub enum Generator {
    Siren(SirenGenerator),
    Blob(BlobGenerator),
}

/// Runs `$body` with `$m` bound to the concrete model inside a [`Generator`].
#[macro_export]
macro_rules! with_model {
    ($gen:expr, $m:ident => $body:expr) => {
        match $gen {
            $crate::generator::Generator::Siren($m) => $body,
            $crate::generator::Generator::Blob($m) => $body,
        }
    };
}

impl Generator {
    pub fn new(spec: &GeneratorSpec) -> Result<Self> {
        Ok(match spec.kind {
            GeneratorKind::Siren => Generator::Siren(SirenGenerator::new(spec)?),
            GeneratorKind::Blob => Generator::Blob(BlobGenerator::new(spec)?),
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        match self {
            Generator::Siren(g) => g.spec(),
            Generator::Blob(g) => g.spec(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.spec().latent_dim
    }

    pub fn style_shape(&self) -> StyleShape {
        with_model!(self, m => m.style_shape())
    }

    pub fn map_latent(&self, z: &LatentCode) -> Result<StyleParams> {
        match self {
            Generator::Siren(g) => g.map_latent(z),
            Generator::Blob(g) => g.map_latent(z),
        }
    }

    /// Elementwise mean of `map_latent` over `n` latents drawn from one stream.
    ///
    /// The first latent of the stream equals `sample_latent(seed, d)`.
    pub fn average_style(&self, n: usize, seed: u64) -> Result<StyleParams> {
        if n == 0 {
            return Err(Error::InvalidDimension("average over zero latents".into()));
        }
        let d = self.latent_dim();
        let mut r = rng(seed);
        let mut acc = StyleParams::zeros(&self.style_shape());
        for _ in 0..n {
            let z = LatentCode(draw_normals(&mut r, d));
            acc.axpy(1.0, &self.map_latent(&z)?);
        }
        acc.scale(1.0 / n as f64);
        Ok(acc)
    }

    pub fn eval(&self, params: &StyleParams, p: Vec3) -> Result<RadianceSample> {
        with_model!(self, m => {
            let prep = m.prepare(params)?;
            Ok(m.eval(&prep, p))
        })
    }
}

/// Shared check used by both kinds.
pub(crate) fn check_latent(z: &LatentCode, d: usize) -> Result<()> {
    if z.dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "latent has dimension {}, generator expects {d}",
            z.dim()
        )));
    }
    if z.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidDimension("latent has non-finite entries".into()));
    }
    Ok(())
}
