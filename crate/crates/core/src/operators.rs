//! Linear forward operators and measurement synthesis.
//!
//! Every operator maps an interleaved RGB image of a fixed size to a flat
//! measurement vector. Pixel and box masks observe whole pixels (all three
//! channels).

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::math::{derive_seed, rng};
use crate::renderer::Image;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Identity,
    PixelMask { ratio: f64 },
    BoxMask { x0: usize, y0: usize, w: usize, h: usize },
    GaussianCs { m: usize },
    Downsample { factor: usize },
}

impl fmt::Display for OperatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OperatorSpec::Identity => write!(f, "identity"),
            OperatorSpec::PixelMask { ratio } => write!(f, "pixmask:{ratio}"),
            OperatorSpec::BoxMask { x0, y0, w, h } => write!(f, "box:{x0},{y0},{w},{h}"),
            OperatorSpec::GaussianCs { m } => write!(f, "cs:{m}"),
            OperatorSpec::Downsample { factor } => write!(f, "down:{factor}"),
        }
    }
}

impl FromStr for OperatorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidOperator(format!("cannot parse operator '{s}'"));
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        match (head, arg) {
            ("identity", None) => Ok(OperatorSpec::Identity),
            ("pixmask", Some(a)) => Ok(OperatorSpec::PixelMask {
                ratio: a.parse().map_err(|_| bad())?,
            }),
            ("box", Some(a)) => {
                let v: Vec<usize> = a
                    .split(',')
                    .map(|x| x.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad())?;
                match v[..] {
                    [x0, y0, w, h] => Ok(OperatorSpec::BoxMask { x0, y0, w, h }),
                    _ => Err(bad()),
                }
            }
            ("cs", Some(a)) => Ok(OperatorSpec::GaussianCs {
                m: a.parse().map_err(|_| bad())?,
            }),
            ("down", Some(a)) => Ok(OperatorSpec::Downsample {
                factor: a.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasurementShape {
    /// `width x height` RGB image.
    Image { width: usize, height: usize },
    Flat(usize),
}

impl MeasurementShape {
    pub fn len(&self) -> usize {
        match *self {
            MeasurementShape::Image { width, height } => 3 * width * height,
            MeasurementShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    pub values: Vec<f64>,
    pub shape: MeasurementShape,
}

#[derive(Debug, Clone)]
enum Kind {
    Identity,
    /// Observed channel indices into the image vector, ascending.
    Select(Vec<usize>),
    /// Row-major `m x n`.
    Dense { m: usize, matrix: Vec<f64> },
    Downsample { factor: usize },
}

#[derive(Debug, Clone)]
pub struct ForwardOperator {
    spec: OperatorSpec,
    width: usize,
    height: usize,
    kind: Kind,
}

fn pixel_channels(pixels: impl Iterator<Item = usize>) -> Vec<usize> {
    pixels.flat_map(|p| [3 * p, 3 * p + 1, 3 * p + 2]).collect()
}

impl ForwardOperator {
    pub fn realize(spec: &OperatorSpec, width: usize, height: usize, seed: u64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidOperator(format!("empty image {width}x{height}")));
        }
        let n_pix = width * height;
        let kind = match *spec {
            OperatorSpec::Identity => Kind::Identity,
            OperatorSpec::PixelMask { ratio } => {
                if !(ratio > 0.0 && ratio <= 1.0) {
                    return Err(Error::InvalidOperator(format!("ratio {ratio} not in (0, 1]")));
                }
                let count = ((ratio * n_pix as f64).round() as usize).clamp(1, n_pix);
                let mut order: Vec<usize> = (0..n_pix).collect();
                order.shuffle(&mut rng(derive_seed(seed, 0x70_6d)));
                let mut kept = order[..count].to_vec();
                kept.sort_unstable();
                Kind::Select(pixel_channels(kept.into_iter()))
            }
            OperatorSpec::BoxMask { x0, y0, w, h } => {
                if w == 0 || h == 0 || x0 + w > width || y0 + h > height {
                    return Err(Error::InvalidOperator(format!(
                        "box ({x0},{y0},{w},{h}) outside {width}x{height} or empty"
                    )));
                }
                let inside = |p: usize| {
                    let (c, r) = (p % width, p / width);
                    c >= x0 && c < x0 + w && r >= y0 && r < y0 + h
                };
                let kept: Vec<usize> = (0..n_pix).filter(|&p| !inside(p)).collect();
                if kept.is_empty() {
                    return Err(Error::InvalidOperator("box covers the whole image".into()));
                }
                Kind::Select(pixel_channels(kept.into_iter()))
            }
            OperatorSpec::GaussianCs { m } => {
                let n = 3 * n_pix;
                if m == 0 || m > n {
                    return Err(Error::InvalidOperator(format!("cs needs 1 <= m <= {n}, got {m}")));
                }
                let sd = 1.0 / (m as f64).sqrt();
                let mut r = rng(derive_seed(seed, 0x63_73));
                let matrix = (0..m * n)
                    .map(|_| {
                        let x: f64 = StandardNormal.sample(&mut r);
                        sd * x
                    })
                    .collect();
                Kind::Dense { m, matrix }
            }
            OperatorSpec::Downsample { factor } => {
                if factor == 0 || width % factor != 0 || height % factor != 0 {
                    return Err(Error::InvalidOperator(format!(
                        "factor {factor} does not divide {width}x{height}"
                    )));
                }
                Kind::Downsample { factor }
            }
        };
        Ok(ForwardOperator {
            spec: spec.clone(),
            width,
            height,
            kind,
        })
    }

    /// Dense operator from an explicit row-major `m x 3wh` matrix.
    pub fn from_matrix(width: usize, height: usize, m: usize, matrix: Vec<f64>) -> Result<Self> {
        if m == 0 || matrix.len() != m * 3 * width * height {
            return Err(Error::InvalidOperator(format!(
                "matrix has {} entries, expected {m} x {}",
                matrix.len(),
                3 * width * height
            )));
        }
        Ok(ForwardOperator {
            spec: OperatorSpec::GaussianCs { m },
            width,
            height,
            kind: Kind::Dense { m, matrix },
        })
    }

    pub fn spec(&self) -> &OperatorSpec {
        &self.spec
    }

    pub fn input_len(&self) -> usize {
        3 * self.width * self.height
    }

    pub fn output_shape(&self) -> MeasurementShape {
        match &self.kind {
            Kind::Identity => MeasurementShape::Image {
                width: self.width,
                height: self.height,
            },
            Kind::Select(idx) => MeasurementShape::Flat(idx.len()),
            Kind::Dense { m, .. } => MeasurementShape::Flat(*m),
            Kind::Downsample { factor } => MeasurementShape::Image {
                width: self.width / factor,
                height: self.height / factor,
            },
        }
    }

    /// `A x` on a raw interleaved image vector.
    pub fn apply_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_len() {
            return Err(Error::ShapeMismatch(format!(
                "operator expects {} image values, got {}",
                self.input_len(),
                x.len()
            )));
        }
        Ok(match &self.kind {
            Kind::Identity => x.to_vec(),
            Kind::Select(idx) => idx.iter().map(|&i| x[i]).collect(),
            Kind::Dense { matrix, .. } => matrix
                .chunks_exact(x.len())
                .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
                .collect(),
            Kind::Downsample { factor } => {
                let f = *factor;
                let (ow, oh) = (self.width / f, self.height / f);
                let norm = 1.0 / (f * f) as f64;
                let mut out = vec![0.0; 3 * ow * oh];
                for r in 0..self.height {
                    for c in 0..self.width {
                        let o = 3 * ((r / f) * ow + c / f);
                        let i = 3 * (r * self.width + c);
                        for k in 0..3 {
                            out[o + k] += norm * x[i + k];
                        }
                    }
                }
                out
            }
        })
    }

    /// `A^T y` as a raw interleaved image vector.
    pub fn adjoint_vec(&self, y: &[f64]) -> Result<Vec<f64>> {
        let m = self.output_shape().len();
        if y.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "operator produces {m} measurements, got {}",
                y.len()
            )));
        }
        let n = self.input_len();
        Ok(match &self.kind {
            Kind::Identity => y.to_vec(),
            Kind::Select(idx) => {
                let mut out = vec![0.0; n];
                for (&i, &v) in idx.iter().zip(y) {
                    out[i] = v;
                }
                out
            }
            Kind::Dense { matrix, .. } => {
                let mut out = vec![0.0; n];
                for (row, &v) in matrix.chunks_exact(n).zip(y) {
                    for (o, a) in out.iter_mut().zip(row) {
                        *o += a * v;
                    }
                }
                out
            }
            Kind::Downsample { factor } => {
                let f = *factor;
                let ow = self.width / f;
                let norm = 1.0 / (f * f) as f64;
                let mut out = vec![0.0; n];
                for r in 0..self.height {
                    for c in 0..self.width {
                        let o = 3 * ((r / f) * ow + c / f);
                        let i = 3 * (r * self.width + c);
                        for k in 0..3 {
                            out[i + k] = norm * y[o + k];
                        }
                    }
                }
                out
            }
        })
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        if img.width != self.width || img.height != self.height {
            return Err(Error::ShapeMismatch(format!(
                "operator built for {}x{}, image is {}x{}",
                self.width, self.height, img.width, img.height
            )));
        }
        Ok(())
    }

    pub fn apply(&self, img: &Image) -> Result<Measurements> {
        self.check_image(img)?;
        Ok(Measurements {
            values: self.apply_vec(&img.data)?,
            shape: self.output_shape(),
        })
    }

    pub fn adjoint(&self, meas: &Measurements) -> Result<Image> {
        if meas.shape != self.output_shape() {
            return Err(Error::ShapeMismatch(format!(
                "measurement shape {:?} does not match operator output {:?}",
                meas.shape,
                self.output_shape()
            )));
        }
        Image::from_data(self.width, self.height, self.adjoint_vec(&meas.values)?)
    }

    /// `A x + eta` with i.i.d. `N(0, std^2)` noise.
    pub fn corrupt(&self, img: &Image, std: f64, seed: u64) -> Result<Measurements> {
        if !(std >= 0.0 && std.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise std must be >= 0, got {std}")));
        }
        let mut meas = self.apply(img)?;
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("validated std");
            let mut r = rng(derive_seed(seed, 0x6e_6f));
            for v in &mut meas.values {
                *v += normal.sample(&mut r);
            }
        }
        Ok(meas)
    }
}
