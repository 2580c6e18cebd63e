//! Analytic Gaussian-blob radiance field.
//!
//! Each blob consumes eight latent entries: center offset (3), radius (1),
//! amplitude (1) and color (3). The style parameters are these raw entries,
//! one layer per blob, with the geometric entries as "frequencies" and the
//! color entries as "phases". Raw values pass through fixed squashing maps:
//!
//! - center = anchor + `CENTER_REACH * tanh(raw / CENTER_SOFTNESS)`
//! - radius = `RADIUS_MIN + (RADIUS_MAX - RADIUS_MIN) * sigmoid(raw / 2)`
//! - amplitude = `AMPLITUDE_MAX * sigmoid(raw)`
//! - color = `sigmoid(raw)`
//!
//! Anchors sit on a ring of radius `ANCHOR_RING` in the `z = 0` plane (a
//! single blob is anchored at the origin), so typical latents give
//! variations of one template layout.

use super::{check_latent, LatentCode, RadianceModel, RadianceSample, StyleParams, StyleShape};
use super::{GeneratorKind, GeneratorSpec};
use crate::math::{sigmoid, Vec3};
use crate::{Error, Result};

pub const CENTER_REACH: f64 = 0.4;
pub const CENTER_SOFTNESS: f64 = 4.0;
pub const RADIUS_MIN: f64 = 0.04;
pub const RADIUS_MAX: f64 = 0.12;
pub const AMPLITUDE_MAX: f64 = 30.0;
pub const ANCHOR_RING: f64 = 0.2;
/// Blobs whose exponent exceeds this at a point are skipped (`e^-40 ~ 4e-18`).
const CULL_EXPONENT: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobDesc {
    pub center: Vec3,
    pub radius: f64,
    pub amplitude: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct BlobGenerator {
    spec: GeneratorSpec,
    anchors: Vec<Vec3>,
}

#[derive(Debug, Clone)]
pub struct PreparedBlob {
    desc: BlobDesc,
    inv_two_r2: f64,
    d_center: Vec3,
    d_radius: f64,
    d_amplitude: f64,
    d_color: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct BlobTape {
    p: Vec3,
    rho: Vec<f64>,
    density: f64,
    color: [f64; 3],
}

/// Gradient in physical blob space: center (3), radius, amplitude, color (3).
pub type BlobGrad = Vec<[f64; 8]>;

impl BlobGenerator {
    pub fn new(spec: &GeneratorSpec) -> Result<Self> {
        if spec.kind != GeneratorKind::Blob {
            return Err(Error::InvalidConfig("not a blob spec".into()));
        }
        if spec.latent_dim == 0 || spec.latent_dim % 8 != 0 {
            return Err(Error::InvalidDimension(format!(
                "blob latent dimension must be a positive multiple of 8, got {}",
                spec.latent_dim
            )));
        }
        let n = spec.latent_dim / 8;
        let anchors = if n == 1 {
            vec![Vec3::ZERO]
        } else {
            (0..n)
                .map(|b| {
                    let a = std::f64::consts::FRAC_PI_2
                        + std::f64::consts::TAU * b as f64 / n as f64;
                    Vec3::new(ANCHOR_RING * a.cos(), ANCHOR_RING * a.sin(), 0.0)
                })
                .collect()
        };
        let mut spec = spec.clone();
        spec.depth = n;
        Ok(BlobGenerator { spec, anchors })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn num_blobs(&self) -> usize {
        self.anchors.len()
    }

    pub fn anchors(&self) -> &[Vec3] {
        &self.anchors
    }

    pub fn map_latent(&self, z: &LatentCode) -> Result<StyleParams> {
        check_latent(z, self.spec.latent_dim)?;
        let mut freqs = Vec::with_capacity(self.num_blobs());
        let mut phases = Vec::with_capacity(self.num_blobs());
        for chunk in z.0.chunks_exact(8) {
            freqs.push(chunk[..5].to_vec());
            phases.push(chunk[5..].to_vec());
        }
        Ok(StyleParams { freqs, phases })
    }

    /// Physical blobs described by a style.
    pub fn decode(&self, params: &StyleParams) -> Result<Vec<BlobDesc>> {
        Ok(self.prepare(params)?.into_iter().map(|b| b.desc).collect())
    }

    /// Inverse of the squashing maps: the latent whose blobs are `blobs`.
    pub fn encode(&self, blobs: &[BlobDesc]) -> Result<LatentCode> {
        if blobs.len() != self.num_blobs() {
            return Err(Error::ShapeMismatch(format!(
                "{} blobs given, generator has {}",
                blobs.len(),
                self.num_blobs()
            )));
        }
        let logit = |p: f64| -> Result<f64> {
            if p > 0.0 && p < 1.0 {
                Ok((p / (1.0 - p)).ln())
            } else {
                Err(Error::InvalidConfig(format!("value {p} outside the open unit interval")))
            }
        };
        let mut z = Vec::with_capacity(self.spec.latent_dim);
        for (blob, anchor) in blobs.iter().zip(&self.anchors) {
            for axis in 0..3 {
                let t = (blob.center.component(axis) - anchor.component(axis)) / CENTER_REACH;
                if t.abs() >= 1.0 {
                    return Err(Error::InvalidConfig(format!(
                        "blob center {:?} beyond reach of anchor {:?}",
                        blob.center, anchor
                    )));
                }
                z.push(CENTER_SOFTNESS * t.atanh());
            }
            z.push(2.0 * logit((blob.radius - RADIUS_MIN) / (RADIUS_MAX - RADIUS_MIN))?);
            z.push(logit(blob.amplitude / AMPLITUDE_MAX)?);
            for c in blob.color {
                z.push(logit(c)?);
            }
        }
        Ok(LatentCode(z))
    }
}

impl RadianceModel for BlobGenerator {
    type Prepared = Vec<PreparedBlob>;
    type Tape = BlobTape;
    type Grad = BlobGrad;

    fn style_shape(&self) -> StyleShape {
        StyleShape {
            freq_dims: vec![5; self.num_blobs()],
            phase_dims: vec![3; self.num_blobs()],
        }
    }

    fn prepare(&self, params: &StyleParams) -> Result<Vec<PreparedBlob>> {
        params.ensure_shape(&self.style_shape())?;
        Ok(self
            .anchors
            .iter()
            .enumerate()
            .map(|(b, anchor)| {
                let f = &params.freqs[b];
                let ph = &params.phases[b];
                let mut center = [0.0; 3];
                let mut d_center = [0.0; 3];
                for axis in 0..3 {
                    let t = (f[axis] / CENTER_SOFTNESS).tanh();
                    center[axis] = anchor.component(axis) + CENTER_REACH * t;
                    d_center[axis] = CENTER_REACH / CENTER_SOFTNESS * (1.0 - t * t);
                }
                let sr = sigmoid(f[3] / 2.0);
                let radius = RADIUS_MIN + (RADIUS_MAX - RADIUS_MIN) * sr;
                let sa = sigmoid(f[4]);
                let color = [sigmoid(ph[0]), sigmoid(ph[1]), sigmoid(ph[2])];
                PreparedBlob {
                    desc: BlobDesc {
                        center: Vec3::from_slice(&center),
                        radius,
                        amplitude: AMPLITUDE_MAX * sa,
                        color,
                    },
                    inv_two_r2: 0.5 / (radius * radius),
                    d_center: Vec3::from_slice(&d_center),
                    d_radius: (RADIUS_MAX - RADIUS_MIN) * sr * (1.0 - sr) * 0.5,
                    d_amplitude: AMPLITUDE_MAX * sa * (1.0 - sa),
                    d_color: color.map(|c| c * (1.0 - c)),
                }
            })
            .collect())
    }

    fn eval(&self, prep: &Vec<PreparedBlob>, p: Vec3) -> RadianceSample {
        let mut density = 0.0;
        let mut acc = [0.0; 3];
        for b in prep {
            let q = (p - b.desc.center).norm_squared() * b.inv_two_r2;
            if q > CULL_EXPONENT {
                continue;
            }
            let rho = b.desc.amplitude * (-q).exp();
            density += rho;
            for k in 0..3 {
                acc[k] += rho * b.desc.color[k];
            }
        }
        RadianceSample {
            color: weighted_color(acc, density),
            density,
        }
    }

    fn new_tape(&self) -> BlobTape {
        BlobTape {
            p: Vec3::ZERO,
            rho: vec![0.0; self.num_blobs()],
            density: 0.0,
            color: [0.0; 3],
        }
    }

    fn eval_taped(&self, prep: &Vec<PreparedBlob>, p: Vec3, tape: &mut BlobTape) -> RadianceSample {
        let mut density = 0.0;
        let mut acc = [0.0; 3];
        for (b, rho_out) in prep.iter().zip(tape.rho.iter_mut()) {
            let q = (p - b.desc.center).norm_squared() * b.inv_two_r2;
            let rho = if q > CULL_EXPONENT {
                0.0
            } else {
                b.desc.amplitude * (-q).exp()
            };
            *rho_out = rho;
            density += rho;
            for k in 0..3 {
                acc[k] += rho * b.desc.color[k];
            }
        }
        let color = weighted_color(acc, density);
        tape.p = p;
        tape.density = density;
        tape.color = color;
        RadianceSample { color, density }
    }

    fn backward(
        &self,
        prep: &Vec<PreparedBlob>,
        tape: &BlobTape,
        d_density: f64,
        d_color: [f64; 3],
        grad: &mut BlobGrad,
    ) {
        let inv_density = if tape.density > 0.0 { 1.0 / tape.density } else { 0.0 };
        for ((b, &rho), g) in prep.iter().zip(&tape.rho).zip(grad.iter_mut()) {
            if rho == 0.0 {
                continue;
            }
            let mut d_rho = d_density;
            for k in 0..3 {
                d_rho += d_color[k] * (b.desc.color[k] - tape.color[k]) * inv_density;
                g[5 + k] += d_color[k] * rho * inv_density;
            }
            let diff = tape.p - b.desc.center;
            let r = b.desc.radius;
            let s = d_rho * rho;
            let dc = diff * (s / (r * r));
            g[0] += dc.x;
            g[1] += dc.y;
            g[2] += dc.z;
            g[3] += s * diff.norm_squared() / (r * r * r);
            g[4] += s / b.desc.amplitude;
        }
    }

    fn zero_grad(&self, prep: &Vec<PreparedBlob>) -> BlobGrad {
        vec![[0.0; 8]; prep.len()]
    }

    fn finish_grad(&self, prep: &Vec<PreparedBlob>, grad: BlobGrad) -> StyleParams {
        let mut out = StyleParams::zeros(&self.style_shape());
        for (b, (blob, g)) in prep.iter().zip(grad).enumerate() {
            out.freqs[b][0] = g[0] * blob.d_center.x;
            out.freqs[b][1] = g[1] * blob.d_center.y;
            out.freqs[b][2] = g[2] * blob.d_center.z;
            out.freqs[b][3] = g[3] * blob.d_radius;
            out.freqs[b][4] = g[4] * blob.d_amplitude;
            for k in 0..3 {
                out.phases[b][k] = g[5 + k] * blob.d_color[k];
            }
        }
        out
    }
}

fn weighted_color(acc: [f64; 3], density: f64) -> [f64; 3] {
    if density > 0.0 {
        acc.map(|a| (a / density).clamp(0.0, 1.0))
    } else {
        [0.0; 3]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::sample_latent;

    fn gen(n: usize) -> BlobGenerator {
        BlobGenerator::new(&GeneratorSpec::blob(n)).unwrap()
    }

    fn blob(center: Vec3, radius: f64, amplitude: f64, color: [f64; 3]) -> BlobDesc {
        BlobDesc {
            center,
            radius,
            amplitude,
            color,
        }
    }

    #[test]
    fn rejects_bad_dims() {
        let mut spec = GeneratorSpec::blob(1);
        spec.latent_dim = 12;
        assert!(BlobGenerator::new(&spec).is_err());
    }

    #[test]
    fn encode_decode_roundtrip() {
        let g = gen(2);
        let blobs = [
            blob(Vec3::new(0.0, 0.3, 0.1), 0.1, 12.0, [0.2, 0.5, 0.9]),
            blob(Vec3::new(0.05, -0.2, -0.1), 0.07, 4.0, [0.7, 0.1, 0.3]),
        ];
        let z = g.encode(&blobs).unwrap();
        let back = g.decode(&g.map_latent(&z).unwrap()).unwrap();
        for (a, b) in blobs.iter().zip(&back) {
            assert!((a.center - b.center).norm() < 1e-12);
            assert!((a.radius - b.radius).abs() < 1e-12);
            assert!((a.amplitude - b.amplitude).abs() < 1e-10);
            for k in 0..3 {
                assert!((a.color[k] - b.color[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn density_at_center_is_amplitude() {
        let g = gen(1);
        let b = blob(Vec3::new(0.1, -0.05, 0.2), 0.09, 9.0, [0.3, 0.6, 0.1]);
        let z = g.encode(&[b]).unwrap();
        let prep = g.prepare(&g.map_latent(&z).unwrap()).unwrap();
        let center = prep[0].desc.center;
        let s = g.eval(&prep, center);
        assert!((s.density - prep[0].desc.amplitude).abs() < 1e-12);
        for k in 0..3 {
            assert!((s.color[k] - prep[0].desc.color[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_tail_is_negligible() {
        let g = gen(3);
        let z = sample_latent(4, 24).unwrap();
        let prep = g.prepare(&g.map_latent(&z).unwrap()).unwrap();
        let total: f64 = prep.iter().map(|b| b.desc.amplitude).sum();
        let far = Vec3::new(5.0, 5.0, 5.0);
        for b in &prep {
            assert!((far - b.desc.center).norm() >= 6.0 * b.desc.radius);
        }
        assert!(g.eval(&prep, far).density < 1e-7 * total);
    }

    #[test]
    fn two_blob_midpoint_matches_formula() {
        let g = gen(2);
        let blobs = [
            blob(Vec3::new(0.0, 0.25, 0.0), 0.1, 10.0, [1.0 - 1e-9, 0.5, 0.5]),
            blob(Vec3::new(0.0, -0.15, 0.05), 0.11, 20.0, [0.5, 1e-9, 0.5]),
        ];
        let z = g.encode(&blobs).unwrap();
        let prep = g.prepare(&g.map_latent(&z).unwrap()).unwrap();
        let (c0, c1) = (prep[0].desc.center, prep[1].desc.center);
        let mid = (c0 + c1) * 0.5;
        let rho = |c: Vec3, r: f64, a: f64| a * (-(mid - c).norm_squared() / (2.0 * r * r)).exp();
        let expected = rho(c0, 0.1, 10.0) + rho(c1, 0.11, 20.0);
        assert!((g.eval(&prep, mid).density - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn reverse_pass_matches_finite_differences() {
        let g = gen(3);
        let s = g.map_latent(&sample_latent(9, 24).unwrap()).unwrap();
        let prep = g.prepare(&s).unwrap();
        let p = Vec3::new(0.05, 0.1, -0.02);
        let (wd, wc) = (0.7, [0.3, -1.2, 0.5]);
        let f = |s: &StyleParams| {
            let r = g.eval(&g.prepare(s).unwrap(), p);
            wd * r.density + (0..3).map(|k| wc[k] * r.color[k]).sum::<f64>()
        };
        let mut tape = g.new_tape();
        g.eval_taped(&prep, p, &mut tape);
        let mut acc = g.zero_grad(&prep);
        g.backward(&prep, &tape, wd, wc, &mut acc);
        let grad = g.finish_grad(&prep, acc).flatten();
        let flat = s.flatten();
        let shape = s.shape();
        for i in 0..flat.len() {
            let h = 1e-5 * (1.0 + flat[i].abs());
            let mut fp = flat.clone();
            let mut fm = flat.clone();
            fp[i] += h;
            fm[i] -= h;
            let fd = (f(&StyleParams::unflatten(&shape, &fp).unwrap())
                - f(&StyleParams::unflatten(&shape, &fm).unwrap()))
                / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-6);
            assert!((grad[i] - fd).abs() / denom < 1e-5, "coord {i}: {} vs {fd}", grad[i]);
        }
    }
}
