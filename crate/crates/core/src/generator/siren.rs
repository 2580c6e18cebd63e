//! FiLM-conditioned SIREN: `h_{l+1} = sin(freq_l * (W_l h_l + c_l) + phase_l)`.

use rand::Rng;
use rand_distr::{Normal, Uniform};

use super::{check_latent, LatentCode, RadianceModel, RadianceSample, StyleParams, StyleShape};
use super::{GeneratorKind, GeneratorSpec};
use crate::math::{rng, sigmoid, softplus, Vec3};
use crate::{Error, Result};

/// SIREN's first-layer frequency scale, folded into the first weight matrix.
pub const FIRST_LAYER_SCALE: f64 = 30.0;
/// Spread of the mapped frequencies around 1.
const FREQ_STD: f64 = 0.3;
/// Spread of the mapped phase shifts, radians.
const PHASE_STD: f64 = 1.0;
const DENSITY_BIAS: f64 = -2.0;

#[derive(Debug, Clone)]
struct Dense {
    cols: usize,
    /// Row-major, one row per output.
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Dense {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for ((o, row), b) in out.iter_mut().zip(self.w.chunks_exact(self.cols)).zip(&self.b) {
            *o = row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b;
        }
    }

    /// `out = W^T g`.
    fn apply_transpose(&self, g: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (row, gi) in self.w.chunks_exact(self.cols).zip(g) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * gi;
            }
        }
    }
}

/// `y = A z + offset`, `A` row-major `out x d`.
#[derive(Debug, Clone)]
pub struct AffineMap {
    pub rows: usize,
    pub cols: usize,
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
}

impl AffineMap {
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.matrix
            .chunks_exact(self.cols)
            .zip(&self.offset)
            .map(|(row, o)| row.iter().zip(z).map(|(a, z)| a * z).sum::<f64>() + o)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SirenGenerator {
    spec: GeneratorSpec,
    layers: Vec<Dense>,
    density_head: Dense,
    color_head: Dense,
    freq_map: AffineMap,
    phase_map: AffineMap,
}

impl SirenGenerator {
    pub fn new(spec: &GeneratorSpec) -> Result<Self> {
        if spec.kind != GeneratorKind::Siren {
            return Err(Error::InvalidConfig("not a siren spec".into()));
        }
        if spec.depth == 0 || spec.width == 0 || spec.latent_dim == 0 {
            return Err(Error::InvalidDimension(format!(
                "siren needs depth, width, latent_dim >= 1 (got {}, {}, {})",
                spec.depth, spec.width, spec.latent_dim
            )));
        }
        let width = spec.width;
        let mut wr = rng(spec.weight_seed);
        let mut layers = Vec::with_capacity(spec.depth);
        for l in 0..spec.depth {
            let fan_in = if l == 0 { 3 } else { width };
            let bound = if l == 0 {
                FIRST_LAYER_SCALE / fan_in as f64
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            layers.push(uniform_dense(&mut wr, width, fan_in, bound));
        }
        let head_bound = (6.0 / width as f64).sqrt();
        let mut density_head = uniform_dense(&mut wr, 1, width, head_bound);
        density_head.b[0] = DENSITY_BIAS;
        let color_head = uniform_dense(&mut wr, 3, width, head_bound);

        let mut mr = rng(spec.mapping_seed);
        let d = spec.latent_dim;
        let freq_map = gaussian_affine(&mut mr, width, d, FREQ_STD, 1.0);
        let phase_map = gaussian_affine(&mut mr, width, d, PHASE_STD, 0.0);
        Ok(SirenGenerator {
            spec: spec.clone(),
            layers,
            density_head,
            color_head,
            freq_map,
            phase_map,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    /// Frequency map of layer `l`. All layers share one map, so a mapped
    /// latent yields identical frequencies in every layer.
    pub fn freq_map(&self, _layer: usize) -> &AffineMap {
        &self.freq_map
    }

    pub fn phase_map(&self, _layer: usize) -> &AffineMap {
        &self.phase_map
    }

    pub fn map_latent(&self, z: &LatentCode) -> Result<StyleParams> {
        check_latent(z, self.spec.latent_dim)?;
        let f = self.freq_map.apply(&z.0);
        let p = self.phase_map.apply(&z.0);
        Ok(StyleParams {
            freqs: vec![f; self.spec.depth],
            phases: vec![p; self.spec.depth],
        })
    }
}

fn uniform_dense<R: Rng>(r: &mut R, rows: usize, cols: usize, bound: f64) -> Dense {
    let u = Uniform::new_inclusive(-bound, bound);
    let w = (0..rows * cols).map(|_| r.sample(u)).collect();
    let bb = 1.0 / (cols as f64).sqrt();
    let ub = Uniform::new_inclusive(-bb, bb);
    let b = (0..rows).map(|_| r.sample(ub)).collect();
    Dense { cols, w, b }
}

fn gaussian_affine<R: Rng>(r: &mut R, rows: usize, d: usize, std: f64, offset: f64) -> AffineMap {
    let n = Normal::new(0.0, std / (d as f64).sqrt()).expect("finite std");
    AffineMap {
        rows,
        cols: d,
        matrix: (0..rows * d).map(|_| r.sample(n)).collect(),
        offset: vec![offset; rows],
    }
}

/// Per-sample intermediates of the forward pass.
#[derive(Debug, Clone)]
pub struct SirenTape {
    /// Layer inputs `h_0 .. h_{L}` (first is the 3-D position, padded).
    h: Vec<f64>,
    /// Pre-modulation activations `W_l h_l + c_l`.
    u: Vec<f64>,
    /// `cos` of the modulated pre-activations.
    cos: Vec<f64>,
    density_raw: f64,
    color: [f64; 3],
}

impl RadianceModel for SirenGenerator {
    type Prepared = StyleParams;
    type Tape = SirenTape;
    type Grad = StyleParams;

    fn style_shape(&self) -> StyleShape {
        StyleShape {
            freq_dims: vec![self.spec.width; self.spec.depth],
            phase_dims: vec![self.spec.width; self.spec.depth],
        }
    }

    fn prepare(&self, params: &StyleParams) -> Result<StyleParams> {
        params.ensure_shape(&self.style_shape())?;
        Ok(params.clone())
    }

    fn eval(&self, prep: &StyleParams, p: Vec3) -> RadianceSample {
        let mut tape = self.new_tape();
        self.eval_taped(prep, p, &mut tape)
    }

    fn new_tape(&self) -> SirenTape {
        let w = self.spec.width;
        let l = self.spec.depth;
        SirenTape {
            h: vec![0.0; w * (l + 1)],
            u: vec![0.0; w * l],
            cos: vec![0.0; w * l],
            density_raw: 0.0,
            color: [0.0; 3],
        }
    }

    fn eval_taped(&self, prep: &StyleParams, p: Vec3, tape: &mut SirenTape) -> RadianceSample {
        let w = self.spec.width;
        tape.h[..3].copy_from_slice(&p.to_array());
        for (l, layer) in self.layers.iter().enumerate() {
            let (inputs, rest) = tape.h.split_at_mut(w * (l + 1));
            let x = &inputs[w * l..w * l + layer.cols];
            let u = &mut tape.u[w * l..w * (l + 1)];
            layer.apply(x, u);
            let out = &mut rest[..w];
            let cos = &mut tape.cos[w * l..w * (l + 1)];
            let (fr, ph) = (&prep.freqs[l], &prep.phases[l]);
            for j in 0..w {
                let (s, c) = (fr[j] * u[j] + ph[j]).sin_cos();
                out[j] = s;
                cos[j] = c;
            }
        }
        let last = &tape.h[w * self.spec.depth..];
        let mut raw = [0.0];
        self.density_head.apply(last, &mut raw);
        let mut craw = [0.0; 3];
        self.color_head.apply(last, &mut craw);
        tape.density_raw = raw[0];
        tape.color = craw.map(sigmoid);
        RadianceSample {
            color: tape.color,
            density: softplus(raw[0]),
        }
    }

    fn backward(
        &self,
        prep: &StyleParams,
        tape: &SirenTape,
        d_density: f64,
        d_color: [f64; 3],
        grad: &mut StyleParams,
    ) {
        let w = self.spec.width;
        let depth = self.spec.depth;
        let d_raw = d_density * sigmoid(tape.density_raw);
        let mut d_craw = [0.0; 3];
        for k in 0..3 {
            let c = tape.color[k];
            d_craw[k] = d_color[k] * c * (1.0 - c);
        }
        let mut dh = vec![0.0; w];
        let mut tmp = vec![0.0; w];
        self.density_head.apply_transpose(&[d_raw], &mut dh);
        self.color_head.apply_transpose(&d_craw, &mut tmp);
        for (a, b) in dh.iter_mut().zip(&tmp) {
            *a += b;
        }
        let mut du = vec![0.0; w];
        for l in (0..depth).rev() {
            let u = &tape.u[w * l..w * (l + 1)];
            let cos = &tape.cos[w * l..w * (l + 1)];
            let fr = &prep.freqs[l];
            let gf = &mut grad.freqs[l];
            let gp = &mut grad.phases[l];
            for j in 0..w {
                let dpre = dh[j] * cos[j];
                gf[j] += dpre * u[j];
                gp[j] += dpre;
                du[j] = dpre * fr[j];
            }
            if l > 0 {
                self.layers[l].apply_transpose(&du, &mut dh);
            }
        }
    }

    fn zero_grad(&self, _prep: &StyleParams) -> StyleParams {
        StyleParams::zeros(&self.style_shape())
    }

    fn finish_grad(&self, _prep: &StyleParams, grad: StyleParams) -> StyleParams {
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::sample_latent;
    use rand::Rng;

    fn small() -> SirenGenerator {
        SirenGenerator::new(&GeneratorSpec::siren(4, 16, 8, 3)).unwrap()
    }

    #[test]
    fn same_seed_same_weights() {
        let a = small();
        let b = small();
        assert_eq!(a.layers[2].w, b.layers[2].w);
        assert_eq!(a.freq_map.matrix, b.freq_map.matrix);
        let c = SirenGenerator::new(&GeneratorSpec::siren(4, 16, 8, 4)).unwrap();
        assert_ne!(a.layers[2].w, c.layers[2].w);
    }

    #[test]
    fn zero_latent_maps_to_offsets() {
        let g = small();
        let s = g.map_latent(&LatentCode(vec![0.0; 8])).unwrap();
        for l in 0..4 {
            assert_eq!(s.freqs[l], g.freq_map.offset);
            assert_eq!(s.phases[l], g.phase_map.offset);
        }
    }

    #[test]
    fn map_latent_rejects_wrong_dim() {
        assert!(matches!(
            small().map_latent(&LatentCode(vec![0.0; 3])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn mapping_jacobian_matches_finite_differences() {
        let g = small();
        let z = sample_latent(5, 8).unwrap();
        let h = 1e-4;
        let a = g.freq_map(1);
        for j in 0..8 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp.0[j] += h;
            zm.0[j] -= h;
            let fp = &g.map_latent(&zp).unwrap().freqs[1];
            let fm = &g.map_latent(&zm).unwrap().freqs[1];
            for i in 0..16 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                let exact = a.matrix[i * 8 + j];
                assert!((fd - exact).abs() <= 1e-6 * exact.abs().max(1e-3), "{fd} vs {exact}");
            }
        }
    }

    #[test]
    fn outputs_in_range_and_deterministic() {
        let g = small();
        let mut r = rng(11);
        for i in 0..1000 {
            let z = sample_latent(i, 8).unwrap();
            let s = g.map_latent(&z).unwrap();
            let prep = g.prepare(&s).unwrap();
            let p = Vec3::new(r.gen_range(-1.5..1.5), r.gen_range(-1.5..1.5), r.gen_range(-1.5..1.5));
            let a = g.eval(&prep, p);
            assert_eq!(a, g.eval(&prep, p));
            assert!(a.density >= 0.0);
            assert!(a.color.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn density_gradient_wrt_first_layer_freqs_matches_fd() {
        let g = small();
        let s = g.map_latent(&sample_latent(2, 8).unwrap()).unwrap();
        let p = Vec3::new(0.1, -0.2, 0.3);
        let prep = g.prepare(&s).unwrap();
        let mut tape = g.new_tape();
        g.eval_taped(&prep, p, &mut tape);
        let mut grad = g.zero_grad(&prep);
        g.backward(&prep, &tape, 1.0, [0.0; 3], &mut grad);
        for j in 0..16 {
            let h = 1e-4 * (1.0 + s.freqs[1][j].abs());
            let mut sp = s.clone();
            let mut sm = s.clone();
            sp.freqs[1][j] += h;
            sm.freqs[1][j] -= h;
            let fp = g.eval(&g.prepare(&sp).unwrap(), p).density;
            let fm = g.eval(&g.prepare(&sm).unwrap(), p).density;
            let fd = (fp - fm) / (2.0 * h);
            let an = grad.freqs[1][j];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!((an - fd).abs() / denom < 1e-4, "coord {j}: {an} vs {fd}");
        }
    }
}
