use crate::renderer::Image;
use crate::{Error, Result};

/// Mean squared difference over all channel values.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height || a.data.len() != b.data.len() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.data.is_empty() {
        return Err(Error::InvalidDimension("empty images".into()));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64)
}

/// `-10 log10(mse)` in dB for images in `[0, 1]`; identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        let z = Image::new(3, 2);
        let o = Image::filled(3, 2, [1.0; 3]);
        assert_eq!(mse(&z, &z).unwrap(), 0.0);
        assert_eq!(psnr(&z, &z).unwrap(), f64::INFINITY);
        assert_eq!(mse(&z, &o).unwrap(), 1.0);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        let mut half = Image::new(3, 2);
        for v in half.data.iter_mut().step_by(2) {
            *v = 0.5;
        }
        assert_eq!(mse(&z, &half).unwrap(), 0.125);
        let mut quarter = Image::new(4, 1);
        for v in quarter.data.iter_mut().step_by(4) {
            *v = 0.5;
        }
        assert_eq!(mse(&Image::new(4, 1), &quarter).unwrap(), 0.0625);
        assert!(mse(&z, &Image::new(2, 3)).is_err());
    }
}
