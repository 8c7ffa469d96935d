//! Reconstruction fidelity metrics.
//!
//! PSNR and SSIM are computed on the normalized scale with a data range of
//! 1.0 unless a different range is passed; RMSE is reported in HU.

use crate::error::{Error, Result};
use crate::tomo::Image;

/// PSNR written to CSV files when the images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn mse(x: &Image, y: &Image) -> Result<f64> {
    x.check_shape(y, "metric")?;
    Ok(x.values().iter().zip(y.values()).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum::<f64>()
        / x.len() as f64)
}

pub fn rmse_hu(x: &Image, y: &Image) -> Result<f64> {
    x.check_shape(y, "rmse")?;
    let (mx, my) = match (x.hu_map(), y.hu_map()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Validation("RMSE in HU needs an HU map on both images".into())),
    };
    if mx != my {
        return Err(Error::Validation(format!("HU maps differ: {mx:?} vs {my:?}")));
    }
    let sum: f64 = x
        .values()
        .iter()
        .zip(y.values())
        .map(|(&a, &b)| (mx.to_hu(f64::from(a)) - my.to_hu(f64::from(b))).powi(2))
        .sum();
    Ok((sum / x.len() as f64).sqrt())
}

/// `10 log10(range^2 / MSE)`; identical images give `+inf`.
pub fn psnr(x: &Image, y: &Image, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::Validation(format!("data range {data_range} must be positive")));
    }
    let m = mse(x, y)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (data_range * data_range / m).log10() })
}

pub fn psnr_for_csv(db: f64) -> f64 {
    db.min(PSNR_CAP_DB)
}

pub fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> =
        (0..SSIM_WINDOW).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian filter keeping only positions where the whole window
/// fits.
fn filter_valid(data: &[f64], width: usize, height: usize, w: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = w.len();
    let (ow, oh) = (width + 1 - k, height + 1 - k);
    let mut horiz = vec![0.0; ow * height];
    for r in 0..height {
        for c in 0..ow {
            horiz[r * ow + c] = (0..k).map(|j| w[j] * data[r * width + c + j]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|i| w[i] * horiz[(r + i) * ow + c]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM over all 11x11 Gaussian windows (sigma 1.5) lying inside the
/// image.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    ssim_with_range(x, y, 1.0)
}

pub fn ssim_with_range(x: &Image, y: &Image, data_range: f64) -> Result<f64> {
    x.check_shape(y, "ssim")?;
    if x.width() < SSIM_WINDOW || x.height() < SSIM_WINDOW {
        return Err(Error::Validation(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            x.width(),
            x.height()
        )));
    }
    let (width, height) = (x.width(), x.height());
    let a: Vec<f64> = x.values().iter().map(|&v| f64::from(v)).collect();
    let b: Vec<f64> = y.values().iter().map(|&v| f64::from(v)).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let w = gaussian_window();
    let (mu_x, ow, oh) = filter_valid(&a, width, height, &w);
    let (mu_y, ..) = filter_valid(&b, width, height, &w);
    let (xx, ..) = filter_valid(&prod(&a, &a), width, height, &w);
    let (yy, ..) = filter_valid(&prod(&b, &b), width, height, &w);
    let (xy, ..) = filter_valid(&prod(&a, &b), width, height, &w);

    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let total: f64 = (0..ow * oh)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / (ow * oh) as f64)
}

/// One row of an evaluation table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub rmse_hu: f64,
    pub psnr_db: f64,
    /// Clipped to `[0, 1]`.
    pub ssim: f64,
    pub data_range: f64,
}

impl MetricReport {
    pub fn compute(recon: &Image, reference: &Image) -> Result<Self> {
        Ok(MetricReport {
            rmse_hu: rmse_hu(recon, reference)?,
            psnr_db: psnr(recon, reference, 1.0)?,
            ssim: ssim(recon, reference)?.clamp(0.0, 1.0),
            data_range: 1.0,
        })
    }

    pub fn ssim_pct(&self) -> f64 {
        100.0 * self.ssim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(n, n, |_, _| rng.gen::<f32>())
    }

    #[test]
    fn rmse_cases() {
        let x = noise(8, 1);
        assert_eq!(rmse_hu(&x, &x).unwrap(), 0.0);
        let y = x.map(|v| v + 0.01);
        assert!((rmse_hu(&x, &y).unwrap() - 30.0).abs() < 1e-3);
        assert_eq!(rmse_hu(&x, &y).unwrap(), rmse_hu(&y, &x).unwrap());
    }

    #[test]
    fn rmse_rejects_mismatched_maps() {
        let x = noise(8, 1);
        let y = x.clone().with_hu_map(Some(crate::tomo::HuMap { slope: 1.0, intercept: 0.0 }));
        assert!(rmse_hu(&x, &y).is_err());
        assert!(rmse_hu(&x, &noise(9, 1)).is_err());
    }

    #[test]
    fn psnr_cases() {
        let x = Image::zeros(10, 10);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(psnr_for_csv(f64::INFINITY), PSNR_CAP_DB);
        assert!(psnr(&x, &x, 0.0).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let x = noise(24, 2);
        let y = noise(24, 3);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        assert!(ssim(&noise(10, 1), &noise(10, 2)).is_err());
    }

    #[test]
    fn psnr_drops_with_noise_amplitude() {
        let x = noise(32, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e: Vec<f32> = (0..x.len()).map(|_| rng.gen::<f32>() - 0.5).collect();
        let small = x.zip_map(&x.with_values(e.clone()), |a, b| a + 0.01 * b).unwrap();
        let large = x.zip_map(&x.with_values(e), |a, b| a + 0.05 * b).unwrap();
        assert!(psnr(&large, &x, 1.0).unwrap() < psnr(&small, &x, 1.0).unwrap());
    }

    /// Direct per-window evaluation with the 2-D Gaussian weights.
    fn ssim_direct(x: &Image, y: &Image) -> f64 {
        let w = gaussian_window();
        let k = w.len();
        let n = x.width();
        let (c1, c2) = (SSIM_K1.powi(2), SSIM_K2.powi(2));
        let px = |img: &Image, r: usize, c: usize| f64::from(img.get(r, c));
        let mut total = 0.0;
        let mut count = 0;
        for r0 in 0..=n - k {
            for c0 in 0..=n - k {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        mx += w[i] * w[j] * px(x, r0 + i, c0 + j);
                        my += w[i] * w[j] * px(y, r0 + i, c0 + j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let (a, b) = (px(x, r0 + i, c0 + j) - mx, px(y, r0 + i, c0 + j) - my);
                        vx += w[i] * w[j] * a * a;
                        vy += w[i] * w[j] * b * b;
                        cov += w[i] * w[j] * a * b;
                    }
                }
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_direct_window_formula() {
        for seed in 0..5 {
            let x = noise(16, 10 + seed);
            let y = x.zip_map(&noise(16, 50 + seed), |a, b| 0.7 * a + 0.3 * b).unwrap();
            assert!((ssim(&x, &y).unwrap() - ssim_direct(&x, &y)).abs() < 1e-6);
        }
    }

    #[test]
    fn ssim_of_inverted_binary_image_is_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = Image::from_fn(16, 16, |_, _| if rng.gen::<bool>() { 1.0 } else { 0.0 });
        let inv = x.map(|v| 1.0 - v);
        assert!(ssim(&x, &inv).unwrap() < 0.5);
    }

    #[test]
    fn psnr_of_known_mse() {
        // 16 of 100 pixels off by 0.25 gives an MSE of exactly 0.01.
        let x = Image::zeros(10, 10);
        let y = Image::from_fn(10, 10, |r, c| if r * 10 + c < 16 { 0.25 } else { 0.0 });
        assert!((psnr(&x, &y, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }
}
