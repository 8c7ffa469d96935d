use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::Sinogram;
use crate::error::Result;

/// Apodization applied on top of the ramp response.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Window {
    #[default]
    RamLak,
    Hann,
}

impl std::str::FromStr for Window {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ram-lak" | "ramlak" => Ok(Window::RamLak),
            "hann" => Ok(Window::Hann),
            other => Err(format!("unknown filter window `{other}`")),
        }
    }
}

/// Frequency-domain ramp filter for rows of `n_detectors` samples.
///
/// The response is the DFT of the band-limited spatial ramp kernel
/// (`1/(4d^2)` at the origin, `-1/(pi k d)^2` at odd offsets, zero at even
/// ones) rather than a sampled `|f|`, which avoids the DC offset of the
/// latter. Rows are zero-padded to the next power of two at or above
/// `2 * n_detectors`.
pub struct RampFilter {
    n_detectors: usize,
    response: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl RampFilter {
    pub fn new(n_detectors: usize, spacing: f64, window: Window) -> Self {
        let len = (2 * n_detectors).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(len);
        let inverse = planner.plan_fft_inverse(len);

        let mut kernel: Vec<Complex<f64>> = (0..len)
            .map(|i| {
                let k = if i <= len / 2 { i as f64 } else { i as f64 - len as f64 };
                let value = if i == 0 {
                    1.0 / (4.0 * spacing * spacing)
                } else if (k as i64) % 2 != 0 {
                    -1.0 / (PI * k * spacing).powi(2)
                } else {
                    0.0
                };
                Complex::new(value, 0.0)
            })
            .collect();
        forward.process(&mut kernel);

        // The discrete convolution carries a factor of the sample spacing;
        // the 1/len of the inverse transform is folded in here as well.
        let response = kernel
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let f = if i <= len / 2 { i as f64 } else { (len - i) as f64 } / len as f64;
                let apod = match window {
                    Window::RamLak => 1.0,
                    Window::Hann => 0.5 * (1.0 + (2.0 * PI * f).cos()),
                };
                c.re * spacing * apod / len as f64
            })
            .collect();
        RampFilter { n_detectors, response, forward, inverse }
    }

    pub fn padded_len(&self) -> usize {
        self.response.len()
    }

    /// Frequency response (already scaled for the unnormalized inverse FFT).
    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn apply_row(&self, row: &[f32], out: &mut [f32]) {
        debug_assert_eq!(row.len(), self.n_detectors);
        let mut buf: Vec<Complex<f64>> = row
            .iter()
            .map(|&v| Complex::new(f64::from(v), 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(self.padded_len())
            .collect();
        self.forward.process(&mut buf);
        for (c, h) in buf.iter_mut().zip(&self.response) {
            *c *= h;
        }
        self.inverse.process(&mut buf);
        for (o, c) in out.iter_mut().zip(&buf) {
            *o = c.re as f32;
        }
    }

    pub fn apply(&self, sino: &Sinogram) -> Sinogram {
        let nd = self.n_detectors;
        let mut out = sino.clone();
        out.values_mut()
            .par_chunks_mut(nd)
            .zip(sino.values().par_chunks(nd))
            .for_each(|(dst, src)| self.apply_row(src, dst));
        out
    }
}

/// Ramp-filters every row of `sino` assuming unit detector spacing.
pub fn ramp_filter(sino: &Sinogram, window: Window) -> Result<Sinogram> {
    ramp_filter_with_spacing(sino, window, 1.0)
}

pub(crate) fn ramp_filter_with_spacing(sino: &Sinogram, window: Window, spacing: f64) -> Result<Sinogram> {
    let filter = RampFilter::new(sino.n_detectors(), spacing, window);
    Ok(filter.apply(sino))
}
