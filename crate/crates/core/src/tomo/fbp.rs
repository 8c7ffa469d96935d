use std::f64::consts::PI;

use rayon::prelude::*;

use super::filter::ramp_filter_with_spacing;
use super::{Geometry, Image, Sinogram, Window};
use crate::error::{Error, Result};

/// Pixel-driven backprojection with linear interpolation along the detector,
/// weighted by `pi / views` so reconstructions stay on one intensity scale
/// whatever the number of views.
pub fn backproject(sino: &Sinogram, geo: &Geometry) -> Result<Image> {
    sino.check_geometry(geo)?;
    let views = sino.n_angles();
    if views == 0 {
        return Err(Error::Validation("cannot backproject an empty angle set".into()));
    }
    let n = geo.image_size();
    let nd = geo.n_detectors();
    let half = (n as f64 - 1.0) / 2.0;
    let centre = (nd as f64 - 1.0) / 2.0;
    let inv_spacing = 1.0 / geo.detector_spacing();
    let trig: Vec<(f64, f64)> = sino
        .angle_indices()
        .iter()
        .map(|&i| {
            let (s, c) = geo.angles()[i].sin_cos();
            (c * inv_spacing, s * inv_spacing)
        })
        .collect();
    let weight = PI / views as f64;

    let mut values = vec![0.0f32; n * n];
    values.par_chunks_mut(n).enumerate().for_each(|(row, line)| {
        let y = row as f64 - half;
        for (col, out) in line.iter_mut().enumerate() {
            let x = col as f64 - half;
            let mut acc = 0.0f64;
            for (view, &(c, s)) in trig.iter().enumerate() {
                let pos = x * c + y * s + centre;
                let base = pos.floor();
                let frac = pos - base;
                let i = base as isize;
                let data = sino.row(view);
                if i >= 0 && (i as usize) < nd {
                    acc += (1.0 - frac) * f64::from(data[i as usize]);
                }
                if i + 1 >= 0 && ((i + 1) as usize) < nd {
                    acc += frac * f64::from(data[(i + 1) as usize]);
                }
            }
            *out = (acc * weight) as f32;
        }
    });
    Image::new(n, n, values)
}

/// Filtered backprojection of the views present in `sino`.
pub fn fbp(sino: &Sinogram, geo: &Geometry, window: Window) -> Result<Image> {
    sino.check_geometry(geo)?;
    if sino.n_angles() == 0 {
        return Err(Error::Validation("cannot reconstruct from an empty angle set".into()));
    }
    let filtered = ramp_filter_with_spacing(sino, window, geo.detector_spacing())?;
    backproject(&filtered, geo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tomo::{forward_project, subsample_views};

    fn disk(n: usize, radius: f64) -> Image {
        crate::phantoms::rasterize(
            &[crate::phantoms::EllipseSpec {
                center: (0.0, 0.0),
                semi_axes: (radius / n as f64 * 2.0, radius / n as f64 * 2.0),
                rotation: 0.0,
                intensity: 1.0,
            }],
            n,
        )
        .unwrap()
    }

    #[test]
    fn zero_sinogram_gives_zero_image() {
        let geo = Geometry::parallel(16, 12).unwrap();
        let img = fbp(&Sinogram::zeros(&geo), &geo, Window::RamLak).unwrap();
        assert_eq!(img.max_abs(), 0.0);
    }

    #[test]
    fn empty_angle_set_is_rejected() {
        let geo = Geometry::parallel(16, 12).unwrap();
        let empty = Sinogram::new(geo.n_detectors(), vec![], vec![]).unwrap();
        assert!(matches!(fbp(&empty, &geo, Window::RamLak), Err(Error::Validation(_))));
    }

    #[test]
    fn sparse_views_produce_streaks() {
        let n = 64;
        let geo = Geometry::parallel(n, 180).unwrap();
        let truth = disk(n, 18.0);
        let sino = forward_project(&truth, &geo).unwrap();
        let full = fbp(&sino, &geo, Window::RamLak).unwrap();
        let sparse = fbp(&subsample_views(&sino, 18, &geo).unwrap(), &geo, Window::RamLak).unwrap();
        let full_err = full.max_abs_diff(&truth).unwrap();
        let sparse_err = sparse.max_abs_diff(&truth).unwrap();
        assert!(sparse_err > full_err, "sparse {sparse_err} vs full {full_err}");
    }

    #[test]
    fn disk_interior_is_recovered() {
        let n = 64;
        let geo = Geometry::parallel(n, 180).unwrap();
        let truth = disk(n, 18.0);
        let rec = fbp(&forward_project(&truth, &geo).unwrap(), &geo, Window::RamLak).unwrap();
        let centre = rec.get(32, 32);
        assert!((centre - 1.0).abs() < 0.02, "centre {centre}");
    }
}
