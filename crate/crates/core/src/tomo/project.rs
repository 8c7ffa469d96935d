use rayon::prelude::*;

use super::{Geometry, Image, Sinogram};
use crate::error::{Error, Result};

/// Discrete Radon transform by Joseph's method: each ray is stepped one
/// pixel at a time along its dominant axis, with linear interpolation across
/// the other axis. Pixels outside the grid contribute zero.
pub fn forward_project(img: &Image, geo: &Geometry) -> Result<Sinogram> {
    let all: Vec<usize> = (0..geo.n_angles_full()).collect();
    forward_project_views(img, geo, &all)
}

/// Forward projection restricted to the listed full-scan angle indices.
/// Rows equal the matching rows of [`forward_project`] bit for bit.
pub fn forward_project_views(img: &Image, geo: &Geometry, indices: &[usize]) -> Result<Sinogram> {
    geo.check_image(img)?;
    img.check_finite("forward projection input")?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= geo.n_angles_full()) {
        return Err(Error::Validation(format!("angle index {bad} outside the {}-view scan", geo.n_angles_full())));
    }
    let n = geo.image_size();
    let nd = geo.n_detectors();
    let half = (n as f64 - 1.0) / 2.0;
    let pixels = img.values();
    let angles = geo.angles();

    let mut values = vec![0.0f32; indices.len() * nd];
    values.par_chunks_mut(nd).zip(indices.par_iter()).for_each(|(row, &a)| {
        let (sin, cos) = angles[a].sin_cos();
        for (bin, out) in row.iter_mut().enumerate() {
            let s = geo.detector_offset(bin);
            *out = joseph_ray(pixels, n, half, s, cos, sin) as f32;
        }
    });
    Sinogram::new(nd, values, indices.to_vec())
}

/// Range of steps `k` for which `pos(k) = c0 - k * slope` can touch
/// `[-1, n)`, padded by one step. Steps outside add exactly zero.
fn crossing(n: usize, c0: f64, slope: f64) -> std::ops::Range<usize> {
    if slope.abs() < 1e-12 {
        return if c0 > -1.0 && c0 < n as f64 { 0..n } else { 0..0 };
    }
    let a = (c0 + 1.0) / slope;
    let b = (c0 - n as f64) / slope;
    let lo = (a.min(b).floor() - 1.0).max(0.0);
    let hi = (a.max(b).ceil() + 2.0).min(n as f64);
    if hi <= lo {
        0..0
    } else {
        lo as usize..hi as usize
    }
}

fn joseph_ray(pixels: &[f32], n: usize, half: f64, s: f64, cos: f64, sin: f64) -> f64 {
    let mut acc = 0.0f64;
    if cos.abs() >= sin.abs() {
        // Ray runs mostly along y: x = s / cos - y tan.
        let tan = sin / cos;
        for row in crossing(n, s / cos + half * tan + half, tan) {
            let y = row as f64 - half;
            let col = s / cos - y * tan + half;
            acc += lerp_line(&pixels[row * n..(row + 1) * n], col);
        }
        acc / cos.abs()
    } else {
        let cot = cos / sin;
        for col in crossing(n, s / sin + half * cot + half, cot) {
            let x = col as f64 - half;
            let row = s / sin - x * cot + half;
            acc += lerp_strided(pixels, n, col, row);
        }
        acc / sin.abs()
    }
}

#[inline]
fn lerp_line(line: &[f32], pos: f64) -> f64 {
    let base = pos.floor();
    let frac = pos - base;
    let i = base as isize;
    let at = |k: isize| -> f64 {
        if k >= 0 && (k as usize) < line.len() {
            f64::from(line[k as usize])
        } else {
            0.0
        }
    };
    (1.0 - frac) * at(i) + frac * at(i + 1)
}

#[inline]
fn lerp_strided(pixels: &[f32], n: usize, col: usize, pos: f64) -> f64 {
    let base = pos.floor();
    let frac = pos - base;
    let i = base as isize;
    let at = |k: isize| -> f64 {
        if k >= 0 && (k as usize) < n {
            f64::from(pixels[k as usize * n + col])
        } else {
            0.0
        }
    };
    (1.0 - frac) * at(i) + frac * at(i + 1)
}

/// Indices `floor(k * n_full / views)` for `k = 0..views`.
pub fn subsample_indices(n_full: usize, views: usize) -> Result<Vec<usize>> {
    if views == 0 || views > n_full {
        return Err(Error::Validation(format!("view count {views} outside [1, {n_full}]")));
    }
    Ok((0..views).map(|k| k * n_full / views).collect())
}

/// Keeps `views` evenly spaced rows of a full-scan sinogram.
pub fn subsample_views(sino: &Sinogram, views: usize, geo: &Geometry) -> Result<Sinogram> {
    sino.check_geometry(geo)?;
    if sino.n_angles() != geo.n_angles_full() {
        return Err(Error::Dimension(format!(
            "subsampling needs the full {}-view sinogram, got {} views",
            geo.n_angles_full(),
            sino.n_angles()
        )));
    }
    let indices = subsample_indices(geo.n_angles_full(), views)?;
    let mut values = Vec::with_capacity(views * sino.n_detectors());
    for &i in &indices {
        values.extend_from_slice(sino.row(i));
    }
    Sinogram::new(sino.n_detectors(), values, indices)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(n: usize, radius: f64) -> Image {
        // 8x8 supersampling per pixel for partial-coverage edges.
        let half = (n as f64 - 1.0) / 2.0;
        Image::from_fn(n, n, |r, c| {
            let mut hits = 0;
            for i in 0..8 {
                for j in 0..8 {
                    let y = r as f64 - half + (i as f64 + 0.5) / 8.0 - 0.5;
                    let x = c as f64 - half + (j as f64 + 0.5) / 8.0 - 0.5;
                    if x * x + y * y <= radius * radius {
                        hits += 1;
                    }
                }
            }
            hits as f32 / 64.0
        })
    }

    #[test]
    fn zero_image_projects_to_zero() {
        let geo = Geometry::parallel(16, 20).unwrap();
        let sino = forward_project(&Image::zeros(16, 16), &geo).unwrap();
        assert!(sino.values().iter().all(|&v| v == 0.0));
        assert_eq!(sino.n_angles(), 20);
    }

    #[test]
    fn disk_profile_matches_chord_length() {
        let n = 64;
        let radius = 28.0;
        let geo = Geometry::parallel(n, 36).unwrap();
        let sino = forward_project(&disk(n, radius), &geo).unwrap();
        for view in 0..sino.n_angles() {
            for (bin, &v) in sino.row(view).iter().enumerate() {
                let s = geo.detector_offset(bin);
                if s.abs() <= 0.9 * radius {
                    let chord = 2.0 * (radius * radius - s * s).sqrt();
                    assert!(((f64::from(v) - chord) / chord).abs() < 0.02, "view {view} bin {bin}");
                }
            }
        }
    }

    #[test]
    fn size_mismatch_is_dimension_error() {
        let geo = Geometry::parallel(16, 4).unwrap();
        assert!(matches!(forward_project(&Image::zeros(8, 8), &geo), Err(Error::Dimension(_))));
    }

    #[test]
    fn subsample_index_formula() {
        assert_eq!(subsample_indices(8, 4).unwrap(), vec![0, 2, 4, 6]);
        assert_eq!(subsample_indices(180, 18).unwrap(), (0..18).map(|k| 10 * k).collect::<Vec<_>>());
        assert_eq!(subsample_indices(7, 7).unwrap(), (0..7).collect::<Vec<_>>());
        assert!(subsample_indices(8, 0).is_err());
        assert!(subsample_indices(8, 9).is_err());
    }

    #[test]
    fn full_subsampling_is_identity() {
        let geo = Geometry::parallel(16, 10).unwrap();
        let img = disk(16, 5.0);
        let sino = forward_project(&img, &geo).unwrap();
        let same = subsample_views(&sino, 10, &geo).unwrap();
        assert_eq!(same, sino);
    }

    #[test]
    fn nested_view_sets() {
        for (n_full, v1, v2) in [(180, 90, 18), (180, 36, 18), (360, 72, 36), (576, 288, 18)] {
            let outer = subsample_indices(n_full, v1).unwrap();
            let inner = subsample_indices(n_full, v2).unwrap();
            assert!(inner.iter().all(|i| outer.contains(i)), "{n_full} {v1} {v2}");
        }
    }

    #[test]
    fn restricted_projection_matches_full_rows() {
        let geo = Geometry::parallel(24, 30).unwrap();
        let img = disk(24, 9.0).map(|v| v * 0.5 + 0.1);
        let full = forward_project(&img, &geo).unwrap();
        let idx = subsample_indices(30, 7).unwrap();
        let part = forward_project_views(&img, &geo, &idx).unwrap();
        assert_eq!(part, subsample_views(&full, 7, &geo).unwrap());
        assert!(forward_project_views(&img, &geo, &[30]).is_err());
    }

    #[test]
    fn clipping_skips_only_zero_terms() {
        let n = 20;
        let half = (n as f64 - 1.0) / 2.0;
        let img = Image::from_fn(n, n, |r, c| 1.0 + (r * n + c) as f32 / 400.0);
        let geo = Geometry::parallel(n, 37).unwrap();
        for &theta in geo.angles() {
            let (sin, cos) = theta.sin_cos();
            for bin in 0..geo.n_detectors() {
                let s = geo.detector_offset(bin);
                let mut acc = 0.0;
                let full = if cos.abs() >= sin.abs() {
                    for row in 0..n {
                        let col = s / cos - (row as f64 - half) * (sin / cos) + half;
                        acc += lerp_line(&img.values()[row * n..(row + 1) * n], col);
                    }
                    acc / cos.abs()
                } else {
                    for col in 0..n {
                        let row = s / sin - (col as f64 - half) * (cos / sin) + half;
                        acc += lerp_strided(img.values(), n, col, row);
                    }
                    acc / sin.abs()
                };
                assert_eq!(joseph_ray(img.values(), n, half, s, cos, sin), full);
            }
        }
    }
}
