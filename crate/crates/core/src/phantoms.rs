//! Synthetic phantoms and on-disk datasets.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tomo::io::{read_image_raw, write_image_raw};
use crate::tomo::{HuMap, Image};

const SUPERSAMPLE: usize = 4;
const MIN_SIZE: usize = 16;

/// An ellipse on the `[-1, 1]^2` field of view (y pointing up).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EllipseSpec {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    /// Counter-clockwise rotation in radians.
    pub rotation: f64,
    pub intensity: f64,
}

impl EllipseSpec {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_axes.0).powi(2) + (v / self.semi_axes.1).powi(2) <= 1.0
    }
}

/// Rasterizes a sum of ellipses with 4x4 supersampling, clamped to `[0, 1]`.
pub fn rasterize(ellipses: &[EllipseSpec], size: usize) -> Result<Image> {
    if let Some(e) = ellipses.iter().find(|e| !(e.semi_axes.0 > 0.0 && e.semi_axes.1 > 0.0)) {
        return Err(Error::Validation(format!("ellipse semi-axes must be positive: {e:?}")));
    }
    let n = size as f64;
    let sub = SUPERSAMPLE as f64;
    Ok(Image::from_fn(size, size, |row, col| {
        let mut acc = 0.0;
        for i in 0..SUPERSAMPLE {
            for j in 0..SUPERSAMPLE {
                let x = (col as f64 + (j as f64 + 0.5) / sub) / n * 2.0 - 1.0;
                let y = 1.0 - (row as f64 + (i as f64 + 0.5) / sub) / n * 2.0;
                acc += ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.intensity).sum::<f64>();
            }
        }
        (acc / (sub * sub)).clamp(0.0, 1.0) as f32
    }))
}

/// The modified (high-contrast) ten-ellipse Shepp-Logan head.
pub fn shepp_logan_ellipses() -> Vec<EllipseSpec> {
    const TABLE: [[f64; 6]; 10] = [
        // intensity, a, b, x0, y0, rotation (degrees)
        [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
        [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
        [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
        [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
        [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
        [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
        [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
        [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
        [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
        [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
    ];
    TABLE
        .iter()
        .map(|r| EllipseSpec {
            intensity: r[0],
            semi_axes: (r[1], r[2]),
            center: (r[3], r[4]),
            rotation: r[5].to_radians(),
        })
        .collect()
}

pub fn shepp_logan(size: usize) -> Result<Image> {
    check_size(size)?;
    rasterize(&shepp_logan_ellipses(), size)
}

/// Draws 5 to 12 ellipses: a body outline followed by interior structures.
pub fn random_ellipses(seed: u64) -> Vec<EllipseSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(5..=12);
    let mut out = Vec::with_capacity(count);
    let body = EllipseSpec {
        center: (rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)),
        semi_axes: (rng.gen_range(0.6..0.85), rng.gen_range(0.6..0.85)),
        rotation: rng.gen_range(0.0..std::f64::consts::PI),
        intensity: rng.gen_range(0.4..0.7),
    };
    out.push(body);
    for _ in 1..count {
        let r = 0.5 * rng.gen::<f64>().sqrt();
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        out.push(EllipseSpec {
            center: (body.center.0 + r * phi.cos(), body.center.1 + r * phi.sin()),
            semi_axes: (rng.gen_range(0.03..0.3), rng.gen_range(0.03..0.3)),
            rotation: rng.gen_range(0.0..std::f64::consts::PI),
            intensity: rng.gen_range(-0.3..0.4),
        });
    }
    out
}

pub fn random_phantom(size: usize, seed: u64) -> Result<Image> {
    check_size(size)?;
    rasterize(&random_ellipses(seed), size)
}

fn check_size(size: usize) -> Result<()> {
    if size < MIN_SIZE {
        return Err(Error::Validation(format!("phantom size {size} is below {MIN_SIZE}")));
    }
    Ok(())
}

pub fn to_hu(img: &Image) -> Result<Image> {
    img.to_hu()
}

pub fn from_hu(img: &Image) -> Result<Image> {
    img.from_hu()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomKind {
    Random,
    SheppLogan,
}

impl std::str::FromStr for PhantomKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "random" => Ok(PhantomKind::Random),
            "shepp-logan" => Ok(PhantomKind::SheppLogan),
            other => Err(format!("unknown phantom kind `{other}` (expected random or shepp-logan)")),
        }
    }
}

/// One row of `manifest.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub path: PathBuf,
    pub hu_map: HuMap,
}

pub const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "id,seed,path,hu_slope,hu_intercept";

/// Per-item seeds derived from a dataset seed.
pub fn item_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.next_u64()).collect()
}

/// Writes `count` phantoms and a manifest into `dir`. A non-empty `dir` is
/// refused unless `force` is set.
pub fn generate_dataset(
    dir: &Path,
    count: usize,
    seed: u64,
    size: usize,
    kind: PhantomKind,
    force: bool,
) -> Result<Vec<ManifestEntry>> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Validation(format!("{} is not empty; pass --force to overwrite", dir.display())));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    check_size(size)?;

    let mut entries = Vec::with_capacity(count);
    for (i, item_seed) in item_seeds(seed, count).into_iter().enumerate() {
        let img = match kind {
            PhantomKind::Random => random_phantom(size, item_seed)?,
            PhantomKind::SheppLogan => shepp_logan(size)?,
        };
        let name = format!("phantom_{i:05}.raw");
        write_image_raw(&img, &dir.join(&name))?;
        entries.push(ManifestEntry {
            id: format!("p{i:05}"),
            seed: item_seed,
            path: PathBuf::from(name),
            hu_map: HuMap::DEFAULT,
        });
    }
    write_manifest(dir, &entries)?;
    Ok(entries)
}

pub fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for e in entries {
        writeln!(text, "{},{},{},{},{}", e.id, e.seed, e.path.display(), e.hu_map.slope, e.hu_map.intercept).unwrap();
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad =
        |line: usize, reason: &str| Error::Format { path: path.clone(), reason: format!("line {line}: {reason}") };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(bad(i + 2, "expected 5 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 2, "bad number"));
            Ok(ManifestEntry {
                id: f[0].to_string(),
                seed: f[1].parse().map_err(|_| bad(i + 2, "bad seed"))?,
                path: PathBuf::from(f[2]),
                hu_map: HuMap { slope: num(f[3])?, intercept: num(f[4])? },
            })
        })
        .collect()
}

/// A loaded dataset: manifest rows paired with their images.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let entries = read_manifest(dir)?;
        let images =
            entries.iter().map(|e| read_image_raw(&dir.join(&e.path), Some(e.hu_map))).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { entries, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
