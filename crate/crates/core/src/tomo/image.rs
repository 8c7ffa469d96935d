use crate::error::{Error, Result};

/// Affine map between the normalized attenuation scale and Hounsfield Units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HuMap {
    pub slope: f64,
    pub intercept: f64,
}

impl HuMap {
    /// Maps normalized `[0, 1]` onto the `[-1000, 2000]` HU display window.
    pub const DEFAULT: HuMap = HuMap { slope: 3000.0, intercept: -1000.0 };

    pub fn to_hu(&self, value: f64) -> f64 {
        self.slope * value + self.intercept
    }

    pub fn from_hu(&self, hu: f64) -> f64 {
        (hu - self.intercept) / self.slope
    }
}

impl Default for HuMap {
    fn default() -> Self {
        HuMap::DEFAULT
    }
}

/// Scale the pixel values of an [`Image`] are expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Unit {
    #[default]
    Normalized,
    Hounsfield,
}

/// Row-major single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    values: Vec<f32>,
    hu_map: Option<HuMap>,
    unit: Unit,
}

impl Image {
    /// Builds an image on the normalized scale with the default HU map.
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Dimension(format!("{} values for a {width}x{height} image", values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite pixel at index {i}")));
        }
        Ok(Image { width, height, values, hu_map: Some(HuMap::DEFAULT), unit: Unit::Normalized })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Image { width, height, values: vec![0.0; width * height], hu_map: Some(HuMap::DEFAULT), unit: Unit::Normalized }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                values.push(f(row, col));
            }
        }
        Image { width, height, values, hu_map: Some(HuMap::DEFAULT), unit: Unit::Normalized }
    }

    pub fn with_hu_map(mut self, hu_map: Option<HuMap>) -> Self {
        self.hu_map = hu_map;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn hu_map(&self) -> Option<HuMap> {
        self.hu_map
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!("{what}: {}x{} vs {}x{}", self.width, self.height, other.width, other.height)))
        }
    }

    pub fn check_finite(&self, stage: &str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { stage: stage.to_string() })
        }
    }

    /// Same shape and metadata, new values.
    pub fn with_values(&self, values: Vec<f32>) -> Image {
        debug_assert_eq!(values.len(), self.values.len());
        Image { values, ..self.clone() }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        self.with_values(self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f32, f32) -> f32) -> Result<Image> {
        self.check_shape(other, "elementwise operation")?;
        Ok(self.with_values(self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect()))
    }

    pub fn add(&self, other: &Image) -> Result<Image> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Image) -> Result<Image> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f32) -> Image {
        self.map(|v| v * factor)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, &v| m.max(f64::from(v).abs()))
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v)).sum::<f64>() / self.values.len().max(1) as f64
    }

    pub fn mean_abs(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v).abs()).sum::<f64>() / self.values.len().max(1) as f64
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        self.check_shape(other, "difference")?;
        Ok(self.values.iter().zip(&other.values).fold(0.0f64, |m, (&a, &b)| m.max((f64::from(a) - f64::from(b)).abs())))
    }

    /// Converts to Hounsfield Units with the attached map.
    pub fn to_hu(&self) -> Result<Image> {
        let map = self.hu_map.ok_or_else(|| Error::Validation("image has no HU map".into()))?;
        if self.unit == Unit::Hounsfield {
            return Err(Error::Validation("image is already in HU".into()));
        }
        let mut out = self.map(|v| map.to_hu(f64::from(v)) as f32);
        out.unit = Unit::Hounsfield;
        Ok(out)
    }

    /// Converts an HU image back onto the normalized scale.
    pub fn from_hu(&self) -> Result<Image> {
        let map = self.hu_map.ok_or_else(|| Error::Validation("image has no HU map".into()))?;
        if self.unit == Unit::Normalized {
            return Err(Error::Validation("image is not in HU".into()));
        }
        let mut out = self.map(|v| map.from_hu(f64::from(v)) as f32);
        out.unit = Unit::Normalized;
        Ok(out)
    }
}
