use crate::error::{Error, Result};

/// Lowest reflectivity kept after ingestion, in dBZ.
pub const MIN_DBZ: f32 = 0.0;
/// Highest reflectivity kept after ingestion, in dBZ.
pub const MAX_DBZ: f32 = 55.0;

/// One reflectivity field (dBZ, row-major) with its acquisition time.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGrid {
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ScanGrid {
    /// Builds a grid, clamping every value into `[0, 55]` dBZ.
    ///
    /// NaN values are rejected; infinities clamp to the nearest bound.
    pub fn new(timestamp: i64, height: usize, width: usize, mut values: Vec<f32>) -> Result<Self> {
        if height * width != values.len() {
            return Err(Error::shape(
                format!("{height}x{width} = {} values", height * width),
                format!("{} values", values.len()),
            ));
        }
        for (index, v) in values.iter_mut().enumerate() {
            if v.is_nan() {
                return Err(Error::NonFinite { index });
            }
            *v = v.clamp(MIN_DBZ, MAX_DBZ);
        }
        Ok(Self {
            timestamp,
            height,
            width,
            values,
        })
    }

    pub fn filled(timestamp: i64, height: usize, width: usize, value: f32) -> Self {
        Self {
            timestamp,
            height,
            width,
            values: vec![value.clamp(MIN_DBZ, MAX_DBZ); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Number of pixels.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    /// Returns a copy with every pixel shifted by `delta` (then clamped).
    pub fn shifted(&self, delta: f32) -> Self {
        let values = self
            .values
            .iter()
            .map(|&v| (v + delta).clamp(MIN_DBZ, MAX_DBZ))
            .collect();
        Self {
            values,
            ..self.clone()
        }
    }

    pub fn with_timestamp(mut self, timestamp: i64) -> Self {
        self.timestamp = timestamp;
        self
    }
}

/// Sum of squared pixel differences between two equally sized grids.
pub(crate) fn squared_error(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}
