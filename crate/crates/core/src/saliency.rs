//! Saliency heatmaps and their binarized relevance masks.
//!
//! A [`Heatmap`] is a dense row-major grid of per-pixel relevance values in
//! `[0, 1]` at image resolution. Overlap scoring never works on the raw
//! values; it works on a [`BinaryMask`] obtained through [`binarize`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Quantile applied when no binarization mode is configured: keep the top 30%
/// most salient pixels.
pub const DEFAULT_QUANTILE: f64 = 0.7;

#[derive(Debug, Error, PartialEq)]
pub enum SaliencyError {
    #[error("heatmap dimensions must be positive, got {width}x{height}")]
    ZeroDimension { width: u32, height: u32 },
    #[error("heatmap expects {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("heatmap value {value} at index {index} is outside [0, 1]")]
    ValueOutOfRange { index: usize, value: f32 },
    #[error("invalid binarization mode: {0}")]
    InvalidMode(String),
}

/// Dense saliency grid, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl Heatmap {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self, SaliencyError> {
        if width == 0 || height == 0 {
            return Err(SaliencyError::ZeroDimension { width, height });
        }
        let expected = width as usize * height as usize;
        if values.len() != expected {
            return Err(SaliencyError::LengthMismatch {
                expected,
                actual: values.len(),
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(SaliencyError::ValueOutOfRange { index, value });
        }
        Ok(Heatmap {
            width,
            height,
            values,
        })
    }

    /// A heatmap with every cell set to `value`.
    pub fn filled(width: u32, height: u32, value: f32) -> Result<Self, SaliencyError> {
        Heatmap::new(width, height, vec![value; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: u32, col: u32) -> f32 {
        self.values[row as usize * self.width as usize + col as usize]
    }

    pub fn max_value(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }
}

/// How a continuous heatmap becomes a set of relevant pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum BinarizeMode {
    /// Keep pixels whose value is at least `t`.
    Absolute(f64),
    /// Keep pixels at or above the empirical `q`-quantile of all values.
    Quantile(f64),
}

impl BinarizeMode {
    pub fn validate(&self) -> Result<(), SaliencyError> {
        match *self {
            BinarizeMode::Absolute(t) if (0.0..=1.0).contains(&t) => Ok(()),
            BinarizeMode::Quantile(q) if q > 0.0 && q < 1.0 => Ok(()),
            other => Err(SaliencyError::InvalidMode(other.to_string())),
        }
    }
}

impl Default for BinarizeMode {
    fn default() -> Self {
        BinarizeMode::Quantile(DEFAULT_QUANTILE)
    }
}

impl fmt::Display for BinarizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BinarizeMode::Absolute(t) => write!(f, "absolute:{t}"),
            BinarizeMode::Quantile(q) => write!(f, "quantile:{q}"),
        }
    }
}

impl FromStr for BinarizeMode {
    type Err = SaliencyError;

    /// Parses `absolute:<t>` or `quantile:<q>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SaliencyError::InvalidMode(s.to_string());
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        let mode = match kind.trim() {
            "absolute" => BinarizeMode::Absolute(value),
            "quantile" => BinarizeMode::Quantile(value),
            _ => return Err(bad()),
        };
        mode.validate()?;
        Ok(mode)
    }
}

/// Row-major boolean relevance mask.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
    threshold_used: f64,
}

impl BinaryMask {
    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, SaliencyError> {
        if width == 0 || height == 0 {
            return Err(SaliencyError::ZeroDimension { width, height });
        }
        let expected = width as usize * height as usize;
        if bits.len() != expected {
            return Err(SaliencyError::LengthMismatch {
                expected,
                actual: bits.len(),
            });
        }
        Ok(BinaryMask {
            width,
            height,
            bits,
            threshold_used: f64::NAN,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Effective absolute threshold; NaN for masks built directly from bits.
    pub fn threshold_used(&self) -> f64 {
        self.threshold_used
    }

    pub fn is_set(&self, row: u32, col: u32) -> bool {
        self.bits[row as usize * self.width as usize + col as usize]
    }

    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        self.bits[row as usize * self.width as usize + col as usize] = value;
    }
}

/// Number of set pixels.
pub fn mask_area(mask: &BinaryMask) -> usize {
    mask.bits.iter().filter(|&&b| b).count()
}

/// Turns a heatmap into a relevance mask. Ties at the threshold are kept.
pub fn binarize(heatmap: &Heatmap, mode: BinarizeMode) -> Result<BinaryMask, SaliencyError> {
    mode.validate()?;
    let threshold = match mode {
        BinarizeMode::Absolute(t) => t,
        BinarizeMode::Quantile(q) => quantile_threshold(&heatmap.values, q),
    };
    let bits = heatmap
        .values
        .iter()
        .map(|&v| f64::from(v) >= threshold)
        .collect();
    Ok(BinaryMask {
        width: heatmap.width,
        height: heatmap.height,
        bits,
        threshold_used: threshold,
    })
}

/// Smallest threshold that keeps `ceil((1 - q) * n)` cells when all values
/// are distinct.
fn quantile_threshold(values: &[f32], q: f64) -> f64 {
    let n = values.len();
    // the epsilon absorbs representation error in (1 - q), e.g. 1 - 0.7
    let keep = (((1.0 - q) * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let mut sorted = values.to_vec();
    let (_, nth, _) = sorted.select_nth_unstable_by(n - keep, f32::total_cmp);
    f64::from(*nth)
}
