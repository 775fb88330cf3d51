//! Hilbert projective metric on the positive orthant and Birkhoff's
//! contraction bound for positive matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serde_util::lossy_f64;

/// Entries below this are treated as zero: the matrix then has an infinite
/// projective diameter.
pub const ZERO_ENTRY: f64 = 1e-280;

/// Column count up to which the diameter is computed over all column pairs.
pub const EXACT_COLUMNS: usize = 64;

/// A vector with strictly positive, finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveRay {
    values: Vec<f64>,
}

impl PositiveRay {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "ray entries must be positive and finite, got {} at index {i}",
                values[i]
            )));
        }
        Ok(PositiveRay { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// `ln(max_i x_i / y_i) - ln(min_i x_i / y_i)`.
pub fn hilbert_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    let x = PositiveRay::new(x.to_vec())?;
    let y = PositiveRay::new(y.to_vec())?;
    Ok(ray_distance(&x, &y))
}

pub fn ray_distance(x: &PositiveRay, y: &PositiveRay) -> f64 {
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for (a, b) in x.values.iter().zip(&y.values) {
        let d = a.ln() - b.ln();
        hi = hi.max(d);
        lo = lo.min(d);
    }
    if hi < lo {
        0.0
    } else {
        hi - lo
    }
}

/// Same metric for vectors given by their logarithms.
pub fn hilbert_distance_log(lx: &[f64], ly: &[f64]) -> f64 {
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for (a, b) in lx.iter().zip(ly) {
        let d = a - b;
        hi = hi.max(d);
        lo = lo.min(d);
    }
    if hi < lo {
        0.0
    } else {
        hi - lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diameter {
    #[serde(with = "lossy_f64")]
    pub value: f64,
    /// Some entry is (numerically) zero.
    pub infinite: bool,
    /// False when only a subset of column pairs was examined; the value is
    /// then a lower bound.
    pub exact: bool,
}

/// Largest Hilbert distance between two columns of a row-major `rows x cols`
/// matrix, i.e. the diameter of the image of the open orthant.
pub fn projective_diameter(values: &[f64], rows: usize, cols: usize) -> Result<Diameter> {
    if values.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::LengthMismatch {
            expected: rows * cols,
            actual: values.len(),
        });
    }
    if values.iter().any(|&v| !(v >= ZERO_ENTRY) || !v.is_finite()) {
        return Ok(Diameter {
            value: f64::INFINITY,
            infinite: true,
            exact: true,
        });
    }
    let logs: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let picked: Vec<usize> = if cols <= EXACT_COLUMNS {
        (0..cols).collect()
    } else {
        let mut p: Vec<usize> = (0..EXACT_COLUMNS)
            .map(|k| ((k as f64) * (cols - 1) as f64 / (EXACT_COLUMNS - 1) as f64).round() as usize)
            .collect();
        p.dedup();
        p
    };
    let mut best = 0.0f64;
    for (a, &j) in picked.iter().enumerate() {
        for &k in &picked[a + 1..] {
            let mut hi = f64::NEG_INFINITY;
            let mut lo = f64::INFINITY;
            for i in 0..rows {
                let d = logs[i * cols + j] - logs[i * cols + k];
                hi = hi.max(d);
                lo = lo.min(d);
            }
            best = best.max(hi - lo);
        }
    }
    Ok(Diameter {
        value: best,
        infinite: false,
        exact: cols <= EXACT_COLUMNS,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contraction {
    /// `tanh(diameter / 4)`, or 1 without a guarantee.
    pub ratio: f64,
    pub diameter: Diameter,
    /// False when the diameter is infinite.
    pub guaranteed: bool,
}

pub fn birkhoff_contraction(values: &[f64], rows: usize, cols: usize) -> Result<Contraction> {
    let diameter = projective_diameter(values, rows, cols)?;
    if diameter.infinite {
        return Ok(Contraction {
            ratio: 1.0,
            diameter,
            guaranteed: false,
        });
    }
    Ok(Contraction {
        ratio: (diameter.value / 4.0).tanh(),
        diameter,
        guaranteed: true,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomogeneityCheck {
    pub passed: bool,
    /// Largest `d(map x, map y) - p d(x, y)` seen.
    pub worst_excess: f64,
    /// Index of the first sample pair that violated the bound.
    pub witness: Option<usize>,
}

/// Checks `d_H(map(x), map(y)) <= p d_H(x, y) + 1e-10` over the sample pairs.
pub fn homogeneous_map_contraction_check<F>(map: F, p: f64, samples: &[(Vec<f64>, Vec<f64>)]) -> Result<HomogeneityCheck>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut worst = f64::NEG_INFINITY;
    let mut witness = None;
    for (k, (x, y)) in samples.iter().enumerate() {
        let d_in = hilbert_distance(x, y)?;
        let d_out = hilbert_distance(&map(x)?, &map(y)?)?;
        let excess = d_out - p * d_in;
        if excess > worst {
            worst = excess;
        }
        if excess > 1e-10 && witness.is_none() {
            witness = Some(k);
        }
    }
    Ok(HomogeneityCheck {
        passed: witness.is_none(),
        worst_excess: worst,
        witness,
    })
}
