//! Cyclic temporal position table and the motion-intensity embedding.
//!
//! The temporal table has 2N-1 rows. Row 1 is reserved for the reference
//! frame forever. Later frames walk the cycle 2..2N-1 and wrap back to 2,
//! never touching row 1 again. Any attention window (reference plus at most
//! N-1 recent frames plus the frame being generated) covers at most N
//! consecutive cycle slots out of 2N-2, so indices inside a window never
//! collide.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{ModelError, Result};

/// Index of the reserved reference row (1-based, matching the table).
pub const REFERENCE_INDEX: usize = 1;

fn check_window(n: usize) -> Result<()> {
    if n < 2 {
        return Err(ModelError::precondition(format!(
            "window length must be >= 2, got {n}"
        )));
    }
    Ok(())
}

/// Map a frame index (1-based) to its position-table index in `[1, 2N-1]`.
///
/// Frame 1 gets index 1; frames 2..=2N-1 get their own index; later frames
/// cycle over 2..=2N-1 with period 2N-2.
pub fn temporal_index(t: usize, n: usize) -> Result<usize> {
    check_window(n)?;
    if t < 1 {
        return Err(ModelError::precondition(format!(
            "frame index must be >= 1, got {t}"
        )));
    }
    let table = 2 * n - 1;
    if t <= table {
        Ok(t)
    } else {
        Ok((t - 2) % (2 * n - 2) + 2)
    }
}

/// Successor of a cycle index, skipping the reserved reference row.
pub fn cycle_next(index: usize, n: usize) -> usize {
    debug_assert!(index >= 2 && index <= 2 * n - 1);
    if index == 2 * n - 1 {
        2
    } else {
        index + 1
    }
}

/// Draw a uniform training offset from the cycle positions `2..=2N-1`.
pub fn training_offset(n: usize, rng: &mut impl Rng) -> usize {
    rng.gen_range(2..=2 * n - 1)
}

/// Position indices for a fixed-length training window of `n` frames:
/// the reference keeps index 1 and the following n-1 frames take
/// consecutive cycle indices starting at `offset`, wrapping inside
/// `2..=2N-1`.
pub fn training_positions(n: usize, offset: usize) -> Result<Vec<usize>> {
    check_window(n)?;
    if offset < 2 || offset > 2 * n - 1 {
        return Err(ModelError::precondition(format!(
            "offset must lie in [2, {}], got {offset}",
            2 * n - 1
        )));
    }
    let mut out = Vec::with_capacity(n);
    out.push(REFERENCE_INDEX);
    let mut idx = offset;
    for _ in 1..n {
        out.push(idx);
        idx = cycle_next(idx, n);
    }
    Ok(out)
}

fn sinusoid_row(pos: f64, dim: usize) -> Array1<f64> {
    Array1::from_shape_fn(dim, |i| {
        let exponent = (2 * (i / 2)) as f64 / dim as f64;
        let angle = pos / 10000f64.powf(exponent);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Fixed sinusoidal table of 2N-1 temporal positions.
#[derive(Debug, Clone)]
pub struct PositionTable {
    entries: Array2<f64>,
}

impl PositionTable {
    pub fn sinusoidal(n: usize, dim: usize) -> Result<Self> {
        check_window(n)?;
        let rows = 2 * n - 1;
        let mut entries = Array2::zeros((rows, dim));
        for r in 0..rows {
            entries.row_mut(r).assign(&sinusoid_row(r as f64, dim));
        }
        Ok(PositionTable { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Row for a 1-based table index.
    pub fn row(&self, index: usize) -> ndarray::ArrayView1<'_, f64> {
        assert!(
            index >= 1 && index <= self.len(),
            "position index {index} outside [1, {}]",
            self.len()
        );
        self.entries.row(index - 1)
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }
}

/// Fixed sinusoidal embedding table over quantized motion intensities.
#[derive(Debug, Clone)]
pub struct IntensityTable {
    entries: Array2<f64>,
    bin_width: f64,
}

impl IntensityTable {
    pub fn sinusoidal(bins: usize, dim: usize, bin_width: f64) -> Result<Self> {
        if bins == 0 {
            return Err(ModelError::precondition("intensity_bins must be positive"));
        }
        if !(bin_width > 0.0) {
            return Err(ModelError::precondition(format!(
                "bin width must be positive, got {bin_width}"
            )));
        }
        let mut entries = Array2::zeros((bins, dim));
        for b in 0..bins {
            entries.row_mut(b).assign(&sinusoid_row(b as f64, dim));
        }
        Ok(IntensityTable { entries, bin_width })
    }

    pub fn bins(&self) -> usize {
        self.entries.nrows()
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    /// Quantize a non-negative intensity into a bin, clamping to the top bin.
    pub fn bin(&self, value: f64) -> Result<usize> {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(ModelError::precondition(format!(
                "intensity must be finite and >= 0, got {value}"
            )));
        }
        let raw = (value / self.bin_width).floor() as usize;
        Ok(raw.min(self.bins() - 1))
    }

    /// Embedding row for an intensity value.
    pub fn encode(&self, value: f64) -> Result<ndarray::ArrayView1<'_, f64>> {
        let b = self.bin(value)?;
        Ok(self.entries.row(b))
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }
}
