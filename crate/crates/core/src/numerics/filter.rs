//! Zero-padded FFT filtering of the rows of a 2-D array.

use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{shape_err, Result};

/// Filters rows of length `width` with a real, even frequency response of
/// length `padded` (a power of two at least `2 * width`, so circular
/// wraparound never reaches the kept samples).
///
/// The response may be modulated by per-frequency log-gains over the
/// `padded / 2 + 1` unique bins; the modulation is mirrored so the spatial
/// kernel stays real and even.
#[derive(Clone)]
pub struct RowFilter {
    width: usize,
    padded: usize,
    base: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for RowFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RowFilter")
            .field("width", &self.width)
            .field("padded", &self.padded)
            .finish()
    }
}

impl RowFilter {
    pub fn new(width: usize, base: Vec<f64>) -> Result<Self> {
        let padded = base.len();
        if width == 0 || padded < 2 * width || !padded.is_power_of_two() {
            return shape_err(format!(
                "row filter response length {padded} must be a power of two >= 2 * {width}"
            ));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            width,
            padded,
            base,
            forward: planner.plan_fft_forward(padded),
            inverse: planner.plan_fft_inverse(padded),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn padded(&self) -> usize {
        self.padded
    }

    /// Number of independent gain parameters.
    pub fn num_bins(&self) -> usize {
        self.padded / 2 + 1
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    fn fold(&self, f: usize) -> usize {
        f.min(self.padded - f)
    }

    /// Full-length response `base[f] * exp(g[fold(f)])`.
    pub fn response(&self, log_gains: Option<&[f64]>) -> Vec<f64> {
        match log_gains {
            None => self.base.clone(),
            Some(g) => (0..self.padded)
                .map(|f| self.base[f] * g[self.fold(f)].exp())
                .collect(),
        }
    }

    fn spectrum(&self, row: &[f64], buf: &mut [Complex64]) {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(if i < self.width { row[i] } else { 0.0 }, 0.0);
        }
        self.forward.process(buf);
    }

    /// Filters every row of `rows` (length a multiple of `width`).
    pub fn apply(&self, rows: &[f64], response: &[f64]) -> Result<Vec<f64>> {
        if rows.len() % self.width != 0 || response.len() != self.padded {
            return shape_err("row filter input length mismatch");
        }
        let scale = 1.0 / self.padded as f64;
        let mut out = vec![0.0; rows.len()];
        let mut buf = vec![Complex64::default(); self.padded];
        for (src, dst) in rows.chunks(self.width).zip(out.chunks_mut(self.width)) {
            self.spectrum(src, &mut buf);
            for (b, &r) in buf.iter_mut().zip(response) {
                *b *= r;
            }
            self.inverse.process(&mut buf);
            for (d, b) in dst.iter_mut().zip(&buf) {
                *d = b.re * scale;
            }
        }
        Ok(out)
    }

    /// Gradient of `<apply(rows, response(g)), grad_out>` with respect to the
    /// log-gains `g`.
    pub fn grad_log_gains(&self, rows: &[f64], grad_out: &[f64], response: &[f64]) -> Vec<f64> {
        let scale = 1.0 / self.padded as f64;
        let mut dresp = vec![0.0; self.padded];
        let mut sx = vec![Complex64::default(); self.padded];
        let mut sg = vec![Complex64::default(); self.padded];
        for (src, g) in rows.chunks(self.width).zip(grad_out.chunks(self.width)) {
            self.spectrum(src, &mut sx);
            // sum_n g[n] e^{+2 pi i f n / P}, via the unnormalised inverse transform
            for (i, b) in sg.iter_mut().enumerate() {
                *b = Complex64::new(if i < self.width { g[i] } else { 0.0 }, 0.0);
            }
            self.inverse.process(&mut sg);
            for f in 0..self.padded {
                dresp[f] += (sx[f] * sg[f]).re * scale;
            }
        }
        let mut dg = vec![0.0; self.num_bins()];
        for f in 0..self.padded {
            dg[self.fold(f)] += dresp[f] * response[f];
        }
        dg
    }
}
