//! One-dimensional FFT helpers over `rustfft`.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{invalid, Result};

pub use rustfft::num_complex::Complex64 as Complex;

/// Forward DFT of a real signal, `X[k] = sum_n x[n] e^{-2 pi i k n / N}`.
pub fn fft_1d(signal: &[f64]) -> Result<Vec<Complex64>> {
    if signal.is_empty() {
        return invalid("fft of an empty signal");
    }
    let mut buf: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf);
    Ok(buf)
}

/// Inverse DFT including the `1/N` normalisation.
pub fn ifft_1d(spectrum: &[Complex64]) -> Result<Vec<Complex64>> {
    if spectrum.is_empty() {
        return invalid("ifft of an empty spectrum");
    }
    let mut buf = spectrum.to_vec();
    ifft_in_place(&mut buf);
    Ok(buf)
}

pub(crate) fn fft_in_place(buf: &mut [Complex64]) {
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(buf.len()).process(buf);
}

pub(crate) fn ifft_in_place(buf: &mut [Complex64]) {
    let mut planner = FftPlanner::new();
    planner.plan_fft_inverse(buf.len()).process(buf);
    let s = 1.0 / buf.len() as f64;
    for v in buf.iter_mut() {
        *v *= s;
    }
}

/// Smallest power of two that is `>= n`.
pub fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}
