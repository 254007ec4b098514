//! Matrix exponential by scaling and squaring with a truncated Taylor series.
//!
//! The argument is scaled by `2^-s` until its 1-norm is at most 1/2, the
//! Taylor series is summed until the next term no longer changes the sum
//! at machine precision, and the result is squared `s` times.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAX_TERMS: usize = 64;
const SCALED_NORM: f64 = 0.5;

fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Returns `exp(a * t)`.
pub fn matrix_exponential(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::InvalidConfig(format!("expm of a {}x{} matrix", a.nrows(), a.ncols())));
    }
    if !t.is_finite() || a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("matrix exponential input"));
    }
    let n = a.nrows();
    let scaled = a * t;
    let norm = norm1(&scaled);
    let squarings = if norm > SCALED_NORM { (norm / SCALED_NORM).log2().ceil() as i32 } else { 0 };
    let x = scaled / 2f64.powi(squarings);

    let mut sum = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut next = DMatrix::<f64>::zeros(n, n);
    for k in 1..=MAX_TERMS {
        next.gemm(1.0 / k as f64, &x, &term, 0.0);
        std::mem::swap(&mut term, &mut next);
        sum += &term;
        if norm1(&term) <= f64::EPSILON * norm1(&sum) {
            break;
        }
    }
    for _ in 0..squarings {
        next.gemm(1.0, &sum, &sum, 0.0);
        std::mem::swap(&mut sum, &mut next);
    }
    Ok(sum)
}
