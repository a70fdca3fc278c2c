//! Mean and sample standard deviation over score samples.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Mean, sample standard deviation and sample count of one cell.
///
/// `std` is the `n - 1` (Bessel-corrected) estimate. For `n == 1` it is
/// reported as zero and [`Summary::is_degenerate`] returns true.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary<F = f64> {
    pub mean: F,
    pub std: F,
    pub n: usize,
}

impl<F: Scalar> Summary<F> {
    /// Summarizes `values`; `None` when there are no values.
    pub fn of(values: &[F]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mean = mean(values)?;
        let std = sample_std_with_mean(values, mean);
        Some(Self {
            mean,
            std,
            n: values.len(),
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.n < 2
    }
}

/// Arithmetic mean; `None` for an empty slice.
pub fn mean<F: Scalar>(values: &[F]) -> Option<F> {
    if values.is_empty() {
        return None;
    }
    // Kahan-compensated sum keeps large pools of similar scores accurate.
    let mut sum = F::zero();
    let mut carry = F::zero();
    for &v in values {
        let y = v - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    Some(sum / F::from_count(values.len()))
}

/// Sample standard deviation (`n - 1` denominator); zero for fewer than two values.
pub fn sample_std<F: Scalar>(values: &[F]) -> F {
    match mean(values) {
        Some(m) => sample_std_with_mean(values, m),
        None => F::zero(),
    }
}

fn sample_std_with_mean<F: Scalar>(values: &[F], mean: F) -> F {
    if values.len() < 2 {
        return F::zero();
    }
    let ss = values.iter().fold(F::zero(), |acc, &v| {
        let d = v - mean;
        acc + d * d
    });
    (ss / F::from_count(values.len() - 1)).sqrt()
}
