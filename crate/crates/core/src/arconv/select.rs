use super::{HWField, KernelSpec};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Largest odd number not exceeding `x`: `x - [x is even]`.
pub fn phi(x: i64) -> i64 {
    x - i64::from(x % 2 == 0)
}

/// Sampling-point count for one dimension from the mean learned extent.
/// The raw count `floor(mean / coeff)` is clamped to `[1, k_max]` before the
/// parity rule, so degenerate means still yield a single centered point.
pub fn points_for(mean: f64, coeff: f64, k_max: usize) -> usize {
    let raw = (mean / coeff).floor();
    let raw = if raw.is_nan() { 1.0 } else { raw.clamp(1.0, k_max as f64) };
    phi(raw as i64) as usize
}

/// Kernel geometry from per-layer means of the height and width maps.
pub fn select_from_means(mean_h: f64, mean_w: f64, n: f64, m: f64, k_max: usize) -> Result<KernelSpec> {
    if !(n > 0.0 && m > 0.0) {
        return Err(Error::config(format!("modulation coefficients must be positive, got n={n} m={m}")));
    }
    if k_max == 0 || k_max % 2 == 0 {
        return Err(Error::config(format!("k_max must be odd and positive, got {k_max}")));
    }
    Ok(KernelSpec::new(points_for(mean_h, n, k_max), points_for(mean_w, m, k_max)))
}

/// Mean over batch, height and width of each map, then the parity rule.
/// No gradient flows through this choice.
pub fn select_points<T: Real>(hw: &HWField<T>, n: f64, m: f64, k_max: usize) -> Result<KernelSpec> {
    let mean_h = hw.h.mean().to_f64().unwrap_or(f64::NAN);
    let mean_w = hw.w.mean().to_f64().unwrap_or(f64::NAN);
    select_from_means(mean_h, mean_w, n, m, k_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    #[test]
    fn phi_rounds_even_down() {
        assert_eq!(phi(4), 3);
        assert_eq!(phi(5), 5);
        assert_eq!(phi(1), 1);
        assert_eq!(phi(8), 7);
    }

    #[test]
    fn rule_arithmetic() {
        assert_eq!(points_for(9.5, 2.375, 7), 3);
        assert_eq!(points_for(0.4, 1.0, 7), 1);
        assert_eq!(points_for(100.0, 1.0, 7), 7);
    }

    #[test]
    fn field_means_drive_selection() {
        let s = Shape::new(2, 1, 4, 4);
        let hw = HWField {
            h: Tensor::<f64>::full(s, 9.5),
            w: Tensor::<f64>::full(s, 12.0),
        };
        let spec = select_points(&hw, 2.375, 2.375, 7).unwrap();
        assert_eq!((spec.kh, spec.kw), (3, 5));
        assert!(!spec.frozen);
        assert_eq!(spec.points(), 15);
    }

    #[test]
    fn rejects_bad_coefficients() {
        assert!(select_from_means(1.0, 1.0, 0.0, 1.0, 7).is_err());
        assert!(select_from_means(1.0, 1.0, 1.0, 1.0, 6).is_err());
    }
}
