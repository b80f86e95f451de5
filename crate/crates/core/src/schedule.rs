//! Learning-rate schedule: linear warmup, then cosine decay to zero.

use std::f64::consts::PI;

/// Learning rate at fractional `epoch` (clamped to `[0, epochs]`).
pub fn lr_at(epoch: f64, epochs: f64, warmup_epochs: f64, peak: f64) -> f64 {
    let e = epoch.clamp(0.0, epochs);
    if warmup_epochs > 0.0 && e < warmup_epochs {
        return peak * e / warmup_epochs;
    }
    let span = epochs - warmup_epochs;
    if span <= 0.0 {
        return peak;
    }
    peak * 0.5 * (1.0 + (PI * (e - warmup_epochs) / span).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const PEAK: f64 = 8e-4;

    #[test]
    fn reference_points() {
        assert!((lr_at(5.0, 50.0, 5.0, PEAK) - 8e-4).abs() <= 1e-12);
        assert!(lr_at(50.0, 50.0, 5.0, PEAK).abs() <= 1e-12);
        assert!((lr_at(27.5, 50.0, 5.0, PEAK) - 4e-4).abs() <= 1e-12);
        assert_eq!(lr_at(0.0, 50.0, 5.0, PEAK), 0.0);
        assert!((lr_at(2.5, 50.0, 5.0, PEAK) - 4e-4).abs() <= 1e-12);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        assert_eq!(lr_at(0.0, 10.0, 0.0, 1.0), 1.0);
    }

    proptest! {
        #[test]
        fn continuous_and_peaks_at_warmup_end(e in 0.0f64..50.0) {
            let lr = lr_at(e, 50.0, 5.0, PEAK);
            prop_assert!((0.0..=PEAK + 1e-18).contains(&lr));
            let h = 1e-7;
            prop_assert!((lr_at(e + h, 50.0, 5.0, PEAK) - lr).abs() < PEAK * 1e-6);
        }
    }
}
