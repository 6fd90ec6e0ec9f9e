use crate::error::{Error, Result};

/// `lr_min + ½(lr_max − lr_min)(1 + cos(πt/T))`.
///
/// Evaluated from whichever endpoint is nearer, so that `t = 0` returns
/// `lr_max` and `t = T` returns `lr_min` bit-exactly.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if t > total {
        return Err(Error::Schedule { t, total });
    }
    if total == 0 {
        return Ok(lr_max);
    }
    let w = 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos());
    let span = lr_max - lr_min;
    Ok(if w >= 0.5 { lr_max - span * (1.0 - w) } else { lr_min + span * w })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 300, 5e-4, 1e-6).unwrap(), 5e-4);
        assert_eq!(cosine_lr(300, 300, 5e-4, 1e-6).unwrap(), 1e-6);
        assert!((cosine_lr(150, 300, 5e-4, 1e-6).unwrap() - 2.505e-4).abs() < 1e-15);
        assert!(matches!(cosine_lr(301, 300, 5e-4, 1e-6), Err(Error::Schedule { .. })));
    }

    #[test]
    fn monotone_decreasing() {
        let lrs: Vec<f64> = (0..=99).map(|t| cosine_lr(t, 99, 5e-4, 1e-6).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
