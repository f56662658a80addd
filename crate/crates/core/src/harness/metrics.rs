//! Scalar error metrics.

use crate::error::{Error, Result};

/// Default magnitude below which targets are left out of [`trmae`].
pub const TRMAE_THRESHOLD: f64 = 1e-3;

/// Thresholded relative mean absolute error.
///
/// Averages `|pred - target| / |target|` over the entries with
/// `|target| > tau`. `None` when no entry qualifies.
pub fn trmae(pred: &[f64], target: &[f64], tau: f64) -> Result<Option<f64>> {
    same_len(pred, target)?;
    let (sum, n) = pred
        .iter()
        .zip(target)
        .filter(|(_, t)| t.abs() > tau)
        .fold((0.0, 0usize), |(s, n), (p, t)| (s + (p - t).abs() / t.abs(), n + 1));
    Ok((n > 0).then(|| sum / n as f64))
}

/// Mean squared error over every entry. `None` for empty inputs.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<Option<f64>> {
    same_len(pred, target)?;
    if pred.is_empty() {
        return Ok(None);
    }
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(Some(s / pred.len() as f64))
}

/// `cost_solution / cost_reference` as a percentage.
pub fn optimality_ratio(cost_solution: f64, cost_reference: f64) -> Result<f64> {
    if !(cost_reference > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "reference cost must be positive, got {cost_reference}"
        )));
    }
    Ok(100.0 * cost_solution / cost_reference)
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} targets", a.len(), b.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trmae_cases() {
        let v = trmae(&[2.2], &[2.0], TRMAE_THRESHOLD).unwrap().unwrap();
        assert!((v - 0.1).abs() < 1e-15);
        let v = trmae(&[2.2, 99.0], &[2.0, 0.0005], TRMAE_THRESHOLD).unwrap().unwrap();
        assert!((v - 0.1).abs() < 1e-15);
        assert_eq!(trmae(&[1.0, -3.0], &[1.0, -3.0], TRMAE_THRESHOLD).unwrap(), Some(0.0));
        assert_eq!(trmae(&[5.0], &[0.0], TRMAE_THRESHOLD).unwrap(), None);
        assert!(trmae(&[1.0], &[], 0.0).is_err());
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse(&[1.0, 1.0], &[0.0, 2.0]).unwrap(), Some(1.0));
        assert_eq!(mse(&[3.0], &[3.0]).unwrap(), Some(0.0));
        assert_eq!(mse(&[], &[]).unwrap(), None);
    }

    #[test]
    fn optimality_cases() {
        assert_eq!(optimality_ratio(100.0, 100.0).unwrap(), 100.0);
        assert!((optimality_ratio(101.0, 100.0).unwrap() - 101.0).abs() < 1e-12);
        assert!(optimality_ratio(1.0, 0.0).is_err());
    }
}
