//! Relative error measures shared by training and evaluation.

use crate::error::{Error, Result};

/// Mean over cells of `|pred - target| / target`.
pub fn relative_l1(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction has {} cells, target has {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Contract("relative error of an empty field".into()));
    }
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs() / t).sum();
    Ok(sum / pred.len() as f64)
}

/// Signed per-cell `(pred - target) / target`.
pub fn relative_error_field(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction has {} cells, target has {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) / t).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(relative_l1(&[300.0, 300.0], &[300.0, 300.0]).unwrap(), 0.0);
        assert!((relative_l1(&[303.0, 300.0], &[300.0, 300.0]).unwrap() - 0.005).abs() < 1e-15);
        let t = [280.0, 310.5, 399.0];
        let p: Vec<f64> = t.iter().map(|x| x * 1.01).collect();
        assert!((relative_l1(&p, &t).unwrap() - 0.01).abs() < 1e-14);
        assert!(relative_l1(&[1.0], &[1.0, 2.0]).is_err());
        assert!(relative_l1(&[], &[]).is_err());
    }

    #[test]
    fn signed_field() {
        let f = relative_error_field(&[303.0, 300.0], &[300.0, 300.0]).unwrap();
        assert!((f[0] - 0.01).abs() < 1e-15);
        assert_eq!(f[1], 0.0);
        assert_eq!(
            relative_error_field(&[1.0], &[1.0, 2.0]).unwrap_err().category(),
            "shape"
        );
    }

    proptest::proptest! {
        #[test]
        fn error_is_nonnegative_and_zero_only_on_match(
            t in proptest::collection::vec(1.0f64..1000.0, 1..32),
            d in proptest::collection::vec(-10.0f64..10.0, 32),
        ) {
            let p: Vec<f64> = t.iter().zip(&d).map(|(a, b)| a + b).collect();
            let e = relative_l1(&p, &t).unwrap();
            proptest::prop_assert!(e >= 0.0);
            proptest::prop_assert_eq!(e == 0.0, p == t);
            proptest::prop_assert_eq!(relative_l1(&t, &t).unwrap(), 0.0);
            let field = relative_error_field(&p, &t).unwrap();
            let mean = field.iter().map(|x| x.abs()).sum::<f64>() / field.len() as f64;
            proptest::prop_assert!((mean - e).abs() <= 1e-12 * (1.0 + e));
        }
    }
}
