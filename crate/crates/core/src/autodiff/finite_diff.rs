use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor<f64>, step: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::domain(format!("finite-difference step {step} must be positive")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::Evaluation(format!("objective is not finite around element {i}")));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Tensor::from_vec(x.shape(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_vec(Shape::new(1, 2, 2, 1), vec![0.3, -1.0, 2.0, 7.5]).unwrap();
        let g = finite_difference_grad(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_difference_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_objective() {
        let x = Tensor::scalar(1.0);
        assert!(finite_difference_grad(|t| Ok(t.sum()), &x, 0.0).is_err());
        let err = finite_difference_grad(|_| Ok(f64::NAN), &x, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
    }
}
