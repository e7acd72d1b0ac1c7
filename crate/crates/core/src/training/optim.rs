use crate::error::{Error, Result};
use crate::model::ParameterSet;
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moment buffers, one pair per parameter tensor in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<E: Scalar> {
    pub step: u64,
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
}

impl<E: Scalar> OptimizerState<E> {
    pub fn new(params: &ParameterSet<E>) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Checks that the buffers line up with `params`.
    pub fn validate(&self, params: &ParameterSet<E>) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer holds {} / {} moment tensors for {} parameters",
                self.m.len(),
                self.v.len(),
                params.len()
            )));
        }
        for ((name, p), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moments for {name} do not match its shape {:?}",
                    p.shape()
                )));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step<E: Scalar>(
    params: &mut ParameterSet<E>,
    grads: &[Tensor<E>],
    state: &mut OptimizerState<E>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if g.shape() != p.shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "gradient of {name} is {} at flat index {i}",
                g.data()[i]
            )));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (E::from_f64(BETA1), E::from_f64(BETA2));
    let (one_b1, one_b2) = (E::one() - b1, E::one() - b2);
    let c1 = E::from_f64(1.0 / (1.0 - BETA1.powf(t)));
    let c2 = E::from_f64(1.0 / (1.0 - BETA2.powf(t)));
    let (lr, eps) = (E::from_f64(lr), E::from_f64(ADAM_EPS));
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            let m_hat = m[j] * c1;
            let v_hat = v[j] * c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParameterSet<f64> {
        ParameterSet::from_parts(vec![("w".into(), Tensor::scalar(value))]).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(0.5);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s, 1e-3).unwrap();
        // m̂ = 1, v̂ = 1
        let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((p.tensors()[0].data()[0] - expected).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = single(0.5);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(0.0)], &mut s, 1e-3).unwrap();
        assert_eq!(p.tensors()[0].data()[0], 0.5);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(0.5);
        let mut s = OptimizerState::new(&p);
        let err = adam_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut s, 1e-3).unwrap_err();
        assert!(err.to_string().contains("w"), "{err}");
        assert_eq!(s.step, 0);
    }
}
