//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Element, Tensor};

/// Optimizer state: one pair of moment tensors per parameter, in the same
/// order the parameters are visited. The step counter is shared.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<E> {
    pub beta1: E,
    pub beta2: E,
    pub epsilon: E,
    pub step: u64,
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
}

impl<E: Element> AdamState<E> {
    /// Fresh state with zero moments shaped like `params`.
    pub fn new(params: &[&Tensor<E>]) -> Self {
        AdamState {
            beta1: E::from_f64(0.9),
            beta2: E::from_f64(0.999),
            epsilon: E::from_f64(1e-8),
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.dims())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.dims())).collect(),
        }
    }
}

/// One bias-corrected Adam update, in place.
///
/// `grads[i]` of `None` means "no gradient this step" and leaves both the
/// parameter and its moments untouched (frozen parameters stay bit-identical).
/// Deterministic: identical inputs and state produce identical outputs.
pub fn adam_step<E: Element>(
    params: &mut [&mut Tensor<E>],
    grads: &[Option<&Tensor<E>>],
    state: &mut AdamState<E>,
    lr: E,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = E::one() - state.beta1.powi(t);
    let bc2 = E::one() - state.beta2.powi(t);
    let one = E::one();
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let g = match g {
            Some(g) => *g,
            None => continue,
        };
        if g.dims() != p.dims() {
            return Err(Error::shape(format!(
                "adam_step: grad dims {:?} vs param dims {:?}",
                g.dims(),
                p.dims()
            )));
        }
        let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
        for ((pi, &gi), (mi, vi)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()))
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi = *pi - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_for(p: &Tensor<f64>) -> AdamState<f64> {
        AdamState::new(&[p])
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let g = Tensor::zeros(&[3]);
        let mut st = state_for(&p);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[Some(&g)], &mut st, 0.1).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn single_step_hand_value() {
        // g=1, defaults, lr=0.1: m_hat=1, v_hat=1, delta = 0.1/(1+1e-8)
        let mut p = Tensor::vector(vec![0.5]);
        let g = Tensor::vector(vec![1.0]);
        let mut st = state_for(&p);
        adam_step(&mut [&mut p], &[Some(&g)], &mut st, 0.1).unwrap();
        let expect = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - expect).abs() < 1e-12);
        assert!((p.data()[0] - 0.4).abs() < 1e-7, "param decreases by ~0.1");
    }

    #[test]
    fn deterministic_from_saved_state() {
        let g = Tensor::vector(vec![0.3, -0.7]);
        let run = || {
            let mut p = Tensor::vector(vec![1.0, 2.0]);
            let mut st = state_for(&p);
            for _ in 0..10 {
                adam_step(&mut [&mut p], &[Some(&g)], &mut st, 0.01).unwrap();
            }
            (p, st.step)
        };
        let (p1, s1) = run();
        let (p2, s2) = run();
        assert_eq!(p1.data(), p2.data(), "bit-identical across reruns");
        assert_eq!(s1, s2);
    }

    #[test]
    fn dim_mismatch_is_error() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let g = Tensor::vector(vec![1.0]);
        let mut st = state_for(&p);
        assert!(adam_step(&mut [&mut p], &[Some(&g)], &mut st, 0.1).is_err());
    }

    #[test]
    fn missing_gradient_freezes_param_and_moments() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut st = state_for(&p);
        adam_step(&mut [&mut p], &[None], &mut st, 0.1).unwrap();
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(st.m[0].data(), &[0.0]);
        assert_eq!(st.step, 1);
    }
}
