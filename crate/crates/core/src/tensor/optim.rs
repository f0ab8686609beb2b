//! Functional optimizer steps: parameters in, parameters out.
//!
//! The meta-learning inner loop differentiates through nothing here — steps
//! take plain gradients and return fresh `ParamSet`s, which also keeps the
//! optimizers trivially testable.

use super::data::{Scalar, TensorData};
use super::params::ParamSet;
use super::tape::TensorError;

fn check_aligned<S: Scalar>(
    op: &'static str,
    params: &ParamSet<S>,
    grads: &ParamSet<S>,
) -> Result<(), TensorError> {
    let names_match = params.len() == grads.len()
        && params
            .iter()
            .zip(grads.iter())
            .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape());
    if !names_match {
        return Err(TensorError::Invalid {
            op,
            detail: "gradient set does not align with parameter set".into(),
        });
    }
    Ok(())
}

fn check_lr<S: Scalar>(op: &'static str, lr: S) -> Result<(), TensorError> {
    if lr <= S::zero() || !lr.is_finite() {
        return Err(TensorError::Invalid {
            op,
            detail: format!("learning rate must be positive and finite, got {:?}", lr.as_f64()),
        });
    }
    Ok(())
}

/// One step of plain gradient descent: `theta - lr * grad`.
pub fn sgd_step<S: Scalar>(
    params: &ParamSet<S>,
    grads: &ParamSet<S>,
    lr: S,
) -> Result<ParamSet<S>, TensorError> {
    check_lr("sgd_step", lr)?;
    check_aligned("sgd_step", params, grads)?;
    params.add_scaled(grads, -lr)
}

/// First/second moment accumulators for [`adam_step`].
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar = f32> {
    m: Vec<S>,
    v: Vec<S>,
    t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamSet<S>) -> Self {
        let n = params.num_elements();
        Self { m: vec![S::zero(); n], v: vec![S::zero(); n], t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Adam with bias correction (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
pub fn adam_step<S: Scalar>(
    params: &ParamSet<S>,
    grads: &ParamSet<S>,
    state: &mut AdamState<S>,
    lr: S,
) -> Result<ParamSet<S>, TensorError> {
    check_lr("adam_step", lr)?;
    check_aligned("adam_step", params, grads)?;
    if state.m.len() != params.num_elements() {
        return Err(TensorError::Invalid {
            op: "adam_step",
            detail: format!(
                "state sized for {} elements, parameters have {}",
                state.m.len(),
                params.num_elements()
            ),
        });
    }

    let beta1 = S::from_f64(0.9);
    let beta2 = S::from_f64(0.999);
    let eps = S::from_f64(1e-8);

    state.t += 1;
    let t = state.t as i32;
    let bc1 = S::one() - beta1.powi(t);
    let bc2 = S::one() - beta2.powi(t);

    let flat_g = grads.flatten();
    let flat_p = params.flatten();
    let mut out = Vec::with_capacity(flat_p.len());
    for i in 0..flat_p.len() {
        let g = flat_g[i];
        state.m[i] = beta1 * state.m[i] + (S::one() - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (S::one() - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        out.push(flat_p[i] - lr * m_hat / (v_hat.sqrt() + eps));
    }
    params.unflatten(&out)
}

/// Global gradient-norm clipping; returns the pre-clip norm.
pub fn clip_grad_norm<S: Scalar>(grads: &mut ParamSet<S>, max_norm: S) -> S {
    let flat = grads.flatten();
    let norm = flat
        .iter()
        .fold(S::zero(), |acc, &g| acc + g * g)
        .sqrt();
    if norm > max_norm && norm > S::zero() {
        let scale = max_norm / norm;
        *grads = grads.map(|t| {
            let data: Vec<S> = t.as_slice().iter().map(|&g| g * scale).collect();
            TensorData::new(t.shape().to_vec(), data)
        });
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_of(vals: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", TensorData::from_f64_slice(&[vals.len()], vals)).unwrap();
        p
    }

    #[test]
    fn sgd_hand_example() {
        // theta = [1, 2], grad = [0.5, -1], lr = 0.1 -> [0.95, 2.1]
        let p = params_of(&[1.0, 2.0]);
        let g = params_of(&[0.5, -1.0]);
        let next = sgd_step(&p, &g, 0.1).unwrap();
        let got = next.flatten();
        assert!((got[0] - 0.95).abs() < 1e-12);
        assert!((got[1] - 2.1).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_lr_is_error() {
        let p = params_of(&[1.0]);
        let g = params_of(&[1.0]);
        assert!(sgd_step(&p, &g, 0.0).is_err());
        assert!(sgd_step(&p, &g, -0.1).is_err());
        let mut st = AdamState::new(&p);
        assert!(adam_step(&p, &g, &mut st, 0.0).is_err());
    }

    #[test]
    fn adam_first_step_size_is_lr_for_unit_grad() {
        // With bias correction, |step 1| = lr * g/|g| up to eps.
        let p = params_of(&[0.0, 0.0]);
        let g = params_of(&[1.0, -3.0]);
        let mut st = AdamState::new(&p);
        let next = adam_step(&p, &g, &mut st, 0.01).unwrap();
        let got = next.flatten();
        assert!((got[0] + 0.01).abs() < 1e-6);
        assert!((got[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_grad_leaves_params_unchanged() {
        let p = params_of(&[1.5, -2.5]);
        let g = params_of(&[0.0, 0.0]);
        let mut st = AdamState::new(&p);
        let next = adam_step(&p, &g, &mut st, 0.01).unwrap();
        assert!(next.bit_eq(&p));
    }

    #[test]
    fn clip_leaves_small_grads_alone_and_scales_large() {
        let mut g = params_of(&[3.0, 4.0]); // norm 5
        let norm = clip_grad_norm(&mut g, 10.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert_eq!(g.flatten(), vec![3.0, 4.0]);
        let norm = clip_grad_norm(&mut g, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let got = g.flatten();
        assert!((got[0] - 0.6).abs() < 1e-12);
        assert!((got[1] - 0.8).abs() < 1e-12);
    }
}
