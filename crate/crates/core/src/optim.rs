//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    /// Running mean of gradients (m), one tensor per parameter.
    pub first_moment: Vec<Tensor>,
    /// Running mean of squared gradients (v).
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    /// Fresh state with the usual defaults (0.9, 0.999, 1e-8). Moments are
    /// allocated on the first step.
    pub fn new(learning_rate: f64) -> Self {
        Self {
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }
}

/// Applies one Adam update in place and increments `step_count`.
pub fn adam_step(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    for ((name, p), (gname, g)) in params.iter().zip(grads.iter()) {
        if name != gname || p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "parameter `{name}` {:?} vs gradient `{gname}` {:?}",
                    p.shape(),
                    g.shape()
                ),
            ));
        }
    }
    if state.first_moment.is_empty() {
        state.first_moment = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.shape()))
            .collect();
        state.second_moment = state.first_moment.clone();
    } else if state.first_moment.len() != params.len()
        || params
            .iter()
            .zip(&state.first_moment)
            .any(|((_, p), m)| p.shape() != m.shape())
    {
        return Err(Error::shape(
            "adam_step",
            "optimizer state does not match parameters",
        ));
    }

    state.step_count += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(state.step_count as i32);
    let bc2 = 1.0 - b2.powi(state.step_count as i32);
    let lr = state.learning_rate;
    let eps = state.epsilon;

    for (k, ((_, p), (_, g))) in params.iter_mut().zip(grads.iter()).enumerate() {
        let m = state.first_moment[k].data_mut();
        let v = state.second_moment[k].data_mut();
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new(0);
        s.insert("p", Tensor::vector(vec![v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(1.25);
        let g = store(0.0);
        let mut st = AdamState::new(0.1);
        adam_step(&mut p, &g, &mut st).unwrap();
        adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p.get("p").unwrap().data(), &[1.25]);
        assert_eq!(st.step_count, 2);
    }

    #[test]
    fn first_step_matches_hand_value() {
        let mut p = store(1.0);
        let mut st = AdamState::new(0.01);
        adam_step(&mut p, &store(0.5), &mut st).unwrap();
        // bias-corrected m = 0.5, v = 0.25
        let expected = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert_eq!(p.get("p").unwrap().data()[0], expected);
        assert!((expected - 0.99).abs() < 1e-9);
    }

    #[test]
    fn second_identical_step_is_bounded() {
        let lr = 0.01;
        let mut p = store(0.0);
        let mut st = AdamState::new(lr);
        adam_step(&mut p, &store(1.0), &mut st).unwrap();
        let after_one = p.get("p").unwrap().data()[0];
        adam_step(&mut p, &store(1.0), &mut st).unwrap();
        let step = (p.get("p").unwrap().data()[0] - after_one).abs();
        assert!(step >= 0.9 * lr && step <= lr, "step {step}");
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = store(0.3);
            let mut st = AdamState::new(0.05);
            for k in 0..5 {
                adam_step(&mut p, &store(0.1 * k as f64 - 0.2), &mut st).unwrap();
            }
            (p.to_bytes(), st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(sa
            .second_moment
            .iter()
            .all(|v| v.data().iter().all(|&x| x >= 0.0)));
    }

    #[test]
    fn shape_mismatch_fails() {
        let mut p = store(0.0);
        let mut g = ParamStore::new(0);
        g.insert("p", Tensor::zeros(&[2])).unwrap();
        assert!(adam_step(&mut p, &g, &mut AdamState::new(0.1)).is_err());
    }
}
