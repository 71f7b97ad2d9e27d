use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::{AutodiffError, Result};

/// Adam moments and hyperparameters for one parameter list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            m: params.iter().map(Tensor::zeros_like).collect(),
            v: params.iter().map(Tensor::zeros_like).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            lr,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if !(state.lr > 0.0) {
        return Err(AutodiffError::Argument(format!("learning rate {} must be > 0", state.lr)));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(AutodiffError::Shape(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(AutodiffError::Shape(format!(
                "param {i}: {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(AutodiffError::NonFiniteGradient { param: i });
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((pv, gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::scalar(0.5)];
        let mut st = AdamState::new(&p, 1e-3);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut st).unwrap();
        assert!((p[0].item().unwrap() - (0.5 - 1e-3)).abs() < 1e-10);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(&p, 1e-3);
        adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = vec![Tensor::new(vec![2], vec![0.3, -0.7]).unwrap()];
            let mut st = AdamState::new(&p, 1e-2);
            for k in 0..50 {
                let g = Tensor::new(vec![2], vec![(k as f64).sin(), 0.1 * k as f64]).unwrap();
                adam_step(&mut p, &[g], &mut st).unwrap();
            }
            (p, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(&p, 1e-3);
        assert!(matches!(
            adam_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut st),
            Err(AutodiffError::NonFiniteGradient { param: 0 })
        ));
        assert_eq!(st.step, 0);
        st.lr = 0.0;
        assert!(adam_step(&mut p, &[Tensor::scalar(1.0)], &mut st).is_err());
    }
}
