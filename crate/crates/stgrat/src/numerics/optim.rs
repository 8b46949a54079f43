//! Warmup learning-rate schedule and Adam.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::ParamStore;

/// `d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`: linear ramp for
/// `warmup` steps, then inverse square-root decay.
pub fn warmup_learning_rate(step: usize, d_model: usize, warmup: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("warmup_learning_rate: step must be >= 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Adam state: per-parameter first/second moment accumulators plus the
/// shared step counter and schedule constants.
#[derive(Clone)]
pub struct OptimizerState {
    pub step: usize,
    pub warmup_steps: usize,
    pub d_model: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, d_model: usize, warmup_steps: usize) -> Self {
        let zeros: Vec<Matrix> = store
            .ids()
            .map(|id| {
                let m = store.get(id);
                Matrix::zeros(m.rows(), m.cols())
            })
            .collect();
        OptimizerState {
            step: 0,
            warmup_steps,
            d_model,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Learning rate the schedule would use for the *next* update.
    pub fn next_learning_rate(&self) -> Result<f64> {
        warmup_learning_rate(self.step + 1, self.d_model, self.warmup_steps)
    }

    pub fn moments(&self) -> (&[Matrix], &[Matrix]) {
        (&self.first_moment, &self.second_moment)
    }

    pub fn moments_mut(&mut self) -> (&mut Vec<Matrix>, &mut Vec<Matrix>) {
        (&mut self.first_moment, &mut self.second_moment)
    }
}

/// One Adam step with bias correction. Advances `state.step` by 1 and
/// moves every parameter opposite its bias-corrected moment ratio.
pub fn adam_update(
    store: &mut ParamStore,
    grads: &[Matrix],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Shape(format!(
            "adam_update: {} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);

    for (idx, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let g = &grads[idx];
        let p = store.get_mut(id);
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "adam_update: gradient {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = &mut state.first_moment[idx];
        let v = &mut state.second_moment[idx];
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = state.beta1 * *mv + (1.0 - state.beta1) * gv;
            *vv = state.beta2 * *vv + (1.0 - state.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_crossover_at_warmup_step() {
        let w = 4000usize;
        let s = w as f64;
        let a = s.powf(-0.5);
        let b = s * s.powf(-1.5);
        assert!((a - b).abs() < 1e-15);
        // The crossover is the maximum of the schedule.
        let peak = warmup_learning_rate(w, 128, w).unwrap();
        for step in [1, w / 2, w - 1, w + 1, 2 * w, 10 * w] {
            assert!(warmup_learning_rate(step, 128, w).unwrap() <= peak + 1e-18);
        }
    }

    #[test]
    fn warmup_first_step_value() {
        let got = warmup_learning_rate(1, 128, 4000).unwrap();
        let want = 128f64.powf(-0.5) * 4000f64.powf(-1.5);
        assert!((got - want).abs() < 1e-18);
    }

    #[test]
    fn warmup_step_zero_is_error() {
        assert!(warmup_learning_rate(0, 128, 4000).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut store = ParamStore::new();
        store.register("w", Matrix::filled(2, 2, 1.5));
        let mut state = OptimizerState::new(&store, 128, 4000);
        let grads = vec![Matrix::zeros(2, 2)];
        adam_update(&mut store, &grads, &mut state, 0.01).unwrap();
        assert!(store
            .iter()
            .next()
            .unwrap()
            .1
            .data()
            .iter()
            .all(|&v| v == 1.5));
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_single_scalar_step_matches_hand_arithmetic() {
        let mut store = ParamStore::new();
        let id = store.register("w", Matrix::filled(1, 1, 2.0));
        let mut state = OptimizerState::new(&store, 128, 4000);
        let g = 0.5;
        let lr = 0.1;
        adam_update(&mut store, &[Matrix::filled(1, 1, g)], &mut state, lr).unwrap();

        // m = 0.1*g, v = 0.02*g^2; m_hat = m/0.1 = g, v_hat = v/0.02 = g^2.
        let m_hat = g;
        let v_hat = g * g;
        let want = 2.0 - lr * m_hat / (v_hat.sqrt() + 1e-9);
        let got = store.get(id).get(0, 0);
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn adam_step_counter_advances_per_call() {
        let mut store = ParamStore::new();
        store.register("w", Matrix::filled(1, 1, 0.0));
        let mut state = OptimizerState::new(&store, 128, 4000);
        let g = vec![Matrix::filled(1, 1, 1.0)];
        adam_update(&mut store, &g, &mut state, 0.01).unwrap();
        adam_update(&mut store, &g, &mut state, 0.01).unwrap();
        assert_eq!(state.step, 2);
    }
}
