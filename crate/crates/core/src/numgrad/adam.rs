use serde::{Deserialize, Serialize};

use super::array::Array;
use super::NumError;

/// Adam optimizer state for one group of parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl AdamState {
    pub fn new(params: &[Array], lr: f64) -> Self {
        Self::with_betas(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &[Array], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Array> = params.iter().map(|p| Array::zeros(p.shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [Array], grads: &[Array], state: &mut AdamState) -> Result<(), NumError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NumError::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(NumError::Shape(format!(
                "adam: param {:?} grad {:?} moment {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = vec![Array::matrix(1, 3, vec![1.0, -2.0, 0.5])];
        let before = p.clone();
        let mut s = AdamState::new(&p, 0.1);
        adam_step(&mut p, &[Array::zeros(&[1, 3])], &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_is_sign_scaled() {
        let g = [0.5, -3.0, 1e-3];
        let mut p = vec![Array::zeros(&[1, 3])];
        let mut s = AdamState::new(&p, 0.01);
        adam_step(&mut p, &[Array::row_vector(g.to_vec())], &mut s).unwrap();
        for (x, gi) in p[0].data().iter().zip(g) {
            let expect = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((x - expect).abs() < 1e-12, "{x} vs {expect}");
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = vec![Array::scalar(5.0)];
        let mut s = AdamState::new(&p, 0.1);
        let mut losses = Vec::new();
        for _ in 0..200 {
            let w = p[0].data()[0];
            losses.push(w * w);
            adam_step(&mut p, &[Array::scalar(2.0 * w)], &mut s).unwrap();
        }
        assert!(p[0].data()[0].abs() < 0.5);
        // loss trend: every 20-step window mean is below the previous one until convergence
        let windows: Vec<f64> = losses.chunks(20).map(|c| c.iter().sum::<f64>() / 20.0).collect();
        assert!(windows[0] > windows[1] && windows[1] > windows[2]);
        assert!(windows.last().unwrap() < &windows[0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Array::zeros(&[1, 3])];
        let mut s = AdamState::new(&p, 0.1);
        assert!(adam_step(&mut p, &[Array::zeros(&[1, 2])], &mut s).is_err());
    }
}
