use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const PROBABILITY_CLIP: f64 = 1e-7;

/// Binary cross-entropy with `p` clipped to `[1e-7, 1 - 1e-7]`.
/// Returns the loss and `dL/dp` at the clipped probability.
pub fn bce_loss(p: f64, y: f64) -> (f64, f64) {
    let p = p.clamp(PROBABILITY_CLIP, 1.0 - PROBABILITY_CLIP);
    let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let grad = -y / p + (1.0 - y) / (1.0 - p);
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        let p = |f: &str| if path.is_empty() { f.to_string() } else { format!("{path}.{f}") };
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(p("learning_rate"), format!("must be positive, got {}", self.learning_rate)));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(p(name), format!("must lie in (0, 1), got {v}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(p("epsilon"), "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(p("batch_size"), "must be at least 1"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &[Tensor<F>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_step<F: Scalar>(
    params: &mut [Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    t: u64,
    config: &TrainConfig,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Range("adam step index starts at 1".into()));
    }
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameters, {} gradients, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "adam: parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    let (b1, b2) = (F::of(config.beta1), F::of(config.beta2));
    let one = F::one();
    let c1 = 1.0 - config.beta1.powi(t as i32);
    let c2 = 1.0 - config.beta2.powi(t as i32);
    let step = F::of(config.learning_rate / c1);
    let c2_sqrt = F::of(c2.sqrt());
    let eps = F::of(config.epsilon);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            // lr * m_hat / (sqrt(v_hat) + eps), folded to avoid two divisions.
            *pv -= step * *mv / ((*vv).sqrt() / c2_sqrt + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_closed_forms() {
        assert!((bce_loss(0.5, 1.0).0 - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(1.0, 1.0).0 < 1e-6);
        for &p in &[0.01, 0.3, 0.77] {
            assert!((bce_loss(p, 1.0).0 - bce_loss(1.0 - p, 0.0).0).abs() < 1e-12);
        }
        assert!(bce_loss(0.0, 1.0).0.is_finite());
    }

    #[test]
    fn bce_gradient_matches_difference() {
        let (p, y, h) = (0.37, 1.0, 1e-6);
        let fd = (bce_loss(p + h, y).0 - bce_loss(p - h, y).0) / (2.0 * h);
        assert!((bce_loss(p, y).1 - fd).abs() < 1e-6);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        for &g in &[1e-3, 0.5, -7.0] {
            let mut params = vec![Tensor::<f64>::zeros(&[3])];
            let grads = vec![Tensor::from_vec(&[3], vec![g; 3]).unwrap()];
            let mut st = AdamState::new(&params);
            adam_step(&mut params, &grads, &mut st, 1, &cfg).unwrap();
            for &v in params[0].data() {
                assert!((v + cfg.learning_rate * g.signum()).abs() < 1e-9, "{v}");
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::<f32>::from_vec(&[2], vec![0.3, -1.2]).unwrap()];
        let before = params.clone();
        let grads = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::new(&params);
        for t in 1..=100 {
            adam_step(&mut params, &grads, &mut st, t, &TrainConfig::default()).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn shape_mismatch() {
        let mut params = vec![Tensor::<f32>::zeros(&[2])];
        let mut st = AdamState::new(&params);
        let r = adam_step(&mut params, &[Tensor::zeros(&[3])], &mut st, 1, &TrainConfig::default());
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
