//! AdamW with decoupled weight decay and bias correction.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamWState<E: Scalar> {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<(Tensor<E>, Tensor<E>)>,
}

impl<E: Scalar> AdamWState<E> {
    pub fn new(config: AdamWConfig, param_shapes: &[&[usize]]) -> Result<Self> {
        if config.lr <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        Ok(Self {
            config,
            step: 0,
            moments: param_shapes
                .iter()
                .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
                .collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay update over all parameters.
    ///
    /// `params` and `grads` must be parallel slices in the same order the
    /// state was created with; `names` is used for error reporting only.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<E>],
        grads: &[Tensor<E>],
        names: &[&str],
    ) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != self.moments.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer state holds {} parameters, got {} params / {} grads",
                self.moments.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                let name = names.get(i).copied().unwrap_or("<unnamed>");
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.moments.iter_mut())
        {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    context: "adamw step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for j in 0..pd.len() {
                let gj = gd[j].as_f64();
                let mj = c.beta1 * md[j].as_f64() + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * vd[j].as_f64() + (1.0 - c.beta2) * gj * gj;
                md[j] = E::of_f64(mj);
                vd[j] = E::of_f64(vj);
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                let mut pj = pd[j].as_f64();
                pj -= c.lr * c.weight_decay * pj;
                pj -= c.lr * mhat / (vhat.sqrt() + c.eps);
                pd[j] = E::of_f64(pj);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param_state(lr: f64, wd: f64) -> AdamWState<f64> {
        let config = AdamWConfig {
            lr,
            weight_decay: wd,
            ..Default::default()
        };
        AdamWState::new(config, &[&[2][..]]).unwrap()
    }

    #[test]
    fn zero_grad_no_decay_leaves_params_unchanged() {
        let mut state = single_param_state(0.1, 0.0);
        let mut p = Tensor::new(vec![2], vec![1.5, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        state.step(&mut [&mut p], &[g], &["w"]).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_grad_with_decay_shrinks_by_one_minus_lr_lambda() {
        let mut state = single_param_state(0.1, 0.5);
        let mut p = Tensor::new(vec![2], vec![2.0, -4.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        state.step(&mut [&mut p], &[g], &["w"]).unwrap();
        let f = 1.0 - 0.1 * 0.5;
        assert!((p.data()[0] - 2.0 * f).abs() < 1e-12);
        assert!((p.data()[1] + 4.0 * f).abs() < 1e-12);
    }

    #[test]
    fn constant_grad_update_magnitude_approaches_lr() {
        // With a constant gradient g, mhat -> g and vhat -> g^2, so the
        // per-step update tends to lr * sign(g).
        let lr = 0.01;
        let mut state = single_param_state(lr, 0.0);
        let mut p = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let g = Tensor::new(vec![2], vec![3.0, -3.0]).unwrap();
        let mut prev = p.clone();
        let mut last_delta = [0.0f64; 2];
        for _ in 0..500 {
            prev = p.clone();
            state.step(&mut [&mut p], &[g.clone()], &["w"]).unwrap();
            last_delta[0] = p.data()[0] - prev.data()[0];
            last_delta[1] = p.data()[1] - prev.data()[1];
        }
        let _ = prev;
        assert!((last_delta[0] + lr).abs() < 1e-4, "delta {last_delta:?}");
        assert!((last_delta[1] - lr).abs() < 1e-4, "delta {last_delta:?}");
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut state = single_param_state(0.1, 0.0);
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap();
        let err = state.step(&mut [&mut p], &[g], &["lora_a.0.key"]).unwrap_err();
        assert!(err.to_string().contains("lora_a.0.key"));
    }
}
