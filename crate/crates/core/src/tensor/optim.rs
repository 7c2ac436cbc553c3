use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
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
            lr: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
///
/// Moments are allocated lazily on the first step and shape-locked after.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter slice from its gradient.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("{} params vs {} grads", params.len(), grads.len()),
            ));
        }
        if let Some((i, _)) = params
            .iter()
            .zip(grads)
            .enumerate()
            .find(|(_, (p, g))| p.len() != g.len())
        {
            return Err(Error::shape("adamw_step", format!("param {i} and its gradient differ in size")));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::shape("adamw_step", "parameters changed shape between steps"));
        }

        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * weight_decay * p[i];
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn no_decay() -> AdamWConfig {
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut opt = AdamW::new(no_decay());
        let mut p = vec![1.5, -2.0];
        opt.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut opt = AdamW::new(no_decay());
        let mut p = vec![1.0];
        opt.step(&mut [&mut p], &[&[1.0]]).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = lr / (1 + eps)
        assert_abs_diff_eq!(p[0], 1.0 - 0.02 / (1.0 + 1e-8), epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], 0.98, epsilon = 1e-9);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = vec![1.0];
        opt.step(&mut [&mut p], &[&[0.0]]).unwrap();
        opt.step(&mut [&mut p], &[&[0.0]]).unwrap();
        assert_abs_diff_eq!(p[0], (1.0f64 - 0.02 * 0.01).powi(2), epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], 0.99960004, epsilon = 1e-12);
        assert_eq!(opt.steps_taken(), 2);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = vec![1.0, 2.0];
        assert!(opt.step(&mut [&mut p], &[&[0.0]]).is_err());
        opt.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        let mut q = vec![1.0];
        assert!(opt.step(&mut [&mut q], &[&[0.0]]).is_err());
    }
}
