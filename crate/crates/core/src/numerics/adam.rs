use super::{Module, NumericsError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam. Moment buffers are aligned with the module's
/// parameter visiting order and created lazily on the first step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Flattened moment state for persistence: `(first, second)` per parameter.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    pub fn restore(
        config: AdamConfig,
        step: u64,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
    ) -> Result<Self, NumericsError> {
        if first.len() != second.len()
            || first.iter().zip(&second).any(|(a, b)| a.len() != b.len())
        {
            return Err(NumericsError::InvalidArgument(
                "adam moment buffers disagree in shape".into(),
            ));
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }

    /// One update from the gradients currently stored on `module`.
    /// Gradients are left in place; callers zero them.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M) -> Result<(), NumericsError> {
        let mut bad = None;
        let mut sizes = Vec::new();
        module.visit_params(&mut |p| {
            sizes.push(p.value().len());
            if bad.is_none() && !p.grad().is_finite() {
                bad = Some(p.name().to_string());
            }
        });
        if let Some(name) = bad {
            return Err(NumericsError::NonFiniteGradient(name));
        }
        if self.first.is_empty() {
            self.first = sizes.iter().map(|&n| vec![0.0; n]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != sizes.len()
            || self.first.iter().zip(&sizes).any(|(m, &n)| m.len() != n)
        {
            return Err(NumericsError::InvalidArgument(
                "adam state does not match module parameters".into(),
            ));
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut idx = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        module.visit_params_mut(&mut |p| {
            let m = &mut first[idx];
            let v = &mut second[idx];
            let grad = p.grad().data().to_vec();
            for (i, value) in p.value_mut().data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *value -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
            idx += 1;
        });
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<M: Module + ?Sized>(module: &mut M, max_norm: f64) -> f64 {
    let mut total = 0.0;
    module.visit_params(&mut |p| total += p.grad().data().iter().map(|g| g * g).sum::<f64>());
    let norm = total.sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / (norm + 1e-12);
        module.visit_params_mut(&mut |p| {
            for g in p.grad_mut().data_mut() {
                *g *= scale;
            }
        });
    }
    norm
}
