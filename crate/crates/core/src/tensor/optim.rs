use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub config: AdamWConfig,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config }
    }

    /// One update of `params` in place. Decay scales the weights directly
    /// (`w ← w·(1 − lr·wd)`) before the bias-corrected Adam step.
    pub fn step(&self, params: &mut [f32], grads: &[f32], state: &mut Moments, lr: f32) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), state.m.len());
        let c = self.config;
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - lr * c.weight_decay;
        for (((w, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(state.m.iter_mut())
            .zip(state.v.iter_mut())
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w = *w * decay - lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}

/// Learning-rate schedule: linear warmup, then constant or cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    ConstantAfterWarmup { warmup_steps: u64 },
    Cosine { warmup_steps: u64, total_steps: u64 },
}

impl LrSchedule {
    /// Multiplier applied to the base rate at zero-based `step`.
    pub fn factor(&self, step: u64) -> f32 {
        let warm = |w: u64| {
            if w > 0 && step < w {
                Some((step + 1) as f32 / w as f32)
            } else {
                None
            }
        };
        match *self {
            LrSchedule::ConstantAfterWarmup { warmup_steps } => warm(warmup_steps).unwrap_or(1.0),
            LrSchedule::Cosine {
                warmup_steps,
                total_steps,
            } => warm(warmup_steps).unwrap_or_else(|| {
                let span = total_steps.saturating_sub(warmup_steps).max(1);
                let progress = ((step - warmup_steps) as f32 / span as f32).min(1.0);
                0.5 * (1.0 + (std::f32::consts::PI * progress).cos())
            }),
        }
    }
}

/// Rescales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<'a>(grads: impl IntoIterator<Item = &'a mut Vec<f32>>, max_norm: f32) -> f32 {
    let grads: Vec<&mut Vec<f32>> = grads.into_iter().collect();
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
