use crate::lm::PolicyCheckpoint;

/// Adam with decoupled weight decay. Decay applies to matrices only;
/// gains, biases and nothing else are left alone.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(model: &PolicyCheckpoint, lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamW {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr_scale · lr`.
    pub fn step(&mut self, model: &mut PolicyCheckpoint, grads: &[Vec<f64>], lr_scale: f64) {
        self.t += 1;
        let lr = self.lr * lr_scale;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in model.params.iter_mut().enumerate() {
            let decay = if p.value.shape().len() == 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[k][i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * (mh / (vh.sqrt() + self.eps) + decay * *w);
            }
        }
    }
}

/// Global L2 norm over all gradient arrays.
pub fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients so their global norm is at most `max_norm` (0 disables).
/// Returns the norm before clipping.
pub fn clip_grads(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let n = grad_norm(grads);
    if max_norm > 0.0 && n > max_norm {
        let s = max_norm / n;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
    n
}
