use crate::model::ParamSet;
use crate::tensor::Tensor;

/// Linear warmup over `ceil(warmup_ratio · total)` steps, then linear
/// decay towards zero at `total`.
pub fn lr_at(step: usize, total: usize, warmup_ratio: f64, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let warm = ((warmup_ratio * total as f64).ceil() as usize).max(1).min(total);
    if step < warm {
        base * (step + 1) as f64 / warm as f64
    } else if total == warm {
        base
    } else {
        base * (total - step.min(total)) as f64 / (total - warm) as f64
    }
}

/// AdamW with decoupled weight decay and global-norm gradient clipping.
/// Moments are kept per parameter, in the order the parameters are passed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &impl ParamSet, weight_decay: f64) -> Self {
        Self::with_sizes(params.named_params().iter().map(|(_, t)| t.len()), weight_decay)
    }

    pub fn with_sizes(sizes: impl IntoIterator<Item = usize>, weight_decay: f64) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    /// Applies one update. Parameters whose gradient is `None` are left
    /// untouched (no decay, no moment update). Returns the global gradient
    /// norm before clipping.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Option<Vec<f64>>], lr: f64, clip: f64) -> f64 {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter list");
        assert_eq!(params.len(), grads.len());
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let Some(g) = g else { continue };
            assert_eq!(g.len(), p.len(), "gradient length mismatch");
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * scale;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
        norm
    }
}
