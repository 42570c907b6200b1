use crate::model::ModelParams;

/// Learning rate at `step` (0-based) of `total`: linear warmup from 0 to
/// `peak` over `warmup` steps, then linear decay reaching 0 at the final step.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    let last = total - 1;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if last <= warmup {
        return if step == last { 0.0 } else { peak };
    }
    peak * (last - step) as f64 / (last - warmup) as f64
}

pub fn lr_schedule(total: usize, warmup: usize, peak: f64) -> Vec<f64> {
    (0..total).map(|s| lr_at(s, total, warmup, peak)).collect()
}

/// Adam with decoupled weight decay. Biases and norm parameters are not
/// decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gain"))
}

impl AdamW {
    pub fn new(params: &ModelParams, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One update of every tensor for which `trainable(name)` holds; the
    /// others are left untouched.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &ModelParams,
        lr: f64,
        trainable: &dyn Fn(&str) -> bool,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let grads = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((name, p), (_, g)), ((_, m), (_, v))) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(ms.into_iter().zip(vs))
        {
            if !trainable(&name) {
                continue;
            }
            let decay = if decays(&name) { wd } else { 0.0 };
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *p -= lr * (update + decay * *p);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = lr_schedule(11, 5, 1.0);
        assert_eq!(s[0], 0.0);
        assert_eq!(s[5], 1.0);
        assert_eq!(s[10], 0.0);
        assert!((s[2] - 0.4).abs() < 1e-15);
        assert!((s[8] - 0.4).abs() < 1e-15);
        let s = lr_schedule(4, 0, 2.0);
        assert_eq!(s[0], 2.0);
        assert_eq!(s[3], 0.0);
        assert_eq!(lr_schedule(1, 0, 1.0), vec![0.0]);
        assert_eq!(lr_schedule(3, 2, 1.0), vec![0.0, 0.5, 0.0]);
    }

    #[test]
    fn schedule_is_piecewise_linear() {
        let (total, warmup) = (50, 12);
        let s = lr_schedule(total, warmup, 3e-4);
        let peak = s.iter().cloned().fold(0.0, f64::max);
        assert_eq!(s[warmup], peak);
        for w in s[..=warmup].windows(3) {
            assert!(((w[1] - w[0]) - (w[2] - w[1])).abs() < 1e-15);
        }
        for w in s[warmup..].windows(3) {
            assert!(((w[1] - w[0]) - (w[2] - w[1])).abs() < 1e-15);
        }
    }
}
