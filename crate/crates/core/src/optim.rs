//! AdamW with decoupled weight decay and warmup learning-rate schedules.

use serde::{Deserialize, Serialize};
use starbucks_tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Linear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub schedule: ScheduleKind,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr {} must be finite and >= 0", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            problems.push(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio));
        }
        if self.epochs == 0 {
            problems.push("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            problems.push("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            problems.push(format!("eps {} must be > 0", self.eps));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                problems.push(format!("max_grad_norm {c} must be > 0"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_ratio * total_steps as f64).ceil() as usize
    }

    /// Learning rate for the optimizer update with zero-based index `step`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        lr_at(self.lr, self.schedule, step, self.warmup_steps(total_steps), total_steps)
    }
}

/// Linear warmup from 0, then constant, linear or cosine decay to 0 at
/// `total` (the first update uses factor `0` whenever `warmup > 0`).
pub fn lr_at(base: f64, kind: ScheduleKind, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup.max(1) as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    let factor = match kind {
        ScheduleKind::Constant => 1.0,
        ScheduleKind::Linear => 1.0 - progress,
        ScheduleKind::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
    };
    base * factor.max(0.0)
}

/// First and second moments plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: AdamState,
}

impl AdamW {
    pub fn new(config: &OptimConfig, params: &[&Tensor]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|t| t.shape()).collect();
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            state: AdamState::new(&shapes),
        }
    }

    /// One update. Weight decay applies only to matrices (ndim >= 2), so
    /// biases and layernorm vectors are not decayed.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.state.m.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.state.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2_sqrt = (1.0 - self.beta2.powi(t)).sqrt();
        let step_size = lr / bc1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Usage(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let decay = if p.shape().len() >= 2 {
                1.0 - lr * self.weight_decay
            } else {
                1.0
            };
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *pv *= decay;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let denom = vv.sqrt() / bc2_sqrt + self.eps;
                *pv -= step_size * *mv / denom;
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(schedule: ScheduleKind) -> OptimConfig {
        OptimConfig {
            lr: 1.0,
            weight_decay: 0.0,
            warmup_ratio: 0.1,
            schedule,
            epochs: 1,
            batch_size: 2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }

    #[test]
    fn schedules_warm_up_then_decay() {
        let c = config(ScheduleKind::Linear);
        assert_eq!(c.warmup_steps(100), 10);
        assert_eq!(c.lr_at(0, 100), 0.0);
        assert_eq!(c.lr_at(5, 100), 0.5);
        assert_eq!(c.lr_at(10, 100), 1.0);
        assert!((c.lr_at(55, 100) - 0.5).abs() < 1e-15);
        let cos = config(ScheduleKind::Cosine);
        assert!((cos.lr_at(55, 100) - 0.5).abs() < 1e-15);
        assert!(cos.lr_at(99, 100) > 0.0);
        assert_eq!(config(ScheduleKind::Constant).lr_at(90, 100), 1.0);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // with bias correction the first step is lr * g / (|g| + eps')
        let c = config(ScheduleKind::Constant);
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut opt = AdamW::new(&c, &[&p]);
        let g = Tensor::vector(vec![0.5, -3.0]);
        opt.step(&mut [&mut p], &[g], 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
        assert!((p.data()[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn decay_skips_vectors() {
        let mut c = config(ScheduleKind::Constant);
        c.weight_decay = 0.5;
        let mut w = Tensor::full(&[1, 1], 2.0);
        let mut b = Tensor::vector(vec![2.0]);
        let mut opt = AdamW::new(&c, &[&w, &b]);
        let zeros = [Tensor::zeros(&[1, 1]), Tensor::zeros(&[1])];
        opt.step(&mut [&mut w, &mut b], &zeros, 0.1).unwrap();
        assert_eq!(w.data(), &[2.0 * 0.95]);
        assert_eq!(b.data(), &[2.0]);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let n: f64 = g.iter().map(|t| t.data()[0].powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
}
