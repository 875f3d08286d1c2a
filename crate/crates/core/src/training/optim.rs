//! AdamW with decoupled weight decay, and a plateau learning-rate schedule.

use crate::error::{invalid, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    /// Zero moments matching `shapes`; betas (0.9, 0.999), eps 1e-8.
    pub fn new(lr: f64, weight_decay: f64, shapes: &[&[usize]]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_params(lr: f64, weight_decay: f64, params: &[Tensor<T>]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(Tensor::shape).collect();
        Self::new(lr, weight_decay, &shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Restore optimizer state saved by a checkpoint.
    pub fn restore(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        let same = |a: &[Tensor<T>], b: &[Tensor<T>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
        };
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(invalid(
                "adamw",
                "moment shapes do not match the parameters",
            ));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// `p ← p(1 − lr·wd) − lr·m̂/(√v̂ + eps)` with bias-corrected moments.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(invalid(
                "adamw",
                "parameter, gradient and moment counts differ",
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let shrink = 1.0 - self.lr * self.weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            if g.len() != p.len() {
                return Err(invalid("adamw", format!("gradient {i} has the wrong size")));
            }
            let mut pd = std::mem::take(p).into_data();
            let mut md = std::mem::take(&mut self.m[i]).into_data();
            let mut vd = std::mem::take(&mut self.v[i]).into_data();
            for j in 0..pd.len() {
                let gj = g[j].to_f64c();
                let m = b1 * md[j].to_f64c() + (1.0 - b1) * gj;
                let v = b2 * vd[j].to_f64c() + (1.0 - b2) * gj * gj;
                md[j] = T::of(m);
                vd[j] = T::of(v);
                let upd = (m / c1) / ((v / c2).sqrt() + self.eps);
                pd[j] = T::of(pd[j].to_f64c() * shrink - self.lr * upd);
            }
            let shape = grads[i].shape();
            *p = Tensor::new(shape, pd)?;
            self.m[i] = Tensor::new(shape, md)?;
            self.v[i] = Tensor::new(shape, vd)?;
        }
        Ok(())
    }
}

/// Scale `grads` so their joint L2 norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.to_f64c().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.map(|v| v * T::of(s));
        }
    }
    norm
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// validations without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    /// Lowest validation loss seen so far.
    pub best: f64,
    /// Consecutive validations without improvement.
    pub bad: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            factor: 0.8,
            patience: 2,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Record a validation loss and return the learning rate to use next.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad = 0;
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                self.lr *= self.factor;
                self.bad = 0;
            }
        }
        self.lr
    }
}
