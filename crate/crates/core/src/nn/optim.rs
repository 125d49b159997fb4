use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        check(params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::shape("optimizer_step", "parameter set changed between steps"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (x, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi.f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                let old = x.f64();
                let new = old - self.lr * self.weight_decay * old - self.lr * mh / (vh.sqrt() + self.eps);
                *x = T::of(new);
            }
        }
        Ok(())
    }
}

/// Adan (adaptive Nesterov momentum), the plain form without restarts.
#[derive(Clone, Debug)]
pub struct Adan {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    n: Vec<Vec<f64>>,
    prev: Vec<Vec<f64>>,
}

impl Adan {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.02,
            beta2: 0.08,
            beta3: 0.01,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            n: Vec::new(),
            prev: Vec::new(),
        }
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        check(params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
            self.n = self.m.clone();
            self.prev = self.m.clone();
        }
        let first = self.step == 0;
        self.step += 1;
        let (b1, b2, b3) = (self.beta1, self.beta2, self.beta3);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (i, (x, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi.f64();
                let diff = if first { 0.0 } else { gi - self.prev[k][i] };
                self.m[k][i] = (1.0 - b1) * self.m[k][i] + b1 * gi;
                self.v[k][i] = (1.0 - b2) * self.v[k][i] + b2 * diff;
                let u = gi + (1.0 - b2) * diff;
                self.n[k][i] = (1.0 - b3) * self.n[k][i] + b3 * u * u;
                self.prev[k][i] = gi;
                let eta = self.lr / (self.n[k][i].sqrt() + self.eps);
                let upd = x.f64() - eta * (self.m[k][i] + (1.0 - b2) * self.v[k][i]);
                *x = T::of(upd / (1.0 + self.weight_decay * self.lr));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    Adan,
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    AdamW(AdamW),
    Adan(Adan),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        match kind {
            OptimizerKind::AdamW => Optimizer::AdamW(AdamW::new(lr).with_weight_decay(weight_decay)),
            OptimizerKind::Adan => {
                let mut a = Adan::new(lr);
                a.weight_decay = weight_decay;
                Optimizer::Adan(a)
            }
        }
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        match self {
            Optimizer::AdamW(o) => o.step(params, grads),
            Optimizer::Adan(o) => o.step(params, grads),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::AdamW(o) => o.lr = lr,
            Optimizer::Adan(o) => o.lr = lr,
        }
    }
}

fn check<T: Scalar>(params: &[Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("optimizer_step", format!("{} params, {} grads", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape("optimizer_step", format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::scalar(0.5)];
        let g = vec![Tensor::<f64>::scalar(1.0)];
        let mut opt = AdamW::new(0.001);
        opt.step(&mut p, &g).unwrap();
        let delta = p[0].data()[0] - 0.5;
        assert!((delta + 0.001).abs() < 1e-10, "{delta}");
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![Tensor::<f32>::from_fn([3], |i| i as f32)];
        let before = p.clone();
        let g = vec![Tensor::<f32>::zeros([3])];
        let mut opt = AdamW::new(0.01);
        for _ in 0..5 {
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = vec![Tensor::<f32>::from_fn([4], |i| i as f32 - 1.5)];
        let before = p.clone();
        let g = vec![Tensor::<f32>::from_fn([4], |i| (i as f32).sin())];
        let mut opt = Optimizer::new(OptimizerKind::AdamW, 0.0, 0.1);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p, before);
        let mut opt = Optimizer::new(OptimizerKind::Adan, 0.0, 0.1);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut p = vec![Tensor::<f64>::scalar(2.0)];
        let g = vec![Tensor::<f64>::scalar(0.0)];
        let mut opt = AdamW::new(0.1).with_weight_decay(0.5);
        opt.step(&mut p, &g).unwrap();
        assert!((p[0].data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = vec![Tensor::<f32>::scalar(1.0)];
        let g = vec![Tensor::<f32>::scalar(f32::NAN)];
        let mut opt = AdamW::new(0.1);
        assert!(matches!(opt.step(&mut p, &g), Err(Error::NonFinite(_))));
        assert_eq!(p[0].data()[0], 1.0);
        assert_eq!(opt.steps(), 0);
    }
}
