use crate::real::Real;
use crate::tensor::ParamStore;

/// Adam with bias correction; weight decay is classic L2 added to the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<S: Real>(&mut self, params: &mut ParamStore<S>, grads: &[Vec<S>], lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &g), m), v) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let xv = x.f64();
                let g = g.f64() + self.weight_decay * xv;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *x = S::lit(xv - update);
            }
        }
    }
}

/// `eta_min + ½(lr − eta_min)(1 + cos(π·epoch/epochs))`.
pub fn cosine_lr(epoch: usize, epochs: usize, lr: f64, eta_min: f64) -> f64 {
    if epochs == 0 {
        return lr;
    }
    let t = epoch.min(epochs) as f64 / epochs as f64;
    eta_min + 0.5 * (lr - eta_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("x", Tensor::new(vec![1], vec![x]).unwrap()).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        let mut adam = Adam::new(0.0);
        adam.step(&mut s, &[vec![0.37]], 0.01);
        assert!((s.iter().next().unwrap().tensor.data()[0] - 0.99).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = scalar_store(3.0);
        let mut adam = Adam::new(0.0);
        for _ in 0..5 {
            adam.step(&mut s, &[vec![0.0]], 0.1);
        }
        assert_eq!(s.iter().next().unwrap().tensor.data()[0], 3.0);
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut s = scalar_store(5.0);
        let mut adam = Adam::new(0.0);
        for _ in 0..200 {
            let x = s.iter().next().unwrap().tensor.data()[0];
            adam.step(&mut s, &[vec![2.0 * x]], 0.05);
        }
        assert!(s.iter().next().unwrap().tensor.data()[0].abs() < 0.1);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 300, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(300, 300, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(150, 300, 1e-3, 0.0) - 5e-4).abs() < 1e-15);
        for e in 0..300 {
            assert!((cosine_lr(e, 300, 1e-3, 1e-3) - 1e-3).abs() < 1e-18);
        }
    }
}
