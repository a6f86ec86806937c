//! Adam with L2 weight decay and the cosine learning-rate schedule.

use ndarray::{Array2, Zip};

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    pub fn new<'a>(params: impl Iterator<Item = &'a Array2<f64>>, weight_decay: f64) -> Self {
        let m: Vec<Array2<f64>> = params.map(|p| Array2::zeros(p.raw_dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    /// One update. The decay term `weight_decay * p` is added to the gradient
    /// before the moment estimates, as in classic (coupled) Adam.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut Array2<f64>>,
        grads: &[Array2<f64>],
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for (((p, g), m), v) in params
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g + wd * *p;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}

/// Cosine annealing from `base` at step 0 to zero at `total`, no restarts.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = step as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut p = vec![array![[3.0, -2.0]]];
        let mut adam = Adam::new(p.iter(), 0.0);
        for _ in 0..2000 {
            let g = vec![p[0].mapv(|x| 2.0 * x)];
            adam.step(p.iter_mut(), &g, 0.01);
        }
        assert!(p[0].iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![array![[1.0]]];
        let mut adam = Adam::new(p.iter(), 0.0);
        adam.step(p.iter_mut(), &[array![[0.3]]], 0.1);
        assert!((p[0][[0, 0]] - 0.9).abs() < 1e-6);
    }
}
