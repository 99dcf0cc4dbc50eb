//! Optimizers: Adam for the three trainers, plus global-norm gradient
//! clipping shared with the test-time optimization loop.

use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Per-epoch losses recorded by the trainers. `extra` carries named loss
/// components (e.g. the InfoNCE and reconstruction terms separately).
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub extra: Vec<(String, f64)>,
}

pub type TrainTrace = Vec<EpochStats>;

/// Writes a trace as line-delimited text for plotting.
pub fn write_trace(path: impl AsRef<std::path::Path>, trace: &TrainTrace) -> std::io::Result<()> {
    let mut out = String::new();
    for e in trace {
        out.push_str(&format!("epoch {} train {:.6} val {:.6}", e.epoch, e.train_loss, e.val_loss));
        for (k, v) in &e.extra {
            out.push_str(&format!(" {k} {v:.6}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)
}

/// Adam with bias correction. One instance owns the moment state for a
/// fixed, ordered parameter list.
#[derive(Debug)]
pub struct Adam<S: Scalar> {
    pub lr: S,
    beta1: S,
    beta2: S,
    eps: S,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, param_sizes: &[usize]) -> Self {
        Adam {
            lr: s(lr),
            beta1: s(0.9),
            beta2: s(0.999),
            eps: s(1e-8),
            step: 0,
            m: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    /// Applies one update. `params` and `grads` must line up with the sizes
    /// given at construction.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Vec<S>]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let data = p.data_mut();
            assert_eq!(data.len(), g.len(), "parameter/gradient size mismatch");
            for k in 0..data.len() {
                m[k] = self.beta1 * m[k] + (S::one() - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (S::one() - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                data[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scales the gradient set so its global L2 norm does not exceed
/// `max_norm`. Returns the norm *after* clipping. Norms accumulate in f64
/// so the recorded value is not distorted by single-precision summation.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: S) -> S {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| {
            let x = v.to_f64_c();
            x * x
        })
        .sum();
    let norm = sq.sqrt();
    let max = max_norm.to_f64_c();
    if norm > max {
        let scale = max / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = S::from_f64_c(v.to_f64_c() * scale);
            }
        }
        let sq2: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&v| {
                let x = v.to_f64_c();
                x * x
            })
            .sum();
        S::from_f64_c(sq2.sqrt())
    } else {
        S::from_f64_c(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = Tensor::<f32>::from_vec(vec![2], vec![1.0, -1.0]).unwrap();
        let mut opt = Adam::new(0.1, &[2]);
        let g = vec![vec![1.0f32, -1.0]];
        opt.step(&mut [&mut p], &g);
        assert!(p.data()[0] < 1.0);
        assert!(p.data()[1] > -1.0);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut g = vec![vec![0.3f64, 0.4]];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 0.5).abs() < 1e-12);
        assert_eq!(g[0], vec![0.3, 0.4]);
    }

    #[test]
    fn clip_scales_large_gradients_to_bound() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 1.0).abs() < 1e-9);
        assert!((g[0][0] - 0.6).abs() < 1e-12);
        assert!((g[1][0] - 0.8).abs() < 1e-12);
    }
}
