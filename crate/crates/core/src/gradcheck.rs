//! Finite-difference gradient checking for the layer kernels.
//!
//! Each kernel is reduced to a scalar objective. For the layer kernels that
//! objective is `sum(out * R)` for a fixed random projection `R`, so the
//! analytic gradient is the kernel's backward pass fed with `R`. The loss
//! kernel is checked on the loss itself. Every input element is then
//! perturbed by `±STEP` and compared against the central difference.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kernels::{self, KernelContext, Mode, RunningStats};
use crate::tensor::{Tensor, TensorError};

pub const STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so gradients that are zero up to
/// rounding do not divide by ~0.
pub const REL_FLOOR: f64 = 1e-3;

const DROPOUT_KEEP: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelId {
    Conv2d,
    Maxpool2,
    Relu,
    Dense,
    Batchnorm,
    Dropout,
    SoftmaxXent,
}

impl KernelId {
    pub const ALL: [KernelId; 7] = [
        KernelId::Conv2d,
        KernelId::Maxpool2,
        KernelId::Relu,
        KernelId::Dense,
        KernelId::Batchnorm,
        KernelId::Dropout,
        KernelId::SoftmaxXent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelId::Conv2d => "conv2d",
            KernelId::Maxpool2 => "maxpool2",
            KernelId::Relu => "relu",
            KernelId::Dense => "dense",
            KernelId::Batchnorm => "batchnorm",
            KernelId::Dropout => "dropout",
            KernelId::SoftmaxXent => "softmax_xent",
        }
    }
}

impl FromStr for KernelId {
    type Err = GradCheckError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        KernelId::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| GradCheckError::UnknownKernel(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("unknown kernel id `{0}`")]
    UnknownKernel(String),
    #[error("{kernel} expects {expected} input shapes, got {actual}")]
    Arity {
        kernel: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Maximum relative error between analytic and central-difference gradients,
/// over every differentiable input of the kernel.
///
/// Shapes: `conv2d` takes `[input, kernels]`, `dense` takes
/// `[input, weights]`, the rest take a single input shape (`[B, C]` logits for
/// `softmax_xent`).
pub fn grad_check(kernel: &str, input_shapes: &[Vec<usize>], seed: u64) -> Result<f64, GradCheckError> {
    let id: KernelId = kernel.parse()?;
    grad_check_kernel(id, input_shapes, seed)
}

pub fn grad_check_kernel(id: KernelId, shapes: &[Vec<usize>], seed: u64) -> Result<f64, GradCheckError> {
    let arity = match id {
        KernelId::Conv2d | KernelId::Dense => 2,
        _ => 1,
    };
    if shapes.len() != arity {
        return Err(GradCheckError::Arity {
            kernel: id.name(),
            expected: arity,
            actual: shapes.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match id {
        KernelId::Conv2d => {
            let x = Tensor::uniform(shapes[0].clone(), -1.0, 1.0, &mut rng);
            let k = Tensor::uniform(shapes[1].clone(), -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(vec![shapes[1][0]], -1.0, 1.0, &mut rng);
            let out_shape = kernels::conv2d(&x, &k, &b)?.shape().to_vec();
            let r = Tensor::uniform(out_shape, -1.0, 1.0, &mut rng);
            let g = kernels::conv2d_backward(&x, &k, &b, &r, true)?;
            let analytic = vec![g.input.expect("requested"), g.kernels, g.bias];
            compare(vec![x, k, b], analytic, |p| {
                Ok(dot(&kernels::conv2d(&p[0], &p[1], &p[2])?, &r))
            })
        }
        KernelId::Dense => {
            let x = Tensor::uniform(shapes[0].clone(), -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(shapes[1].clone(), -1.0, 1.0, &mut rng);
            let out_features = shapes[1].get(1).copied().unwrap_or(0);
            let b = Tensor::uniform(vec![out_features], -1.0, 1.0, &mut rng);
            let out_shape = kernels::dense(&x, &w, &b)?.shape().to_vec();
            let r = Tensor::uniform(out_shape, -1.0, 1.0, &mut rng);
            let g = kernels::dense_backward(&x, &w, &r, true)?;
            let analytic = vec![g.input.expect("requested"), g.weights, g.bias];
            compare(vec![x, w, b], analytic, |p| {
                Ok(dot(&kernels::dense(&p[0], &p[1], &p[2])?, &r))
            })
        }
        KernelId::Relu => {
            // Keep inputs at least 0.1 away from the kink.
            let x = Tensor::from_fn(shapes[0].clone(), |_| {
                let mag = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            });
            let r = Tensor::uniform(shapes[0].clone(), -1.0, 1.0, &mut rng);
            let g = kernels::relu_backward(&x, &r)?;
            compare(vec![x], vec![g], |p| Ok(dot(&kernels::relu(&p[0]), &r)))
        }
        KernelId::Maxpool2 => {
            // Distinct values spaced far beyond the step, so no window max flips.
            let n: usize = shapes[0].iter().product();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let x = Tensor::from_fn(shapes[0].clone(), |i| order[i] as f64 * 0.01 - 0.5 * n as f64 * 0.01);
            let (out, idx) = kernels::maxpool2(&x)?;
            let r = Tensor::uniform(out.shape().to_vec(), -1.0, 1.0, &mut rng);
            let g = kernels::maxpool2_backward(&idx, &r)?;
            compare(vec![x], vec![g], |p| Ok(dot(&kernels::maxpool2(&p[0])?.0, &r)))
        }
        KernelId::Batchnorm => {
            let channels = *shapes[0].get(1).unwrap_or(&0);
            let x = Tensor::uniform(shapes[0].clone(), -2.0, 2.0, &mut rng);
            let gamma = Tensor::uniform(vec![channels], 0.5, 1.5, &mut rng);
            let beta = Tensor::uniform(vec![channels], -0.5, 0.5, &mut rng);
            let ctx = KernelContext::new(Mode::Train, seed);
            let (out, cache) = kernels::batchnorm(&x, &gamma, &beta, &mut RunningStats::new(channels), &ctx)?;
            let r = Tensor::uniform(out.shape().to_vec(), -1.0, 1.0, &mut rng);
            let g = kernels::batchnorm_backward(&cache, &gamma, &r)?;
            compare(vec![x, gamma, beta], vec![g.input, g.gamma, g.beta], |p| {
                let mut rs = RunningStats::new(channels);
                let (out, _) = kernels::batchnorm(&p[0], &p[1], &p[2], &mut rs, &ctx)?;
                Ok(dot(&out, &r))
            })
        }
        KernelId::Dropout => {
            let x = Tensor::uniform(shapes[0].clone(), -1.0, 1.0, &mut rng);
            let mask_seed: u64 = rng.gen();
            let mut ctx = KernelContext::train(mask_seed);
            let (out, mask) = kernels::dropout(&x, DROPOUT_KEEP, &mut ctx)?;
            let r = Tensor::uniform(out.shape().to_vec(), -1.0, 1.0, &mut rng);
            let g = kernels::apply_dropout_mask(&r, &mask)?;
            compare(vec![x], vec![g], |p| {
                // Re-seeding reproduces the same mask on every evaluation.
                let mut ctx = KernelContext::train(mask_seed);
                Ok(dot(&kernels::dropout(&p[0], DROPOUT_KEEP, &mut ctx)?.0, &r))
            })
        }
        KernelId::SoftmaxXent => {
            let logits = Tensor::uniform(shapes[0].clone(), -3.0, 3.0, &mut rng);
            let [b, c] = match *shapes[0] {
                [b, c] => [b, c],
                _ => {
                    return Err(TensorError::shape("softmax_xent", "logits must be [B, C]").into());
                }
            };
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
            let (_, probs) = kernels::softmax_xent(&logits, &labels)?;
            let g = kernels::softmax_xent_backward(&probs, &labels)?;
            compare(vec![logits], vec![g], |p| Ok(kernels::softmax_xent(&p[0], &labels)?.0))
        }
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn compare(
    mut inputs: Vec<Tensor<f64>>,
    analytic: Vec<Tensor<f64>>,
    objective: impl Fn(&[Tensor<f64>]) -> Result<f64, TensorError>,
) -> Result<f64, GradCheckError> {
    let mut worst = 0.0f64;
    for t in 0..inputs.len() {
        assert_eq!(inputs[t].shape(), analytic[t].shape(), "gradient shape for input {t}");
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            inputs[t].data_mut()[i] = orig + STEP;
            let plus = objective(&inputs)?;
            inputs[t].data_mut()[i] = orig - STEP;
            let minus = objective(&inputs)?;
            inputs[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[t].data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_small_shapes() {
        let err = grad_check("dense", &[vec![3, 4], vec![4, 2]], 7).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv2d_small_shapes() {
        let err = grad_check("conv2d", &[vec![2, 2, 5, 5], vec![3, 2, 3, 3]], 7).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn relu_away_from_zero() {
        let err = grad_check("relu", &[vec![4, 6]], 7).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn unknown_kernel() {
        assert!(matches!(
            grad_check("gelu", &[vec![2]], 7),
            Err(GradCheckError::UnknownKernel(_))
        ));
    }

    #[test]
    fn wrong_arity() {
        assert!(matches!(
            grad_check("conv2d", &[vec![1, 1, 4, 4]], 7),
            Err(GradCheckError::Arity { .. })
        ));
    }
}
