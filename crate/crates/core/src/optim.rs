//! Training recipe: rmsprop with Polyak momentum, L1/L2 penalties,
//! learning-rate schedules, early termination and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{batches, DatasetBundle, DatasetError, Split};
use crate::kernels::{self, KernelContext};
use crate::network::{Gradients, Layer, Network, NetworkError, ParamId};
use crate::seeds;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("non-finite gradient for {param}")]
    NonFiniteGradient { param: String },
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Learning-rate schedule over epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// `lr0 * gamma^epoch`.
    Multiplicative { gamma: f64 },
    /// `max(lr_floor, lr0 - delta * epoch)`.
    Subtractive { delta: f64 },
    /// Rate of the last entry whose start epoch is `<= epoch`; `lr0` before
    /// the first entry.
    Piecewise { table: Vec<(usize, f64)> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub enabled: bool,
    /// Epochs without a new best validation error before stopping.
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr0: f64,
    pub schedule: Schedule,
    /// `[m_lo, m_hi]`.
    pub momentum_range: [f64; 2],
    pub momentum_ramp_epochs: usize,
    pub l1: f64,
    pub l2: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub early_stop: EarlyStop,
    pub rho: f64,
    pub eps: f64,
    pub lr_floor: f64,
}

impl Default for OptimConfig {
    /// The character-network recipe: lr 0.01 with multiplicative decay,
    /// momentum ramped over [0.5, 1] across 100 epochs, L1 = L2 = 1e-4,
    /// 200 epochs, batches of 500.
    fn default() -> Self {
        OptimConfig {
            lr0: 0.01,
            schedule: Schedule::Multiplicative { gamma: 0.998 },
            momentum_range: [0.5, 1.0],
            momentum_ramp_epochs: 100,
            l1: 1e-4,
            l2: 1e-4,
            max_epochs: 200,
            batch_size: 500,
            early_stop: EarlyStop {
                enabled: true,
                patience: 20,
            },
            rho: 0.9,
            eps: 1e-8,
            lr_floor: 1e-6,
        }
    }
}

impl OptimConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::Config(m));
        let [lo, hi] = self.momentum_range;
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad(format!(
                "momentum_range must satisfy 0 <= lo <= hi <= 1, got [{lo}, {hi}]"
            ));
        }
        if !(self.l1 >= 0.0 && self.l2 >= 0.0) {
            return bad("l1 and l2 must be non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho must be in [0, 1), got {}", self.rho));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.lr_floor < 0.0 {
            return bad("lr_floor must be non-negative".into());
        }
        match &self.schedule {
            Schedule::Multiplicative { gamma } if !(*gamma > 0.0) => {
                bad(format!("gamma must be positive, got {gamma}"))
            }
            Schedule::Subtractive { delta } if *delta < 0.0 => bad(format!("delta must be non-negative, got {delta}")),
            Schedule::Piecewise { table } if table.iter().any(|&(_, lr)| !(lr > 0.0)) => {
                bad("piecewise rates must be positive".into())
            }
            Schedule::Piecewise { table } if table.windows(2).any(|w| w[0].0 >= w[1].0) => {
                bad("piecewise start epochs must be strictly increasing".into())
            }
            _ => Ok(()),
        }
    }
}

/// Polyak momentum at `epoch`: linear from `m_lo` at 0 to `m_hi` at the end
/// of the ramp, constant afterwards.
pub fn momentum_coefficient(epoch: usize, cfg: &OptimConfig) -> f64 {
    let [lo, hi] = cfg.momentum_range;
    if cfg.momentum_ramp_epochs == 0 || epoch >= cfg.momentum_ramp_epochs {
        return hi;
    }
    lo + (hi - lo) * epoch as f64 / cfg.momentum_ramp_epochs as f64
}

pub fn lr_at(epoch: usize, cfg: &OptimConfig) -> f64 {
    match &cfg.schedule {
        Schedule::Multiplicative { gamma } => cfg.lr0 * gamma.powi(epoch as i32),
        Schedule::Subtractive { delta } => (cfg.lr0 - delta * epoch as f64).max(cfg.lr_floor),
        Schedule::Piecewise { table } => table
            .iter()
            .take_while(|(start, _)| *start <= epoch)
            .last()
            .map_or(cfg.lr0, |&(_, lr)| lr),
    }
}

/// Per-parameter rmsprop accumulators and momentum velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S> {
    pub acc: BTreeMap<ParamId, Tensor<S>>,
    pub velocity: BTreeMap<ParamId, Tensor<S>>,
    pub epoch: usize,
    pub lr: f64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new() -> Self {
        OptimizerState {
            acc: BTreeMap::new(),
            velocity: BTreeMap::new(),
            epoch: 0,
            lr: 0.0,
        }
    }
}

impl<S: Scalar> Default for OptimizerState<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// One update of a single parameter tensor in place:
///
/// ```text
/// g   <- grad + 2 l2 theta + l1 sign(theta)
/// acc <- rho acc + (1 - rho) g^2
/// v   <- m v - lr g / sqrt(acc + eps)
/// theta <- theta + v
/// ```
pub fn update_param<S: Scalar>(
    theta: &mut [S],
    grad: &[S],
    acc: &mut [S],
    velocity: &mut [S],
    cfg: &OptimConfig,
    lr: f64,
    momentum: f64,
) {
    let c = |v: f64| S::from_f64_lossy(v);
    let (l1, l2, rho, eps, lr, m) = (c(cfg.l1), c(cfg.l2), c(cfg.rho), c(cfg.eps), c(lr), c(momentum));
    let two = c(2.0);
    let one = S::one();
    for i in 0..theta.len() {
        let t = theta[i];
        let sign = if t > S::zero() {
            one
        } else if t < S::zero() {
            -one
        } else {
            S::zero()
        };
        let g = grad[i] + two * l2 * t + l1 * sign;
        acc[i] = rho * acc[i] + (one - rho) * g * g;
        velocity[i] = m * velocity[i] - lr * g / (acc[i] + eps).sqrt();
        theta[i] = t + velocity[i];
    }
}

/// Applies one optimizer step to every unfrozen parameter with a gradient.
/// Frozen parameters and their state are left untouched.
pub fn step<S: Scalar>(
    net: &mut Network<S>,
    grads: &Gradients<S>,
    state: &mut OptimizerState<S>,
    cfg: &OptimConfig,
    lr: f64,
    momentum: f64,
) -> Result<(), OptimError> {
    for (id, g) in &grads.entries {
        if !g.is_finite() {
            return Err(OptimError::NonFiniteGradient {
                param: format!("{}.{}", net.layer_name(id.layer), id.name),
            });
        }
    }
    let frozen = net.freeze_mask().to_vec();
    let names: Vec<String> = (0..frozen.len()).map(|i| net.layer_name(i).to_string()).collect();
    for (id, theta) in net.params_mut() {
        if frozen[id.layer] {
            continue;
        }
        let Some(g) = grads.get(id) else { continue };
        if g.shape() != theta.shape() {
            return Err(OptimError::Tensor(TensorError::Shape {
                op: "step",
                detail: format!(
                    "gradient {:?} vs parameter {:?} for {}.{}",
                    g.shape(),
                    theta.shape(),
                    names[id.layer],
                    id.name
                ),
            }));
        }
        let acc = state
            .acc
            .entry(id)
            .or_insert_with(|| Tensor::zeros(theta.shape().to_vec()));
        let vel = state
            .velocity
            .entry(id)
            .or_insert_with(|| Tensor::zeros(theta.shape().to_vec()));
        update_param(
            theta.data_mut(),
            g.data(),
            acc.data_mut(),
            vel.data_mut(),
            cfg,
            lr,
            momentum,
        );
    }
    Ok(())
}

/// Metrics recorded after one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub train_loss: f64,
    pub valid_error: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; `None` if no epoch ran.
    pub best_epoch: Option<usize>,
    pub early_stopped: bool,
}

pub const HISTORY_CSV_HEADER: &str = "epoch,lr,momentum,train_loss,valid_error,test_accuracy";

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.lr, r.momentum, r.train_loss, r.valid_error, r.test_accuracy
            )
            .expect("write to string");
        }
        out
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.records.iter().find(|r| r.epoch == e))
    }
}

fn has_trainable_batchnorm<S: Scalar>(net: &Network<S>) -> bool {
    net.layers()
        .iter()
        .enumerate()
        .any(|(i, l)| matches!(l, Layer::Batchnorm { .. }) && !net.is_frozen(i))
}

/// Trains `net` on `data.train` and returns the parameters of the epoch with
/// the lowest validation error (earliest on ties) together with the history.
/// Optimizer state starts fresh.
pub fn train<S: Scalar>(
    net: Network<S>,
    data: &DatasetBundle,
    cfg: &OptimConfig,
    seed: u64,
) -> Result<(Network<S>, History), OptimError> {
    cfg.validate()?;
    if cfg.max_epochs == 0 {
        return Ok((net, History::default()));
    }
    for (split, name) in [(&data.train, "train"), (&data.valid, "valid"), (&data.test, "test")] {
        if split.is_empty() {
            return Err(DatasetError::EmptySplit { split: name }.into());
        }
    }
    let mut net = net;
    let mut state = OptimizerState::new();
    let mut ctx = KernelContext::train(seeds::derive(seed, "dropout"));
    let skip_singletons = has_trainable_batchnorm(&net);
    let mut history = History::default();
    let mut best: Option<(f64, usize, Network<S>)> = None;
    for epoch in 0..cfg.max_epochs {
        let lr = lr_at(epoch, cfg);
        let momentum = momentum_coefficient(epoch, cfg);
        state.epoch = epoch;
        state.lr = lr;
        let order = batches(
            data.train.len(),
            cfg.batch_size,
            seeds::derive(seed, &format!("shuffle/{epoch}")),
        )?;
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for idx in order {
            if skip_singletons && idx.len() < 2 {
                continue;
            }
            let x = data.train.batch_tensor::<S>(&idx);
            let labels = data.train.batch_labels(&idx);
            let (logits, trace) = net.forward_train(&x, &mut ctx)?;
            let (loss, probs) = kernels::softmax_xent(&logits, &labels).map_err(|_| OptimError::Diverged { epoch })?;
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(OptimError::Diverged { epoch });
            }
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
            let grad = kernels::softmax_xent_backward(&probs, &labels)?;
            let grads = net.backward(&trace, &grad)?;
            step(&mut net, &grads, &mut state, cfg, lr, momentum).map_err(|e| match e {
                OptimError::NonFiniteGradient { .. } => OptimError::Diverged { epoch },
                other => other,
            })?;
        }
        let valid_error = 1.0 - evaluate(&net, &data.valid)?;
        let test_accuracy = evaluate(&net, &data.test)?;
        history.records.push(EpochRecord {
            epoch,
            lr,
            momentum,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { 0.0 },
            valid_error,
            test_accuracy,
        });
        let improved = best.as_ref().is_none_or(|(e, _, _)| valid_error < *e);
        if improved {
            best = Some((valid_error, epoch, net.clone()));
        } else if cfg.early_stop.enabled {
            let best_epoch = best.as_ref().map_or(0, |b| b.1);
            if epoch - best_epoch >= cfg.early_stop.patience {
                history.early_stopped = true;
                break;
            }
        }
    }
    let (_, best_epoch, best_net) = best.expect("at least one epoch ran");
    history.best_epoch = Some(best_epoch);
    Ok((best_net, history))
}

const EVAL_BATCH: usize = 256;

/// Top-1 accuracy of `net` on `split` in inference mode.
pub fn evaluate<S: Scalar>(net: &Network<S>, split: &Split) -> Result<f64, OptimError> {
    if split.is_empty() {
        return Err(DatasetError::EmptySplit { split: "evaluation" }.into());
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..split.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let logits = net.predict(&split.batch_tensor::<S>(idx))?;
        correct += count_correct(&logits, &split.batch_labels(idx));
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn count_correct<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Fraction of rows of `logits` whose argmax equals the label.
pub fn accuracy_from_logits<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    count_correct(logits, labels) as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ArchId, LayerSpec, NetworkSpec};

    fn cfg() -> OptimConfig {
        OptimConfig::default()
    }

    #[test]
    fn momentum_ramp() {
        let c = cfg();
        assert_eq!(momentum_coefficient(0, &c), 0.5);
        assert_eq!(momentum_coefficient(50, &c), 0.75);
        assert_eq!(momentum_coefficient(100, &c), 1.0);
        assert_eq!(momentum_coefficient(150, &c), 1.0);
    }

    #[test]
    fn schedules() {
        let mut c = cfg();
        c.schedule = Schedule::Multiplicative { gamma: 0.5 };
        assert!((lr_at(2, &c) - 0.0025).abs() < 1e-15);
        c.lr0 = 0.001;
        c.schedule = Schedule::Subtractive { delta: 0.0005 };
        assert!((lr_at(1, &c) - 0.0005).abs() < 1e-15);
        assert_eq!(lr_at(10, &c), 1e-6);
        c.schedule = Schedule::Piecewise {
            table: vec![(0, 0.001), (150, 0.0001)],
        };
        assert_eq!(lr_at(0, &c), 0.001);
        assert_eq!(lr_at(149, &c), 0.001);
        assert_eq!(lr_at(151, &c), 0.0001);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let mut c = cfg();
        c.momentum_range = [0.9, 0.5];
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.lr0 = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.l1 = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn two_step_scalar_trace() {
        let mut c = cfg();
        c.l1 = 0.0;
        c.l2 = 0.0;
        c.rho = 0.9;
        c.eps = 1e-8;
        let (lr, m) = (0.1, 0.5);
        let mut theta = [1.0f64];
        let (mut acc, mut vel) = ([0.0f64], [0.0f64]);
        update_param(&mut theta, &[0.5], &mut acc, &mut vel, &c, lr, m);
        // acc1 = 0.1 * 0.25, v1 = -0.1 * 0.5 / sqrt(acc1 + eps)
        let acc1 = 0.025f64;
        let v1 = -0.05 / (acc1 + 1e-8).sqrt();
        assert!((acc[0] - acc1).abs() < 1e-12);
        assert!((theta[0] - (1.0 + v1)).abs() < 1e-12);
        update_param(&mut theta, &[-0.2], &mut acc, &mut vel, &c, lr, m);
        let acc2 = 0.9 * acc1 + 0.1 * 0.04;
        let v2 = 0.5 * v1 + 0.02 / (acc2 + 1e-8).sqrt();
        assert!((acc[0] - acc2).abs() < 1e-12);
        assert!((vel[0] - v2).abs() < 1e-12);
        assert!((theta[0] - (1.0 + v1 + v2)).abs() < 1e-12);
    }

    #[test]
    fn regularizers_enter_gradient() {
        let mut c = cfg();
        c.l1 = 0.01;
        c.l2 = 0.1;
        let mut theta = [-2.0f64];
        let (mut acc, mut vel) = ([0.0f64], [0.0f64]);
        update_param(&mut theta, &[0.0], &mut acc, &mut vel, &c, 0.1, 0.0);
        let g = 2.0 * 0.1 * -2.0 - 0.01;
        assert!((acc[0] - 0.1 * g * g).abs() < 1e-15);
        assert!(theta[0] > -2.0);
    }

    fn tiny_net() -> Network<f64> {
        let spec = NetworkSpec::custom(
            vec![
                LayerSpec::Dense { width: 4 },
                LayerSpec::Relu,
                LayerSpec::SoftmaxClassifier,
            ],
            2,
            [1, 2, 2],
        );
        Network::build(spec, 3).unwrap()
    }

    #[test]
    fn zero_gradients_leave_params() {
        let mut net = tiny_net();
        let before = net.clone();
        let grads = Gradients {
            entries: net
                .params()
                .into_iter()
                .map(|(id, t)| (id, Tensor::zeros(t.shape().to_vec())))
                .collect(),
        };
        let mut c = cfg();
        c.l1 = 0.0;
        c.l2 = 0.0;
        step(&mut net, &grads, &mut OptimizerState::new(), &c, 0.1, 0.9).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut net = tiny_net();
        net.set_frozen_prefix(1);
        let before = net.clone();
        let grads = Gradients {
            entries: net
                .params()
                .into_iter()
                .map(|(id, t)| (id, Tensor::ones(t.shape().to_vec())))
                .collect(),
        };
        let mut state = OptimizerState::new();
        step(&mut net, &grads, &mut state, &cfg(), 0.1, 0.9).unwrap();
        assert_eq!(net.layers()[0], before.layers()[0]);
        assert_ne!(net.layers()[2], before.layers()[2]);
        assert!(state.acc.keys().all(|id| id.layer == 2));
    }

    #[test]
    fn non_finite_gradient_named() {
        let mut net = tiny_net();
        let mut grads = Gradients {
            entries: net
                .params()
                .into_iter()
                .map(|(id, t)| (id, Tensor::zeros(t.shape().to_vec())))
                .collect(),
        };
        grads.entries[0].1.data_mut()[0] = f64::NAN;
        let err = step(&mut net, &grads, &mut OptimizerState::new(), &cfg(), 0.1, 0.9).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient for dense1.weights");
    }

    #[test]
    fn hand_counted_accuracy() {
        let labels = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0];
        let preds = [0, 1, 2, 0, 1, 2, 0, 0, 0, 1];
        let logits = Tensor::from_fn(vec![10, 3], |i| if preds[i / 3] == i % 3 { 1.0f64 } else { 0.0 });
        assert!((accuracy_from_logits(&logits, &labels) - 0.7).abs() < 1e-15);
        let ties = Tensor::new(vec![1, 3], vec![2.0f64, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&ties), vec![0]);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let net = Network::<f32>::build(NetworkSpec::preset(ArchId::Char3conv, 10, [1, 28, 28]), 1).unwrap();
        let data = crate::datasets::make_synthetic(
            crate::datasets::Family::Strokes,
            crate::datasets::SyntheticSizes {
                train: 10,
                valid: 10,
                test: 10,
            },
            0,
        )
        .unwrap();
        let mut c = cfg();
        c.max_epochs = 0;
        let (out, h) = train(net.clone(), &data, &c, 0).unwrap();
        assert_eq!(out, net);
        assert!(h.records.is_empty());
    }

    #[test]
    fn history_csv() {
        let h = History {
            records: vec![EpochRecord {
                epoch: 0,
                lr: 0.01,
                momentum: 0.5,
                train_loss: 1.5,
                valid_error: 0.25,
                test_accuracy: 0.75,
            }],
            best_epoch: Some(0),
            early_stopped: false,
        };
        assert_eq!(h.to_csv(), format!("{HISTORY_CSV_HEADER}\n0,0.01,0.5,1.5,0.25,0.75\n"));
    }
}
