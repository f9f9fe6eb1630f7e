//! SGD with momentum, Adam, and step learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamGrads, Parameters};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDrop {
    /// The drop applies to every epoch strictly after this one.
    pub after_epoch: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial_lr: f64,
    #[serde(default)]
    pub drops: Vec<LrDrop>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial_lr: lr,
            drops: Vec::new(),
        }
    }

    pub fn with_drops(initial_lr: f64, drops: &[(usize, f64)]) -> Result<Self> {
        let s = Self {
            initial_lr,
            drops: drops
                .iter()
                .map(|&(after_epoch, factor)| LrDrop {
                    after_epoch,
                    factor,
                })
                .collect(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(Error::Config(format!(
                "initial_lr must be positive, got {}",
                self.initial_lr
            )));
        }
        for w in self.drops.windows(2) {
            if w[1].after_epoch <= w[0].after_epoch {
                return Err(Error::Config(
                    "learning-rate drop epochs must be strictly increasing".into(),
                ));
            }
        }
        if let Some(d) = self.drops.iter().find(|d| !(d.factor > 0.0 && d.factor <= 1.0)) {
            return Err(Error::Config(format!(
                "learning-rate drop factor must lie in (0, 1], got {}",
                d.factor
            )));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.drops
            .iter()
            .filter(|d| epoch > d.after_epoch)
            .fold(self.initial_lr, |lr, d| lr * d.factor)
    }

    pub fn first_drop_epoch(&self) -> Option<usize> {
        self.drops.first().map(|d| d.after_epoch)
    }
}

fn default_momentum() -> f64 {
    0.9
}
fn default_true() -> bool {
    true
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
        /// Zero the velocity when training switches to adversarial samples.
        #[serde(default = "default_true")]
        reset_on_switch: bool,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        Self::Sgd {
            momentum,
            weight_decay,
            reset_on_switch: true,
        }
    }

    pub fn adam() -> Self {
        Self::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Sgd {
                momentum,
                weight_decay,
                ..
            } => (0.0..1.0).contains(&momentum) && weight_decay >= 0.0 && weight_decay.is_finite(),
            Self::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Whether state is cleared at the switch to adversarial training.
    pub fn resets_on_switch(&self) -> bool {
        match *self {
            Self::Sgd {
                reset_on_switch, ..
            } => reset_on_switch,
            Self::Adam { .. } => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<F: Real> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer<F: Real> {
    Sgd(SgdState<F>),
    Adam(AdamState<F>),
}

fn zeros_like<F: Real>(params: &Parameters<F>) -> Vec<Tensor<F>> {
    params
        .tensors()
        .map(|t| Tensor::zeros(t.shape().to_vec()))
        .collect()
}

impl<F: Real> Optimizer<F> {
    pub fn new(config: &OptimizerConfig, params: &Parameters<F>) -> Self {
        match *config {
            OptimizerConfig::Sgd {
                momentum,
                weight_decay,
                ..
            } => Self::Sgd(SgdState {
                momentum,
                weight_decay,
                velocity: zeros_like(params),
            }),
            OptimizerConfig::Adam { beta1, beta2, eps } => Self::Adam(AdamState {
                beta1,
                beta2,
                eps,
                t: 0,
                m: zeros_like(params),
                v: zeros_like(params),
            }),
        }
    }

    /// Zeroes velocities and moments and restarts the Adam step counter.
    pub fn reinit(&mut self) {
        let zero = |ts: &mut Vec<Tensor<F>>| {
            for t in ts.iter_mut() {
                *t = Tensor::zeros(t.shape().to_vec());
            }
        };
        match self {
            Self::Sgd(s) => zero(&mut s.velocity),
            Self::Adam(s) => {
                s.t = 0;
                zero(&mut s.m);
                zero(&mut s.v);
            }
        }
    }

    /// Per-parameter state buffers in [`Parameters::tensors`] order.
    pub fn buffers(&self) -> Vec<&Tensor<F>> {
        match self {
            Self::Sgd(s) => s.velocity.iter().collect(),
            Self::Adam(s) => s.m.iter().chain(&s.v).collect(),
        }
    }

    pub fn step(&mut self, params: &mut Parameters<F>, grads: &ParamGrads<F>, lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        match self {
            Self::Sgd(s) => {
                let (m, wd, lr) = (F::of(s.momentum), F::of(s.weight_decay), F::of(lr));
                for ((p, g), v) in params.tensors_mut().zip(grads).zip(&mut s.velocity) {
                    let pd = p.data_mut();
                    for ((th, &gi), vi) in pd.iter_mut().zip(g.data()).zip(v.data_mut()) {
                        let g2 = gi + wd * *th;
                        *vi = m * *vi + g2;
                        *th = *th - lr * *vi;
                    }
                }
            }
            Self::Adam(s) => {
                s.t += 1;
                let (b1, b2) = (F::of(s.beta1), F::of(s.beta2));
                let c1 = F::of(1.0 - s.beta1.powi(s.t as i32));
                let c2 = F::of(1.0 - s.beta2.powi(s.t as i32));
                let (eps, lr) = (F::of(s.eps), F::of(lr));
                let iter = params.tensors_mut().zip(grads).zip(s.m.iter_mut().zip(&mut s.v));
                for ((p, g), (m, v)) in iter {
                    let slots = p.data_mut().iter_mut().zip(g.data());
                    for ((th, &gi), (mi, vi)) in slots.zip(m.data_mut().iter_mut().zip(v.data_mut())) {
                        *mi = b1 * *mi + (F::one() - b1) * gi;
                        *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *th = *th - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        if !params.all_finite() {
            return Err(Error::NonFinite { op: "optimizer step" });
        }
        Ok(())
    }
}

fn check_grads<F: Real>(params: &Parameters<F>, grads: &ParamGrads<F>) -> Result<()> {
    let n = params.tensors().count();
    if grads.len() != n {
        return Err(Error::ModelMismatch(format!(
            "{} gradient tensors for {n} parameter tensors",
            grads.len()
        )));
    }
    for (i, (p, g)) in params.tensors().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                context: format!("parameter tensor {i}"),
            });
        }
    }
    Ok(())
}
