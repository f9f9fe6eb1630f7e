//! ℓ∞ projected gradient descent adversaries.
//!
//! Each sample starts from its own random offset inside the ε-ball and then
//! takes `T` signed-gradient steps, being projected back onto the ball and
//! into the valid data range after each one. The loss is summed rather than
//! averaged over the batch so a sample's gradient does not depend on which
//! other samples share its batch; together with per-sample random streams
//! this makes the result independent of batching and thread count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientContext, Reduction};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::parallel;
use crate::rng;
use crate::scalar::Real;
use crate::tensor::{self, Tensor};

/// Samples attacked together in one graph; chunks run in parallel.
const CHUNK: usize = 16;

fn default_true() -> bool {
    true
}
fn default_range() -> [f64; 2] {
    [0.0, 1.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Number of gradient steps `T`.
    pub steps: usize,
    pub epsilon: f64,
    pub alpha: f64,
    #[serde(default = "default_true")]
    pub random_init: bool,
    #[serde(default = "default_range")]
    pub data_range: [f64; 2],
    /// Clamp into `data_range` after every projection.
    #[serde(default = "default_true")]
    pub clamp_to_range: bool,
    #[serde(default)]
    pub seed_base: u64,
}

impl AttackConfig {
    pub fn pgd(steps: usize, epsilon: f64, alpha: f64) -> Self {
        Self {
            steps,
            epsilon,
            alpha,
            random_init: true,
            data_range: default_range(),
            clamp_to_range: true,
            seed_base: 0,
        }
    }

    /// One step of size ε from the clean input.
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            random_init: false,
            ..Self::pgd(1, epsilon, epsilon)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.data_range;
        let problem = if self.steps == 0 {
            Some("steps must be at least 1".to_string())
        } else if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            Some(format!("epsilon must be finite and ≥ 0, got {}", self.epsilon))
        } else if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            Some(format!("alpha must be positive, got {}", self.alpha))
        } else if !(lo < hi) {
            Some(format!("data_range must satisfy lo < hi, got [{lo}, {hi}]"))
        } else {
            None
        };
        match problem {
            Some(p) => Err(Error::Config(format!("attack: {p}"))),
            None => Ok(()),
        }
    }
}

/// Coordinates identifying a batch's random streams. Sample `i` of the
/// batch uses the stream keyed by `(seed_base, seed, epoch, batch, offset + i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngStream {
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
    /// Index of the batch's first sample in some global numbering.
    pub offset: u64,
}

impl RngStream {
    pub fn new(seed: u64, epoch: u64, batch: u64, offset: u64) -> Self {
        Self {
            seed,
            epoch,
            batch,
            offset,
        }
    }

    fn sample_rng(&self, seed_base: u64, i: usize) -> ChaCha8Rng {
        rng::stream(&[seed_base, self.seed, self.epoch, self.batch, self.offset + i as u64])
    }

    fn shifted(&self, by: usize) -> Self {
        Self {
            offset: self.offset + by as u64,
            ..*self
        }
    }
}

/// Clamps `x_adv` elementwise into `[x − ε, x + ε]`.
pub fn project_ball<F: Real>(x_adv: &Tensor<F>, x: &Tensor<F>, epsilon: f64) -> Result<Tensor<F>> {
    if x_adv.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "project_ball",
            left: x_adv.shape().to_vec(),
            right: x.shape().to_vec(),
        });
    }
    let eps = F::of(epsilon);
    let data = x_adv
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &o)| tensor::clamp(a, o - eps, o + eps))
        .collect();
    Ok(Tensor::from_parts(x_adv.shape().to_vec(), data))
}

/// Builds PGD adversaries for the batch `x` with labels `y`.
pub fn pgd_attack<F: Real>(
    model: &Model<F>,
    x: &Tensor<F>,
    y: &[usize],
    cfg: &AttackConfig,
    stream: RngStream,
) -> Result<Tensor<F>> {
    cfg.validate()?;
    let n = x.shape().first().copied().unwrap_or(0);
    if n != y.len() {
        return Err(Error::ShapeMismatch {
            op: "pgd_attack",
            left: x.shape().to_vec(),
            right: vec![y.len()],
        });
    }
    let chunks = n.div_ceil(CHUNK);
    let per_sample = x.len() / n.max(1);
    let work = n * cfg.steps * model.params.count().max(per_sample);
    let parts = parallel::map_indices(chunks, work, |c| {
        let (start, end) = (c * CHUNK, ((c + 1) * CHUNK).min(n));
        let xc = x.slice_rows(start, end)?;
        attack_chunk(model, &xc, &y[start..end], cfg, stream.shifted(start))
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts)
}

fn attack_chunk<F: Real>(
    model: &Model<F>,
    x: &Tensor<F>,
    y: &[usize],
    cfg: &AttackConfig,
    stream: RngStream,
) -> Result<Tensor<F>> {
    let [lo, hi] = cfg.data_range.map(F::of);
    let limit = |t: Tensor<F>| if cfg.clamp_to_range { t.clamp(lo, hi) } else { t };

    let mut xt = if cfg.random_init && cfg.epsilon > 0.0 {
        let per = x.len() / y.len();
        let mut data = x.data().to_vec();
        for (i, row) in data.chunks_mut(per).enumerate() {
            let mut r = stream.sample_rng(cfg.seed_base, i);
            for v in row {
                *v = *v + F::of(r.gen_range(-cfg.epsilon..=cfg.epsilon));
            }
        }
        limit(project_ball(&Tensor::from_parts(x.shape().to_vec(), data), x, cfg.epsilon)?)
    } else {
        x.clone()
    };

    let alpha = F::of(cfg.alpha);
    for step in 0..cfg.steps {
        let g = input_gradient(model, &xt, y)?;
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                context: format!(
                    "attack step {step}, epoch {} batch {} samples from {}",
                    stream.epoch, stream.batch, stream.offset
                ),
            });
        }
        let data = xt
            .data()
            .iter()
            .zip(g.data())
            .map(|(&v, &gi)| v + alpha * tensor::sign(gi))
            .collect();
        let stepped = Tensor::from_parts(xt.shape().to_vec(), data);
        xt = limit(project_ball(&stepped, x, cfg.epsilon)?);
    }
    Ok(xt)
}

/// Gradient of the summed cross entropy with respect to the input batch.
pub fn input_gradient<F: Real>(model: &Model<F>, x: &Tensor<F>, y: &[usize]) -> Result<Tensor<F>> {
    let mut ctx = GradientContext::new();
    let xv = ctx.input(x);
    let tracked = model.forward_tracked(&mut ctx, xv, false)?;
    let loss = ctx.softmax_cross_entropy(tracked.logits, y, Reduction::Sum)?;
    let mut grads = ctx.backward(loss)?;
    Ok(grads
        .take(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
}

/// Fast gradient sign method: PGD with one step of size ε and no random
/// start, clamped into `[0, 1]`.
pub fn fgsm<F: Real>(model: &Model<F>, x: &Tensor<F>, y: &[usize], epsilon: f64) -> Result<Tensor<F>> {
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    pgd_attack(model, x, y, &AttackConfig::fgsm(epsilon), RngStream::default())
}

/// Produces the samples a training step or an evaluation runs on.
pub trait Adversary<F: Real>: Sync {
    fn perturb(&self, model: &Model<F>, x: &Tensor<F>, y: &[usize], stream: RngStream) -> Result<Tensor<F>>;
}

/// [`pgd_attack`] with a fixed configuration.
#[derive(Debug, Clone, Copy)]
pub struct Pgd(pub AttackConfig);

impl<F: Real> Adversary<F> for Pgd {
    fn perturb(&self, model: &Model<F>, x: &Tensor<F>, y: &[usize], stream: RngStream) -> Result<Tensor<F>> {
        pgd_attack(model, x, y, &self.0, stream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, NetworkSpec};

    /// Two-class linear model with logits `[0, w·x]`.
    pub(crate) fn linear_model(w: &[f64]) -> Model<f64> {
        let spec = NetworkSpec {
            layers: vec![Layer::Dense { out_features: 2 }],
        };
        let mut m = Model::build(spec, vec![w.len()], 0).unwrap();
        let mut weights = vec![0.0; 2 * w.len()];
        for (i, &wi) in w.iter().enumerate() {
            weights[2 * i + 1] = wi;
        }
        m.params.entries[0].weights = Tensor::from_f64(vec![w.len(), 2], &weights).unwrap();
        m
    }

    #[test]
    fn projection() {
        let x = Tensor::<f64>::from_f64(vec![3], &[0.5, 0.5, 0.2]).unwrap();
        assert_eq!(project_ball(&x, &x, 0.05).unwrap(), x);
        let a = Tensor::<f64>::from_f64(vec![3], &[0.9, 0.1, 0.21]).unwrap();
        let p = project_ball(&a, &x, 0.05).unwrap();
        assert_eq!(p.data()[0], 0.55);
        assert_eq!(p.data()[1], 0.45);
        assert_eq!(p.data()[2], 0.21);
        assert_eq!(project_ball(&p, &x, 0.05).unwrap(), p);
        assert!(project_ball(&a, &Tensor::zeros(vec![2]), 0.1).is_err());
    }

    #[test]
    fn zero_gradient_leaves_input() {
        let mut m = Model::<f64>::build(NetworkSpec::small_mlp(4, 3), vec![5], 2).unwrap();
        for t in m.params.tensors_mut() {
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let x = Tensor::full(vec![3, 5], 0.3);
        let mut cfg = AttackConfig::pgd(7, 0.1, 0.02);
        cfg.random_init = false;
        assert_eq!(pgd_attack(&m, &x, &[0, 1, 2], &cfg, RngStream::default()).unwrap(), x);
        assert_eq!(fgsm(&m, &x, &[0, 1, 2], 0.1).unwrap(), x);
    }

    #[test]
    fn linear_model_moves_to_worst_corner() {
        let m = linear_model(&[2.0, -1.0]);
        let x = Tensor::from_f64(vec![1, 2], &[0.5, 0.5]).unwrap();
        let mut cfg = AttackConfig::pgd(1, 0.1, 0.1);
        cfg.random_init = false;
        let adv = pgd_attack(&m, &x, &[1], &cfg, RngStream::default()).unwrap();
        assert!((adv.data()[0] - 0.4).abs() < 1e-15);
        assert!((adv.data()[1] - 0.6).abs() < 1e-15);
        assert_eq!(fgsm(&m, &x, &[1], 0.1).unwrap(), adv);
    }

    #[test]
    fn zero_epsilon_returns_input() {
        let m = Model::<f32>::build(NetworkSpec::small_mlp(8, 2), vec![4], 1).unwrap();
        let x = Tensor::<f32>::from_f64(vec![2, 4], &[0.1, 0.9, 0.5, 0.0, 1.0, 0.3, 0.7, 0.2]).unwrap();
        let cfg = AttackConfig::pgd(5, 0.0, 0.01);
        assert_eq!(pgd_attack(&m, &x, &[0, 1], &cfg, RngStream::new(1, 2, 3, 4)).unwrap(), x);
    }

    #[test]
    fn batching_does_not_change_adversaries() {
        let m = Model::<f32>::build(NetworkSpec::small_mlp(16, 3), vec![6], 9).unwrap();
        let n = 40;
        let vals: Vec<f64> = (0..n * 6).map(|i| ((i * 29) % 97) as f64 / 96.0).collect();
        let x = Tensor::<f32>::from_f64(vec![n, 6], &vals).unwrap();
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let cfg = AttackConfig::pgd(4, 0.1, 0.03);
        let stream = RngStream::new(5, 1, 0, 100);
        let whole = pgd_attack(&m, &x, &y, &cfg, stream).unwrap();
        for start in [0, 7, 33] {
            let part = pgd_attack(
                &m,
                &x.slice_rows(start, n).unwrap(),
                &y[start..],
                &cfg,
                stream.shifted(start),
            )
            .unwrap();
            assert_eq!(part, whole.slice_rows(start, n).unwrap());
        }
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::pgd(0, 0.1, 0.1).validate().is_err());
        assert!(AttackConfig::pgd(1, -0.1, 0.1).validate().is_err());
        assert!(AttackConfig::pgd(1, 0.1, 0.0).validate().is_err());
        let mut c = AttackConfig::pgd(1, 0.1, 0.1);
        c.data_range = [1.0, 1.0];
        assert!(c.validate().is_err());
        let parsed: AttackConfig =
            serde_json::from_str(r#"{"steps":40,"epsilon":0.3,"alpha":0.01}"#).unwrap();
        assert_eq!(parsed, AttackConfig::pgd(40, 0.3, 0.01));
    }
}
