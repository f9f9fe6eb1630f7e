//! Natural and robust accuracy, attack-strength sweeps, transfer attacks and
//! checkpoint-adversary profiles.
//!
//! Adversarial samples for evaluation are keyed by their index in the
//! evaluated dataset, so the same `seed` yields the same adversaries no
//! matter how the set is batched or which evaluation built them.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack, AttackConfig, RngStream};
use crate::autodiff::{softmax_xent_forward, Reduction};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::parallel;
use crate::scalar::Real;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 250;

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(EVAL_BATCH))
        .map(|b| (b * EVAL_BATCH, ((b + 1) * EVAL_BATCH).min(n)))
        .collect()
}

/// `(summed loss, correct count)` of `model` on `images` (a tensor with the
/// dataset's layout) against `labels`.
fn score<F: Real>(model: &Model<F>, images: &Tensor<F>, labels: &[usize]) -> Result<(f64, usize)> {
    let n = labels.len();
    let work = n * model.params.count();
    let batches = ranges(n);
    let parts = parallel::map_indices(batches.len(), work, |b| {
        let (s, e) = batches[b];
        let logits = model.forward(&images.slice_rows(s, e)?)?;
        let (loss, _) = softmax_xent_forward(&logits, &labels[s..e], Reduction::Sum)?;
        let classes = logits.shape()[1];
        let correct = logits
            .data()
            .chunks(classes)
            .zip(&labels[s..e])
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        Ok::<_, Error>((loss.as_f64(), correct))
    });
    let mut loss = 0.0;
    let mut correct = 0;
    for p in parts {
        let (l, c) = p?;
        loss += l;
        correct += c;
    }
    Ok((loss, correct))
}

fn check_classes<F: Real>(model: &Model<F>, dataset: &Dataset<F>) -> Result<()> {
    let c = model.classes()?;
    if c < dataset.classes() {
        return Err(Error::ModelMismatch(format!(
            "model has {c} outputs, dataset has {} classes",
            dataset.classes()
        )));
    }
    Ok(())
}

pub fn accuracy<F: Real>(model: &Model<F>, dataset: &Dataset<F>) -> Result<f64> {
    Ok(loss_and_accuracy(model, dataset)?.1)
}

/// Mean cross entropy and accuracy on clean samples.
pub fn loss_and_accuracy<F: Real>(model: &Model<F>, dataset: &Dataset<F>) -> Result<(f64, f64)> {
    check_classes(model, dataset)?;
    let n = dataset.len().max(1) as f64;
    let (loss, correct) = score(model, dataset.images(), dataset.labels())?;
    Ok((loss / n, correct as f64 / n))
}

/// PGD adversaries for every sample of `dataset`, built against `source`.
pub fn adversarial_examples<F: Real>(
    source: &Model<F>,
    dataset: &Dataset<F>,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Tensor<F>> {
    let mut parts = Vec::new();
    for (s, e) in ranges(dataset.len()) {
        let idx: Vec<usize> = (s..e).collect();
        let (x, y) = dataset.gather(&idx);
        parts.push(pgd_attack(source, &x, &y, cfg, RngStream::new(seed, 0, 0, s as u64))?);
    }
    Tensor::concat_rows(&parts)
}

/// `(mean loss, accuracy)` of `target` on adversaries built against `source`.
pub fn transfer_loss_and_accuracy<F: Real>(
    target: &Model<F>,
    source: &Model<F>,
    dataset: &Dataset<F>,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    if target.input_shape != source.input_shape || target.classes()? != source.classes()? {
        return Err(Error::ModelMismatch(format!(
            "source model maps {:?} to {} classes, target maps {:?} to {}",
            source.input_shape,
            source.classes()?,
            target.input_shape,
            target.classes()?
        )));
    }
    check_classes(target, dataset)?;
    let adv = adversarial_examples(source, dataset, cfg, seed)?;
    let n = dataset.len().max(1) as f64;
    let (loss, correct) = score(target, &adv, dataset.labels())?;
    Ok((loss / n, correct as f64 / n))
}

/// White-box accuracy under `cfg`.
pub fn robust_accuracy<F: Real>(
    model: &Model<F>,
    dataset: &Dataset<F>,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<f64> {
    Ok(transfer_loss_and_accuracy(model, model, dataset, cfg, seed)?.1)
}

/// Accuracy of `target` on adversaries crafted against `source`.
pub fn blackbox_eval<F: Real>(
    target: &Model<F>,
    source: &Model<F>,
    dataset: &Dataset<F>,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<f64> {
    Ok(transfer_loss_and_accuracy(target, source, dataset, cfg, seed)?.1)
}

/// Step size used for each cell of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlphaPolicy {
    /// The base configuration's α for every cell.
    #[default]
    Fixed,
    /// α = 2.5·ε/T; cells with ε = 0 keep the base α.
    Scaled,
}

impl AlphaPolicy {
    pub fn alpha(self, base: f64, steps: usize, epsilon: f64) -> f64 {
        match self {
            Self::Fixed => base,
            Self::Scaled if epsilon > 0.0 => 2.5 * epsilon / steps as f64,
            Self::Scaled => base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub steps: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub alpha_policy: AlphaPolicy,
    pub base_alpha: f64,
    /// `accuracy[i][j]` is robust accuracy at `steps[i]`, `epsilons[j]`.
    pub accuracy: Vec<Vec<f64>>,
    pub samples: usize,
    pub seed: u64,
}

impl SweepGrid {
    pub fn get(&self, steps: usize, epsilon: f64) -> Option<f64> {
        let i = self.steps.iter().position(|&t| t == steps)?;
        let j = self.epsilons.iter().position(|&e| e == epsilon)?;
        Some(self.accuracy[i][j])
    }

    /// One row per step count; the header lists the ε values.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["steps".to_string()];
        header.extend(self.epsilons.iter().map(|e| format!("eps={e}")));
        w.write_record(&header)?;
        for (t, row) in self.steps.iter().zip(&self.accuracy) {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|a| format!("{a:.6}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Robust accuracy on every `(T, ε)` pair. Other settings come from `base`.
pub fn strength_sweep<F: Real>(
    model: &Model<F>,
    dataset: &Dataset<F>,
    steps: &[usize],
    epsilons: &[f64],
    alpha_policy: AlphaPolicy,
    base: &AttackConfig,
    seed: u64,
) -> Result<SweepGrid> {
    if steps.is_empty() || epsilons.is_empty() {
        return Err(Error::Config("sweep axes must be non-empty".into()));
    }
    let cells: Vec<(usize, f64)> = steps
        .iter()
        .flat_map(|&t| epsilons.iter().map(move |&e| (t, e)))
        .collect();
    let work = dataset.len() * model.params.count() * steps.iter().sum::<usize>();
    let results = parallel::map_indices(cells.len(), work, |k| {
        let (t, e) = cells[k];
        let cfg = AttackConfig {
            steps: t,
            epsilon: e,
            alpha: alpha_policy.alpha(base.alpha, t, e),
            ..*base
        };
        robust_accuracy(model, dataset, &cfg, seed)
    });
    let flat = results.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(SweepGrid {
        steps: steps.to_vec(),
        epsilons: epsilons.to_vec(),
        alpha_policy,
        base_alpha: base.alpha,
        accuracy: flat.chunks(epsilons.len()).map(<[f64]>::to_vec).collect(),
        samples: dataset.len(),
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    /// Completed epochs of the source parameters.
    pub epoch: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileCurve {
    pub points: Vec<ProfilePoint>,
    pub natural_accuracy: f64,
    pub whitebox_accuracy: f64,
    pub samples: usize,
    pub seed: u64,
}

impl ProfileCurve {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["source_epoch", "accuracy", "natural_accuracy", "whitebox_accuracy"])?;
        for p in &self.points {
            w.write_record([
                p.epoch.to_string(),
                format!("{:.6}", p.accuracy),
                format!("{:.6}", self.natural_accuracy),
                format!("{:.6}", self.whitebox_accuracy),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Accuracy of `final_model` on adversaries built from each earlier
/// snapshot, plus its natural and white-box accuracy.
pub fn checkpoint_profile<F: Real>(
    final_model: &Model<F>,
    checkpoints: &[(usize, Model<F>)],
    dataset: &Dataset<F>,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<ProfileCurve> {
    for (epoch, m) in checkpoints {
        if m.spec != final_model.spec || m.input_shape != final_model.input_shape {
            return Err(Error::ModelMismatch(format!(
                "checkpoint at epoch {epoch} has a different network specification"
            )));
        }
    }
    let mut points = Vec::with_capacity(checkpoints.len());
    for (epoch, source) in checkpoints {
        points.push(ProfilePoint {
            epoch: *epoch,
            accuracy: blackbox_eval(final_model, source, dataset, cfg, seed)?,
        });
    }
    Ok(ProfileCurve {
        points,
        natural_accuracy: accuracy(final_model, dataset)?,
        whitebox_accuracy: robust_accuracy(final_model, dataset, cfg, seed)?,
        samples: dataset.len(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::nn::{Layer, NetworkSpec};

    fn dense(inputs: usize, outputs: usize, weights: &[f64], bias: &[f64]) -> Model<f64> {
        let spec = NetworkSpec {
            layers: vec![Layer::Dense {
                out_features: outputs,
            }],
        };
        let mut m = Model::build(spec, vec![1, 1, inputs], 0).unwrap();
        m.params.entries[0].weights = Tensor::from_f64(vec![inputs, outputs], weights).unwrap();
        m.params.entries[0].bias = Tensor::from_f64(vec![outputs], bias).unwrap();
        m
    }

    #[test]
    fn ties_go_to_the_lowest_class() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0f32; 10]), 0);
    }

    #[test]
    fn constant_logits_score_one_over_classes() {
        let m = dense(3, 10, &[0.0; 30], &[0.0; 10]);
        let labels: Vec<usize> = (0..50).map(|i| i % 10).collect();
        let d = Dataset::new(Tensor::full(vec![50, 1, 1, 3], 0.5), labels, 10).unwrap();
        assert!((accuracy(&m, &d).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn lookup_table_scores_one() {
        // One-hot images: identity weights reproduce the label.
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let m = dense(3, 3, &eye, &[0.0; 3]);
        let mut img = vec![0.0; 9];
        for i in 0..3 {
            img[i * 3 + i] = 1.0;
        }
        let d = Dataset::new(Tensor::from_f64(vec![3, 1, 1, 3], &img).unwrap(), vec![0, 1, 2], 3).unwrap();
        assert_eq!(accuracy(&m, &d).unwrap(), 1.0);
        // Relabel one sample: 2 of 3 correct.
        let d2 = Dataset::new(d.images().clone(), vec![0, 1, 0], 3).unwrap();
        assert!((accuracy(&m, &d2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_epsilon_and_self_transfer_agree() {
        let d: Dataset<f64> = synthetic_blobs(40, 5, 2, 3.0, 1).unwrap();
        let m = Model::build(NetworkSpec::small_mlp(8, 2), vec![1, 1, 5], 4).unwrap();
        let cfg0 = AttackConfig::pgd(5, 0.0, 0.02);
        assert_eq!(robust_accuracy(&m, &d, &cfg0, 3).unwrap(), accuracy(&m, &d).unwrap());
        let cfg = AttackConfig::pgd(5, 0.1, 0.02);
        assert_eq!(
            blackbox_eval(&m, &m, &d, &cfg, 3).unwrap(),
            robust_accuracy(&m, &d, &cfg, 3).unwrap()
        );
        let grid = strength_sweep(&m, &d, &[5], &[0.0, 0.1], AlphaPolicy::Fixed, &cfg, 3).unwrap();
        assert_eq!(grid.get(5, 0.0), Some(accuracy(&m, &d).unwrap()));
        assert_eq!(grid.get(5, 0.1), Some(robust_accuracy(&m, &d, &cfg, 3).unwrap()));
        let prof = checkpoint_profile(&m, &[(7, m.clone())], &d, &cfg, 3).unwrap();
        assert_eq!(prof.points[0].accuracy, prof.whitebox_accuracy);
    }

    #[test]
    fn profile_rejects_other_specs() {
        let d: Dataset<f64> = synthetic_blobs(5, 5, 2, 3.0, 1).unwrap();
        let m = Model::build(NetworkSpec::small_mlp(8, 2), vec![1, 1, 5], 4).unwrap();
        let other = Model::build(NetworkSpec::small_mlp(9, 2), vec![1, 1, 5], 4).unwrap();
        let cfg = AttackConfig::pgd(1, 0.1, 0.1);
        assert!(matches!(
            checkpoint_profile(&m, &[(1, other)], &d, &cfg, 0),
            Err(Error::ModelMismatch(_))
        ));
    }

    #[test]
    fn scaled_alpha() {
        assert_eq!(AlphaPolicy::Scaled.alpha(0.01, 10, 0.2), 0.05);
        assert_eq!(AlphaPolicy::Scaled.alpha(0.01, 10, 0.0), 0.01);
        assert_eq!(AlphaPolicy::Fixed.alpha(0.01, 10, 0.2), 0.01);
    }

    #[test]
    fn sweep_csv_layout() {
        let g = SweepGrid {
            steps: vec![1, 10],
            epsilons: vec![0.0, 0.1],
            alpha_policy: AlphaPolicy::Fixed,
            base_alpha: 0.01,
            accuracy: vec![vec![1.0, 0.5], vec![1.0, 0.25]],
            samples: 4,
            seed: 0,
        };
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "steps,eps=0,eps=0.1\n1,1.000000,0.500000\n10,1.000000,0.250000\n"
        );
    }
}
