//! Natural, adversarial and delayed-adversarial training loops.
//!
//! An epoch is adversarial when the mode is adversarial and either no switch
//! is configured, or the epoch index is past the switch epoch `S`. `S = 0`
//! means every epoch is adversarial. Under automatic switching `S` starts at
//! the epoch count and is set to `i` after the first natural epoch `i` whose
//! training loss has flattened (see [`switch_should_trigger`]).
//!
//! All randomness is drawn from streams keyed by the master seed and the
//! epoch, so a run resumed from a checkpoint replays the uninterrupted run.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{Adversary, AttackConfig, Pgd, RngStream};
use crate::autodiff::{GradientContext, Reduction};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::nn::{Model, NetworkSpec};
use crate::optim::{LrSchedule, Optimizer, OptimizerConfig};
use crate::persist::{Checkpoint, RngState};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Natural,
    Adversarial,
}

/// The kind of samples an epoch trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Natural,
    Adversarial,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Natural => "natural",
            Self::Adversarial => "adversarial",
        }
    }
}

fn default_window() -> usize {
    5
}
fn default_deviation() -> f64 {
    1.0
}
fn default_stop_pct() -> f64 {
    5.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SwitchPolicy {
    /// Adversarial from the first epoch (or never, in natural mode).
    #[default]
    None,
    /// Adversarial for epochs `i > epoch`; `epoch = 0` is adversarial
    /// throughout.
    Fixed { epoch: usize },
    /// Switch after the first natural epoch whose loss lies within
    /// `deviation_pct` percent of the mean of the previous `window` losses.
    Auto {
        #[serde(default = "default_window")]
        window: usize,
        #[serde(default = "default_deviation")]
        deviation_pct: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EarlyStop {
    #[default]
    Off,
    /// After the first learning-rate drop, stop once the natural test loss
    /// lies within `pct` percent of the mean of the previous `window` epochs.
    On {
        #[serde(default = "default_window")]
        window: usize,
        #[serde(default = "default_stop_pct")]
        pct: f64,
    },
}

fn default_checkpoint_every() -> usize {
    1
}
fn default_mode() -> Mode {
    Mode::Adversarial
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub switch: SwitchPolicy,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub lr_schedule: LrSchedule,
    /// Adversary used on training batches.
    pub attack: AttackConfig,
    /// Adversary for the per-epoch robust test accuracy; defaults to `attack`.
    #[serde(default)]
    pub eval_attack: Option<AttackConfig>,
    /// Evaluate each epoch on this many test samples (all when absent).
    #[serde(default)]
    pub eval_subset: Option<usize>,
    #[serde(default)]
    pub early_stop: EarlyStop,
    /// Seeds initialisation, shuffling and attack starts.
    #[serde(default)]
    pub seed: u64,
    /// Never switch once a learning-rate drop has taken effect.
    #[serde(default)]
    pub forbid_post_drop_switch: bool,
    /// Emit a checkpoint every this many epochs (0: final one only).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        match self.switch {
            SwitchPolicy::Fixed { epoch } if epoch > self.epochs => {
                return Err(Error::Config(format!(
                    "switch epoch {epoch} exceeds the epoch count {}",
                    self.epochs
                )));
            }
            SwitchPolicy::Auto {
                window,
                deviation_pct,
            } if window == 0 || !(deviation_pct > 0.0) => {
                return Err(Error::Config(
                    "automatic switching needs window ≥ 1 and deviation_pct > 0".into(),
                ));
            }
            _ => {}
        }
        if let EarlyStop::On { window, pct } = self.early_stop {
            if window == 0 || !(pct > 0.0) {
                return Err(Error::Config("early stopping needs window ≥ 1 and pct > 0".into()));
            }
            if self.lr_schedule.drops.is_empty() {
                log::warn!("early stopping is enabled but the schedule has no learning-rate drop; it will never fire");
            }
        }
        self.optimizer.validate()?;
        self.lr_schedule.validate()?;
        self.attack.validate()?;
        if let Some(a) = &self.eval_attack {
            a.validate()?;
        }
        Ok(())
    }

    pub fn eval_attack(&self) -> AttackConfig {
        self.eval_attack.unwrap_or(self.attack)
    }
}

/// Metrics of one completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss on the samples trained on.
    pub train_loss: f64,
    pub nat_test_acc: f64,
    pub adv_test_acc: f64,
    pub nat_test_loss: f64,
    pub lr: f64,
    pub regime: Regime,
    /// Training time, excluding evaluation.
    pub wall_seconds: f64,
    /// The switch criterion fired at the end of this epoch.
    pub switched: bool,
}

impl EpochRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        Self {
            wall_seconds: 0.0,
            ..self.clone()
        } == Self {
            wall_seconds: 0.0,
            ..other.clone()
        }
    }
}

/// True when `losses[i]` lies within `deviation_pct` percent of the mean of
/// the `window` losses before it. Always false while the window is
/// incomplete (`i < window`).
pub fn switch_should_trigger(losses: &[f64], i: usize, window: usize, deviation_pct: f64) -> bool {
    if i < window || i >= losses.len() || window == 0 {
        return false;
    }
    let mean = losses[i - window..i].iter().sum::<f64>() / window as f64;
    (losses[i] - mean).abs() <= deviation_pct / 100.0 * mean
}

/// True once `epoch` is past `first_drop_epoch` (the drop has taken effect)
/// and its natural test loss lies within `pct` percent of the mean of the
/// previous `window` epochs.
pub fn early_stop_should_trigger(
    nat_test_losses: &[f64],
    epoch: usize,
    first_drop_epoch: usize,
    window: usize,
    pct: f64,
) -> bool {
    if epoch <= first_drop_epoch {
        return false;
    }
    switch_should_trigger(nat_test_losses, epoch, window, pct)
}

/// `1 − wall(dat) / wall(rat)`.
pub fn time_saved(records_rat: &[EpochRecord], records_dat: &[EpochRecord]) -> f64 {
    let total = |r: &[EpochRecord]| r.iter().map(|e| e.wall_seconds).sum::<f64>();
    1.0 - total(records_dat) / total(records_rat)
}

/// Everything needed to continue a run besides the model and optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainState {
    pub next_epoch: usize,
    pub switch_epoch: Option<usize>,
    pub train_losses: Vec<f64>,
    pub test_losses: Vec<f64>,
    pub records: Vec<EpochRecord>,
    /// Minibatches replaced by adversaries so far.
    pub attack_calls: u64,
    pub eval_seconds: f64,
    pub stopped_early: bool,
    /// Completed epochs of the newest checkpoint emitted.
    pub last_checkpoint: Option<usize>,
}

/// Receives records and checkpoints as a run progresses.
pub trait EpochSink<F: Real> {
    fn record(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
    fn checkpoint(&mut self, _checkpoint: &Checkpoint<F>) -> Result<()> {
        Ok(())
    }
}

pub struct NullSink;

impl<F: Real> EpochSink<F> for NullSink {}

/// Keeps every record and checkpoint in memory.
pub struct MemorySink<F: Real> {
    pub records: Vec<EpochRecord>,
    pub checkpoints: Vec<Checkpoint<F>>,
}

impl<F: Real> Default for MemorySink<F> {
    fn default() -> Self {
        Self {
            records: Vec::new(),
            checkpoints: Vec::new(),
        }
    }
}

impl<F: Real> EpochSink<F> for MemorySink<F> {
    fn record(&mut self, record: &EpochRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
    fn checkpoint(&mut self, checkpoint: &Checkpoint<F>) -> Result<()> {
        self.checkpoints.push(checkpoint.clone());
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F: Real> {
    pub model: Model<F>,
    pub records: Vec<EpochRecord>,
    pub switch_epoch: Option<usize>,
    pub attack_calls: u64,
    pub eval_seconds: f64,
    pub stopped_early: bool,
}

impl<F: Real> TrainOutcome<F> {
    pub fn total_wall_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.wall_seconds).sum()
    }
}

pub struct Trainer<'d, F: Real> {
    config: TrainConfig,
    config_digest: String,
    train: &'d Dataset<F>,
    test: Dataset<F>,
    model: Model<F>,
    optimizer: Optimizer<F>,
    state: TrainState,
    adversary: Box<dyn Adversary<F> + 'd>,
}

impl<'d, F: Real> Trainer<'d, F> {
    /// Starts a run from freshly initialised parameters.
    pub fn new(
        config: TrainConfig,
        spec: NetworkSpec,
        train: &'d Dataset<F>,
        test: &'d Dataset<F>,
    ) -> Result<Self> {
        config.validate()?;
        let model = Model::build(spec, train.sample_shape().to_vec(), config.seed)?;
        let optimizer = Optimizer::new(&config.optimizer, &model.params);
        Self::assemble(config, train, test, model, optimizer, TrainState::default())
    }

    /// Continues the run saved in `checkpoint`.
    pub fn resume(
        config: TrainConfig,
        checkpoint: Checkpoint<F>,
        train: &'d Dataset<F>,
        test: &'d Dataset<F>,
    ) -> Result<Self> {
        config.validate()?;
        if checkpoint.rng.master_seed != config.seed {
            return Err(Error::Config(format!(
                "checkpoint was written with seed {}, config has {}",
                checkpoint.rng.master_seed, config.seed
            )));
        }
        let fresh = Optimizer::new(&config.optimizer, &checkpoint.params);
        if std::mem::discriminant(&fresh) != std::mem::discriminant(&checkpoint.optimizer) {
            return Err(Error::Config("checkpoint optimizer differs from the configured one".into()));
        }
        let model = Model::new(checkpoint.spec, checkpoint.input_shape, checkpoint.params)?;
        if model.input_shape != train.sample_shape() {
            return Err(Error::ModelMismatch(format!(
                "checkpoint expects inputs {:?}, training data has {:?}",
                model.input_shape,
                train.sample_shape()
            )));
        }
        let mut state = checkpoint.history;
        state.next_epoch = checkpoint.completed_epochs;
        let mut t = Self::assemble(config, train, test, model, checkpoint.optimizer, state)?;
        t.config_digest = checkpoint.config_digest;
        Ok(t)
    }

    fn assemble(
        config: TrainConfig,
        train: &'d Dataset<F>,
        test: &'d Dataset<F>,
        model: Model<F>,
        optimizer: Optimizer<F>,
        state: TrainState,
    ) -> Result<Self> {
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config("training and test sets must be non-empty".into()));
        }
        if train.sample_shape() != test.sample_shape() {
            return Err(Error::ModelMismatch(format!(
                "training samples {:?} and test samples {:?} differ in shape",
                train.sample_shape(),
                test.sample_shape()
            )));
        }
        let classes = model.classes()?;
        if classes < train.classes().max(test.classes()) {
            return Err(Error::ModelMismatch(format!(
                "model has {classes} outputs, data has {} classes",
                train.classes().max(test.classes())
            )));
        }
        let test = match config.eval_subset {
            Some(n) => test.sample(n, config.seed)?,
            None => test.clone(),
        };
        let adversary = Box::new(Pgd(config.attack));
        let config_digest = crate::config::digest_of(&config)?;
        Ok(Self {
            config,
            config_digest,
            train,
            test,
            model,
            optimizer,
            state,
            adversary,
        })
    }

    /// Replaces the training-time adversary (the evaluation attack is
    /// unaffected).
    pub fn with_adversary(mut self, adversary: Box<dyn Adversary<F> + 'd>) -> Self {
        self.adversary = adversary;
        self
    }

    /// Digest stored in emitted checkpoints.
    pub fn with_config_digest(mut self, digest: String) -> Self {
        self.config_digest = digest;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model<F> {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    /// Test samples used for per-epoch evaluation.
    pub fn eval_set(&self) -> &Dataset<F> {
        &self.test
    }

    pub fn is_finished(&self) -> bool {
        self.state.stopped_early || self.state.next_epoch >= self.config.epochs
    }

    /// Regime of epoch `i` given the switch detected so far.
    pub fn regime_at(&self, i: usize) -> Regime {
        let adversarial = match (self.config.mode, self.config.switch) {
            (Mode::Natural, _) => false,
            (Mode::Adversarial, SwitchPolicy::None) => true,
            (Mode::Adversarial, SwitchPolicy::Fixed { epoch: 0 }) => true,
            (Mode::Adversarial, SwitchPolicy::Fixed { epoch }) => i > epoch,
            (Mode::Adversarial, SwitchPolicy::Auto { .. }) => {
                i > self.state.switch_epoch.unwrap_or(self.config.epochs)
            }
        };
        if adversarial {
            Regime::Adversarial
        } else {
            Regime::Natural
        }
    }

    pub fn checkpoint(&self) -> Checkpoint<F> {
        let completed = self.state.next_epoch;
        Checkpoint {
            completed_epochs: completed,
            spec: self.model.spec.clone(),
            input_shape: self.model.input_shape.clone(),
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
            rng: RngState {
                master_seed: self.config.seed,
                next_epoch: completed as u64,
            },
            config_digest: self.config_digest.clone(),
            regime: self
                .state
                .records
                .last()
                .map_or(Regime::Natural, |r| r.regime),
            history: self.state.clone(),
        }
    }

    fn emit_checkpoint(&mut self, sink: &mut dyn EpochSink<F>) -> Result<()> {
        self.state.last_checkpoint = Some(self.state.next_epoch);
        sink.checkpoint(&self.checkpoint())
    }

    /// Trains until the epoch budget is spent or early stopping fires.
    pub fn run(mut self, sink: &mut dyn EpochSink<F>) -> Result<TrainOutcome<F>> {
        let every = self.config.checkpoint_every;
        if self.state.next_epoch == 0 && every > 0 {
            self.emit_checkpoint(sink)?;
        }
        while !self.is_finished() {
            let record = self.run_epoch()?;
            sink.record(&record)?;
            let completed = self.state.next_epoch;
            let last = self.is_finished();
            if every > 0 && (completed % every == 0 || last) || (every == 0 && last) {
                self.emit_checkpoint(sink)?;
            }
        }
        Ok(self.into_outcome())
    }

    pub fn into_outcome(self) -> TrainOutcome<F> {
        TrainOutcome {
            model: self.model,
            records: self.state.records,
            switch_epoch: self.state.switch_epoch,
            attack_calls: self.state.attack_calls,
            eval_seconds: self.state.eval_seconds,
            stopped_early: self.state.stopped_early,
        }
    }

    fn diverged(&self, epoch: usize, reason: String) -> Error {
        Error::Diverged {
            epoch,
            reason,
            last_good: self.state.last_checkpoint,
        }
    }

    /// Trains and evaluates one epoch.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let i = self.state.next_epoch;
        let regime = self.regime_at(i);
        let previous = self.state.records.last().map(|r| r.regime);
        if regime == Regime::Adversarial
            && previous == Some(Regime::Natural)
            && self.config.optimizer.resets_on_switch()
        {
            self.optimizer.reinit();
        }
        let lr = self.config.lr_schedule.lr_at_epoch(i);
        let seed = self.config.seed;

        let start = Instant::now();
        let mut loss_sum = 0.0;
        let order = batches(self.train.len(), self.config.batch_size, seed, i as u64);
        for (b, idx) in order.iter().enumerate() {
            let (mut x, y) = self.train.gather(idx);
            if regime == Regime::Adversarial {
                x = self
                    .adversary
                    .perturb(&self.model, &x, &y, RngStream::new(seed, i as u64, b as u64, 0))
                    .map_err(|e| match e {
                        Error::NonFiniteGradient { context } => {
                            self.diverged(i, format!("non-finite attack gradient, batch {b}: {context}"))
                        }
                        other => other,
                    })?;
                self.state.attack_calls += 1;
            }
            let (loss, grads) = {
                let mut ctx = GradientContext::new();
                let xv = ctx.constant(&x);
                let tracked = self.model.forward_tracked(&mut ctx, xv, true)?;
                let loss = ctx.softmax_cross_entropy(tracked.logits, &y, Reduction::Mean)?;
                let value = ctx.value(loss).item().as_f64();
                let mut g = ctx.backward(loss)?;
                (value, self.model.collect_param_grads(&tracked, &mut g))
            };
            if !loss.is_finite() {
                return Err(self.diverged(i, format!("non-finite training loss in batch {b}")));
            }
            loss_sum += loss;
            self.optimizer
                .step(&mut self.model.params, &grads, lr)
                .map_err(|e| self.diverged(i, format!("batch {b}: {e}")))?;
        }
        let wall_seconds = start.elapsed().as_secs_f64().max(1e-9);
        let train_loss = loss_sum / order.len() as f64;

        let eval_start = Instant::now();
        let (nat_test_loss, nat_test_acc) = eval::loss_and_accuracy(&self.model, &self.test)?;
        let adv_test_acc = eval::robust_accuracy(&self.model, &self.test, &self.config.eval_attack(), seed)?;
        self.state.eval_seconds += eval_start.elapsed().as_secs_f64();

        self.state.train_losses.push(train_loss);
        self.state.test_losses.push(nat_test_loss);
        let switched = self.update_switch(i, regime);
        if let EarlyStop::On { window, pct } = self.config.early_stop {
            if let Some(drop) = self.config.lr_schedule.first_drop_epoch() {
                if early_stop_should_trigger(&self.state.test_losses, i, drop, window, pct) {
                    log::info!("early stopping after epoch {i}");
                    self.state.stopped_early = true;
                }
            }
        }

        let record = EpochRecord {
            epoch: i,
            train_loss,
            nat_test_acc,
            adv_test_acc,
            nat_test_loss,
            lr,
            regime,
            wall_seconds,
            switched,
        };
        log::info!(
            "epoch {i} [{}] loss {train_loss:.4} nat {nat_test_acc:.4} adv {adv_test_acc:.4} lr {lr:.2e} {wall_seconds:.2}s",
            regime.as_str()
        );
        self.state.records.push(record.clone());
        self.state.next_epoch += 1;
        Ok(record)
    }

    /// Applies the switch rule after epoch `i`; returns whether it fired.
    fn update_switch(&mut self, i: usize, regime: Regime) -> bool {
        if self.config.mode != Mode::Adversarial || regime != Regime::Natural {
            return false;
        }
        match self.config.switch {
            SwitchPolicy::Fixed { epoch } => epoch == i,
            SwitchPolicy::Auto {
                window,
                deviation_pct,
            } if self.state.switch_epoch.is_none() => {
                if !switch_should_trigger(&self.state.train_losses, i, window, deviation_pct) {
                    return false;
                }
                let after_drop = self.config.lr_schedule.lr_at_epoch(i) < self.config.lr_schedule.initial_lr;
                if after_drop {
                    if self.config.forbid_post_drop_switch {
                        log::warn!("switch criterion met at epoch {i} after a learning-rate drop; switching is forbidden");
                        return false;
                    }
                    log::warn!("switch criterion first met at epoch {i}, after a learning-rate drop; switching anyway");
                }
                log::info!("switching to adversarial training after epoch {i}");
                self.state.switch_epoch = Some(i);
                true
            }
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn switch_rule_examples() {
        let ones = [1.0; 10];
        assert!(!switch_should_trigger(&ones, 4, 5, 1.0));
        assert!(switch_should_trigger(&ones, 5, 5, 1.0));

        let l = [1.0, 0.9, 0.85, 0.83, 0.82, 0.815];
        assert!(switch_should_trigger(&l, 5, 5, 10.0));
        assert!(!switch_should_trigger(&l, 5, 5, 5.0));

        let g: Vec<f64> = (0..6).map(|i| 2.0 * 0.5f64.powi(i)).collect();
        assert!(!switch_should_trigger(&g, 5, 5, 10.0));
    }

    #[test]
    fn early_stop_examples() {
        let flat = [0.5; 8];
        assert!(!early_stop_should_trigger(&flat, 5, 5, 5, 5.0));
        assert!(early_stop_should_trigger(&flat, 6, 5, 5, 5.0));
        let l = [0.5, 0.5, 0.5, 0.5, 0.5, 0.52];
        assert!(early_stop_should_trigger(&l, 5, 2, 5, 5.0));
        assert!(!early_stop_should_trigger(&l, 5, 7, 5, 5.0));
        assert!(!early_stop_should_trigger(&l, 4, 2, 5, 5.0));
    }

    #[test]
    fn time_saved_of_identical_runs_is_zero() {
        let r = EpochRecord {
            epoch: 0,
            train_loss: 1.0,
            nat_test_acc: 0.5,
            adv_test_acc: 0.1,
            nat_test_loss: 1.0,
            lr: 0.1,
            regime: Regime::Adversarial,
            wall_seconds: 14.7,
            switched: false,
        };
        assert_eq!(time_saved(std::slice::from_ref(&r), std::slice::from_ref(&r)), 0.0);
        let dat = EpochRecord {
            wall_seconds: 7.8,
            ..r.clone()
        };
        assert!((time_saved(&[r], &[dat]) - 0.469).abs() < 1e-3);
    }

    #[test]
    fn policy_json() {
        let p: SwitchPolicy = serde_json::from_str(r#"{"kind":"auto"}"#).unwrap();
        assert_eq!(
            p,
            SwitchPolicy::Auto {
                window: 5,
                deviation_pct: 1.0
            }
        );
        let p: SwitchPolicy = serde_json::from_str(r#"{"kind":"fixed","epoch":15}"#).unwrap();
        assert_eq!(p, SwitchPolicy::Fixed { epoch: 15 });
        let e: EarlyStop = serde_json::from_str(r#"{"kind":"on"}"#).unwrap();
        assert_eq!(e, EarlyStop::On { window: 5, pct: 5.0 });
    }
}
