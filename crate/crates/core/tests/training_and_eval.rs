use advtrain::attack::AttackConfig;
use advtrain::data::{batches, load_idx, write_idx, BlobSpec, Dataset};
use advtrain::eval::{
    accuracy, blackbox_eval, checkpoint_profile, robust_accuracy, strength_sweep, AlphaPolicy,
};
use advtrain::nn::NetworkSpec;
use advtrain::persist::{load_checkpoint, read_metrics_csv, save_checkpoint, Checkpoint, MetricsCsv};
use advtrain::trainer::{
    switch_should_trigger, EpochRecord, EpochSink, MemorySink, Mode, Regime, SwitchPolicy,
    TrainConfig, Trainer,
};
use advtrain::{parallel, Error, Result, Tensor};
use proptest::prelude::*;
use serde_json::json;

fn blobs(seed: u64) -> (Dataset<f64>, Dataset<f64>) {
    let mut spec = BlobSpec::new(8, 3, 6.0, seed);
    spec.noise = 0.06;
    (spec.generate(20, 1).unwrap(), spec.generate(10, 2).unwrap())
}

fn config(epochs: usize, mode: Mode, switch: SwitchPolicy, seed: u64) -> TrainConfig {
    let mut c: TrainConfig = serde_json::from_value(json!({
        "epochs": epochs, "batch_size": 16, "optimizer": {"kind": "adam"},
        "lr_schedule": {"initial_lr": 0.01},
        "attack": {"steps": 3, "epsilon": 0.1, "alpha": 0.05},
    }))
    .unwrap();
    c.mode = mode;
    c.switch = switch;
    c.seed = seed;
    c
}

fn mlp() -> NetworkSpec {
    NetworkSpec::small_mlp(12, 3)
}

fn switch_policy() -> impl Strategy<Value = SwitchPolicy> {
    prop_oneof![
        Just(SwitchPolicy::None),
        (0usize..5).prop_map(|epoch| SwitchPolicy::Fixed { epoch }),
        (1usize..4, 0.5f64..50.0).prop_map(|(window, deviation_pct)| SwitchPolicy::Auto { window, deviation_pct }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn regimes_switch_once_and_attack_calls_follow(
        seed in 0u64..1000,
        natural in any::<bool>(),
        switch in switch_policy(),
    ) {
        let (train, test) = blobs(seed);
        let mode = if natural { Mode::Natural } else { Mode::Adversarial };
        let out = Trainer::new(config(6, mode, switch, seed), mlp(), &train, &test)
            .unwrap()
            .run(&mut advtrain::trainer::NullSink)
            .unwrap();
        let regimes: Vec<Regime> = out.records.iter().map(|r| r.regime).collect();
        // Natural epochs form a prefix.
        let first_adv = regimes.iter().position(|&r| r == Regime::Adversarial).unwrap_or(regimes.len());
        prop_assert!(regimes[first_adv..].iter().all(|&r| r == Regime::Adversarial), "{:?}", regimes);

        let per_epoch = batches(train.len(), 16, seed, 0).len() as u64;
        let adversarial = (regimes.len() - first_adv) as u64;
        prop_assert_eq!(out.attack_calls, adversarial * per_epoch);

        match (mode, switch) {
            (Mode::Natural, _) => prop_assert_eq!(adversarial, 0),
            (_, SwitchPolicy::None) | (_, SwitchPolicy::Fixed { epoch: 0 }) => prop_assert_eq!(first_adv, 0),
            (_, SwitchPolicy::Fixed { epoch }) => prop_assert_eq!(first_adv, epoch + 1),
            (_, SwitchPolicy::Auto { .. }) => match out.switch_epoch {
                Some(s) => {
                    prop_assert_eq!(first_adv, s + 1);
                    prop_assert!(out.records[s].switched);
                }
                None => prop_assert_eq!(adversarial, 0),
            },
        }
        prop_assert!(out.records.iter().filter(|r| r.switched).count() <= 1);
    }

    #[test]
    fn switch_rule_only_sees_the_window(
        losses in prop::collection::vec(0.01f64..10.0, 1..20),
        tail in prop::collection::vec(0.01f64..10.0, 0..5),
        window in 0usize..6,
        pct in 0.0f64..30.0,
    ) {
        for i in 0..losses.len() {
            let fired = switch_should_trigger(&losses, i, window, pct);
            if i < window || window == 0 {
                prop_assert!(!fired);
            }
            // Later losses cannot change the verdict at `i`.
            let mut longer = losses.clone();
            longer.extend(&tail);
            prop_assert_eq!(fired, switch_should_trigger(&longer, i, window, pct));
            let start = i.saturating_sub(window);
            prop_assert_eq!(fired, switch_should_trigger(&losses[start..=i], i - start, window, pct));
        }
    }

    #[test]
    fn batches_partition_every_epoch(n in 0usize..300, size in 1usize..64, seed in any::<u64>(), epoch in 0u64..50) {
        let b = batches(n, size, seed, epoch);
        prop_assert_eq!(b.len(), n.div_ceil(size));
        prop_assert!(b.iter().rev().skip(1).all(|x| x.len() == size));
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(&b, &batches(n, size, seed, epoch));
    }

    #[test]
    fn idx_files_round_trip(
        (n, h, w) in (1usize..6, 1usize..7, 1usize..7),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<f32> = (0..n * h * w).map(|_| f32::from(r.gen::<u8>()) / 255.0).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..10)).collect();
        let d = Dataset::new(Tensor::new(vec![n, 1, h, w], pixels).unwrap(), labels, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&d, &ip, &lp).unwrap();
        let back: Dataset<f32> = load_idx(&ip, &lp).unwrap();
        prop_assert_eq!(back.images(), d.images());
        prop_assert_eq!(back.labels(), d.labels());
    }
}

#[test]
fn f64_training_is_reproducible() {
    let (train, test) = blobs(3);
    let run = || {
        let mut sink = MemorySink::default();
        let out = Trainer::new(config(4, Mode::Adversarial, SwitchPolicy::Fixed { epoch: 1 }, 9), mlp(), &train, &test)
            .unwrap()
            .run(&mut sink)
            .unwrap();
        (out, sink)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a.model, b.model);
    assert!(a.records.iter().zip(&b.records).all(|(x, y)| x.same_outcome(y)));
    assert_eq!(sa.checkpoints.len(), sb.checkpoints.len());
}

#[test]
fn checkpoints_survive_the_disk() {
    let (train, test) = blobs(4);
    let mut sink = MemorySink::default();
    Trainer::new(config(3, Mode::Adversarial, SwitchPolicy::Fixed { epoch: 1 }, 2), mlp(), &train, &test)
        .unwrap()
        .run(&mut sink)
        .unwrap();
    assert_eq!(
        sink.checkpoints.iter().map(|c| c.completed_epochs).collect::<Vec<_>>(),
        [0, 1, 2, 3]
    );
    let dir = tempfile::tempdir().unwrap();
    for c in &sink.checkpoints {
        let path = dir.path().join(format!("c{}", c.completed_epochs));
        save_checkpoint(c, &path).unwrap();
        let back: Checkpoint<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(&back, c);
        assert!(!path.with_extension("partial").exists());
    }
}

/// Writes rows like the CLI does, then dies while recording epoch `fail_at`.
struct Crashing {
    csv: MetricsCsv,
    fail_at: usize,
}

impl EpochSink<f64> for Crashing {
    fn record(&mut self, record: &EpochRecord) -> Result<()> {
        if record.epoch == self.fail_at {
            return Err(Error::Config("simulated crash".into()));
        }
        self.csv.append(record)
    }
}

#[test]
fn an_interrupted_run_leaves_whole_rows() {
    let (train, test) = blobs(5);
    let cfg = config(5, Mode::Adversarial, SwitchPolicy::Fixed { epoch: 2 }, 1);
    let full = Trainer::new(cfg.clone(), mlp(), &train, &test)
        .unwrap()
        .run(&mut advtrain::trainer::NullSink)
        .unwrap();
    for k in 0..5 {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut sink = Crashing {
            csv: MetricsCsv::create(&path).unwrap(),
            fail_at: k,
        };
        assert!(Trainer::new(cfg.clone(), mlp(), &train, &test).unwrap().run(&mut sink).is_err());
        let rows = read_metrics_csv(&path).unwrap();
        assert_eq!(rows.len(), k);
        for (r, f) in rows.iter().zip(&full.records) {
            assert_eq!((r.epoch, r.regime, r.lr), (f.epoch, f.regime, f.lr));
            assert!((r.nat_test_acc - f.nat_test_acc).abs() < 1e-6);
        }
    }
}

#[test]
fn evaluation_identities() {
    let (train, test) = blobs(6);
    let mut sink = MemorySink::default();
    let out = Trainer::new(config(3, Mode::Adversarial, SwitchPolicy::Fixed { epoch: 1 }, 4), mlp(), &train, &test)
        .unwrap()
        .run(&mut sink)
        .unwrap();
    let model = &out.model;
    let base = AttackConfig::pgd(5, 0.1, 0.03);

    let zero = AttackConfig { epsilon: 0.0, ..base };
    assert_eq!(robust_accuracy(model, &test, &zero, 7).unwrap(), accuracy(model, &test).unwrap());
    assert_eq!(
        blackbox_eval(model, model, &test, &base, 7).unwrap(),
        robust_accuracy(model, &test, &base, 7).unwrap()
    );

    let steps = [1, 3, 5];
    let eps = [0.0, 0.05, 0.1, 0.2];
    parallel::set_enabled(true);
    let grid = strength_sweep(model, &test, &steps, &eps, AlphaPolicy::Scaled, &base, 7).unwrap();
    parallel::set_enabled(false);
    let rev_steps: Vec<usize> = steps.iter().rev().copied().collect();
    let rev_eps: Vec<f64> = eps.iter().rev().copied().collect();
    let reversed = strength_sweep(model, &test, &rev_steps, &rev_eps, AlphaPolicy::Scaled, &base, 7).unwrap();
    parallel::set_enabled(true);
    for &t in &steps {
        for &e in &eps {
            assert_eq!(grid.get(t, e), reversed.get(t, e), "cell T={t} eps={e}");
        }
    }

    let snapshots: Vec<(usize, _)> = sink
        .checkpoints
        .iter()
        .map(|c| (c.completed_epochs, c.model().unwrap()))
        .collect();
    let curve = checkpoint_profile(model, &snapshots, &test, &base, 7).unwrap();
    assert_eq!(curve.points.last().unwrap().accuracy, curve.whitebox_accuracy);
    assert_eq!(curve.whitebox_accuracy, robust_accuracy(model, &test, &base, 7).unwrap());
    assert_eq!(curve.natural_accuracy, accuracy(model, &test).unwrap());
}

#[test]
fn well_separated_blobs_are_learned_naturally() {
    for seed in [1, 2, 3] {
        // One layout, two sample streams.
        let train: Dataset<f32> = advtrain::data::synthetic_blobs(500, 20, 2, 6.0, seed).unwrap();
        let test: Dataset<f32> = BlobSpec::new(20, 2, 6.0, seed).generate(200, seed + 100).unwrap();
        let mut cfg = config(20, Mode::Natural, SwitchPolicy::None, seed);
        cfg.batch_size = 50;
        cfg.lr_schedule = advtrain::optim::LrSchedule::constant(1e-3);
        cfg.checkpoint_every = 0;
        let out = Trainer::new(cfg, NetworkSpec::small_mlp(32, 2), &train, &test)
            .unwrap()
            .run(&mut advtrain::trainer::NullSink)
            .unwrap();
        let best = out.records.iter().map(|r| r.nat_test_acc).fold(0.0, f64::max);
        assert!(best >= 0.99, "seed {seed}: best natural accuracy {best}");
    }
}
