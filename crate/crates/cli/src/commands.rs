use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use advtrain::attack::AttackConfig;
use advtrain::config::RunConfig;
use advtrain::data::{write_idx, Dataset};
use advtrain::eval;
use advtrain::nn::Model;
use advtrain::persist::{
    check_digest, checkpoint_file_name, checkpoint_precision, list_checkpoints, load_checkpoint,
    read_metrics_csv, save_checkpoint, write_metrics, Checkpoint, DigestPolicy, MetricsCsv,
    MetricsFormat, MetricsSummary,
};
use advtrain::trainer::{time_saved, EpochRecord, EpochSink, Trainer};
use advtrain::{Error, Precision, Real, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::Failure;

/// Calls `$f::<f32>` or `$f::<f64>` depending on `$p`.
macro_rules! dispatch {
    ($p:expr, $f:ident($($arg:expr),*)) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn load_data<F: Real>(cfg: &RunConfig) -> Result<(Dataset<F>, Dataset<F>)> {
    cfg.data.load(Path::new("."))
}

fn load_model<F: Real>(cfg: &RunConfig, path: &Path, policy: DigestPolicy) -> Result<(Checkpoint<F>, Model<F>)> {
    let ck = load_checkpoint::<F>(path)?;
    check_digest(&ck, &cfg.digest()?, policy, path)?;
    let model = ck.model()?;
    Ok((ck, model))
}

/// Appends metrics rows and writes checkpoints into the output directory.
struct RunDir {
    dir: PathBuf,
    metrics: MetricsCsv,
}

impl<F: Real> EpochSink<F> for RunDir {
    fn record(&mut self, r: &EpochRecord) -> Result<()> {
        log::info!(
            "epoch {:>3} {:<11} loss {:.4}  nat {:.4}  adv {:.4}  {:.1}s{}",
            r.epoch,
            r.regime.as_str(),
            r.train_loss,
            r.nat_test_acc,
            r.adv_test_acc,
            r.wall_seconds,
            if r.switched { "  (switched)" } else { "" }
        );
        self.metrics.append(r)
    }

    fn checkpoint(&mut self, ck: &Checkpoint<F>) -> Result<()> {
        save_checkpoint(ck, &self.dir.join(checkpoint_file_name(ck.completed_epochs)))
    }
}

#[derive(Serialize)]
struct RunSummary {
    #[serde(flatten)]
    metrics: MetricsSummary,
    attack_calls: u64,
    eval_seconds: f64,
    stopped_early: bool,
    precision: Precision,
}

pub fn train(cfg: &RunConfig, resume: Option<Option<PathBuf>>, policy: DigestPolicy) -> Result<(), Failure> {
    let resume = match resume {
        None => None,
        Some(Some(path)) => Some(path),
        Some(None) => match list_checkpoints(&cfg.output_dir)?.pop() {
            Some((_, path)) => Some(path),
            None => {
                return Err(Failure::config(Error::Config(format!(
                    "--resume: no checkpoints in {}",
                    cfg.output_dir.display()
                ))))
            }
        },
    };
    Ok(dispatch!(cfg.precision, train_as(cfg, resume.as_deref(), policy))?)
}

fn train_as<F: Real>(cfg: &RunConfig, resume: Option<&Path>, policy: DigestPolicy) -> Result<()> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let digest = cfg.digest()?;
    let (train, test) = load_data::<F>(cfg)?;
    let trainer = match resume {
        None => Trainer::new(cfg.train.clone(), cfg.model.spec(), &train, &test)?.with_config_digest(digest.clone()),
        Some(path) => {
            let ck = load_checkpoint::<F>(path)?;
            check_digest(&ck, &digest, policy, path)?;
            if ck.spec != cfg.model.spec() {
                return Err(Error::ModelMismatch(format!(
                    "{} holds a different network than the configured one",
                    path.display()
                )));
            }
            log::info!("resuming from {} after epoch {}", path.display(), ck.completed_epochs);
            Trainer::resume(cfg.train.clone(), ck, &train, &test)?
        }
    };
    write_json(&out.join("config.json"), cfg)?;

    // Rows from before a resume are rewritten so the file always covers the
    // whole run.
    let mut sink = RunDir {
        dir: out.clone(),
        metrics: MetricsCsv::create(&out.join("metrics.csv"))?,
    };
    for r in &trainer.state().records {
        sink.metrics.append(r)?;
    }
    let outcome = trainer.run(&mut sink)?;

    write_metrics(&outcome.records, &out.join("metrics.json"), MetricsFormat::Json, &digest)?;
    let summary = RunSummary {
        metrics: MetricsSummary::from_records(&outcome.records, &digest),
        attack_calls: outcome.attack_calls,
        eval_seconds: outcome.eval_seconds,
        stopped_early: outcome.stopped_early,
        precision: cfg.precision,
    };
    write_json(&out.join("summary.json"), &summary)?;
    log::info!(
        "done: {} epochs in {:.1}s, switch epoch {:?}, final nat {:.4} adv {:.4}",
        summary.metrics.epochs,
        summary.metrics.total_wall_seconds,
        summary.metrics.switch_epoch,
        summary.metrics.final_nat_test_acc,
        summary.metrics.final_adv_test_acc
    );
    Ok(())
}

pub fn sweep(cfg: &RunConfig, checkpoint: &Path, policy: DigestPolicy) -> Result<(), Failure> {
    Ok(dispatch!(checkpoint_precision(checkpoint)?, sweep_as(cfg, checkpoint, policy))?)
}

fn sweep_as<F: Real>(cfg: &RunConfig, checkpoint: &Path, policy: DigestPolicy) -> Result<()> {
    let (ck, model) = load_model::<F>(cfg, checkpoint, policy)?;
    let (_, test) = load_data::<F>(cfg)?;
    let s = &cfg.eval.sweep;
    let set = cfg.evaluation_set(&test, s.samples)?;
    let grid = eval::strength_sweep(
        &model,
        &set,
        &s.steps,
        &s.epsilons,
        s.alpha_policy,
        &cfg.eval_attack(),
        cfg.eval_seed(),
    )?;
    fs::create_dir_all(&cfg.output_dir)?;
    grid.write_csv(File::create(cfg.output_dir.join("sweep.csv"))?)?;
    write_json(
        &cfg.output_dir.join("sweep.json"),
        &json!({
            "config_digest": ck.config_digest,
            "checkpoint": checkpoint,
            "completed_epochs": ck.completed_epochs,
            "natural_accuracy": eval::accuracy(&model, &set)?,
            "grid": grid,
        }),
    )?;
    for (t, row) in grid.steps.iter().zip(&grid.accuracy) {
        log::info!("T={t}: {row:.4?}");
    }
    Ok(())
}

pub fn profile(cfg: &RunConfig, dir: &Path, policy: DigestPolicy) -> Result<(), Failure> {
    let found = list_checkpoints(dir)?;
    let Some((_, newest)) = found.last() else {
        return Err(Failure::config(Error::Config(format!("no checkpoints in {}", dir.display()))));
    };
    Ok(dispatch!(checkpoint_precision(newest)?, profile_as(cfg, &found, policy))?)
}

fn profile_as<F: Real>(cfg: &RunConfig, found: &[(usize, PathBuf)], policy: DigestPolicy) -> Result<()> {
    let mut sources = Vec::with_capacity(found.len());
    let mut digest = String::new();
    for (epoch, path) in found {
        let (ck, model) = load_model::<F>(cfg, path, policy)?;
        digest = ck.config_digest;
        sources.push((*epoch, model));
    }
    let final_model = sources.last().expect("at least one checkpoint").1.clone();
    let (_, test) = load_data::<F>(cfg)?;
    let set = cfg.evaluation_set(&test, cfg.eval.samples)?;
    let curve = eval::checkpoint_profile(&final_model, &sources, &set, &cfg.eval_attack(), cfg.eval_seed())?;
    fs::create_dir_all(&cfg.output_dir)?;
    curve.write_csv(File::create(cfg.output_dir.join("profile.csv"))?)?;
    write_json(
        &cfg.output_dir.join("profile.json"),
        &json!({
            "config_digest": digest,
            "final_checkpoint": found.last().map(|f| &f.1),
            "profile": curve,
        }),
    )?;
    log::info!(
        "natural {:.4}, white-box {:.4}; by source epoch: {}",
        curve.natural_accuracy,
        curve.whitebox_accuracy,
        curve
            .points
            .iter()
            .map(|p| format!("{}:{:.4}", p.epoch, p.accuracy))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(())
}

pub fn attack(cfg: &RunConfig, checkpoint: &Path, attack: &AttackConfig, policy: DigestPolicy) -> Result<(), Failure> {
    Ok(dispatch!(checkpoint_precision(checkpoint)?, attack_as(cfg, checkpoint, attack, policy))?)
}

fn attack_as<F: Real>(cfg: &RunConfig, checkpoint: &Path, attack: &AttackConfig, policy: DigestPolicy) -> Result<()> {
    let (ck, model) = load_model::<F>(cfg, checkpoint, policy)?;
    let (_, test) = load_data::<F>(cfg)?;
    let set = cfg.evaluation_set(&test, cfg.eval.samples)?;
    let adv = set.with_images(eval::adversarial_examples(&model, &set, attack, cfg.eval_seed())?)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let files = [
        "clean-images-idx3-ubyte",
        "clean-labels-idx1-ubyte",
        "adv-images-idx3-ubyte",
        "adv-labels-idx1-ubyte",
    ];
    write_idx(&set, &out.join(files[0]), &out.join(files[1]))?;
    write_idx(&adv, &out.join(files[2]), &out.join(files[3]))?;
    let natural = eval::accuracy(&model, &set)?;
    let adversarial = eval::accuracy(&model, &adv)?;
    write_json(
        &out.join("attack.json"),
        &json!({
            "config_digest": ck.config_digest,
            "checkpoint": checkpoint,
            "attack": attack,
            "seed": cfg.eval_seed(),
            "samples": set.len(),
            "natural_accuracy": natural,
            "adversarial_accuracy": adversarial,
            "files": files,
        }),
    )?;
    log::info!("{} adversaries written; accuracy {natural:.4} -> {adversarial:.4}", set.len());
    Ok(())
}

fn read_summary(dir: &Path) -> Result<Value> {
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn report(rat: &Path, dat: &Path, out: &Path) -> Result<(), Failure> {
    Ok(write_report(rat, dat, out)?)
}

fn write_report(rat: &Path, dat: &Path, out: &Path) -> Result<()> {
    let rat_records = read_metrics_csv(&rat.join("metrics.csv"))?;
    let dat_records = read_metrics_csv(&dat.join("metrics.csv"))?;
    if rat_records.is_empty() || dat_records.is_empty() {
        return Err(Error::Config("both runs need at least one metrics row".into()));
    }
    let saved = time_saved(&rat_records, &dat_records);
    let rat_summary = read_summary(rat)?;
    let dat_summary = read_summary(dat)?;
    let last = |r: &[EpochRecord]| r.last().map_or(0.0, |r| r.adv_test_acc);
    let doc = json!({
        "time_saved": saved,
        "adv_acc_difference": last(&dat_records) - last(&rat_records),
        "rat": { "dir": rat, "summary": rat_summary },
        "dat": { "dir": dat, "summary": dat_summary },
    });
    fs::create_dir_all(out)?;
    write_json(&out.join("summary.json"), &doc)?;
    // A closed stdout (say, piped into `head`) is not an error; the file has
    // been written.
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}
