//! Checkpoint files and metrics export.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "RFCK" | version: u32 | precision bits: u32 | section count: u32
//! section*: tag: [u8; 4] | length: u64 | payload
//! ```
//!
//! Sections are `META` (JSON), `SPEC` (JSON network spec), `PARM` (binary
//! parameters), `OPTM` (binary optimizer state) and `HIST` (JSON training
//! history). Unknown sections are skipped on load.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{NetworkSpec, ParamEntry, Parameters};
use crate::optim::{AdamState, Optimizer, SgdState};
use crate::scalar::{Precision, Real};
use crate::tensor::Tensor;
use crate::trainer::{EpochRecord, Regime, TrainState};

pub const MAGIC: &[u8; 4] = b"RFCK";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to replay the random streams from a given epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub master_seed: u64,
    pub next_epoch: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F: Real> {
    /// Epochs trained when the snapshot was taken (0: initial parameters).
    pub completed_epochs: usize,
    pub spec: NetworkSpec,
    pub input_shape: Vec<usize>,
    pub params: Parameters<F>,
    pub optimizer: Optimizer<F>,
    pub rng: RngState,
    pub config_digest: String,
    /// Regime of the last completed epoch.
    pub regime: Regime,
    pub history: TrainState,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    completed_epochs: usize,
    input_shape: Vec<usize>,
    rng: RngState,
    config_digest: String,
    regime: Regime,
    init_seed: u64,
}

pub fn checkpoint_file_name(completed_epochs: usize) -> String {
    format!("ckpt_epoch_{completed_epochs:04}")
}

/// Parses the epoch out of a [`checkpoint_file_name`].
pub fn checkpoint_epoch(path: &Path) -> Option<usize> {
    path.file_name()?
        .to_str()?
        .strip_prefix("ckpt_epoch_")?
        .parse()
        .ok()
}

/// Checkpoint files in `dir`, sorted by epoch.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io_at(dir, e))? {
        let path = entry?.path();
        if let Some(e) = checkpoint_epoch(&path) {
            out.push((e, path));
        }
    }
    out.sort();
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<F: Real>(out: &mut Vec<u8>, t: &Tensor<F>) {
    put_u32(out, t.ndim() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    put_u64(out, payload.len() as u64);
    out.extend_from_slice(payload);
}

impl<F: Real> Checkpoint<F> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Meta {
            completed_epochs: self.completed_epochs,
            input_shape: self.input_shape.clone(),
            rng: self.rng,
            config_digest: self.config_digest.clone(),
            regime: self.regime,
            init_seed: self.params.init_seed,
        })?;

        let mut parm = Vec::new();
        put_u32(&mut parm, self.params.entries.len() as u32);
        for e in &self.params.entries {
            put_u32(&mut parm, e.layer as u32);
            put_u32(&mut parm, e.name.len() as u32);
            parm.extend_from_slice(e.name.as_bytes());
            put_tensor(&mut parm, &e.weights);
            put_tensor(&mut parm, &e.bias);
        }

        let mut optm = Vec::new();
        match &self.optimizer {
            Optimizer::Sgd(s) => {
                optm.push(0);
                put_f64(&mut optm, s.momentum);
                put_f64(&mut optm, s.weight_decay);
            }
            Optimizer::Adam(s) => {
                optm.push(1);
                put_f64(&mut optm, s.beta1);
                put_f64(&mut optm, s.beta2);
                put_f64(&mut optm, s.eps);
                put_u64(&mut optm, s.t);
            }
        }
        let buffers = self.optimizer.buffers();
        put_u32(&mut optm, buffers.len() as u32);
        for t in buffers {
            put_tensor(&mut optm, t);
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, F::PRECISION.bits());
        put_u32(&mut out, 5);
        section(&mut out, b"META", &meta);
        section(&mut out, b"SPEC", &serde_json::to_vec(&self.spec)?);
        section(&mut out, b"PARM", &parm);
        section(&mut out, b"OPTM", &optm);
        section(&mut out, b"HIST", &serde_json::to_vec(&self.history)?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(magic);
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: u32::from_be_bytes(*MAGIC),
                found: u32::from_be_bytes(found),
            });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let bits = r.u32("precision")?;
        if bits != F::PRECISION.bits() {
            return Err(Error::PrecisionMismatch {
                expected: F::PRECISION.bits(),
                found: bits,
            });
        }
        let count = r.u32("section count")?;
        let (mut meta, mut spec, mut parm, mut optm, mut hist) = (None, None, None, None, None);
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4, "section tag")?.try_into().expect("four bytes");
            let len = r.u64("section length")? as usize;
            let payload = r.take(len, "section payload")?;
            match &tag {
                b"META" => meta = Some(payload),
                b"SPEC" => spec = Some(payload),
                b"PARM" => parm = Some(payload),
                b"OPTM" => optm = Some(payload),
                b"HIST" => hist = Some(payload),
                _ => log::debug!("skipping unknown checkpoint section {tag:?}"),
            }
        }
        if !r.at_end() {
            return Err(r.corrupt("trailing bytes after the last section"));
        }
        let missing = |name: &str| Error::CorruptLength {
            path: path.to_path_buf(),
            reason: format!("missing {name} section"),
        };
        let meta: Meta = serde_json::from_slice(meta.ok_or_else(|| missing("META"))?)?;
        let spec: NetworkSpec = serde_json::from_slice(spec.ok_or_else(|| missing("SPEC"))?)?;
        let history: TrainState = serde_json::from_slice(hist.ok_or_else(|| missing("HIST"))?)?;

        let mut p = Reader::new(parm.ok_or_else(|| missing("PARM"))?, path);
        let n = p.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let layer = p.u32("layer index")? as usize;
            let name_len = p.u32("name length")? as usize;
            let name = String::from_utf8_lossy(p.take(name_len, "name")?).into_owned();
            let weights = p.tensor()?;
            let bias = p.tensor()?;
            entries.push(ParamEntry {
                name,
                layer,
                weights,
                bias,
            });
        }
        if !p.at_end() {
            return Err(p.corrupt("PARM section longer than its entries"));
        }
        let params = Parameters {
            entries,
            init_seed: meta.init_seed,
        };
        params.check_against(&spec, &meta.input_shape)?;

        let mut o = Reader::new(optm.ok_or_else(|| missing("OPTM"))?, path);
        let kind = o.take(1, "optimizer kind")?[0];
        let optimizer = match kind {
            0 => {
                let momentum = o.f64("momentum")?;
                let weight_decay = o.f64("weight decay")?;
                let velocity = o.tensors()?;
                Optimizer::Sgd(SgdState {
                    momentum,
                    weight_decay,
                    velocity,
                })
            }
            1 => {
                let beta1 = o.f64("beta1")?;
                let beta2 = o.f64("beta2")?;
                let eps = o.f64("eps")?;
                let t = o.u64("step")?;
                let mut all = o.tensors()?;
                if all.len() % 2 != 0 {
                    return Err(o.corrupt("odd number of Adam moment tensors"));
                }
                let v = all.split_off(all.len() / 2);
                Optimizer::Adam(AdamState {
                    beta1,
                    beta2,
                    eps,
                    t,
                    m: all,
                    v,
                })
            }
            k => return Err(o.corrupt(&format!("unknown optimizer kind {k}"))),
        };
        if !o.at_end() {
            return Err(o.corrupt("OPTM section longer than its tensors"));
        }
        let param_shapes: Vec<&[usize]> = params.tensors().map(Tensor::shape).collect();
        let buffers = optimizer.buffers();
        let shapes_match = buffers.len() % param_shapes.len().max(1) == 0
            && buffers
                .iter()
                .zip(param_shapes.iter().cycle())
                .all(|(b, s)| b.shape() == *s);
        if !shapes_match {
            return Err(Error::ModelMismatch(
                "optimizer state does not match the parameter shapes".into(),
            ));
        }

        Ok(Self {
            completed_epochs: meta.completed_epochs,
            spec,
            input_shape: meta.input_shape,
            params,
            optimizer,
            rng: meta.rng,
            config_digest: meta.config_digest,
            regime: meta.regime,
            history,
        })
    }

    /// Builds the network these parameters belong to.
    pub fn model(&self) -> Result<crate::nn::Model<F>> {
        crate::nn::Model::new(self.spec.clone(), self.input_shape.clone(), self.params.clone())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn corrupt(&self, reason: &str) -> Error {
        Error::CorruptLength {
            path: self.path.to_path_buf(),
            reason: reason.to_string(),
        }
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt(&format!(
                "{what} needs {n} bytes at offset {}, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("eight bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("eight bytes")))
    }

    fn tensor<F: Real>(&mut self) -> Result<Tensor<F>> {
        let ndim = self.u32("tensor rank")? as usize;
        if ndim > 8 {
            return Err(self.corrupt(&format!("implausible tensor rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64("tensor extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| self.corrupt("tensor size overflows"))?;
        let bytes = n
            .checked_mul(F::BYTES)
            .ok_or_else(|| self.corrupt("tensor size overflows"))?;
        let raw = self.take(bytes, "tensor data")?;
        let data = raw.chunks_exact(F::BYTES).map(F::read_le).collect();
        Tensor::new(shape, data)
    }

    fn tensors<F: Real>(&mut self) -> Result<Vec<Tensor<F>>> {
        let n = self.u32("tensor count")? as usize;
        (0..n).map(|_| self.tensor()).collect()
    }
}

/// Writes atomically: the file appears complete or not at all.
pub fn save_checkpoint<F: Real>(checkpoint: &Checkpoint<F>, path: &Path) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    Checkpoint::from_bytes(&fs::read(path).map_err(|e| Error::io_at(path, e))?, path)
}

/// Value precision recorded in a checkpoint header.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    let mut r = Reader::new(&bytes, path);
    if r.take(4, "magic")? != MAGIC {
        return Err(r.corrupt("not a checkpoint file"));
    }
    let _version = r.u32("version")?;
    match r.u32("precision")? {
        32 => Ok(Precision::F32),
        64 => Ok(Precision::F64),
        b => Err(r.corrupt(&format!("unknown precision {b}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DigestPolicy {
    #[default]
    Warn,
    Fail,
}

/// Compares the checkpoint's config digest with `expected`.
pub fn check_digest<F: Real>(
    checkpoint: &Checkpoint<F>,
    expected: &str,
    policy: DigestPolicy,
    path: &Path,
) -> Result<()> {
    if checkpoint.config_digest == expected {
        return Ok(());
    }
    match policy {
        DigestPolicy::Warn => {
            log::warn!(
                "{}: written under config {}, current config is {expected}",
                path.display(),
                checkpoint.config_digest
            );
            Ok(())
        }
        DigestPolicy::Fail => Err(Error::DigestMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: checkpoint.config_digest.clone(),
        }),
    }
}

pub const METRICS_HEADER: [&str; 9] = [
    "epoch",
    "train_loss",
    "nat_test_acc",
    "adv_test_acc",
    "nat_test_loss",
    "lr",
    "regime",
    "wall_seconds",
    "switched",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsFormat {
    Csv,
    Json,
}

fn csv_row(r: &EpochRecord) -> [String; 9] {
    [
        r.epoch.to_string(),
        r.train_loss.to_string(),
        format!("{:.6}", r.nat_test_acc),
        format!("{:.6}", r.adv_test_acc),
        r.nat_test_loss.to_string(),
        r.lr.to_string(),
        r.regime.as_str().to_string(),
        r.wall_seconds.to_string(),
        r.switched.to_string(),
    ]
}

/// A metrics CSV that gains one flushed row per completed epoch, so an
/// interrupted run leaves only whole rows behind.
pub struct MetricsCsv {
    writer: csv::Writer<File>,
}

impl MetricsCsv {
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(METRICS_HEADER)?;
        writer.flush()?;
        Ok(Self { writer })
    }

    pub fn append(&mut self, record: &EpochRecord) -> Result<()> {
        self.writer.write_record(csv_row(record))?;
        self.writer.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub epochs: usize,
    pub total_wall_seconds: f64,
    pub switch_epoch: Option<usize>,
    pub final_nat_test_acc: f64,
    pub final_adv_test_acc: f64,
    pub config_digest: String,
}

impl MetricsSummary {
    pub fn from_records(records: &[EpochRecord], config_digest: &str) -> Self {
        let last = records.last();
        Self {
            epochs: records.len(),
            total_wall_seconds: records.iter().map(|r| r.wall_seconds).sum(),
            switch_epoch: records.iter().find(|r| r.switched).map(|r| r.epoch),
            final_nat_test_acc: last.map_or(0.0, |r| r.nat_test_acc),
            final_adv_test_acc: last.map_or(0.0, |r| r.adv_test_acc),
            config_digest: config_digest.to_string(),
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct MetricsDocument {
    pub records: Vec<EpochRecord>,
    pub summary: MetricsSummary,
}

pub fn write_metrics(
    records: &[EpochRecord],
    path: &Path,
    format: MetricsFormat,
    config_digest: &str,
) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Config("no metrics records to write".into()));
    }
    match format {
        MetricsFormat::Csv => {
            let mut w = MetricsCsv::create(path)?;
            for r in records {
                w.append(r)?;
            }
        }
        MetricsFormat::Json => {
            let doc = MetricsDocument {
                records: records.to_vec(),
                summary: MetricsSummary::from_records(records, config_digest),
            };
            let mut f = BufWriter::new(File::create(path)?);
            serde_json::to_writer_pretty(&mut f, &doc)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
    }
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.iter().ne(METRICS_HEADER) {
        return Err(Error::Config(format!("{}: unexpected metrics header", path.display())));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or_default();
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| Error::Config(format!("bad number {:?} in column {}", field(i), METRICS_HEADER[i])))
        };
        out.push(EpochRecord {
            epoch: num(0)? as usize,
            train_loss: num(1)?,
            nat_test_acc: num(2)?,
            adv_test_acc: num(3)?,
            nat_test_loss: num(4)?,
            lr: num(5)?,
            regime: match field(6) {
                "natural" => Regime::Natural,
                "adversarial" => Regime::Adversarial,
                other => return Err(Error::Config(format!("bad regime {other:?}"))),
            },
            wall_seconds: num(7)?,
            switched: field(8) == "true",
        });
    }
    Ok(out)
}
