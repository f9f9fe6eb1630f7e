//! Datasets: IDX files, synthetic Gaussian blobs, and shuffled minibatches.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Real;
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Images `[N, C, H, W]` with values in `[0, 1]` and one class per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F: Real> {
    images: Tensor<F>,
    labels: Vec<usize>,
    classes: usize,
}

impl<F: Real> Dataset<F> {
    pub fn new(images: Tensor<F>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::InvalidShape {
                shape: images.shape().to_vec(),
                reason: "dataset images must be [N, C, H, W]".into(),
            });
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        if images.data().iter().any(|&v| v < F::zero() || v > F::one()) {
            return Err(Error::InvalidShape {
                shape: images.shape().to_vec(),
                reason: "pixel values must lie in [0, 1]".into(),
            });
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn images(&self) -> &Tensor<F> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<F>, Vec<usize>) {
        let per: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_parts(shape, data), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.gather(indices);
        Self::new(images, labels, self.classes)
    }

    /// The first `n` samples (all of them if `n ≥ len`).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// `n` samples drawn without replacement by a seeded shuffle, kept in
    /// ascending index order.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Self> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream::<ChaCha8Rng>(&[seed, 0x5eb5e7]));
        idx.truncate(n);
        idx.sort_unstable();
        self.subset(&idx)
    }

    /// Same samples with a larger class count (for files that happen not to
    /// contain the highest labels).
    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        if classes < self.classes {
            return Err(Error::Config(format!(
                "cannot shrink class count from {} to {classes}",
                self.classes
            )));
        }
        self.classes = classes;
        Ok(self)
    }

    pub fn with_images(&self, images: Tensor<F>) -> Result<Self> {
        if images.shape() != self.images.shape() {
            return Err(Error::ShapeMismatch {
                op: "with_images",
                left: images.shape().to_vec(),
                right: self.images.shape().to_vec(),
            });
        }
        Self::new(images, self.labels.clone(), self.classes)
    }

    pub fn cast<G: Real>(&self) -> Dataset<G> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            reason: format!("file ends inside the {what} header field"),
        })
}

fn check_magic(bytes: &[u8], path: &Path, expected: u32) -> Result<()> {
    let found = read_u32(bytes, 0, path, "magic")?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, path, IDX_IMAGES)?;
    let n = read_u32(bytes, 4, path, "count")? as usize;
    let rows = read_u32(bytes, 8, path, "rows")? as usize;
    let cols = read_u32(bytes, 12, path, "cols")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            reason: format!("{n}×{rows}×{cols} images need {need} pixel bytes, found {}", body.len()),
        });
    }
    Ok((n, rows, cols, body[..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, path, IDX_LABELS)?;
    let n = read_u32(bytes, 4, path, "count")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            reason: format!("{n} labels declared, {} bytes present", body.len()),
        });
    }
    Ok(body[..n].to_vec())
}

/// Loads an IDX image/label pair, scaling pixels by 1/255.
pub fn load_idx<F: Real>(images_path: &Path, labels_path: &Path) -> Result<Dataset<F>> {
    let (n, rows, cols, pixels) = parse_idx_images(&fs::read(images_path).map_err(|e| Error::io_at(images_path, e))?, images_path)?;
    let labels = parse_idx_labels(&fs::read(labels_path).map_err(|e| Error::io_at(labels_path, e))?, labels_path)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::InvalidShape {
            shape: vec![n, 1, rows, cols],
            reason: "IDX file holds no pixels".into(),
        });
    }
    let scale = 1.0 / 255.0;
    let data = pixels.iter().map(|&p| F::of(p as f64 * scale)).collect();
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(Tensor::from_parts(vec![n, 1, rows, cols], data), labels, classes)
}

/// Writes single-channel images and labels as IDX files. Pixels are
/// rounded to the nearest multiple of 1/255.
pub fn write_idx<F: Real>(dataset: &Dataset<F>, images_path: &Path, labels_path: &Path) -> Result<()> {
    let s = dataset.images.shape();
    if s[1] != 1 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "IDX export supports single-channel images only".into(),
        });
    }
    if dataset.classes > 256 {
        return Err(Error::Config("IDX labels are single bytes".into()));
    }
    let mut img = Vec::with_capacity(16 + dataset.images.len());
    for v in [IDX_IMAGES, s[0] as u32, s[2] as u32, s[3] as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(
        dataset
            .images
            .data()
            .iter()
            .map(|&v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lab = Vec::with_capacity(8 + dataset.len());
    for v in [IDX_LABELS, dataset.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(dataset.labels.iter().map(|&l| l as u8));
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

fn default_noise() -> f64 {
    0.1
}

/// Gaussian clusters in `[0, 1]^dim`, stored as `[N, 1, 1, dim]`.
///
/// Class `c` is centred at `0.5 + a·u_c`, where the `u_c` are unit vectors
/// with entries ±1/√dim drawn from `layout_seed`. With two classes the
/// directions are opposite and the centres are `separation · noise` apart;
/// with more classes they are drawn independently and the distances are
/// close to that value. Points get isotropic noise of standard deviation
/// `noise` and are clamped into `[0, 1]`.
///
/// A non-zero `mode_offset` splits every class into two modes: each point
/// is additionally moved by `±mode_offset` along a class-specific ±1 pattern,
/// with the sign drawn per point. `label_noise` reassigns that fraction of
/// labels to a different class uniformly at random.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub dim: usize,
    pub classes: usize,
    /// Distance between class centres, in units of `noise`.
    pub separation: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Per-coordinate displacement of the two modes of each class.
    #[serde(default)]
    pub mode_offset: f64,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default)]
    pub layout_seed: u64,
}

impl BlobSpec {
    pub fn new(dim: usize, classes: usize, separation: f64, layout_seed: u64) -> Self {
        Self {
            dim,
            classes,
            separation,
            noise: default_noise(),
            mode_offset: 0.0,
            label_noise: 0.0,
            layout_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = if self.dim == 0 || self.classes < 2 {
            Some("dim must be ≥ 1 and classes ≥ 2")
        } else if !(self.separation >= 0.0 && self.separation.is_finite()) {
            Some("separation must be finite and ≥ 0")
        } else if !(self.noise >= 0.0 && self.noise.is_finite()) {
            Some("noise must be finite and ≥ 0")
        } else if !(self.mode_offset >= 0.0 && self.mode_offset.is_finite()) {
            Some("mode_offset must be finite and ≥ 0")
        } else if !(0.0..=1.0).contains(&self.label_noise) {
            Some("label_noise must lie in [0, 1]")
        } else {
            None
        };
        match bad {
            Some(m) => Err(Error::Config(format!("blobs: {m}"))),
            None => Ok(()),
        }
    }

    fn signs(r: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| if r.gen::<bool>() { 1.0 } else { -1.0 }).collect()
    }

    /// `(centres, mode patterns)`, both `classes × dim`.
    fn layout(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut r: ChaCha8Rng = rng::stream(&[self.layout_seed, 0xb10b]);
        let unit = 1.0 / (self.dim as f64).sqrt();
        let dist = self.separation * self.noise;
        let dirs: Vec<Vec<f64>> = if self.classes == 2 {
            let d = Self::signs(&mut r, self.dim);
            vec![d.iter().map(|v| -v).collect(), d]
        } else {
            (0..self.classes).map(|_| Self::signs(&mut r, self.dim)).collect()
        };
        let reach = if self.classes == 2 { dist / 2.0 } else { dist / 2f64.sqrt() };
        let centres = dirs
            .iter()
            .map(|d| d.iter().map(|v| 0.5 + reach * v * unit).collect())
            .collect();
        let patterns = (0..self.classes).map(|_| Self::signs(&mut r, self.dim)).collect();
        (centres, patterns)
    }

    /// `n_per_class · classes` points; sample `j` belongs (before label
    /// noise) to class `j mod classes`.
    pub fn generate<F: Real>(&self, n_per_class: usize, seed: u64) -> Result<Dataset<F>> {
        self.validate()?;
        if n_per_class == 0 {
            return Err(Error::Config("blobs: n_per_class must be ≥ 1".into()));
        }
        let (centres, patterns) = self.layout();
        let n = n_per_class * self.classes;
        let mut data = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for j in 0..n {
            let c = j % self.classes;
            let mut r: ChaCha8Rng = rng::stream(&[seed, j as u64]);
            let mode = if r.gen::<bool>() { 1.0 } else { -1.0 };
            for k in 0..self.dim {
                let z: f64 = r.sample(StandardNormal);
                let v = centres[c][k] + mode * self.mode_offset * patterns[c][k] + self.noise * z;
                data.push(F::of(v.clamp(0.0, 1.0)));
            }
            let label = if r.gen::<f64>() < self.label_noise {
                (c + 1 + r.gen_range(0..self.classes - 1)) % self.classes
            } else {
                c
            };
            labels.push(label);
        }
        Dataset::new(
            Tensor::from_parts(vec![n, 1, 1, self.dim], data),
            labels,
            self.classes,
        )
    }
}

/// Plain isotropic blobs whose layout and samples both come from `seed`.
pub fn synthetic_blobs<F: Real>(
    n_per_class: usize,
    dim: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset<F>> {
    BlobSpec::new(dim, classes, separation, seed).generate(n_per_class, seed)
}

/// Sample indices of each minibatch for one epoch: a permutation of
/// `0..n` determined by `(shuffle_seed, epoch)`, cut into consecutive
/// batches (the last may be short).
pub fn batches(n: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream::<ChaCha8Rng>(&[shuffle_seed, epoch, 0x5407]));
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_roundtrip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([0u8, 255, 255, 0, 255, 0, 0, 255]);
        fs::write(&ip, &img).unwrap();
        fs::write(&lp, [0, 0, 8, 1, 0, 0, 0, 2, 1, 0]).unwrap();
        let d: Dataset<f32> = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.images().shape(), &[2, 1, 2, 2]);
        assert_eq!(d.images().data(), &[0., 1., 1., 0., 1., 0., 0., 1.]);
        assert_eq!(d.labels(), &[1, 0]);

        let (ip2, lp2) = (dir.path().join("img2"), dir.path().join("lab2"));
        write_idx(&d, &ip2, &lp2).unwrap();
        assert_eq!(fs::read(&ip2).unwrap(), img);
        assert_eq!(load_idx::<f32>(&ip2, &lp2).unwrap(), d);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        fs::write(&lp, [0, 0, 8, 1, 0, 0, 0, 1, 3]).unwrap();

        fs::write(&ip, [0, 0, 8, 2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 9]).unwrap();
        assert!(matches!(
            load_idx::<f32>(&ip, &lp),
            Err(Error::BadMagic { found: 0x802, .. })
        ));

        fs::write(&ip, [0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 9]).unwrap();
        assert!(matches!(load_idx::<f32>(&ip, &lp), Err(Error::Truncated { .. })));

        fs::write(&ip, [0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 1, 9, 9]).unwrap();
        assert!(matches!(
            load_idx::<f32>(&ip, &lp),
            Err(Error::CountMismatch { images: 2, labels: 1 })
        ));
    }

    #[test]
    fn blobs_are_seeded_and_valid() {
        let a: Dataset<f32> = synthetic_blobs(50, 6, 3, 4.0, 9).unwrap();
        let b: Dataset<f32> = synthetic_blobs(50, 6, 3, 4.0, 9).unwrap();
        let c: Dataset<f32> = synthetic_blobs(50, 6, 3, 4.0, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 150);
        assert_eq!(a.sample_shape(), &[1, 1, 6]);
        for k in 0..3 {
            assert_eq!(a.labels().iter().filter(|&&l| l == k).count(), 50);
        }
    }

    #[test]
    fn two_class_centres_are_separation_apart() {
        let spec = BlobSpec::new(16, 2, 6.0, 3);
        let (c, _) = spec.layout();
        let d: f64 = c[0].iter().zip(&c[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((d - 0.6).abs() < 1e-12);
        let (c0, _) = BlobSpec::new(16, 2, 0.0, 3).layout();
        assert_eq!(c0[0], c0[1]);
    }

    #[test]
    fn label_noise_changes_roughly_that_fraction() {
        let mut spec = BlobSpec::new(4, 2, 6.0, 1);
        spec.label_noise = 0.1;
        let d: Dataset<f64> = spec.generate(2000, 5).unwrap();
        let flipped = d
            .labels()
            .iter()
            .enumerate()
            .filter(|(j, &l)| l != j % 2)
            .count();
        assert!((300..500).contains(&flipped), "{flipped}");
    }

    #[test]
    fn batches_partition_the_data() {
        let b = batches(103, 10, 7, 3);
        assert_eq!(b.len(), 11);
        assert_eq!(b.last().unwrap().len(), 3);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(b, batches(103, 10, 7, 3));
        assert_ne!(b, batches(103, 10, 7, 4));
        assert_eq!(batches(5, 100, 1, 0).len(), 1);
    }

    #[test]
    fn dataset_invariants_are_enforced() {
        let img = Tensor::<f32>::full(vec![2, 1, 1, 2], 0.5);
        assert!(Dataset::new(img.clone(), vec![0, 2], 2).is_err());
        assert!(Dataset::new(img.clone(), vec![0], 2).is_err());
        assert!(Dataset::new(Tensor::full(vec![2, 1, 1, 2], 1.5), vec![0, 1], 2).is_err());
        let d = Dataset::new(img, vec![0, 1], 2).unwrap();
        let (x, y) = d.gather(&[1]);
        assert_eq!(x.shape(), &[1, 1, 1, 2]);
        assert_eq!(y, vec![1]);
    }
}
