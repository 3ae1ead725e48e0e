//! MNIST ingestion, class filtering, PCA and angle encoding.

use std::f64::consts::TAU;
use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the directory that holds the IDX files.
pub const DATA_DIR_ENV: &str = "MNIST_DIR";

/// File names probed inside a data directory, in order.
pub const IMAGE_FILE_CANDIDATES: &[&str] = &[
    "train-images-idx3-ubyte",
    "train-images-idx3-ubyte.gz",
    "train-images.idx3-ubyte",
    "digits-images-idx3-ubyte.gz",
];
pub const LABEL_FILE_CANDIDATES: &[&str] = &[
    "train-labels-idx1-ubyte",
    "train-labels-idx1-ubyte.gz",
    "train-labels.idx1-ubyte",
    "digits-labels-idx1-ubyte.gz",
];

/// Upper end of the encoding range is `2π·(1 - ENCODING_MARGIN)`, keeping
/// the interval half-open.
pub const ENCODING_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<u8>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Pixels of image `i` scaled to `[0, 1]`.
    pub fn pixels(&self, i: usize) -> Vec<f64> {
        self.images[i].iter().map(|&p| f64::from(p) / 255.0).collect()
    }
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Header<'a> {
    path: &'a Path,
    bytes: &'a [u8],
}

impl Header<'_> {
    fn word(&self, index: usize) -> Result<u32> {
        let off = 4 * index;
        let chunk = self.bytes.get(off..off + 4).ok_or_else(|| Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.bytes.len() as u64,
            reason: format!("header needs at least {} bytes, file has {}", off + 4, self.bytes.len()),
        })?;
        Ok(u32::from_be_bytes(chunk.try_into().unwrap()))
    }

    fn expect_magic(&self, magic: u32) -> Result<()> {
        let found = self.word(0)?;
        if found != magic {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                offset: 0,
                reason: format!("magic number {found:#010x}, expected {magic:#010x}"),
            });
        }
        Ok(())
    }

    fn expect_len(&self, expected: usize) -> Result<()> {
        if self.bytes.len() != expected {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                offset: self.bytes.len().min(expected) as u64,
                reason: format!("expected {expected} bytes from the header, found {}", self.bytes.len()),
            });
        }
        Ok(())
    }
}

/// Parses a big-endian IDX3 image file (already decompressed).
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let h = Header { path, bytes };
    h.expect_magic(IMAGE_MAGIC)?;
    let count = h.word(1)? as usize;
    let rows = h.word(2)? as usize;
    let cols = h.word(3)? as usize;
    let size = rows * cols;
    h.expect_len(16 + count * size)?;
    let images = bytes[16..]
        .chunks_exact(size.max(1))
        .take(count)
        .map(<[u8]>::to_vec)
        .collect();
    Ok((rows, cols, images))
}

/// Parses a big-endian IDX1 label file (already decompressed).
pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let h = Header { path, bytes };
    h.expect_magic(LABEL_MAGIC)?;
    let count = h.word(1)? as usize;
    h.expect_len(8 + count)?;
    Ok(bytes[8..].to_vec())
}

/// Loads an IDX image/label pair; either file may be gzip-compressed.
pub fn load_idx(images: &Path, labels: &Path) -> Result<RawDataset> {
    let (rows, cols, images_v) = parse_idx_images(images, &read_maybe_gzip(images)?)?;
    let labels_v = parse_idx_labels(labels, &read_maybe_gzip(labels)?)?;
    if images_v.len() != labels_v.len() {
        return Err(Error::usage(format!(
            "{} images but {} labels ({} / {})",
            images_v.len(),
            labels_v.len(),
            images.display(),
            labels.display()
        )));
    }
    Ok(RawDataset {
        rows,
        cols,
        images: images_v,
        labels: labels_v,
    })
}

/// Finds an image/label pair inside `dir`.
pub fn locate_idx(dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let find = |names: &[&str]| names.iter().map(|n| dir.join(n)).find(|p| p.is_file());
    match (find(IMAGE_FILE_CANDIDATES), find(LABEL_FILE_CANDIDATES)) {
        (Some(i), Some(l)) => Ok((i, l)),
        _ => Err(Error::config(
            "data_dir",
            format!(
                "no MNIST IDX files in {}; expected one of [{}] and one of [{}] (set {DATA_DIR_ENV} or data_dir)",
                dir.display(),
                IMAGE_FILE_CANDIDATES.join(", "),
                LABEL_FILE_CANDIDATES.join(", ")
            ),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledIndex {
    /// Row in the raw dataset.
    pub index: usize,
    /// 0 for the first class, 1 for the second.
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<LabeledIndex>,
    pub test: Vec<LabeledIndex>,
}

/// Picks `per_class_train + per_class_test` random images of each of the two
/// classes; the first class is labeled 0. Train and test are disjoint.
pub fn filter_and_split(
    raw: &RawDataset,
    classes: [u8; 2],
    per_class_train: usize,
    per_class_test: usize,
    seed: u64,
) -> Result<Split> {
    if classes[0] == classes[1] {
        return Err(Error::config("classes", "the two classes must differ"));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, &digit) in classes.iter().enumerate() {
        let mut idx: Vec<usize> = (0..raw.len()).filter(|&i| raw.labels[i] == digit).collect();
        let need = per_class_train + per_class_test;
        if idx.len() < need {
            return Err(Error::usage(format!(
                "digit {digit}: need {need} samples, dataset has {}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng::stream(seed, &[domain::SPLIT, u64::from(digit)]));
        let tag = |&index: &usize| LabeledIndex {
            index,
            label: label as u8,
        };
        train.extend(idx[..per_class_train].iter().map(tag));
        test.extend(idx[per_class_train..need].iter().map(tag));
    }
    Ok(Split { train, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k` orthonormal rows, by descending explained variance.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalues of the retained components.
    pub explained_variance: Vec<f64>,
    /// Per-component minimum of the projected fitting data.
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Fits a `k`-component PCA to `samples` (one row per sample).
///
/// The eigenproblem is solved on the `N×N` Gram matrix of the centered data.
/// Each component's sign is fixed so that its
/// largest-magnitude entry is positive.
pub fn pca_fit(samples: &[Vec<f64>], k: usize) -> Result<PcaModel> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::usage("PCA needs at least two samples"));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::usage("samples have differing dimensions"));
    }
    if k == 0 {
        return Err(Error::usage("PCA needs at least one component"));
    }

    let mut mean = vec![0.0; d];
    for s in samples {
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| samples[i][j] - mean[j]);

    let gram = &centered * centered.transpose();
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank_tol = top * 1e-10 + f64::MIN_POSITIVE;
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > rank_tol).count();
    if k > rank {
        return Err(Error::usage(format!(
            "requested {k} components but the data has rank {rank}"
        )));
    }

    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let lambda = eig.eigenvalues[i];
        let u = eig.eigenvectors.column(i);
        let mut v = (centered.transpose() * u) / lambda.sqrt();
        let norm = v.norm();
        v /= norm;
        let pivot = v
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(1.0);
        if pivot < 0.0 {
            v = -v;
        }
        components.push(v.iter().copied().collect::<Vec<f64>>());
        explained_variance.push(lambda / (n - 1) as f64);
    }

    let mut model = PcaModel {
        mean,
        components,
        explained_variance,
        min: vec![f64::INFINITY; k],
        max: vec![f64::NEG_INFINITY; k],
    };
    for s in samples {
        let p = model.project(s);
        for ((lo, hi), x) in model.min.iter_mut().zip(model.max.iter_mut()).zip(p) {
            *lo = lo.min(x);
            *hi = hi.max(x);
        }
    }
    Ok(model)
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, sample: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(sample.iter().zip(&self.mean))
                    .map(|(w, (x, m))| w * (x - m))
                    .sum()
            })
            .collect()
    }

    /// Projects and maps each component's fitted `[min, max]` affinely onto
    /// `[0, 2π·(1 - ENCODING_MARGIN)]`. Values outside the fitted range are
    /// clipped to its ends.
    pub fn encode(&self, sample: &[f64]) -> Vec<f64> {
        let top = TAU * (1.0 - ENCODING_MARGIN);
        self.project(sample)
            .into_iter()
            .enumerate()
            .map(|(c, x)| {
                let span = self.max[c] - self.min[c];
                if span <= 0.0 {
                    return 0.0;
                }
                ((x - self.min[c]) / span).clamp(0.0, 1.0) * top
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedDataset {
    pub split: SplitTag,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// CSV with header `label,f_0,...,f_{k-1}`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let k = self.features.first().map_or(0, Vec::len);
        let mut header = vec!["label".to_string()];
        header.extend((0..k).map(|i| format!("f_{i}")));
        out.write_record(&header)?;
        for (f, l) in self.features.iter().zip(&self.labels) {
            let mut row = vec![l.to_string()];
            row.extend(f.iter().map(|v| v.to_string()));
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R, split: SplitTag) -> Result<Self> {
        let mut rdr = crate::experiments::csv_reader(r);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let parse_err = |what: &str| Error::usage(format!("bad {what} in encoded CSV row {row:?}"));
            labels.push(row[0].parse::<u8>().map_err(|_| parse_err("label"))?);
            features.push(
                row.iter()
                    .skip(1)
                    .map(|v| v.parse::<f64>().map_err(|_| parse_err("feature")))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(Self {
            split,
            features,
            labels,
        })
    }
}

/// Which images the PCA is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PcaScope {
    /// Only the selected training samples.
    #[default]
    TrainSubset,
    /// Every image of the two classes except the test samples.
    AllButTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeConfig {
    pub n_components: usize,
    pub classes: [u8; 2],
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub seed: u64,
    #[serde(default)]
    pub pca_scope: PcaScope,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            n_components: 8,
            classes: [6, 9],
            per_class_train: 50,
            per_class_test: 50,
            seed: 0,
            pca_scope: PcaScope::TrainSubset,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSplit {
    pub model: PcaModel,
    pub split: Split,
    pub train: EncodedDataset,
    pub test: EncodedDataset,
}

/// Filter, split, fit the PCA and encode both halves.
pub fn encode_dataset(raw: &RawDataset, cfg: &EncodeConfig) -> Result<EncodedSplit> {
    let split = filter_and_split(raw, cfg.classes, cfg.per_class_train, cfg.per_class_test, cfg.seed)?;
    let fit_rows: Vec<usize> = match cfg.pca_scope {
        PcaScope::TrainSubset => split.train.iter().map(|s| s.index).collect(),
        PcaScope::AllButTest => {
            let test: std::collections::HashSet<usize> = split.test.iter().map(|s| s.index).collect();
            (0..raw.len())
                .filter(|i| cfg.classes.contains(&raw.labels[*i]) && !test.contains(i))
                .collect()
        }
    };
    let fit: Vec<Vec<f64>> = fit_rows.iter().map(|&i| raw.pixels(i)).collect();
    let model = pca_fit(&fit, cfg.n_components)?;
    let encode = |items: &[LabeledIndex], tag| EncodedDataset {
        split: tag,
        features: items.iter().map(|s| model.encode(&raw.pixels(s.index))).collect(),
        labels: items.iter().map(|s| s.label).collect(),
    };
    let train = encode(&split.train, SplitTag::Train);
    let test = encode(&split.test, SplitTag::Test);
    Ok(EncodedSplit {
        model,
        split,
        train,
        test,
    })
}
