//! Datasets on disk: raw little-endian `f32` samples, optional `i32` labels
//! and a TOML manifest carrying shapes and a SHA-256 checksum.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::InputKind;
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub kind: InputKind,
    pub samples: Matrix,
    pub labels: Option<Vec<i32>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, kind: InputKind, samples: Matrix, labels: Option<Vec<i32>>) -> Result<Self> {
        if samples.cols() != kind.dim() {
            return Err(Error::Data(format!(
                "samples have {} features, input kind needs {}",
                samples.cols(),
                kind.dim()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != samples.rows() {
                return Err(Error::Data(format!(
                    "{} labels for {} samples",
                    l.len(),
                    samples.rows()
                )));
            }
        }
        if !samples.is_finite() {
            return Err(Error::Data("samples contain non-finite values".into()));
        }
        Ok(Self {
            name: name.into(),
            kind,
            samples,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    /// Rows and labels at `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Matrix, Option<Vec<i32>>) {
        let x = self.samples.select_rows(indices);
        let y = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        (x, y)
    }

    /// Sample indices grouped by label, in ascending label order.
    pub fn class_index(&self) -> Result<BTreeMap<i32, Vec<usize>>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("dataset {} has no labels", self.name)))?;
        let mut map: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        Ok(map)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestKind {
    Vector,
    Image28,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub kind: ManifestKind,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    pub labels_present: bool,
    /// Relative to the manifest's directory.
    pub data_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_file: Option<String>,
    /// Hex SHA-256 of the data bytes followed by the label bytes.
    pub checksum: String,
}

impl DatasetManifest {
    pub fn input_kind(&self) -> Result<InputKind> {
        match self.kind {
            ManifestKind::Vector => self
                .dim
                .map(|dim| InputKind::Vector { dim })
                .ok_or_else(|| Error::Data("vector manifest without dim".into())),
            ManifestKind::Image28 => Ok(InputKind::Image {
                height: self.height.unwrap_or(28),
                width: self.width.unwrap_or(28),
            }),
        }
    }
}

fn checksum(data: &[u8], labels: Option<&[u8]>) -> String {
    let mut h = Sha256::new();
    h.update(data);
    if let Some(l) = labels {
        h.update(l);
    }
    hex::encode(h.finalize())
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `<dir>/<name>.f32`, `<dir>/<name>.labels.i32` (if labelled) and
/// `<dir>/<name>.manifest.toml`; returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(DatasetManifest, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data: Vec<u8> = dataset
        .samples
        .as_slice()
        .iter()
        .flat_map(|v| (*v as f32).to_le_bytes())
        .collect();
    let labels: Option<Vec<u8>> = dataset
        .labels
        .as_ref()
        .map(|l| l.iter().flat_map(|v| v.to_le_bytes()).collect());

    let data_file = format!("{}.f32", dataset.name);
    let labels_file = labels.as_ref().map(|_| format!("{}.labels.i32", dataset.name));
    write_atomic(&dir.join(&data_file), &data)?;
    if let (Some(bytes), Some(file)) = (&labels, &labels_file) {
        write_atomic(&dir.join(file), bytes)?;
    }
    let (kind, dim, height, width) = match dataset.kind {
        InputKind::Vector { dim } => (ManifestKind::Vector, Some(dim), None, None),
        InputKind::Image { height, width } => (ManifestKind::Image28, None, Some(height), Some(width)),
    };
    let manifest = DatasetManifest {
        name: dataset.name.clone(),
        kind,
        n_samples: dataset.len(),
        dim,
        height,
        width,
        labels_present: labels.is_some(),
        data_file,
        labels_file,
        checksum: checksum(&data, labels.as_deref()),
    };
    let path = dir.join(format!("{}.manifest.toml", dataset.name));
    let text = toml::to_string(&manifest).expect("manifest serializes");
    write_atomic(&path, text.as_bytes())?;
    Ok((manifest, path))
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Format {
        path: manifest_path.into(),
        reason: e.to_string(),
    })?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let kind = manifest.input_kind()?;
    let dim = kind.dim();

    let data_path = dir.join(&manifest.data_file);
    let data = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let expected = manifest.n_samples * dim * 4;
    if data.len() != expected {
        return Err(Error::Format {
            path: data_path,
            reason: format!("expected {expected} bytes, found {}", data.len()),
        });
    }
    let labels = match (&manifest.labels_file, manifest.labels_present) {
        (Some(file), true) => {
            let p = dir.join(file);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if bytes.len() != manifest.n_samples * 4 {
                return Err(Error::Format {
                    path: p,
                    reason: format!(
                        "expected {} label bytes, found {}",
                        manifest.n_samples * 4,
                        bytes.len()
                    ),
                });
            }
            Some(bytes)
        }
        (None, false) => None,
        _ => {
            return Err(Error::Format {
                path: manifest_path.into(),
                reason: "labels_present disagrees with labels_file".into(),
            })
        }
    };
    if checksum(&data, labels.as_deref()) != manifest.checksum {
        return Err(Error::Integrity {
            path: manifest_path.into(),
            reason: "content hash does not match manifest".into(),
        });
    }
    let values = data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    let samples = Matrix::from_vec(manifest.n_samples, dim, values)?;
    let labels = labels.map(|b| {
        b.chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    });
    Dataset::new(manifest.name, kind, samples, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    pub rotation_seed: u64,
    pub mean_offset_scale: f64,
}

/// Gaussian class clusters with means on a sphere of radius
/// `class_mean_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub name: String,
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub class_mean_scale: f64,
    pub within_class_sigma: f64,
    /// Seeds the class means.
    pub seed: u64,
    /// Seeds the within-class draws; defaults to `seed`. Two specs that differ
    /// only here share classes but not samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_shift: Option<DomainShift>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("dim and samples_per_class must be positive".into()));
        }
        if !(self.within_class_sigma > 0.0) || !(self.class_mean_scale > 0.0) {
            return Err(Error::Config("sigma and mean scale must be positive".into()));
        }
        if let Some(s) = &self.domain_shift {
            if !(s.mean_offset_scale >= 0.0) {
                return Err(Error::Config("mean offset scale must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn class_means(&self) -> Matrix {
        let mut rng = rng::stream(self.seed, Stream::Synthetic, 0);
        let mut means = Matrix::zeros(self.n_classes, self.dim);
        for c in 0..self.n_classes {
            let row = means.row_mut(c);
            row.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            let n = dot(row, row).sqrt();
            row.iter_mut().for_each(|v| *v *= self.class_mean_scale / n);
        }
        means
    }

    /// Builds the dataset in memory, class-major, with values rounded to
    /// `f32` so that it equals what [`load_dataset`] reads back.
    pub fn synthesize(&self) -> Result<Dataset> {
        self.validate()?;
        let means = self.class_means();
        let noise = Normal::new(0.0, self.within_class_sigma)
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = rng::stream(self.sample_seed.unwrap_or(self.seed), Stream::Samples, 0);
        let n = self.n_classes * self.samples_per_class;
        let mut samples = Matrix::zeros(n, self.dim);
        let mut labels = Vec::with_capacity(n);
        for c in 0..self.n_classes {
            for s in 0..self.samples_per_class {
                let row = samples.row_mut(c * self.samples_per_class + s);
                for (v, m) in row.iter_mut().zip(means.row(c)) {
                    *v = m + noise.sample(&mut rng);
                }
                labels.push(c as i32);
            }
        }
        if let Some(shift) = &self.domain_shift {
            let rotation = random_rotation(self.dim, shift.rotation_seed);
            let mut rng = rng::stream(shift.rotation_seed, Stream::Shift, 1);
            let mut offset: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let on = dot(&offset, &offset).sqrt();
            offset.iter_mut().for_each(|v| *v *= shift.mean_offset_scale / on);
            samples = samples.matmul_t(&rotation)?;
            for i in 0..n {
                for (v, o) in samples.row_mut(i).iter_mut().zip(&offset) {
                    *v += o;
                }
            }
        }
        samples
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = *v as f32 as f64);
        Dataset::new(
            self.name.clone(),
            InputKind::Vector { dim: self.dim },
            samples,
            Some(labels),
        )
    }
}

/// Orthogonal matrix from Gram–Schmidt on a seeded Gaussian matrix.
pub fn random_rotation(dim: usize, seed: u64) -> Matrix {
    let mut rng = rng::stream(seed, Stream::Shift, 0);
    let mut q = Matrix::zeros(dim, dim);
    let mut i = 0;
    while i < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for j in 0..i {
            let p = dot(&v, q.row(j));
            for (vk, qk) in v.iter_mut().zip(q.row(j)) {
                *vk -= p * qk;
            }
        }
        let n = dot(&v, &v).sqrt();
        if n < 1e-8 {
            continue;
        }
        q.row_mut(i).iter_mut().zip(&v).for_each(|(d, s)| *d = s / n);
        i += 1;
    }
    q
}

pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let dataset = spec.synthesize()?;
    write_dataset(&dataset, dir)
}
