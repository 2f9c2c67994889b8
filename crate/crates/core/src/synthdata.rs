//! Seeded Gaussian class-center data with one feature block per modality.
//!
//! Modality `k` of a class-`c` sample is `R_k (mu_k u_{c,k} + sigma_k eps)`
//! with `u_{c,k}` a fixed random unit direction and `R_k` a fixed random
//! rotation. The ratio `mu_k / sigma_k` sets how easy the modality is.
//!
//! # File format
//!
//! Plain text, one record per line:
//!
//! ```text
//! DGLDATA 1
//! split train
//! modalities 2
//! classes 6
//! dims 20 20
//! n 3000
//! seed 7
//! spec {"num_classes":6,...}
//! modality 1
//! <n rows of comma-separated features>
//! modality 2
//! <n rows>
//! labels
//! <n rows, one label each>
//! end
//! ```
//!
//! Floats are written in shortest round-trip form, so a load reproduces
//! the saved values bit for bit.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

const MAGIC: &str = "DGLDATA";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub input_dim: usize,
    /// Distance of each class center from the origin.
    pub separation: f64,
    pub noise: f64,
    /// Probability that this modality's features are drawn from a random class.
    #[serde(default)]
    pub label_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub num_classes: usize,
    pub modalities: Vec<ModalitySpec>,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl GenSpec {
    /// Two modalities, six classes: a dominant one (`mu = 3.0`) and a weak one (`mu = 1.2`).
    pub fn default_imbalanced(seed: u64) -> Self {
        let m = |separation| ModalitySpec {
            input_dim: 20,
            separation,
            noise: 1.0,
            label_noise: 0.0,
        };
        Self {
            num_classes: 6,
            modalities: vec![m(3.0), m(1.2)],
            n_train: 3000,
            n_test: 3000,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.len() < 2 {
            return Err(Error::config("need at least 2 modalities"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        for (k, m) in self.modalities.iter().enumerate() {
            let k = k + 1;
            if m.input_dim == 0 {
                return Err(Error::config(format!("modality {k}: input_dim must be >= 1")));
            }
            if !(m.separation.is_finite() && m.separation >= 0.0) {
                return Err(Error::config(format!("modality {k}: separation must be >= 0")));
            }
            if !(m.noise.is_finite() && m.noise > 0.0) {
                return Err(Error::config(format!("modality {k}: noise must be > 0")));
            }
            if !(0.0..=1.0).contains(&m.label_noise) {
                return Err(Error::config(format!("modality {k}: label_noise must be in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A mini-batch: one `[n x d_k]` matrix per modality plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub features: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub spec: GenSpec,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.features.len()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let inputs = self
            .features
            .iter()
            .map(|f| {
                let d = f.cols();
                let mut data = Vec::with_capacity(indices.len() * d);
                for &i in indices {
                    data.extend_from_slice(f.row(i));
                }
                Tensor::new(vec![indices.len(), d], data).expect("row copy keeps shape")
            })
            .collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Batch { inputs, labels }
    }

    pub fn full_batch(&self) -> Batch {
        Batch {
            inputs: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let spec_json =
            serde_json::to_string(&self.spec).map_err(|e| Error::data(e.to_string()))?;
        let dims: Vec<String> = self.features.iter().map(|f| f.cols().to_string()).collect();
        let mut out = String::new();
        writeln!(out, "{MAGIC} {VERSION}").unwrap();
        writeln!(out, "split {}", self.split.as_str()).unwrap();
        writeln!(out, "modalities {}", self.features.len()).unwrap();
        writeln!(out, "classes {}", self.spec.num_classes).unwrap();
        writeln!(out, "dims {}", dims.join(" ")).unwrap();
        writeln!(out, "n {}", self.len()).unwrap();
        writeln!(out, "seed {}", self.spec.seed).unwrap();
        writeln!(out, "spec {spec_json}").unwrap();
        w.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
        for (k, f) in self.features.iter().enumerate() {
            let mut block = format!("modality {}\n", k + 1);
            for r in 0..f.rows() {
                let row: Vec<String> = f.row(r).iter().map(|v| v.to_string()).collect();
                block.push_str(&row.join(","));
                block.push('\n');
            }
            w.write_all(block.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        let mut block = String::from("labels\n");
        for y in &self.labels {
            writeln!(block, "{y}").unwrap();
        }
        block.push_str("end\n");
        w.write_all(block.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = LineReader {
            path,
            inner: BufReader::new(file).lines(),
            line: 0,
        };

        let header = lines.next_line()?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(lines.err("missing DGLDATA magic"));
        }
        let version: u32 = lines.parse_field(parts.next(), "version")?;
        if version != VERSION {
            return Err(lines.err(&format!("unsupported version {version}")));
        }
        let split = match lines.keyed("split")?.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(lines.err(&format!("unknown split {other:?}"))),
        };
        let m: usize = lines.keyed_parse("modalities")?;
        let classes: usize = lines.keyed_parse("classes")?;
        let dims_line = lines.keyed("dims")?;
        let dims = dims_line
            .split_whitespace()
            .map(|d| lines.parse_field::<usize>(Some(d), "dims"))
            .collect::<Result<Vec<_>>>()?;
        if dims.len() != m {
            return Err(lines.err("dims count does not match modalities"));
        }
        let n: usize = lines.keyed_parse("n")?;
        let seed: u64 = lines.keyed_parse("seed")?;
        let spec_line = lines.keyed("spec")?;
        let spec: GenSpec =
            serde_json::from_str(&spec_line).map_err(|e| lines.err(&format!("bad spec: {e}")))?;
        if spec.seed != seed || spec.num_classes != classes || spec.modalities.len() != m {
            return Err(lines.err("spec echo disagrees with header"));
        }

        let mut features = Vec::with_capacity(m);
        for (k, &d) in dims.iter().enumerate() {
            let tag = lines.next_line()?;
            if tag != format!("modality {}", k + 1) {
                return Err(lines.err(&format!("expected 'modality {}'", k + 1)));
            }
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                let row = lines.next_line()?;
                let before = data.len();
                for v in row.split(',') {
                    data.push(lines.parse_field::<f64>(Some(v), "feature")?);
                }
                if data.len() - before != d {
                    return Err(lines.err(&format!("expected {d} features")));
                }
            }
            features.push(Tensor::new(vec![n, d], data)?);
        }
        if lines.next_line()? != "labels" {
            return Err(lines.err("expected 'labels'"));
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let line = lines.next_line()?;
            let y: usize = lines.parse_field(Some(line.trim()), "label")?;
            if y >= classes {
                return Err(lines.err(&format!("label {y} out of range")));
            }
            labels.push(y);
        }
        if lines.next_line()? != "end" {
            return Err(lines.err("expected 'end'"));
        }
        Ok(Self {
            features,
            labels,
            split,
            spec,
        })
    }
}

struct LineReader<'a, R> {
    path: &'a Path,
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> LineReader<'_, R> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            msg: msg.to_string(),
        }
    }

    fn next_line(&mut self) -> Result<String> {
        self.line += 1;
        match self.inner.next() {
            Some(Ok(l)) => Ok(l),
            Some(Err(e)) => Err(Error::io(self.path, e)),
            None => Err(self.err("unexpected end of file")),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<String> {
        let line = self.next_line()?;
        match line.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest.to_string()),
            _ => Err(self.err(&format!("expected '{key} ...'"))),
        }
    }

    fn keyed_parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.keyed(key)?;
        self.parse_field(Some(v.trim()), key)
    }

    fn parse_field<T: std::str::FromStr>(&self, s: Option<&str>, what: &str) -> Result<T> {
        s.and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(&format!("invalid {what}")))
    }
}

fn unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Random orthogonal `d x d` matrix (row-major) by Gram-Schmidt on Gaussian rows.
fn random_rotation(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows.concat()
}

struct ModalityGeometry {
    centers: Vec<Vec<f64>>,
    rotation: Vec<f64>,
}

fn sample_split(
    spec: &GenSpec,
    geometry: &[ModalityGeometry],
    n: usize,
    split: Split,
    rng: &mut impl Rng,
) -> SyntheticDataset {
    let k = spec.num_classes;
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);

    let mut features: Vec<Vec<f64>> = spec
        .modalities
        .iter()
        .map(|m| Vec::with_capacity(n * m.input_dim))
        .collect();
    for &y in &labels {
        for ((m, geo), out) in spec.modalities.iter().zip(geometry).zip(&mut features) {
            let d = m.input_dim;
            let class = if m.label_noise > 0.0 && rng.random::<f64>() < m.label_noise {
                rng.random_range(0..k)
            } else {
                y
            };
            let raw: Vec<f64> = geo.centers[class]
                .iter()
                .map(|c| m.separation * c + m.noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            for r in 0..d {
                let row = &geo.rotation[r * d..(r + 1) * d];
                out.push(row.iter().zip(&raw).map(|(a, b)| a * b).sum());
            }
        }
    }
    let features = features
        .into_iter()
        .zip(&spec.modalities)
        .map(|(data, m)| Tensor::new(vec![n, m.input_dim], data).expect("sampled full rows"))
        .collect();
    SyntheticDataset {
        features,
        labels,
        split,
        spec: spec.clone(),
    }
}

/// Deterministic `(train, test)` pair for `spec`.
pub fn generate(spec: &GenSpec) -> Result<(SyntheticDataset, SyntheticDataset)> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Data);
    let geometry: Vec<ModalityGeometry> = spec
        .modalities
        .iter()
        .map(|m| {
            let centers = (0..spec.num_classes)
                .map(|_| unit_vector(&mut rng, m.input_dim))
                .collect();
            let rotation = random_rotation(&mut rng, m.input_dim);
            ModalityGeometry { centers, rotation }
        })
        .collect();
    let train = sample_split(spec, &geometry, spec.n_train, Split::Train, &mut rng);
    let test = sample_split(spec, &geometry, spec.n_test, Split::Test, &mut rng);
    Ok((train, test))
}
