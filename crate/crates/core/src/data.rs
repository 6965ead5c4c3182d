//! Datasets, IDX ingestion, synthetic data and label-skew partitioning.

use std::fmt;
use std::io::{self, ErrorKind};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{FlmcError, Result};
use crate::nn::LossKind;
use crate::rng::{self, Purpose};

/// Feature matrix with class labels and, optionally, real-valued targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    targets: Option<Array2<f64>>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let name = name.into();
        if features.nrows() == 0 {
            return Err(FlmcError::domain(format!(
                "dataset `{name}` has no samples"
            )));
        }
        if features.nrows() != labels.len() {
            return Err(FlmcError::Consistency(format!(
                "dataset `{name}` has {} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(FlmcError::domain("num_classes must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(FlmcError::domain(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(FlmcError::domain(format!(
                "dataset `{name}` has non-finite features"
            )));
        }
        Ok(Dataset {
            name,
            features,
            labels,
            num_classes,
            targets: None,
        })
    }

    /// Regression data: one row of real targets per sample. Labels are all 0.
    pub fn regression(
        name: impl Into<String>,
        features: Array2<f64>,
        targets: Array2<f64>,
    ) -> Result<Self> {
        let n = features.nrows();
        if targets.nrows() != n {
            return Err(FlmcError::Consistency(format!(
                "{} feature rows but {} target rows",
                n,
                targets.nrows()
            )));
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(FlmcError::domain("non-finite regression target"));
        }
        let mut data = Dataset::new(name, features, vec![0; n], 1)?;
        data.targets = Some(targets);
        Ok(data)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn targets(&self) -> Option<&Array2<f64>> {
        self.targets.as_ref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// MSE target for output `c`: the stored target, or the one-hot label.
    #[inline]
    pub fn target(&self, row: usize, c: usize) -> f64 {
        match &self.targets {
            Some(t) => t[[row, c]],
            None => {
                if self.labels[row] == c {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub(crate) fn check_outputs(&self, output_dim: usize, kind: LossKind) -> Result<()> {
        match (&self.targets, kind) {
            (Some(t), LossKind::Mse) if t.ncols() != output_dim => Err(FlmcError::shape(format!(
                "dataset `{}` has {} targets per sample, network has {} outputs",
                self.name,
                t.ncols(),
                output_dim
            ))),
            (Some(_), LossKind::Mse) => Ok(()),
            _ if self.num_classes > output_dim => Err(FlmcError::shape(format!(
                "dataset `{}` has {} classes, network has {} outputs",
                self.name, self.num_classes, output_dim
            ))),
            _ => Ok(()),
        }
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Copy of the selected rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(FlmcError::domain("subset needs at least one index"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(FlmcError::domain(format!(
                "index {bad} out of range for dataset `{}` of size {}",
                self.name,
                self.len()
            )));
        }
        Ok(Dataset {
            name: self.name.clone(),
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            targets: self.targets.as_ref().map(|t| t.select(Axis(0), indices)),
        })
    }
}

/// Free-function form of [`Dataset::subset`].
pub fn subset(data: &Dataset, indices: &[usize]) -> Result<Dataset> {
    data.subset(indices)
}

/// Label-skew level of a partition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Heterogeneity {
    /// Class proportions over clients drawn from `Dir(alpha)`.
    Dirichlet(f64),
    /// Uniform shuffle into near-equal shards.
    Iid,
}

impl Heterogeneity {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Heterogeneity::Dirichlet(a) if !(a > 0.0 && a.is_finite()) => Err(FlmcError::domain(
                format!("Dirichlet alpha must be positive and finite, got {a}"),
            )),
            _ => Ok(()),
        }
    }

    /// File-name friendly label such as `0.1` or `iid`.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Heterogeneity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Heterogeneity::Dirichlet(a) => write!(f, "{a}"),
            Heterogeneity::Iid => write!(f, "iid"),
        }
    }
}

impl Serialize for Heterogeneity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Heterogeneity::Dirichlet(a) => s.serialize_f64(*a),
            Heterogeneity::Iid => s.serialize_str("iid"),
        }
    }
}

impl<'de> Deserialize<'de> for Heterogeneity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(a) => Ok(Heterogeneity::Dirichlet(a)),
            Raw::Text(t) if t.eq_ignore_ascii_case("iid") => Ok(Heterogeneity::Iid),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a positive number or \"iid\", got \"{t}\""
            ))),
        }
    }
}

/// Client index sets over a dataset. Each client's indices are ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
    pub heterogeneity: Heterogeneity,
    pub seed: u64,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.client_indices.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.client_indices.iter().map(Vec::len).sum()
    }

    /// Aggregation weights `n_k / n`.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.total() as f64;
        self.client_indices
            .iter()
            .map(|c| c.len() as f64 / n)
            .collect()
    }

    /// Checks disjointness, coverage of `0..n` and non-empty clients.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (k, client) in self.client_indices.iter().enumerate() {
            if client.is_empty() {
                return Err(FlmcError::Consistency(format!("client {k} is empty")));
            }
            for &i in client {
                if i >= n {
                    return Err(FlmcError::Consistency(format!(
                        "client {k} holds index {i} >= {n}"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(FlmcError::Consistency(format!("index {i} assigned twice")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(FlmcError::Consistency(format!(
                "index {missing} not assigned"
            )));
        }
        Ok(())
    }

    /// Per-client class counts, `counts[k][c]`.
    pub fn class_counts(&self, labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
        self.client_indices
            .iter()
            .map(|client| {
                let mut counts = vec![0; num_classes];
                for &i in client {
                    counts[labels[i]] += 1;
                }
                counts
            })
            .collect()
    }

    /// Splits another sample set (typically the test split) with the same
    /// per-class client proportions as this partition. Clients that hold no
    /// training samples of a class receive no test samples of it, so a
    /// projected shard may be empty.
    pub fn project(
        &self,
        train_labels: &[usize],
        other_labels: &[usize],
        num_classes: usize,
    ) -> Vec<Vec<usize>> {
        let k = self.num_clients();
        let counts = self.class_counts(train_labels, num_classes);
        let mut rng = rng::stream(self.seed, Purpose::TestProjection, 0, 0);
        let mut shards = vec![Vec::new(); k];
        for (c, mut members) in indices_by_class(other_labels, num_classes)
            .into_iter()
            .enumerate()
        {
            let total: usize = counts.iter().map(|row| row[c]).sum();
            if total == 0 || members.is_empty() {
                continue;
            }
            members.shuffle(&mut rng);
            let props: Vec<f64> = counts
                .iter()
                .map(|row| row[c] as f64 / total as f64)
                .collect();
            let alloc = largest_remainder(&props, members.len());
            let mut start = 0;
            for (shard, take) in shards.iter_mut().zip(alloc) {
                shard.extend_from_slice(&members[start..start + take]);
                start += take;
            }
        }
        for shard in &mut shards {
            shard.sort_unstable();
        }
        shards
    }
}

fn indices_by_class(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

/// Integer allocation of `total` items proportional to `props`: floors first,
/// then one extra item to the largest fractional parts (lower index on ties).
pub fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut alloc: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle().take(total.saturating_sub(assigned)) {
        alloc[k] += 1;
    }
    alloc
}

fn dirichlet_draw<R: rand::Rng>(alpha: f64, k: usize, rng: &mut R) -> Option<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).ok()?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    (sum > 0.0 && sum.is_finite()).then(|| draws.iter().map(|g| g / sum).collect())
}

const MAX_PARTITION_ATTEMPTS: usize = 100;

/// Class-wise Dirichlet split of `labels` into `clients` shards.
///
/// For each class the proportions over clients are drawn from
/// `Dir(alpha * 1_K)` and the class's shuffled samples are dealt out by
/// largest-remainder rounding. Draws that leave a client empty are retried
/// with a fresh stream, at most 100 times.
pub fn dirichlet_partition(
    labels: &[usize],
    num_classes: usize,
    clients: usize,
    heterogeneity: Heterogeneity,
    seed: u64,
) -> Result<Partition> {
    let n = labels.len();
    if clients == 0 {
        return Err(FlmcError::domain("number of clients must be positive"));
    }
    if clients > n {
        return Err(FlmcError::domain(format!(
            "{clients} clients but only {n} samples"
        )));
    }
    heterogeneity.validate()?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(FlmcError::domain(format!(
            "label {bad} outside [0, {num_classes})"
        )));
    }
    let by_class = indices_by_class(labels, num_classes);

    for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut rng = rng::stream(seed, Purpose::Partition, attempt as u64, 0);
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
        match heterogeneity {
            Heterogeneity::Iid => {
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(&mut rng);
                let (base, extra) = (n / clients, n % clients);
                let mut start = 0;
                for (k, shard) in shards.iter_mut().enumerate() {
                    let take = base + usize::from(k < extra);
                    shard.extend_from_slice(&all[start..start + take]);
                    start += take;
                }
            }
            Heterogeneity::Dirichlet(alpha) => {
                let mut failed = false;
                for members in &by_class {
                    if members.is_empty() {
                        continue;
                    }
                    let Some(props) = dirichlet_draw(alpha, clients, &mut rng) else {
                        failed = true;
                        break;
                    };
                    let mut members = members.clone();
                    members.shuffle(&mut rng);
                    let alloc = largest_remainder(&props, members.len());
                    let mut start = 0;
                    for (shard, take) in shards.iter_mut().zip(alloc) {
                        shard.extend_from_slice(&members[start..start + take]);
                        start += take;
                    }
                }
                if failed {
                    continue;
                }
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            for shard in &mut shards {
                shard.sort_unstable();
            }
            return Ok(Partition {
                client_indices: shards,
                heterogeneity,
                seed,
            });
        }
        log::debug!("partition attempt {attempt} left a client empty; redrawing");
    }
    Err(FlmcError::PartitionInfeasible {
        attempts: MAX_PARTITION_ATTEMPTS,
    })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            FlmcError::Io(io::Error::new(
                ErrorKind::UnexpectedEof,
                format!("{what}: header truncated at byte {offset}"),
            ))
        })
}

fn idx_payload<'a>(bytes: &'a [u8], start: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    bytes.get(start..start + len).ok_or_else(|| {
        FlmcError::Io(io::Error::new(
            ErrorKind::UnexpectedEof,
            format!(
                "{what}: expected {len} payload bytes after offset {start}, file has {}",
                bytes.len()
            ),
        ))
    })
}

fn check_magic(found: u32, expected: u32, what: &str) -> Result<()> {
    if found != expected {
        return Err(FlmcError::Format {
            offset: 0,
            message: format!("{what}: expected magic 0x{expected:08x}, found 0x{found:08x}"),
        });
    }
    Ok(())
}

/// Parses an IDX image/label pair (big-endian headers, `u8` payload).
/// Pixels are scaled by `1/255` and flattened row-major.
pub fn parse_idx(images: &[u8], labels: &[u8], name: &str) -> Result<Dataset> {
    check_magic(
        read_be_u32(images, 0, "images")?,
        IDX_IMAGES_MAGIC,
        "images",
    )?;
    let count = read_be_u32(images, 4, "images")? as usize;
    let rows = read_be_u32(images, 8, "images")? as usize;
    let cols = read_be_u32(images, 12, "images")? as usize;

    check_magic(
        read_be_u32(labels, 0, "labels")?,
        IDX_LABELS_MAGIC,
        "labels",
    )?;
    let label_count = read_be_u32(labels, 4, "labels")? as usize;
    if label_count != count {
        return Err(FlmcError::Consistency(format!(
            "{count} images but {label_count} labels"
        )));
    }

    let d = rows * cols;
    let pixels = idx_payload(images, 16, count * d, "images")?;
    let raw_labels = idx_payload(labels, 8, count, "labels")?;
    let features = Array2::from_shape_fn((count, d), |(i, j)| pixels[i * d + j] as f64 / 255.0);
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(name, features, labels, num_classes)
}

/// Reads an IDX image file and its label file.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    let name = images_path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    parse_idx(&images, &labels, &name)
}

/// Gaussian class clusters. Class means are uniform on the unit sphere in
/// `d` dimensions; each sample is `mean + spread * z`, `z ~ N(0, I)`.
/// Samples are laid out class by class.
pub fn synth_gaussian(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return Err(FlmcError::domain(
            "synthetic data needs positive classes, samples and dimension",
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(FlmcError::domain(format!(
            "spread must be non-negative, got {spread}"
        )));
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = rng::stream(seed, Purpose::Synthetic, 0, 0);
    let mut means = Array2::<f64>::zeros((num_classes, dim));
    for mut mean in means.rows_mut() {
        loop {
            mean.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            let norm = mean.dot(&mean).sqrt();
            if norm > 0.0 {
                mean /= norm;
                break;
            }
        }
    }
    let n = num_classes * per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        let c = i / per_class;
        for (v, &m) in row.iter_mut().zip(means.row(c)) {
            *v = m + spread * normal.sample(&mut rng);
        }
        labels.push(c);
    }
    Dataset::new("synthetic", features, labels, num_classes)
}
