//! Datasets, non-IID partitioning and IDX ingestion.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Batch;
use crate::rng::{stream_rng, SimRng, Stream};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major features with one class label per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub n_features: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch::new(&self.features, &self.labels, self.n_features)
    }

    /// Copies the selected rows, in the given order.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        (features, labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (features, labels) = self.gather(indices);
        Dataset {
            features,
            labels,
            n_features: self.n_features,
            n_classes: self.n_classes,
        }
    }

    pub fn label_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &i in indices {
            counts[self.labels[i]] += 1;
        }
        counts
    }

    /// Writes `label,x0,x1,...` rows with a header line.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.n_features).map(|j| format!("x{j}")));
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut row = vec![self.labels[i].to_string()];
            row.extend(self.row(i).iter().map(|v| format!("{v:.16e}")));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// Training and held-out test data before partitioning.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseDataset {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Shards {
        #[serde(default = "default_shards")]
        shards_per_client: usize,
    },
    Dirichlet {
        #[serde(default = "default_dirichlet_alpha")]
        alpha: f64,
    },
    Iid,
}

fn default_shards() -> usize {
    2
}

fn default_dirichlet_alpha() -> f64 {
    0.5
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec::Shards {
            shards_per_client: default_shards(),
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PartitionSpec::Shards { shards_per_client: 0 } => Err(
                Error::config("partition.shards_per_client", "must be >= 1"),
            ),
            PartitionSpec::Dirichlet { alpha } if !(alpha > 0.0) || !alpha.is_finite() => Err(
                Error::config("partition.alpha", format!("must be > 0, got {alpha}")),
            ),
            _ => Ok(()),
        }
    }
}

/// How each client's test slice is drawn from the held-out pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientTestMode {
    /// Label mix mirrors the client's training slice.
    #[default]
    Matched,
    /// Every client is scored on the full test set.
    Global,
}

/// A base dataset together with the client partition.
#[derive(Debug, Clone)]
pub struct FederatedDataset {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Vec<Vec<usize>>,
    pub client_test: Vec<Vec<usize>>,
}

impl FederatedDataset {
    pub fn n_clients(&self) -> usize {
        self.partition.len()
    }

    /// Checks disjointness, coverage and non-emptiness of the partition.
    pub fn validate(&self) -> Result<()> {
        check_partition(&self.partition, self.train.len())?;
        for (i, t) in self.client_test.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Data(format!("client {i} has an empty test slice")));
            }
            if let Some(&bad) = t.iter().find(|&&j| j >= self.test.len()) {
                return Err(Error::Data(format!("client {i} test index {bad} out of range")));
            }
        }
        Ok(())
    }
}

pub fn check_partition(partition: &[Vec<usize>], n_samples: usize) -> Result<()> {
    let mut seen = vec![false; n_samples];
    for (client, slice) in partition.iter().enumerate() {
        if slice.is_empty() {
            return Err(Error::Data(format!("client {client} has an empty slice")));
        }
        for &i in slice {
            if i >= n_samples {
                return Err(Error::Data(format!("index {i} out of range on client {client}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Data(format!("index {i} assigned twice")));
            }
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Data(format!("index {missing} not assigned")));
    }
    Ok(())
}

/// Gaussian class clusters with unit covariance.
///
/// Class means have norm `class_separation / sqrt(2)`. When
/// `n_classes <= n_features` they sit on an orthonormal random frame, so every
/// pair of means is exactly `class_separation` apart; otherwise the directions
/// are independent random unit vectors. The training set has
/// `n_clients * samples_per_client` rows and a class-balanced test set of a
/// quarter of that size (20% of the total) is held out.
pub fn generate_synthetic(
    n_clients: usize,
    n_classes: usize,
    n_features: usize,
    samples_per_client: usize,
    class_separation: f64,
    seed: u64,
) -> Result<BaseDataset> {
    for (key, v) in [
        ("n_clients", n_clients),
        ("n_classes", n_classes),
        ("n_features", n_features),
        ("samples_per_client", samples_per_client),
    ] {
        if v == 0 {
            return Err(Error::config(key, "must be >= 1"));
        }
    }
    let mut rng = stream_rng(seed, Stream::Data, 0, 0);
    let means = class_means(n_classes, n_features, class_separation, &mut rng);
    let n_train = n_clients * samples_per_client;
    let n_test = n_train.div_ceil(4);
    let train = sample_clusters(&means, n_features, n_train, &mut rng);
    let test = sample_clusters(&means, n_features, n_test, &mut rng);
    Ok(BaseDataset { train, test })
}

fn class_means(n_classes: usize, n_features: usize, separation: f64, rng: &mut SimRng) -> Vec<Vec<f64>> {
    let radius = separation / std::f64::consts::SQRT_2;
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    while frame.len() < n_classes {
        let mut v: Vec<f64> = (0..n_features).map(|_| StandardNormal.sample(rng)).collect();
        if n_classes <= n_features {
            for u in &frame {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= dot * b;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        frame.push(v.iter().map(|a| a / norm).collect());
    }
    frame
        .into_iter()
        .map(|u| u.into_iter().map(|a| a * radius).collect())
        .collect()
}

fn sample_clusters(means: &[Vec<f64>], n_features: usize, n: usize, rng: &mut SimRng) -> Dataset {
    let n_classes = means.len();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Vec::with_capacity(n * n_features);
    let mut labels = Vec::with_capacity(n);
    for j in 0..n {
        let c = j % n_classes;
        labels.push(c);
        features.extend(means[c].iter().map(|m| m + noise.sample(rng)));
    }
    Dataset {
        features,
        labels,
        n_features,
        n_classes,
    }
}

/// Label-sorted shards dealt to clients at random.
///
/// The sorted index list is cut into `n_clients * shards_per_client` shards of
/// `n / n_shards` samples; the final shard also takes the remainder.
pub fn shard_partition(
    labels: &[usize],
    n_clients: usize,
    shards_per_client: usize,
    rng: &mut SimRng,
) -> Result<Vec<Vec<usize>>> {
    if n_clients == 0 || shards_per_client == 0 {
        return Err(Error::config("partition", "need at least one client and one shard each"));
    }
    let n_shards = n_clients * shards_per_client;
    if labels.len() < n_shards {
        return Err(Error::config(
            "partition.shards_per_client",
            format!("{} samples cannot fill {n_shards} shards", labels.len()),
        ));
    }
    let mut sorted: Vec<usize> = (0..labels.len()).collect();
    sorted.sort_by_key(|&i| (labels[i], i));
    let size = labels.len() / n_shards;
    let shard = |s: usize| {
        let end = if s + 1 == n_shards { sorted.len() } else { (s + 1) * size };
        &sorted[s * size..end]
    };
    let mut order: Vec<usize> = (0..n_shards).collect();
    order.shuffle(rng);
    Ok(order
        .chunks(shards_per_client)
        .map(|shards| {
            let mut slice: Vec<usize> = shards.iter().flat_map(|&s| shard(s).iter().copied()).collect();
            slice.sort_unstable();
            slice
        })
        .collect())
}

/// Per-class Dirichlet split with largest-remainder rounding.
pub fn dirichlet_partition(
    labels: &[usize],
    n_clients: usize,
    alpha: f64,
    rng: &mut SimRng,
) -> Result<Vec<Vec<usize>>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::config("partition.alpha", format!("must be > 0, got {alpha}")));
    }
    if n_clients == 0 || labels.len() < n_clients {
        return Err(Error::config(
            "n_clients",
            format!("{} samples cannot cover {n_clients} clients", labels.len()),
        ));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config("partition.alpha", e.to_string()))?;
    let mut partition = vec![Vec::new(); n_clients];

    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let mut draws: Vec<f64> = (0..n_clients).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            // every draw underflowed: the whole class goes to one client
            draws = vec![0.0; n_clients];
            draws[rng.random_range(0..n_clients)] = 1.0;
        } else {
            for d in draws.iter_mut() {
                *d /= total;
            }
        }
        let counts = largest_remainder(&draws, members.len());
        let mut start = 0;
        for (client, count) in counts.into_iter().enumerate() {
            partition[client].extend_from_slice(&members[start..start + count]);
            start += count;
        }
    }

    for slice in partition.iter_mut() {
        slice.sort_unstable();
    }
    repair_empty(&mut partition);
    Ok(partition)
}

/// Integer counts summing to `total`, proportional to `shares`.
fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Gives each empty client one sample taken from the largest slice.
fn repair_empty(partition: &mut [Vec<usize>]) {
    while let Some(empty) = partition.iter().position(|s| s.is_empty()) {
        let donor = (0..partition.len())
            .max_by(|&a, &b| partition[a].len().cmp(&partition[b].len()).then(b.cmp(&a)))
            .expect("non-empty partition");
        let sample = partition[donor].pop().expect("donor has samples");
        partition[empty].push(sample);
    }
}

pub fn iid_partition(n_samples: usize, n_clients: usize, rng: &mut SimRng) -> Result<Vec<Vec<usize>>> {
    if n_clients == 0 || n_samples < n_clients {
        return Err(Error::config(
            "n_clients",
            format!("{n_samples} samples cannot cover {n_clients} clients"),
        ));
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(rng);
    let mut partition = vec![Vec::new(); n_clients];
    for (k, i) in order.into_iter().enumerate() {
        partition[k % n_clients].push(i);
    }
    for slice in partition.iter_mut() {
        slice.sort_unstable();
    }
    Ok(partition)
}

pub fn partition(
    labels: &[usize],
    n_clients: usize,
    spec: &PartitionSpec,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let mut rng = stream_rng(seed, Stream::Partition, 0, 0);
    match *spec {
        PartitionSpec::Shards { shards_per_client } => {
            shard_partition(labels, n_clients, shards_per_client, &mut rng)
        }
        PartitionSpec::Dirichlet { alpha } => dirichlet_partition(labels, n_clients, alpha, &mut rng),
        PartitionSpec::Iid => iid_partition(labels.len(), n_clients, &mut rng),
    }
}

/// Test slices whose label mix mirrors each client's training slice.
///
/// Client `i` gets about `|slice_i| * |test| / |train|` test samples, split
/// across its labels in proportion to its training counts and drawn without
/// replacement from the matching class pool.
pub fn matched_test_slices(
    train: &Dataset,
    test: &Dataset,
    partition: &[Vec<usize>],
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); train.n_classes.max(test.n_classes)];
    for (i, &l) in test.labels.iter().enumerate() {
        pools[l].push(i);
    }
    let ratio = test.len() as f64 / train.len() as f64;
    partition
        .iter()
        .enumerate()
        .map(|(client, slice)| {
            let mut rng = stream_rng(seed, Stream::ClientTest, client as u64, 0);
            let counts = train.label_counts(slice);
            let target = ((slice.len() as f64 * ratio).round() as usize).max(1);
            let mut chosen = Vec::new();
            for (class, &k) in counts.iter().enumerate() {
                if k == 0 || pools[class].is_empty() {
                    continue;
                }
                let want = ((target as f64 * k as f64 / slice.len() as f64).round() as usize)
                    .clamp(1, pools[class].len());
                let mut pool = pools[class].clone();
                pool.shuffle(&mut rng);
                chosen.extend_from_slice(&pool[..want]);
            }
            if chosen.is_empty() {
                chosen = (0..test.len()).collect();
            }
            chosen.sort_unstable();
            chosen
        })
        .collect()
}

pub fn build_federated(
    base: BaseDataset,
    n_clients: usize,
    spec: &PartitionSpec,
    test_mode: ClientTestMode,
    seed: u64,
) -> Result<FederatedDataset> {
    spec.validate()?;
    if base.test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let partition = partition(&base.train.labels, n_clients, spec, seed)?;
    let client_test = match test_mode {
        ClientTestMode::Matched => matched_test_slices(&base.train, &base.test, &partition, seed),
        ClientTestMode::Global => vec![(0..base.test.len()).collect(); n_clients],
    };
    let fed = FederatedDataset {
        train: base.train,
        test: base.test,
        partition,
        client_test,
    };
    fed.validate()?;
    Ok(fed)
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl IdxReader<'_> {
    fn error(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Ingestion {
            path: self.path.to_path_buf(),
            offset,
            message: message.into(),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.offset + 4;
        let chunk = self
            .bytes
            .get(self.offset..end)
            .ok_or_else(|| self.error(self.offset, format!("truncated while reading {what}")))?;
        let v = u32::from_be_bytes(chunk.try_into().expect("four bytes"));
        self.offset = end;
        Ok(v)
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&[u8]> {
        let end = self.offset + len;
        if end > self.bytes.len() {
            return Err(self.error(
                self.bytes.len(),
                format!("truncated {what}: need {len} bytes from offset {}", self.offset),
            ));
        }
        let slice = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(slice)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let at = self.offset;
        let magic = self.u32("magic")?;
        if magic != expected {
            return Err(self.error(at, format!("bad magic {magic:#010x}, expected {expected:#010x}")));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file. Returns `(n, rows, cols, pixels scaled to [0,1])`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut r = IdxReader { bytes, offset: 0, path };
    r.magic(IDX_IMAGES_MAGIC)?;
    let n = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let pixels = r.take(n * rows * cols, "pixel data")?;
    Ok((n, rows, cols, pixels.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let mut r = IdxReader { bytes, offset: 0, path };
    r.magic(IDX_LABELS_MAGIC)?;
    let n = r.u32("label count")? as usize;
    Ok(r.take(n, "label data")?.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair into a dataset with `rows * cols` features.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, rows, cols, features) = parse_idx_images(&read_file(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(Error::Ingestion {
            path: labels_path.to_path_buf(),
            offset: 4,
            message: format!("label count {} does not match image count {n}", labels.len()),
        });
    }
    let n_classes = labels.iter().max().map_or(1, |m| m + 1);
    Ok(Dataset {
        features,
        labels,
        n_features: rows * cols,
        n_classes,
    })
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len() % (rows * cols).max(1), 0, "pixel count not a multiple of rows*cols");
    let n = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
