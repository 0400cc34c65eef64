//! Dataset generation, non-IID partitioning, and feature file ingestion.
//!
//! The synthetic generator produces isotropic unit-variance Gaussian blobs
//! whose class means sit at `separation * u_k` for orthonormal-ish seed-
//! derived directions `u_k`. Two partitioners carve a pool into per-client
//! datasets: alpha mode mixes a gamma fraction of IID draws with a dominant
//! class, shard mode deals one shard of each of `N` classes per client.
//! Precomputed feature files can be ingested instead of synthetic data.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::model::Sample;
use crate::rng::{Purpose, RngStream};

const MAGIC: [u8; 4] = *b"P4FT";
const FORMAT_VERSION: u32 = 1;
/// Test fraction of the per-client train/test split.
const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient pool: need {needed} {what}, have {available}")]
    InsufficientPool {
        what: String,
        needed: usize,
        available: usize,
    },
    #[error("shard divisibility violated: {0}")]
    Divisibility(String),
    #[error("bad magic: expected \"P4FT\"")]
    MagicMismatch,
    #[error("unsupported feature file version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated feature file: expected {expected} bytes after header, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("label {label} out of range for {num_classes} classes at row {row}")]
    LabelOutOfRange {
        row: usize,
        label: u16,
        num_classes: u32,
    },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

/// A pooled dataset before partitioning.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_classes: usize,
    dim: usize,
    /// Row-major `[n x dim]`.
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        num_classes: usize,
        dim: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self, DataError> {
        if dim == 0 || num_classes < 2 {
            return Err(DataError::InvalidArgument(
                "need dim >= 1 and num_classes >= 2".into(),
            ));
        }
        if features.len() != labels.len() * dim {
            return Err(DataError::InvalidArgument(format!(
                "feature buffer has {} values for {} rows of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            num_classes,
            dim,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Row indices holding each class, in row order.
    pub fn rows_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }
}

/// One client's data with its train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    data: Dataset,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
}

impl ClientDataset {
    /// Wraps a dataset with a deterministic stratified 80/20 split.
    pub fn with_split(data: Dataset, seed: u64, client_id: u64) -> Self {
        let (train_idx, test_idx) = stratified_split(&data, seed, client_id);
        ClientDataset {
            data,
            train_idx,
            test_idx,
        }
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.data.num_classes
    }

    pub fn dim(&self) -> usize {
        self.data.dim
    }

    pub fn train_idx(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn test_idx(&self) -> &[usize] {
        &self.test_idx
    }

    /// Materializes sample views for the given row indices.
    pub fn samples(&self, indices: &[usize]) -> Vec<Sample<'_>> {
        indices
            .iter()
            .map(|&i| Sample {
                x: self.data.row(i),
                y: self.data.label(i),
            })
            .collect()
    }

    /// Flips every label `y` to `num_classes - 1 - y`, leaving features and
    /// the split untouched.
    pub fn flip_labels(&mut self) {
        let c = self.data.num_classes;
        for y in self.data.labels.iter_mut() {
            *y = c - 1 - *y;
        }
    }
}

/// Round half to even, matching IEEE "banker's rounding".
pub fn round_ties_even(x: f64) -> f64 {
    let floor = x.floor();
    let frac = x - floor;
    if (frac - 0.5).abs() < 1e-12 {
        if (floor as i64) % 2 == 0 {
            floor
        } else {
            floor + 1.0
        }
    } else {
        x.round()
    }
}

fn stratified_split(data: &Dataset, seed: u64, client_id: u64) -> (Vec<usize>, Vec<usize>) {
    let n = data.len();
    let target_test = round_ties_even(TEST_FRACTION * n as f64) as usize;

    // Per-class quotas by largest remainder so the total is exact.
    let by_class = data.rows_by_class();
    let mut quotas: Vec<usize> = Vec::with_capacity(by_class.len());
    let mut remainders: Vec<(f64, usize)> = Vec::new();
    let mut assigned = 0usize;
    for (class, rows) in by_class.iter().enumerate() {
        let exact = TEST_FRACTION * rows.len() as f64;
        let base = (exact.floor() as usize).min(rows.len());
        quotas.push(base);
        assigned += base;
        remainders.push((exact - base as f64, class));
    }
    // Largest remainder first, ties to the lower class index.
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut leftover = target_test.saturating_sub(assigned);
    for &(_, class) in &remainders {
        if leftover == 0 {
            break;
        }
        if quotas[class] < by_class[class].len() {
            quotas[class] += 1;
            leftover -= 1;
        }
    }

    let mut train = Vec::with_capacity(n);
    let mut test = Vec::with_capacity(target_test);
    for (class, rows) in by_class.iter().enumerate() {
        let mut rows = rows.clone();
        let mut rng = RngStream::new(seed, Purpose::SplitShuffle, client_id, class as u64, 0);
        rng.shuffle(&mut rows);
        let q = quotas[class];
        test.extend_from_slice(&rows[..q]);
        train.extend_from_slice(&rows[q..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Synthetic Gaussian blobs: class `k` is `N(separation * u_k, I)` with
/// seed-derived orthonormal-ish directions `u_k`. Rows are class-major and
/// bitwise deterministic given the seed.
pub fn gen_synthetic(
    num_classes: usize,
    dim: usize,
    separation: f64,
    n_per_class: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    if num_classes < 2 {
        return Err(DataError::InvalidArgument(format!(
            "num_classes must be >= 2, got {num_classes}"
        )));
    }
    if dim == 0 {
        return Err(DataError::InvalidArgument("dim must be >= 1".into()));
    }
    if !(separation >= 0.0) {
        return Err(DataError::InvalidArgument(format!(
            "separation must be non-negative, got {separation}"
        )));
    }

    // Gram-Schmidt over seeded Gaussian rows; once the dimension is
    // exhausted the remaining directions are merely normalized.
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    let mut dir_rng = RngStream::new(seed, Purpose::SyntheticDirections, 0, 0, 0);
    for k in 0..num_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| dir_rng.next_gaussian()).collect();
        if k < dim {
            for prev in &dirs[..k.min(dirs.len())] {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (vi, pi) in v.iter_mut().zip(prev) {
                    *vi -= dot * pi;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        dirs.push(v);
    }

    let n = num_classes * n_per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (k, dir) in dirs.iter().enumerate() {
        let mut rng = RngStream::new(seed, Purpose::SyntheticNoise, k as u64, 0, 0);
        for _ in 0..n_per_class {
            for d in dir.iter().take(dim) {
                features.push(separation * d + rng.next_gaussian());
            }
            labels.push(k);
        }
    }
    Dataset::new(num_classes, dim, features, labels)
}

/// Which partitioner to use and its knobs.
#[derive(Debug, Clone, PartialEq)]
pub enum PartitionMode {
    /// `gamma` fraction IID, remainder from one dominant class.
    Alpha { gamma: f64 },
    /// `n` classes per client, `p` shards per class, `l` classes total.
    Shard { n: usize, p: usize, l: usize },
}

/// Full partitioning request: mode plus client count and samples per client.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    /// Number of clients `M`.
    pub clients: usize,
    /// Samples per client `R`.
    pub samples_per_client: usize,
}

impl PartitionSpec {
    pub fn alpha(gamma: f64, clients: usize, samples_per_client: usize) -> Self {
        PartitionSpec {
            mode: PartitionMode::Alpha { gamma },
            clients,
            samples_per_client,
        }
    }

    pub fn shard(n: usize, p: usize, l: usize, samples_per_client: usize) -> Self {
        PartitionSpec {
            mode: PartitionMode::Shard { n, p, l },
            clients: if n > 0 { l * p / n } else { 0 },
            samples_per_client,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.clients == 0 || self.samples_per_client == 0 {
            return Err(DataError::InvalidArgument(
                "need at least one client and one sample per client".into(),
            ));
        }
        match self.mode {
            PartitionMode::Alpha { gamma } => {
                if !(0.0..=1.0).contains(&gamma) {
                    return Err(DataError::InvalidArgument(format!(
                        "gamma {gamma} outside [0,1]"
                    )));
                }
            }
            PartitionMode::Shard { n, p, l } => {
                if n == 0 || p == 0 || l == 0 {
                    return Err(DataError::InvalidArgument(
                        "shard parameters must be positive".into(),
                    ));
                }
                if (l * p) % n != 0 {
                    return Err(DataError::Divisibility(format!(
                        "L*P = {} not divisible by N = {n}",
                        l * p
                    )));
                }
                if self.clients != l * p / n {
                    return Err(DataError::Divisibility(format!(
                        "M = {} but L*P/N = {}",
                        self.clients,
                        l * p / n
                    )));
                }
                if self.samples_per_client % n != 0 {
                    return Err(DataError::Divisibility(format!(
                        "R = {} not divisible by N = {n} (one shard per class)",
                        self.samples_per_client
                    )));
                }
            }
        }
        Ok(())
    }
}

fn extract_client(pool: &Dataset, rows: &[usize]) -> Dataset {
    let mut features = Vec::with_capacity(rows.len() * pool.dim);
    let mut labels = Vec::with_capacity(rows.len());
    for &r in rows {
        features.extend_from_slice(pool.row(r));
        labels.push(pool.label(r));
    }
    Dataset {
        num_classes: pool.num_classes,
        dim: pool.dim,
        features,
        labels,
    }
}

/// Alpha-based heterogeneity: each client draws `round(gamma*R)` rows IID
/// from the whole pool and the remainder from its dominant class, assigned
/// round-robin (`client mod num_classes`). Draws are without replacement
/// within a client; the pool is reused across clients.
pub fn partition_alpha(
    pool: &Dataset,
    spec: &PartitionSpec,
    seed: u64,
) -> Result<Vec<ClientDataset>, DataError> {
    spec.validate()?;
    let gamma = match spec.mode {
        PartitionMode::Alpha { gamma } => gamma,
        _ => {
            return Err(DataError::InvalidArgument(
                "partition_alpha called with a shard spec".into(),
            ))
        }
    };
    let r = spec.samples_per_client;
    let n_iid = round_ties_even(gamma * r as f64) as usize;
    let n_dom = r - n_iid;

    if pool.len() < r {
        return Err(DataError::InsufficientPool {
            what: "pool rows for one client".into(),
            needed: r,
            available: pool.len(),
        });
    }
    let by_class = pool.rows_by_class();

    let mut clients = Vec::with_capacity(spec.clients);
    for client in 0..spec.clients {
        let dominant = client % pool.num_classes;

        let mut iid_rng = RngStream::new(seed, Purpose::PartitionIid, client as u64, 0, 0);
        let mut rows: Vec<usize> = iid_rng
            .sample_indices(pool.len(), n_iid)
            .into_iter()
            .collect();

        if n_dom > 0 {
            let taken: std::collections::HashSet<usize> = rows.iter().cloned().collect();
            let candidates: Vec<usize> = by_class[dominant]
                .iter()
                .cloned()
                .filter(|row| !taken.contains(row))
                .collect();
            if candidates.len() < n_dom {
                return Err(DataError::InsufficientPool {
                    what: format!("class-{dominant} rows for client {client}"),
                    needed: n_dom,
                    available: candidates.len(),
                });
            }
            let mut dom_rng =
                RngStream::new(seed, Purpose::PartitionDominant, client as u64, 0, 0);
            rows.extend(
                dom_rng
                    .sample_indices(candidates.len(), n_dom)
                    .into_iter()
                    .map(|i| candidates[i]),
            );
        }

        let data = extract_client(pool, &rows);
        clients.push(ClientDataset::with_split(data, seed, client as u64));
    }
    Ok(clients)
}

/// Shard-based heterogeneity: the first `L` pool classes are each split into
/// `P` shards of `R/N` rows; every client receives one shard from each of
/// `N` distinct classes and every shard goes to exactly one client.
pub fn partition_shard(
    pool: &Dataset,
    spec: &PartitionSpec,
    seed: u64,
) -> Result<Vec<ClientDataset>, DataError> {
    spec.validate()?;
    let (n, p, l) = match spec.mode {
        PartitionMode::Shard { n, p, l } => (n, p, l),
        _ => {
            return Err(DataError::InvalidArgument(
                "partition_shard called with an alpha spec".into(),
            ))
        }
    };
    if l > pool.num_classes {
        return Err(DataError::InvalidArgument(format!(
            "spec uses {l} classes but pool has {}",
            pool.num_classes
        )));
    }
    let shard_size = spec.samples_per_client / n;
    let by_class = pool.rows_by_class();

    // Seeded shuffle of each class's rows, then cut into P shards.
    let mut shards: Vec<Vec<Vec<usize>>> = Vec::with_capacity(l);
    for (class, rows) in by_class.iter().enumerate().take(l) {
        let needed = p * shard_size;
        if rows.len() < needed {
            return Err(DataError::InsufficientPool {
                what: format!("class-{class} rows for {p} shards of {shard_size}"),
                needed,
                available: rows.len(),
            });
        }
        let mut rows = rows.clone();
        let mut rng = RngStream::new(seed, Purpose::PartitionShard, class as u64, 0, 0);
        rng.shuffle(&mut rows);
        shards.push(
            (0..p)
                .map(|s| rows[s * shard_size..(s + 1) * shard_size].to_vec())
                .collect(),
        );
    }

    // Deal N distinct classes per client, always drawing from the classes
    // with the most shards left (ties broken by the stream); this never
    // strands a duplicate because at most N classes can be at the maximum.
    let mut remaining: Vec<usize> = vec![p; l];
    let mut next_shard: Vec<usize> = vec![0; l];
    let mut choice_rng = RngStream::new(seed, Purpose::PartitionShard, u64::MAX, 0, 0);
    let mut clients = Vec::with_capacity(spec.clients);
    for client in 0..spec.clients {
        let mut chosen: Vec<usize> = Vec::with_capacity(n);
        for _ in 0..n {
            let max_remaining = remaining
                .iter()
                .enumerate()
                .filter(|(c, _)| !chosen.contains(c))
                .map(|(_, &r)| r)
                .max()
                .unwrap_or(0);
            if max_remaining == 0 {
                return Err(DataError::Divisibility(format!(
                    "ran out of shards while serving client {client}"
                )));
            }
            let candidates: Vec<usize> = (0..l)
                .filter(|c| !chosen.contains(c) && remaining[*c] == max_remaining)
                .collect();
            let pick = candidates[choice_rng.next_usize(candidates.len())];
            chosen.push(pick);
        }
        chosen.sort_unstable();

        let mut rows = Vec::with_capacity(spec.samples_per_client);
        for &class in &chosen {
            let shard = &shards[class][next_shard[class]];
            next_shard[class] += 1;
            remaining[class] -= 1;
            rows.extend_from_slice(shard);
        }
        let data = extract_client(pool, &rows);
        clients.push(ClientDataset::with_split(data, seed, client as u64));
    }
    Ok(clients)
}

fn io_err(path: &Path, e: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Reads a `P4FT` feature file (see `write_feature_file` for the layout).
pub fn load_feature_file(path: &Path) -> Result<Dataset, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(DataError::MagicMismatch);
    }
    if bytes.len() < 20 {
        return Err(DataError::Truncated {
            expected: 16,
            found: bytes.len().saturating_sub(4),
        });
    }
    let read_u32 = |offset: usize| -> u32 {
        u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
    };
    let version = read_u32(4);
    if version != FORMAT_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let n = read_u32(8) as usize;
    let d = read_u32(12) as usize;
    let num_classes = read_u32(16);

    let body_len = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_mul(4))
        .and_then(|f| f.checked_add(n * 2))
        .ok_or(DataError::Truncated {
            expected: usize::MAX,
            found: bytes.len() - 20,
        })?;
    if bytes.len() - 20 != body_len {
        return Err(DataError::Truncated {
            expected: body_len,
            found: bytes.len() - 20,
        });
    }

    let mut features = Vec::with_capacity(n * d);
    let mut offset = 20;
    for _ in 0..n * d {
        features.push(f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as f64);
        offset += 4;
    }
    let mut labels = Vec::with_capacity(n);
    for row in 0..n {
        let label = u16::from_le_bytes(bytes[offset..offset + 2].try_into().unwrap());
        offset += 2;
        if u32::from(label) >= num_classes {
            return Err(DataError::LabelOutOfRange {
                row,
                label,
                num_classes,
            });
        }
        labels.push(label as usize);
    }
    Dataset::new(num_classes as usize, d, features, labels)
}

/// Writes the companion binary format, little-endian throughout:
/// magic `P4FT`, `u32` version, `u32` n, `u32` d, `u32` num_classes,
/// `n*d` `f32` features row-major, then `n` `u16` labels.
pub fn write_feature_file(path: &Path, data: &Dataset) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(20 + data.len() * (data.dim * 4 + 2));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.extend_from_slice(&(data.dim as u32).to_le_bytes());
    out.extend_from_slice(&(data.num_classes as u32).to_le_bytes());
    for v in &data.features {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for &y in &data.labels {
        out.extend_from_slice(&(y as u16).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&out).map_err(|e| io_err(path, e))
}
