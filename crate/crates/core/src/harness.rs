//! Experiment configuration, orchestration across seeds, and results output.
//!
//! A TOML config with a strict schema drives the whole pipeline: build or
//! load a pool, partition it, mark malicious clients, run phase 1 (warm-up
//! and grouping) and phase 2 (co-training with optional defense), and reduce
//! per-round benign metrics into one `RunResult` per seed. Attacked runs
//! also execute a clean companion (for attack impact) and an ideal-defense
//! companion (for the ideal delta). Everything except wall-clock timings is
//! bitwise deterministic per seed, so timings are emitted to a separate
//! file.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cotrain::{
    fedavg_baseline, local_baseline, run_cotraining, ClientState, CotrainConfig, CotrainError,
    GroupState, RoundReport,
};
use crate::data::{
    gen_synthetic, load_feature_file, partition_alpha, partition_shard, ClientDataset, DataError,
    Dataset, PartitionSpec,
};
use crate::grouping::{
    merge_groups, mutual_pairing, sample_and_score, separation_report, warmup_one_epoch,
    GroupAssignment, GroupingError, SeparationReport,
};
use crate::model::{LinearModel, LossWeights, WeightVector};
use crate::privacy::{calibrate_sigma, PrivacyError, PrivacyParams};
use crate::rng::{Purpose, RngStream, WARMUP_ROUND};
use crate::robustness::{
    attack_label_flip, byz_flip_model, AttackActivation, AttackConfig, AttackKind, DefenseConfig,
    DefenseKind,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Grouping(#[from] GroupingError),
    #[error(transparent)]
    Cotrain(#[from] CotrainError),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("serialization error: {0}")]
    Serialize(String),
}

impl HarnessError {
    /// CLI exit code: 2 for config problems, 3 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 3,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionModeKind {
    Alpha,
    Shard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub mode: PartitionModeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clients: Option<usize>,
    pub samples_per_client: usize,
}

/// `delta = "auto"` resolves to `1/R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeltaSpec {
    Auto(String),
    Value(f64),
}

impl Default for DeltaSpec {
    fn default() -> Self {
        DeltaSpec::Auto("auto".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub epsilon: f64,
    #[serde(default)]
    pub delta: DeltaSpec,
    pub clip_c: f64,
    pub s: f64,
    pub l: f64,
    pub k: u64,
    #[serde(default = "default_calib_const")]
    pub calib_const: f64,
    #[serde(default = "default_m_prime")]
    pub m_prime: u64,
}

fn default_calib_const() -> f64 {
    1.0
}

fn default_m_prime() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            beta: 0.5,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Target group size V.
    pub v: usize,
    /// Peers each client scores in phase 1; default `min(35, M-1)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    /// Co-training rounds T.
    pub rounds: u64,
    #[serde(default = "default_aggregator_period")]
    pub aggregator_period: u64,
    /// Base step size; the local rate is `eta0 / (s * K)`.
    #[serde(default = "default_eta0")]
    pub eta0: f64,
    #[serde(default = "default_eta_g")]
    pub eta_g: f64,
}

fn default_aggregator_period() -> u64 {
    5
}

fn default_eta0() -> f64 {
    1.0
}

fn default_eta_g() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    P4,
    Fedavg,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_baseline")]
    pub baseline: Baseline,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

fn default_baseline() -> Baseline {
    Baseline::P4
}

/// Quantities computed during resolution and echoed into the emitted config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivedParams {
    pub delta: f64,
    pub sigma_g: f64,
    pub eta_l: f64,
    pub h: usize,
    pub clients: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub privacy: PrivacyConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub defense: DefenseConfig,
    pub run: RunConfig,
    /// Present after resolution; accepted on input and recomputed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived: Option<DerivedParams>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, HarnessError> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::Serialize(e.to_string()))
    }

    /// Total number of clients M implied by the partition section.
    pub fn clients(&self) -> Result<usize, HarnessError> {
        match self.partition.mode {
            PartitionModeKind::Alpha => self
                .partition
                .clients
                .ok_or_else(|| cfg_err("partition.clients is required in alpha mode")),
            PartitionModeKind::Shard => {
                let n = self
                    .partition
                    .n
                    .ok_or_else(|| cfg_err("partition.n is required in shard mode"))?;
                let p = self
                    .partition
                    .p
                    .ok_or_else(|| cfg_err("partition.p is required in shard mode"))?;
                let l = self
                    .partition
                    .l
                    .ok_or_else(|| cfg_err("partition.l is required in shard mode"))?;
                if n == 0 || (l * p) % n != 0 {
                    return Err(cfg_err(format!(
                        "partition: L*P = {} must be divisible by N = {n}",
                        l * p
                    )));
                }
                let m = l * p / n;
                if let Some(c) = self.partition.clients {
                    if c != m {
                        return Err(cfg_err(format!(
                            "partition.clients = {c} but L*P/N = {m}"
                        )));
                    }
                }
                Ok(m)
            }
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        match self.dataset.kind {
            DatasetKind::Synthetic => {
                for (key, missing) in [
                    ("dataset.num_classes", self.dataset.num_classes.is_none()),
                    ("dataset.dim", self.dataset.dim.is_none()),
                    ("dataset.separation", self.dataset.separation.is_none()),
                    ("dataset.n_per_class", self.dataset.n_per_class.is_none()),
                ] {
                    if missing {
                        return Err(cfg_err(format!("{key} is required for synthetic data")));
                    }
                }
                if self.dataset.path.is_some() {
                    return Err(cfg_err("dataset.path is not valid for synthetic data"));
                }
            }
            DatasetKind::File => {
                if self.dataset.path.is_none() {
                    return Err(cfg_err("dataset.path is required for file data"));
                }
            }
        }

        match self.partition.mode {
            PartitionModeKind::Alpha => {
                let gamma = self
                    .partition
                    .gamma
                    .ok_or_else(|| cfg_err("partition.gamma is required in alpha mode"))?;
                if !(0.0..=1.0).contains(&gamma) {
                    return Err(cfg_err(format!("partition.gamma = {gamma} outside [0,1]")));
                }
            }
            PartitionModeKind::Shard => {
                if self.partition.gamma.is_some() {
                    return Err(cfg_err("partition.gamma is not valid in shard mode"));
                }
            }
        }
        let m = self.clients()?;
        if self.partition.samples_per_client == 0 {
            return Err(cfg_err("partition.samples_per_client must be positive"));
        }

        if !(self.privacy.epsilon > 0.0) {
            return Err(cfg_err(format!(
                "privacy.epsilon = {} must be positive",
                self.privacy.epsilon
            )));
        }
        match &self.privacy.delta {
            DeltaSpec::Auto(s) if s == "auto" => {}
            DeltaSpec::Auto(s) => {
                return Err(cfg_err(format!(
                    "privacy.delta = {s:?} (expected \"auto\" or a number in (0,1))"
                )))
            }
            DeltaSpec::Value(d) => {
                if !(*d > 0.0 && *d < 1.0) {
                    return Err(cfg_err(format!("privacy.delta = {d} outside (0,1)")));
                }
            }
        }
        for (key, v) in [
            ("privacy.clip_c", self.privacy.clip_c),
            ("privacy.s", self.privacy.s),
            ("privacy.l", self.privacy.l),
            ("privacy.calib_const", self.privacy.calib_const),
        ] {
            if !(v > 0.0) {
                return Err(cfg_err(format!("{key} = {v} must be positive")));
            }
        }
        if self.privacy.s > 1.0 || self.privacy.l > 1.0 {
            return Err(cfg_err("privacy.s and privacy.l must lie in (0, 1]"));
        }
        if self.privacy.k == 0 {
            return Err(cfg_err("privacy.k must be at least 1"));
        }

        for (key, v, lo, hi) in [
            ("loss.alpha", self.loss.alpha, 0.0, 1.0),
            ("loss.beta", self.loss.beta, 0.0, 1.0),
        ] {
            if !(lo..=hi).contains(&v) {
                return Err(cfg_err(format!("{key} = {v} outside [{lo},{hi}]")));
            }
        }
        if !(self.loss.temperature > 0.0) {
            return Err(cfg_err("loss.temperature must be positive"));
        }

        if self.protocol.v < 2 && m > 1 {
            return Err(cfg_err(format!(
                "protocol.v = {} must be at least 2",
                self.protocol.v
            )));
        }
        if self.protocol.v > m {
            return Err(cfg_err(format!(
                "protocol.v = {} exceeds client count {m}",
                self.protocol.v
            )));
        }
        if let Some(h) = self.protocol.h {
            if h == 0 || h > m.saturating_sub(1) {
                return Err(cfg_err(format!(
                    "protocol.h = {h} outside 1..={}",
                    m.saturating_sub(1)
                )));
            }
        }
        if self.protocol.rounds == 0 {
            return Err(cfg_err("protocol.rounds must be at least 1"));
        }
        if !(self.protocol.eta0 >= 0.0) || !(self.protocol.eta_g >= 0.0) {
            return Err(cfg_err("protocol.eta0 and protocol.eta_g must be non-negative"));
        }

        self.attack
            .validate()
            .map_err(|e| cfg_err(format!("attack: {e}")))?;

        if self.run.seeds.is_empty() {
            return Err(cfg_err("run.seeds must name at least one seed"));
        }
        Ok(())
    }

    /// Validates and fills the `derived` section; resolution is pure, so
    /// re-resolving an already resolved config is a fixed point.
    pub fn resolve(mut self) -> Result<ExperimentConfig, HarnessError> {
        self.validate()?;
        let m = self.clients()?;
        let r = self.partition.samples_per_client;
        let delta = match &self.privacy.delta {
            DeltaSpec::Auto(_) => 1.0 / r as f64,
            DeltaSpec::Value(d) => *d,
        };
        let sigma_g = calibrate_sigma(
            self.privacy.epsilon,
            delta,
            self.privacy.s,
            self.privacy.l,
            self.protocol.rounds,
            self.privacy.k,
            self.privacy.m_prime,
            self.privacy.calib_const,
        )?;
        let eta_l = self.protocol.eta0 / (self.privacy.s * self.privacy.k as f64);
        let h = self
            .protocol
            .h
            .unwrap_or_else(|| 35.min(m.saturating_sub(1)))
            .max(1);
        self.privacy.delta = DeltaSpec::Value(delta);
        self.derived = Some(DerivedParams {
            delta,
            sigma_g,
            eta_l,
            h,
            clients: m,
        });
        Ok(self)
    }

    fn derived(&self) -> Result<&DerivedParams, HarnessError> {
        self.derived
            .as_ref()
            .ok_or_else(|| cfg_err("internal: config not resolved"))
    }

    fn privacy_params(&self) -> Result<PrivacyParams, HarnessError> {
        let d = self.derived()?;
        Ok(PrivacyParams {
            epsilon: self.privacy.epsilon,
            delta: d.delta,
            clip_c: self.privacy.clip_c,
            sigma_g: d.sigma_g,
            s: self.privacy.s,
            l: self.privacy.l,
            k: self.privacy.k,
            t: self.protocol.rounds,
            m_prime: self.privacy.m_prime,
            calib_const: self.privacy.calib_const,
        })
    }

    fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.loss.alpha,
            beta: self.loss.beta,
            temperature: self.loss.temperature,
        }
    }

    /// The desk-scale default: 16 clients in groups of 4, 200 samples each,
    /// 50 rounds at epsilon 15 over 10-class synthetic blobs.
    pub fn desk_preset() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetConfig {
                kind: DatasetKind::Synthetic,
                num_classes: Some(10),
                dim: Some(32),
                separation: Some(4.0),
                n_per_class: Some(400),
                path: None,
            },
            partition: PartitionConfig {
                mode: PartitionModeKind::Alpha,
                gamma: Some(0.5),
                n: None,
                p: None,
                l: None,
                clients: Some(16),
                samples_per_client: 200,
            },
            privacy: PrivacyConfig {
                epsilon: 15.0,
                delta: DeltaSpec::default(),
                clip_c: 1.0,
                s: 0.5,
                l: 1.0,
                k: 2,
                calib_const: 1.0,
                m_prime: 1,
            },
            loss: LossConfig::default(),
            protocol: ProtocolConfig {
                v: 4,
                h: None,
                rounds: 50,
                aggregator_period: 5,
                eta0: 1.0,
                eta_g: 1.0,
            },
            attack: AttackConfig::default(),
            defense: DefenseConfig::none(),
            run: RunConfig {
                baseline: Baseline::P4,
                seeds: vec![1],
                out: None,
            },
            derived: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    /// Mean/std of final benign test accuracy on the proxy models.
    pub final_mean_acc_theta: f64,
    pub final_std_acc_theta: f64,
    /// Same for the local models.
    pub final_mean_acc_phi: f64,
    pub final_std_acc_phi: f64,
    /// Benign mean accuracy per round, length T.
    pub acc_theta_series: Vec<f64>,
    pub acc_phi_series: Vec<f64>,
    /// Deltas dropped by the defense per round, summed over groups.
    pub filtered_per_round: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
    /// Size of the undersized group when V does not divide M.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remainder_group: Option<usize>,
    pub malicious_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<SeparationReport>,
    /// Benign accuracy drop vs the clean no-defense companion, in points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_impact: Option<f64>,
    /// Ideal-defense accuracy minus this run's, in points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ideal_delta: Option<f64>,
}

/// Wall-clock per phase; emitted separately because it is the only
/// non-deterministic output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub seed: u64,
    pub phase1_secs: f64,
    pub phase2_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub schema_version: u32,
    pub resolved_config: ExperimentConfig,
    pub results: Vec<RunResult>,
    #[serde(skip)]
    pub timings: Vec<PhaseTimings>,
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupingMode {
    /// Phase-1 similarity clustering.
    Similarity,
    /// Uniform random partition into size-V groups (ablation).
    Random,
}

struct PipelineCore {
    reports: Vec<RoundReport>,
    groups: Vec<Vec<usize>>,
    remainder_group: Option<usize>,
    separation: Option<SeparationReport>,
    phase1_secs: f64,
    phase2_secs: f64,
}

fn build_pool<'a>(
    cfg: &ExperimentConfig,
    file_pool: Option<&'a Dataset>,
    seed: u64,
) -> Result<Cow<'a, Dataset>, HarnessError> {
    match cfg.dataset.kind {
        DatasetKind::Synthetic => Ok(Cow::Owned(gen_synthetic(
            cfg.dataset.num_classes.unwrap(),
            cfg.dataset.dim.unwrap(),
            cfg.dataset.separation.unwrap(),
            cfg.dataset.n_per_class.unwrap(),
            seed,
        )?)),
        DatasetKind::File => Ok(Cow::Borrowed(
            file_pool.expect("file pool loaded before seeds"),
        )),
    }
}

fn partition(
    cfg: &ExperimentConfig,
    pool: &Dataset,
    seed: u64,
) -> Result<Vec<ClientDataset>, HarnessError> {
    let r = cfg.partition.samples_per_client;
    match cfg.partition.mode {
        PartitionModeKind::Alpha => {
            let spec = PartitionSpec::alpha(
                cfg.partition.gamma.unwrap(),
                cfg.partition.clients.unwrap(),
                r,
            );
            Ok(partition_alpha(pool, &spec, seed)?)
        }
        PartitionModeKind::Shard => {
            let spec = PartitionSpec::shard(
                cfg.partition.n.unwrap(),
                cfg.partition.p.unwrap(),
                cfg.partition.l.unwrap(),
                r,
            );
            Ok(partition_shard(pool, &spec, seed)?)
        }
    }
}

/// `floor(fraction * M)` malicious ids, chosen uniformly by seed.
pub fn select_malicious(seed: u64, clients: usize, fraction: f64) -> Vec<usize> {
    let count = (fraction * clients as f64).floor() as usize;
    if count == 0 {
        return Vec::new();
    }
    let mut rng = RngStream::new(seed, Purpose::MaliciousSelect, 0, 0, 0);
    let mut ids = rng.sample_indices(clients, count);
    ids.sort_unstable();
    ids
}

/// Ground-truth distribution key per client, when the partition mode defines
/// one: the dominant class for alpha mode, the class set for shard mode.
fn distribution_keys(cfg: &ExperimentConfig, datasets: &[ClientDataset]) -> Vec<u64> {
    match cfg.partition.mode {
        PartitionModeKind::Alpha => {
            let c = datasets
                .first()
                .map(|d| d.num_classes())
                .unwrap_or(1)
                .max(1);
            (0..datasets.len()).map(|i| (i % c) as u64).collect()
        }
        PartitionModeKind::Shard => {
            let mut key_of: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
            datasets
                .iter()
                .map(|ds| {
                    let mut classes: Vec<usize> = ds.data().labels().to_vec();
                    classes.sort_unstable();
                    classes.dedup();
                    let next = key_of.len() as u64;
                    *key_of.entry(classes).or_insert(next)
                })
                .collect()
        }
    }
}

fn random_partition(clients: usize, v: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut ids: Vec<usize> = (0..clients).collect();
    let mut rng = RngStream::new(seed, Purpose::RandomGrouping, 0, 0, 0);
    rng.shuffle(&mut ids);
    let mut groups: Vec<Vec<usize>> = ids.chunks(v).map(|c| c.to_vec()).collect();
    for g in groups.iter_mut() {
        g.sort_unstable();
    }
    groups.sort_by_key(|g| g[0]);
    groups
}

fn corrupt_warmup_weights(
    kind: AttackKind,
    honest: &WeightVector,
    init: &WeightVector,
    seed: u64,
    client_id: usize,
    sigma: f64,
) -> WeightVector {
    match kind {
        AttackKind::ByzZero => WeightVector::zeros(honest.len()),
        AttackKind::ByzRandom => {
            let mut rng = RngStream::new(seed, Purpose::ByzRandom, client_id as u64, WARMUP_ROUND, 0);
            WeightVector((0..honest.len()).map(|_| sigma * rng.next_gaussian()).collect())
        }
        AttackKind::ByzFlip => byz_flip_model(init, honest),
        AttackKind::None | AttackKind::LabelFlip => honest.clone(),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_pipeline(
    cfg: &ExperimentConfig,
    pool: &Dataset,
    seed: u64,
    baseline: Baseline,
    grouping: GroupingMode,
    attack_kind: AttackKind,
    defense: DefenseConfig,
    malicious_ids: &[usize],
) -> Result<PipelineCore, HarnessError> {
    let derived = cfg.derived()?.clone();
    let mut datasets = partition(cfg, pool, seed)?;
    let m = datasets.len();
    let lw = cfg.loss_weights();
    let privacy = cfg.privacy_params()?;

    // Data poisoning happens before anything else sees the data.
    if attack_kind == AttackKind::LabelFlip {
        for &id in malicious_ids {
            attack_label_flip(&mut datasets[id]);
        }
    }

    let classes = pool.num_classes();
    let dim = pool.dim();
    let init = LinearModel::zeros(classes, dim);
    let cot_cfg = CotrainConfig {
        seed,
        rounds: cfg.protocol.rounds,
        k_steps: cfg.privacy.k,
        lw,
        privacy: privacy.clone(),
        eta_l: derived.eta_l,
        eta_g: cfg.protocol.eta_g,
        aggregator_period: cfg.protocol.aggregator_period,
        defense,
        byz_random_sigma: cfg.attack.byz_random_sigma,
    };
    let mark_malicious = |state: &mut ClientState| {
        if attack_kind != AttackKind::None && malicious_ids.contains(&state.id) {
            state.malicious = Some(attack_kind);
        }
    };

    match baseline {
        Baseline::Local => {
            let phase2 = Instant::now();
            let mut clients: Vec<ClientState> = datasets
                .into_iter()
                .enumerate()
                .map(|(i, ds)| ClientState::new(i, i, ds, &init))
                .collect();
            clients.iter_mut().for_each(mark_malicious);
            let reports = local_baseline(&mut clients, &cot_cfg)?;
            Ok(PipelineCore {
                reports,
                groups: (0..m).map(|i| vec![i]).collect(),
                remainder_group: None,
                separation: None,
                phase1_secs: 0.0,
                phase2_secs: phase2.elapsed().as_secs_f64(),
            })
        }
        Baseline::Fedavg => {
            let phase2 = Instant::now();
            let mut clients: Vec<ClientState> = datasets
                .into_iter()
                .enumerate()
                .map(|(i, ds)| ClientState::new(i, 0, ds, &init))
                .collect();
            clients.iter_mut().for_each(mark_malicious);
            let reports = fedavg_baseline(&mut clients, &cot_cfg)?;
            Ok(PipelineCore {
                reports,
                groups: vec![(0..m).collect()],
                remainder_group: None,
                separation: None,
                phase1_secs: 0.0,
                phase2_secs: phase2.elapsed().as_secs_f64(),
            })
        }
        Baseline::P4 => {
            // Phase 1: DP warm-up and grouping.
            let phase1 = Instant::now();
            let warm: Vec<WeightVector> = datasets
                .par_iter()
                .enumerate()
                .map(|(i, ds)| {
                    warmup_one_epoch(ds, &init, &lw, &privacy, derived.eta_l, seed, i)
                        .map(|model| model.flatten())
                })
                .collect::<Result<Vec<_>, GroupingError>>()?;
            let init_flat = init.flatten();
            let reported: Vec<WeightVector> = warm
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    if attack_kind.is_byzantine()
                        && cfg.attack.activation == AttackActivation::BeforeGrouping
                        && malicious_ids.contains(&i)
                    {
                        corrupt_warmup_weights(
                            attack_kind,
                            w,
                            &init_flat,
                            seed,
                            i,
                            cfg.attack.byz_random_sigma,
                        )
                    } else {
                        w.clone()
                    }
                })
                .collect();

            let assignment = match grouping {
                GroupingMode::Similarity => {
                    if m == 1 {
                        GroupAssignment::new(1, vec![vec![0]])?
                    } else {
                        let cache = sample_and_score(&reported, derived.h, seed)?;
                        let pairs = mutual_pairing(&cache, seed)?;
                        if cfg.protocol.v >= 2 {
                            merge_groups(pairs, &cache, cfg.protocol.v)?
                        } else {
                            GroupAssignment::new(m, pairs)?
                        }
                    }
                }
                GroupingMode::Random => {
                    GroupAssignment::new(m, random_partition(m, cfg.protocol.v.max(1), seed))?
                }
            };
            let remainder_group = assignment.remainder_group_size(cfg.protocol.v);

            // Separation diagnostic over honest warm-up weights, when the
            // ground truth defines at least two distributions of two.
            let keys = distribution_keys(cfg, &datasets);
            let mut by_dist: BTreeMap<u64, Vec<WeightVector>> = BTreeMap::new();
            for (i, w) in warm.iter().enumerate() {
                by_dist.entry(keys[i]).or_default().push(w.clone());
            }
            let dists: Vec<Vec<WeightVector>> = by_dist.into_values().collect();
            let separation = if dists.len() >= 2 && dists.iter().all(|d| d.len() >= 2) {
                Some(separation_report(&dists)?)
            } else {
                None
            };
            let phase1_secs = phase1.elapsed().as_secs_f64();

            // Phase 2: co-training from the common initial weights.
            let phase2 = Instant::now();
            let groups_list = assignment.groups().to_vec();
            let mut dataset_slots: Vec<Option<ClientDataset>> =
                datasets.into_iter().map(Some).collect();
            let mut groups: Vec<GroupState> = Vec::with_capacity(groups_list.len());
            for (gid, members) in groups_list.iter().enumerate() {
                let mut states = Vec::with_capacity(members.len());
                for &id in members {
                    let ds = dataset_slots[id].take().expect("dataset taken twice");
                    let mut state = ClientState::new(id, gid, ds, &init);
                    mark_malicious(&mut state);
                    states.push(state);
                }
                groups.push(GroupState {
                    group_id: gid,
                    members: states,
                    global_theta: init.clone(),
                });
            }
            let reports = run_cotraining(&mut groups, &cot_cfg)?;
            Ok(PipelineCore {
                reports,
                groups: groups_list,
                remainder_group,
                separation,
                phase1_secs,
                phase2_secs: phase2.elapsed().as_secs_f64(),
            })
        }
    }
}

fn benign_stats(acc: &BTreeMap<usize, f64>, benign: &[usize]) -> (f64, f64) {
    let vals: Vec<f64> = benign.iter().filter_map(|id| acc.get(id)).cloned().collect();
    if vals.is_empty() {
        return (0.0, 0.0);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
    (mean, var.sqrt())
}

fn reduce_result(
    seed: u64,
    core: &PipelineCore,
    benign: &[usize],
    malicious_ids: &[usize],
) -> RunResult {
    let mut theta_series = Vec::with_capacity(core.reports.len());
    let mut phi_series = Vec::with_capacity(core.reports.len());
    let mut filtered = Vec::with_capacity(core.reports.len());
    for report in &core.reports {
        theta_series.push(benign_stats(&report.acc_theta, benign).0);
        phi_series.push(benign_stats(&report.acc_phi, benign).0);
        filtered.push(
            report
                .outcomes
                .iter()
                .map(|o| o.filtered_ids.len())
                .sum::<usize>(),
        );
    }
    let last = core.reports.last().expect("at least one round");
    let (theta_mean, theta_std) = benign_stats(&last.acc_theta, benign);
    let (phi_mean, phi_std) = benign_stats(&last.acc_phi, benign);
    RunResult {
        seed,
        final_mean_acc_theta: theta_mean,
        final_std_acc_theta: theta_std,
        final_mean_acc_phi: phi_mean,
        final_std_acc_phi: phi_std,
        acc_theta_series: theta_series,
        acc_phi_series: phi_series,
        filtered_per_round: filtered,
        groups: core.groups.clone(),
        remainder_group: core.remainder_group,
        malicious_ids: malicious_ids.to_vec(),
        separation: core.separation.clone(),
        attack_impact: None,
        ideal_delta: None,
    }
}

fn run_seed(
    cfg: &ExperimentConfig,
    file_pool: Option<&Dataset>,
    seed: u64,
    grouping: GroupingMode,
) -> Result<(RunResult, PhaseTimings), HarnessError> {
    let pool = build_pool(cfg, file_pool, seed)?;
    let m = cfg.derived()?.clients;
    let attack_kind = cfg.attack.kind;
    let malicious_ids = if attack_kind == AttackKind::None {
        Vec::new()
    } else {
        select_malicious(seed, m, cfg.attack.malicious_fraction)
    };
    let benign: Vec<usize> = (0..m).filter(|i| !malicious_ids.contains(i)).collect();

    let main = run_pipeline(
        cfg,
        &pool,
        seed,
        cfg.run.baseline,
        grouping,
        attack_kind,
        cfg.defense.clone(),
        &malicious_ids,
    )?;
    let mut result = reduce_result(seed, &main, &benign, &malicious_ids);
    let mut timings = PhaseTimings {
        seed,
        phase1_secs: main.phase1_secs,
        phase2_secs: main.phase2_secs,
    };

    if attack_kind != AttackKind::None && !malicious_ids.is_empty() {
        // Clean companion: same seed and data, nobody attacks, no defense.
        // Benign metrics use the same client subset.
        let clean = run_pipeline(
            cfg,
            &pool,
            seed,
            cfg.run.baseline,
            grouping,
            AttackKind::None,
            DefenseConfig::none(),
            &malicious_ids,
        )?;
        let clean_result = reduce_result(seed, &clean, &benign, &malicious_ids);
        result.attack_impact = Some(crate::robustness::attack_impact(
            clean_result.final_mean_acc_theta,
            result.final_mean_acc_theta,
        ));
        timings.phase1_secs += clean.phase1_secs;
        timings.phase2_secs += clean.phase2_secs;

        // Ideal companion: same attack, oracle defense.
        if cfg.defense.kind != DefenseKind::Ideal {
            let ideal = run_pipeline(
                cfg,
                &pool,
                seed,
                cfg.run.baseline,
                grouping,
                attack_kind,
                DefenseConfig::of_kind(DefenseKind::Ideal),
                &malicious_ids,
            )?;
            let ideal_result = reduce_result(seed, &ideal, &benign, &malicious_ids);
            result.ideal_delta = Some(crate::robustness::ideal_delta(
                ideal_result.final_mean_acc_theta,
                result.final_mean_acc_theta,
            ));
            timings.phase1_secs += ideal.phase1_secs;
            timings.phase2_secs += ideal.phase2_secs;
        } else {
            result.ideal_delta = Some(0.0);
        }
    }

    Ok((result, timings))
}

fn run_with_grouping(
    config: &ExperimentConfig,
    grouping: GroupingMode,
) -> Result<ExperimentOutput, HarnessError> {
    let resolved = config.clone().resolve()?;
    let file_pool = match resolved.dataset.kind {
        DatasetKind::File => Some(load_feature_file(Path::new(
            resolved.dataset.path.as_ref().unwrap(),
        ))?),
        DatasetKind::Synthetic => None,
    };
    let outcomes: Vec<(RunResult, PhaseTimings)> = resolved
        .run
        .seeds
        .par_iter()
        .map(|&seed| run_seed(&resolved, file_pool.as_ref(), seed, grouping))
        .collect::<Result<Vec<_>, _>>()?;
    let (results, timings) = outcomes.into_iter().unzip();
    Ok(ExperimentOutput {
        schema_version: SCHEMA_VERSION,
        resolved_config: resolved,
        results,
        timings,
    })
}

/// Runs the configured experiment for every seed; seeds run in parallel and
/// merge in seed order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    run_with_grouping(config, GroupingMode::Similarity)
}

/// Identical pipeline with the similarity grouping replaced by a uniform
/// random partition into size-V groups.
pub fn random_grouping_ablation(
    config: &ExperimentConfig,
) -> Result<ExperimentOutput, HarnessError> {
    run_with_grouping(config, GroupingMode::Random)
}

/// Phase-1 diagnostic: warm-up, grouping, and the separation report, without
/// co-training.
pub fn run_separation_diagnostic(
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(GroupAssignment, Option<SeparationReport>), HarnessError> {
    let resolved = config.clone().resolve()?;
    let file_pool = match resolved.dataset.kind {
        DatasetKind::File => Some(load_feature_file(Path::new(
            resolved.dataset.path.as_ref().unwrap(),
        ))?),
        DatasetKind::Synthetic => None,
    };
    let pool = build_pool(&resolved, file_pool.as_ref(), seed)?;
    let derived = resolved.derived()?.clone();
    let datasets = partition(&resolved, &pool, seed)?;
    let m = datasets.len();
    let lw = resolved.loss_weights();
    let privacy = resolved.privacy_params()?;
    let init = LinearModel::zeros(pool.num_classes(), pool.dim());

    let warm: Vec<WeightVector> = datasets
        .par_iter()
        .enumerate()
        .map(|(i, ds)| {
            warmup_one_epoch(ds, &init, &lw, &privacy, derived.eta_l, seed, i)
                .map(|model| model.flatten())
        })
        .collect::<Result<Vec<_>, GroupingError>>()?;

    let assignment = if m == 1 {
        GroupAssignment::new(1, vec![vec![0]])?
    } else {
        let cache = sample_and_score(&warm, derived.h, seed)?;
        let pairs = mutual_pairing(&cache, seed)?;
        merge_groups(pairs, &cache, resolved.protocol.v)?
    };

    let keys = distribution_keys(&resolved, &datasets);
    let mut by_dist: BTreeMap<u64, Vec<WeightVector>> = BTreeMap::new();
    for (i, w) in warm.iter().enumerate() {
        by_dist.entry(keys[i]).or_default().push(w.clone());
    }
    let dists: Vec<Vec<WeightVector>> = by_dist.into_values().collect();
    let separation = if dists.len() >= 2 && dists.iter().all(|d| d.len() >= 2) {
        Some(separation_report(&dists)?)
    } else {
        None
    };
    Ok((assignment, separation))
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Serializes the deterministic payload (`results.json`, `results.csv`) and
/// the wall-clock timings (`timings.json`) into `dir`.
pub fn emit_results(output: &ExperimentOutput, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let json_path = dir.join("results.json");
    let json = serde_json::to_string_pretty(output)
        .map_err(|e| HarnessError::Serialize(e.to_string()))?;
    fs::write(&json_path, json + "\n").map_err(io_err(&json_path))?;

    let csv_path = dir.join("results.csv");
    let mut csv = String::from("seed,round,mean_acc_theta,mean_acc_phi,filtered_count\n");
    for r in &output.results {
        for (round, ((theta, phi), filtered)) in r
            .acc_theta_series
            .iter()
            .zip(&r.acc_phi_series)
            .zip(&r.filtered_per_round)
            .enumerate()
        {
            csv.push_str(&format!("{},{round},{theta},{phi},{filtered}\n", r.seed));
        }
    }
    fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;

    let timings_path = dir.join("timings.json");
    let timings = serde_json::to_string_pretty(&output.timings)
        .map_err(|e| HarnessError::Serialize(e.to_string()))?;
    fs::write(&timings_path, timings + "\n").map_err(io_err(&timings_path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk_preset();
        cfg.dataset.num_classes = Some(2);
        cfg.dataset.dim = Some(4);
        cfg.dataset.separation = Some(5.0);
        cfg.dataset.n_per_class = Some(200);
        cfg.partition.gamma = Some(0.5);
        cfg.partition.clients = Some(4);
        cfg.partition.samples_per_client = 60;
        cfg.protocol.v = 2;
        cfg.protocol.rounds = 3;
        cfg.run.seeds = vec![11];
        cfg
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = tiny_config();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);

        let bad = format!("{text}\n[extra]\nkey = 1\n");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&bad),
            Err(HarnessError::Config(_))
        ));

        let bad_key = text.replace("samples_per_client", "samples_per_clientt");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&bad_key),
            Err(HarnessError::Config(_))
        ));
    }

    #[test]
    fn validation_reports_key_paths() {
        let mut cfg = tiny_config();
        cfg.partition.gamma = Some(1.5);
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("partition.gamma"), "{err}");

        let mut cfg = tiny_config();
        cfg.privacy.epsilon = -1.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("privacy.epsilon"));

        let mut cfg = tiny_config();
        cfg.protocol.v = 9;
        assert!(cfg.validate().unwrap_err().to_string().contains("protocol.v"));
    }

    #[test]
    fn resolution_is_pure_and_echoes_derived() {
        let cfg = tiny_config().resolve().unwrap();
        let d = cfg.derived.clone().unwrap();
        assert_eq!(d.clients, 4);
        assert!((d.delta - 1.0 / 60.0).abs() < 1e-15);
        assert!((d.eta_l - 1.0 / (0.5 * 2.0)).abs() < 1e-15);
        assert_eq!(d.h, 3);
        assert!(d.sigma_g > 0.0);

        // resolving a resolved config is a fixed point
        let again = cfg.clone().resolve().unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn delta_auto_and_value() {
        let mut cfg = tiny_config();
        cfg.privacy.delta = DeltaSpec::Value(0.01);
        let resolved = cfg.resolve().unwrap();
        assert_eq!(resolved.derived.unwrap().delta, 0.01);

        let mut cfg = tiny_config();
        cfg.privacy.delta = DeltaSpec::Auto("nonsense".into());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn run_is_deterministic_and_emits() {
        let cfg = tiny_config();
        let out1 = run_experiment(&cfg).unwrap();
        let out2 = run_experiment(&cfg).unwrap();
        assert_eq!(out1.results, out2.results);
        assert_eq!(out1.results.len(), 1);
        let r = &out1.results[0];
        assert_eq!(r.acc_theta_series.len(), 3);
        assert_eq!(r.filtered_per_round.len(), 3);
        assert!(r.groups.iter().all(|g| g.len() == 2));

        let dir = tempfile::tempdir().unwrap();
        emit_results(&out1, dir.path()).unwrap();
        let json = fs::read_to_string(dir.path().join("results.json")).unwrap();
        let parsed: ExperimentOutput = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.results, out1.results);
        assert_eq!(parsed.resolved_config, out1.resolved_config);

        let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "seed,round,mean_acc_theta,mean_acc_phi,filtered_count");
        assert_eq!(lines.len(), 1 + 3); // header + seeds * rounds
    }

    #[test]
    fn empty_results_csv_has_header_only() {
        let cfg = tiny_config().resolve().unwrap();
        let out = ExperimentOutput {
            schema_version: SCHEMA_VERSION,
            resolved_config: cfg,
            results: Vec::new(),
            timings: Vec::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        emit_results(&out, dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(csv, "seed,round,mean_acc_theta,mean_acc_phi,filtered_count\n");
    }

    #[test]
    fn local_baseline_single_client_composition() {
        let mut cfg = tiny_config();
        cfg.partition.clients = Some(1);
        cfg.protocol.v = 2; // ignored for M = 1
        cfg.run.baseline = Baseline::Local;
        // v > m would fail validation; relax v for the single client
        cfg.protocol.v = 1;
        let err = cfg.clone().resolve();
        assert!(err.is_ok(), "single-client local config must resolve: {err:?}");
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.results.len(), 1);
        assert_eq!(out.results[0].groups, vec![vec![0]]);
        // theta column mirrors phi for the local baseline
        assert_eq!(
            out.results[0].acc_theta_series,
            out.results[0].acc_phi_series
        );
    }

    #[test]
    fn ablation_with_v_equal_m_matches_p4() {
        let mut cfg = tiny_config();
        cfg.protocol.v = 4; // V = M: one group either way
        let p4 = run_experiment(&cfg).unwrap();
        let ablated = random_grouping_ablation(&cfg).unwrap();
        assert_eq!(p4.results, ablated.results);
    }

    #[test]
    fn malicious_selection_is_deterministic() {
        let a = select_malicious(5, 16, 0.3);
        let b = select_malicious(5, 16, 0.3);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(select_malicious(5, 16, 0.0).is_empty());
    }

    #[test]
    fn attacked_run_fills_impact_fields() {
        let mut cfg = tiny_config();
        cfg.partition.clients = Some(6);
        cfg.dataset.n_per_class = Some(300);
        cfg.protocol.v = 3;
        cfg.attack.kind = AttackKind::ByzZero;
        cfg.attack.malicious_fraction = 0.34;
        cfg.defense = DefenseConfig::of_kind(DefenseKind::Secure);
        let out = run_experiment(&cfg).unwrap();
        let r = &out.results[0];
        assert_eq!(r.malicious_ids.len(), 2);
        assert!(r.attack_impact.is_some());
        assert!(r.ideal_delta.is_some());
    }
}
