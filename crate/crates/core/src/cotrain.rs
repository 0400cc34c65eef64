//! Per-group co-training rounds, aggregation, and the reference baselines.
//!
//! Each round, a subsampled set of group members resets its proxy to the
//! group's global model, performs `K` DP proxy steps and `K` noiseless local
//! steps on shared batches, and ships the proxy delta to a rotating
//! aggregator. The aggregator optionally filters deltas through a defense,
//! averages the survivors, and broadcasts the updated global proxy.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::ClientDataset;
use crate::model::{
    local_loss_grad, proxy_loss_grads_per_sample, sgd_step, LinearModel, LossWeights, WeightVector,
};
use crate::privacy::{clip_gradient, noisy_mean, subsample_clients, subsample_data, PrivacyParams};
use crate::rng::{Purpose, RngStream};
use crate::robustness::{attack_byzantine, secure_aggregate, AttackKind, DefenseConfig};

#[derive(Debug, Error)]
pub enum CotrainError {
    #[error("client {id}: {message}")]
    Client { id: usize, message: String },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("empty delta list for aggregation")]
    EmptyAggregation,
    #[error("delta shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("{0}")]
    Defense(String),
}

/// One client's full training state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// Shared proxy model; the only artifact that leaves the client.
    pub theta: LinearModel,
    /// Private local model; never leaves the client.
    pub phi: LinearModel,
    pub group_id: usize,
    pub dataset: ClientDataset,
    /// `Some` once this client behaves maliciously during co-training.
    pub malicious: Option<AttackKind>,
    /// Noisy proxy steps taken so far; cross-checked against `T*K`.
    pub dp_step_count: u64,
}

impl ClientState {
    pub fn new(id: usize, group_id: usize, dataset: ClientDataset, init: &LinearModel) -> Self {
        ClientState {
            id,
            theta: init.clone(),
            phi: init.clone(),
            group_id,
            dataset,
            malicious: None,
            dp_step_count: 0,
        }
    }
}

/// One group's members plus its global proxy model.
#[derive(Debug, Clone)]
pub struct GroupState {
    pub group_id: usize,
    pub members: Vec<ClientState>,
    pub global_theta: LinearModel,
}

/// Static knobs of a co-training run.
#[derive(Debug, Clone)]
pub struct CotrainConfig {
    pub seed: u64,
    pub rounds: u64,
    pub k_steps: u64,
    pub lw: LossWeights,
    pub privacy: PrivacyParams,
    pub eta_l: f64,
    pub eta_g: f64,
    /// Rounds between aggregator rotations; 0 pins the lowest id.
    pub aggregator_period: u64,
    pub defense: DefenseConfig,
    /// Noise scale of the byzantine-random attack.
    pub byz_random_sigma: f64,
}

/// What happened at one group's aggregation barrier.
#[derive(Debug, Clone)]
pub struct GroupRoundOutcome {
    pub group_id: usize,
    pub round: u64,
    pub participants: Vec<usize>,
    pub aggregator: usize,
    /// Participants whose deltas the defense dropped.
    pub filtered_ids: Vec<usize>,
    /// True when the anomaly layer left too few survivors and m-Krum ran on
    /// the unfiltered set instead.
    pub anomaly_fallback: bool,
}

/// Per-round record across all groups.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: u64,
    /// Test accuracy of every client's proxy model.
    pub acc_theta: BTreeMap<usize, f64>,
    /// Test accuracy of every client's local model.
    pub acc_phi: BTreeMap<usize, f64>,
    pub outcomes: Vec<GroupRoundOutcome>,
}

/// Fraction of test rows the model classifies correctly.
pub fn test_accuracy(model: &LinearModel, ds: &ClientDataset) -> f64 {
    let test = ds.test_idx();
    if test.is_empty() {
        return 0.0;
    }
    let correct = test
        .iter()
        .filter(|&&i| model.predict(ds.data().row(i)).ok() == Some(ds.data().label(i)))
        .count();
    correct as f64 / test.len() as f64
}

fn client_err<E: std::fmt::Display>(id: usize) -> impl Fn(E) -> CotrainError {
    move |e| CotrainError::Client {
        id,
        message: e.to_string(),
    }
}

// lr = 0 is a legal no-op so degenerate configurations stay runnable.
fn apply_step(model: &LinearModel, grad: &WeightVector, lr: f64) -> Result<LinearModel, CotrainError> {
    if lr == 0.0 {
        return Ok(model.clone());
    }
    sgd_step(model, grad, lr).map_err(|e| CotrainError::BadConfig(e.to_string()))
}

/// One DP step of the proxy path: subsample a batch, clip each per-sample
/// gradient to `C`, average, add Gaussian noise, and step.
///
/// `round`/`step` key the RNG streams; both models are read at their
/// pre-step values.
#[allow(clippy::too_many_arguments)]
pub fn dp_proxy_step(
    theta: &LinearModel,
    phi: &LinearModel,
    dataset: &ClientDataset,
    lw: &LossWeights,
    privacy: &PrivacyParams,
    eta_l: f64,
    seed: u64,
    client_id: usize,
    round: u64,
    step: u64,
) -> Result<LinearModel, CotrainError> {
    let mut batch_rng = RngStream::new(seed, Purpose::DataSubsample, client_id as u64, round, step);
    let batch_idx =
        subsample_data(dataset, privacy.s, &mut batch_rng).map_err(client_err(client_id))?;
    let batch = dataset.samples(&batch_idx);

    let grads =
        proxy_loss_grads_per_sample(theta, phi, &batch, lw).map_err(client_err(client_id))?;
    let clipped: Vec<WeightVector> = grads
        .iter()
        .map(|g| clip_gradient(g, privacy.clip_c))
        .collect::<Result<_, _>>()
        .map_err(client_err(client_id))?;

    let mut noise_rng = RngStream::new(seed, Purpose::DpNoise, client_id as u64, round, step);
    let update = noisy_mean(
        &clipped,
        privacy.clip_c,
        privacy.sigma_g,
        batch.len() as f64,
        &mut noise_rng,
    )
    .map_err(client_err(client_id))?;

    apply_step(theta, &update, eta_l)
}

/// Runs `K` coupled local steps and returns the proxy delta
/// `theta_after - theta_before`.
///
/// The proxy path is clipped and noised per step; the local path takes the
/// plain batch-mean gradient. Both gradients of a step are evaluated on the
/// pre-step model pair.
pub fn client_local_round(
    state: &mut ClientState,
    round: u64,
    cfg: &CotrainConfig,
) -> Result<WeightVector, CotrainError> {
    if cfg.k_steps < 1 {
        return Err(CotrainError::BadConfig("K must be at least 1".into()));
    }
    let theta_start = state.theta.flatten();
    for step in 0..cfg.k_steps {
        // Re-derive the batch for the local path from the same stream key so
        // proxy and local updates see the same samples.
        let mut batch_rng =
            RngStream::new(cfg.seed, Purpose::DataSubsample, state.id as u64, round, step);
        let batch_idx = subsample_data(&state.dataset, cfg.privacy.s, &mut batch_rng)
            .map_err(client_err(state.id))?;
        let batch = state.dataset.samples(&batch_idx);

        let new_theta = dp_proxy_step(
            &state.theta,
            &state.phi,
            &state.dataset,
            &cfg.lw,
            &cfg.privacy,
            cfg.eta_l,
            cfg.seed,
            state.id,
            round,
            step,
        )?;
        let phi_grad = local_loss_grad(&state.phi, &state.theta, &batch, &cfg.lw)
            .map_err(client_err(state.id))?;
        state.phi = apply_step(&state.phi, &phi_grad, cfg.eta_l)?;
        state.theta = new_theta;
        state.dp_step_count += 1;
    }
    Ok(state.theta.flatten().sub(&theta_start))
}

/// Mean of the deltas scaled by `eta_g`, summed in ascending client-id order
/// so the result is independent of input order.
pub fn aggregate_mean(
    deltas: &[(usize, WeightVector)],
    eta_g: f64,
) -> Result<WeightVector, CotrainError> {
    if deltas.is_empty() {
        return Err(CotrainError::EmptyAggregation);
    }
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    order.sort_by_key(|&i| deltas[i].0);
    let dim = deltas[0].1.len();
    let mut sum = vec![0.0; dim];
    for &i in &order {
        let d = &deltas[i].1;
        if d.len() != dim {
            return Err(CotrainError::ShapeMismatch {
                expected: dim,
                got: d.len(),
            });
        }
        for (acc, v) in sum.iter_mut().zip(d.as_slice()) {
            *acc += v;
        }
    }
    let scale = eta_g / deltas.len() as f64;
    Ok(WeightVector(sum.into_iter().map(|v| v * scale).collect()))
}

/// Round-robin aggregator over the sorted group ids, advancing every
/// `period` rounds. `period = 0` pins the lowest id.
pub fn rotate_aggregator(group_sorted: &[usize], round: u64, period: u64) -> usize {
    assert!(!group_sorted.is_empty(), "empty group");
    if period == 0 {
        return group_sorted[0];
    }
    group_sorted[((round / period) as usize) % group_sorted.len()]
}

/// One co-training round inside one group: subsample participants, collect
/// (possibly corrupted) deltas, filter, aggregate, broadcast.
pub fn run_group_round(
    group: &mut GroupState,
    round: u64,
    cfg: &CotrainConfig,
) -> Result<GroupRoundOutcome, CotrainError> {
    let ids: Vec<usize> = group.members.iter().map(|m| m.id).collect();
    debug_assert!(ids.windows(2).all(|w| w[0] < w[1]), "members must be sorted");

    let mut sub_rng = RngStream::new(
        cfg.seed,
        Purpose::ClientSubsample,
        group.group_id as u64,
        round,
        0,
    );
    let participants =
        subsample_clients(&ids, cfg.privacy.l, &mut sub_rng).map_err(|e| CotrainError::BadConfig(e.to_string()))?;
    let aggregator = rotate_aggregator(&ids, round, cfg.aggregator_period);

    let theta_prev = group.global_theta.flatten();
    let mut deltas: Vec<(usize, WeightVector)> = Vec::with_capacity(participants.len());
    let mut malicious_mask: Vec<bool> = Vec::with_capacity(participants.len());
    for &id in &participants {
        let member = group
            .members
            .iter_mut()
            .find(|m| m.id == id)
            .expect("participant not in group");
        member.theta = group.global_theta.clone();
        let honest = client_local_round(member, round, cfg)?;
        let reported = match member.malicious {
            Some(kind) if kind.is_byzantine() => {
                let mut byz_rng =
                    RngStream::new(cfg.seed, Purpose::ByzRandom, id as u64, round, 0);
                // The flip reflects the model the client would have
                // submitted around the round's global model.
                attack_byzantine(
                    &honest,
                    kind,
                    &theta_prev,
                    &member.theta.flatten(),
                    &mut byz_rng,
                    cfg.byz_random_sigma,
                )
                .map_err(client_err(id))?
            }
            _ => honest,
        };
        malicious_mask.push(member.malicious.is_some());
        deltas.push((id, reported));
    }

    let delta_vecs: Vec<WeightVector> = deltas.iter().map(|(_, d)| d.clone()).collect();
    let agg = secure_aggregate(&delta_vecs, &cfg.defense, &malicious_mask)
        .map_err(|e| CotrainError::Defense(e.to_string()))?;
    let kept: Vec<(usize, WeightVector)> = agg
        .kept
        .iter()
        .map(|&i| deltas[i].clone())
        .collect();
    let filtered_ids: Vec<usize> = participants
        .iter()
        .enumerate()
        .filter(|(i, _)| !agg.kept.contains(i))
        .map(|(_, &id)| id)
        .collect();

    // A defense may drop every delta (e.g. the ideal defense in a fully
    // malicious group); the round then leaves the global model unchanged.
    if !kept.is_empty() {
        let global_delta = aggregate_mean(&kept, cfg.eta_g)?;
        let new_global = theta_prev.add(&global_delta);
        group.global_theta = LinearModel::from_flat(
            group.global_theta.num_classes(),
            group.global_theta.feature_dim(),
            &new_global,
        )
        .map_err(|e| CotrainError::BadConfig(e.to_string()))?;
    }

    // Broadcast: every participant adopts the new global proxy;
    // non-participants keep their stale copy until they next participate.
    for member in group.members.iter_mut() {
        if participants.contains(&member.id) {
            member.theta = group.global_theta.clone();
        }
    }

    Ok(GroupRoundOutcome {
        group_id: group.group_id,
        round,
        participants,
        aggregator,
        filtered_ids,
        anomaly_fallback: agg.anomaly_fallback,
    })
}

fn evaluate_all(groups: &[GroupState]) -> (BTreeMap<usize, f64>, BTreeMap<usize, f64>) {
    let mut acc_theta = BTreeMap::new();
    let mut acc_phi = BTreeMap::new();
    for g in groups {
        for m in &g.members {
            acc_theta.insert(m.id, test_accuracy(&m.theta, &m.dataset));
            acc_phi.insert(m.id, test_accuracy(&m.phi, &m.dataset));
        }
    }
    (acc_theta, acc_phi)
}

/// Drives all groups for `cfg.rounds` rounds. Groups run in parallel;
/// results are merged in group order so the outcome is schedule-independent.
pub fn run_cotraining(
    groups: &mut [GroupState],
    cfg: &CotrainConfig,
) -> Result<Vec<RoundReport>, CotrainError> {
    let mut reports = Vec::with_capacity(cfg.rounds as usize);
    for round in 0..cfg.rounds {
        let outcomes: Vec<GroupRoundOutcome> = groups
            .par_iter_mut()
            .map(|g| run_group_round(g, round, cfg))
            .collect::<Result<Vec<_>, _>>()?;
        let (acc_theta, acc_phi) = evaluate_all(groups);
        reports.push(RoundReport {
            round,
            acc_theta,
            acc_phi,
            outcomes,
        });
    }
    Ok(reports)
}

/// Centralized FedAvg reference: one server loop over all clients, no
/// grouping and no distillation (`alpha = beta = 0`), same DP mechanics.
///
/// With `V = M` and no defense, the group protocol reduces to this path
/// bitwise; the loop is written independently as the reduction's second
/// route.
pub fn fedavg_baseline(
    clients: &mut [ClientState],
    cfg: &CotrainConfig,
) -> Result<Vec<RoundReport>, CotrainError> {
    let mut server_cfg = cfg.clone();
    server_cfg.lw = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        temperature: cfg.lw.temperature,
    };
    let ids: Vec<usize> = clients.iter().map(|c| c.id).collect();
    if ids.is_empty() {
        return Err(CotrainError::BadConfig("no clients".into()));
    }
    let (classes, dim) = (
        clients[0].theta.num_classes(),
        clients[0].theta.feature_dim(),
    );
    let mut server_theta = LinearModel::zeros(classes, dim);

    let mut reports = Vec::with_capacity(cfg.rounds as usize);
    for round in 0..cfg.rounds {
        let mut sub_rng = RngStream::new(cfg.seed, Purpose::ClientSubsample, 0, round, 0);
        let participants = subsample_clients(&ids, cfg.privacy.l, &mut sub_rng)
            .map_err(|e| CotrainError::BadConfig(e.to_string()))?;

        let theta_prev = server_theta.flatten();
        let mut deltas: Vec<(usize, WeightVector)> = Vec::with_capacity(participants.len());
        let mut malicious_mask = Vec::with_capacity(participants.len());
        for &id in &participants {
            let client = clients.iter_mut().find(|c| c.id == id).expect("client");
            client.theta = server_theta.clone();
            let honest = client_local_round(client, round, &server_cfg)?;
            let reported = match client.malicious {
                Some(kind) if kind.is_byzantine() => {
                    let mut byz_rng =
                        RngStream::new(cfg.seed, Purpose::ByzRandom, id as u64, round, 0);
                    attack_byzantine(
                        &honest,
                        kind,
                        &theta_prev,
                        &client.theta.flatten(),
                        &mut byz_rng,
                        cfg.byz_random_sigma,
                    )
                    .map_err(client_err(id))?
                }
                _ => honest,
            };
            malicious_mask.push(client.malicious.is_some());
            deltas.push((id, reported));
        }

        let delta_vecs: Vec<WeightVector> = deltas.iter().map(|(_, d)| d.clone()).collect();
        let agg = secure_aggregate(&delta_vecs, &cfg.defense, &malicious_mask)
            .map_err(|e| CotrainError::Defense(e.to_string()))?;
        let kept: Vec<(usize, WeightVector)> =
            agg.kept.iter().map(|&i| deltas[i].clone()).collect();
        let filtered_ids: Vec<usize> = participants
            .iter()
            .enumerate()
            .filter(|(i, _)| !agg.kept.contains(i))
            .map(|(_, &id)| id)
            .collect();

        if !kept.is_empty() {
            let update = aggregate_mean(&kept, cfg.eta_g)?;
            server_theta = LinearModel::from_flat(classes, dim, &theta_prev.add(&update))
                .map_err(|e| CotrainError::BadConfig(e.to_string()))?;
        }
        for client in clients.iter_mut() {
            if participants.contains(&client.id) {
                client.theta = server_theta.clone();
            }
        }

        let mut acc_theta = BTreeMap::new();
        let mut acc_phi = BTreeMap::new();
        for c in clients.iter() {
            acc_theta.insert(c.id, test_accuracy(&c.theta, &c.dataset));
            acc_phi.insert(c.id, test_accuracy(&c.phi, &c.dataset));
        }
        reports.push(RoundReport {
            round,
            acc_theta,
            acc_phi,
            outcomes: vec![GroupRoundOutcome {
                group_id: 0,
                round,
                participants,
                aggregator: ids[0],
                filtered_ids,
                anomaly_fallback: agg.anomaly_fallback,
            }],
        });
    }
    Ok(reports)
}

/// Plain non-DP SGD on the local model, no communication. The single model's
/// accuracy is reported in both columns.
pub fn local_baseline(
    clients: &mut [ClientState],
    cfg: &CotrainConfig,
) -> Result<Vec<RoundReport>, CotrainError> {
    let lw = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        temperature: cfg.lw.temperature,
    };
    let mut reports = Vec::with_capacity(cfg.rounds as usize);
    for round in 0..cfg.rounds {
        for client in clients.iter_mut() {
            for step in 0..cfg.k_steps {
                let mut batch_rng = RngStream::new(
                    cfg.seed,
                    Purpose::DataSubsample,
                    client.id as u64,
                    round,
                    step,
                );
                let batch_idx = subsample_data(&client.dataset, cfg.privacy.s, &mut batch_rng)
                    .map_err(client_err(client.id))?;
                let batch = client.dataset.samples(&batch_idx);
                let grad = local_loss_grad(&client.phi, &client.theta, &batch, &lw)
                    .map_err(client_err(client.id))?;
                client.phi = apply_step(&client.phi, &grad, cfg.eta_l)?;
            }
        }
        let mut acc = BTreeMap::new();
        for c in clients.iter() {
            acc.insert(c.id, test_accuracy(&c.phi, &c.dataset));
        }
        reports.push(RoundReport {
            round,
            acc_theta: acc.clone(),
            acc_phi: acc,
            outcomes: Vec::new(),
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, partition_alpha, PartitionSpec};
    use crate::model::Sample;
    use crate::robustness::DefenseKind;

    fn mk_dataset(seed: u64, clients: usize) -> Vec<ClientDataset> {
        let pool = gen_synthetic(2, 4, 5.0, 200, seed).unwrap();
        let spec = PartitionSpec::alpha(0.5, clients, 60);
        partition_alpha(&pool, &spec, seed).unwrap()
    }

    fn mk_cfg(seed: u64, rounds: u64, sigma_g: f64) -> CotrainConfig {
        let mut privacy = PrivacyParams::noiseless(1.0, 0.5, 1.0, 2, rounds);
        privacy.sigma_g = sigma_g;
        CotrainConfig {
            seed,
            rounds,
            k_steps: 2,
            lw: LossWeights::default(),
            privacy,
            eta_l: 0.5,
            eta_g: 1.0,
            aggregator_period: 5,
            defense: DefenseConfig::none(),
            byz_random_sigma: 1.0,
        }
    }

    fn mk_group(seed: u64, n: usize, cfg_classes: usize, dim: usize) -> GroupState {
        let datasets = mk_dataset(seed, n);
        let init = LinearModel::zeros(cfg_classes, dim);
        GroupState {
            group_id: 0,
            members: datasets
                .into_iter()
                .enumerate()
                .map(|(i, ds)| ClientState::new(i, 0, ds, &init))
                .collect(),
            global_theta: init,
        }
    }

    #[test]
    fn zero_learning_rate_gives_zero_delta() {
        let mut group = mk_group(1, 2, 2, 4);
        let mut cfg = mk_cfg(1, 1, 1.0);
        cfg.eta_l = 0.0;
        let delta = client_local_round(&mut group.members[0], 0, &cfg).unwrap();
        assert!(delta.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noiseless_single_step_matches_formula() {
        // sigma=0, alpha=0, K=1, s=1 -> delta = -eta * mean clipped CE grad
        let mut group = mk_group(2, 1, 2, 4);
        let mut cfg = mk_cfg(2, 1, 0.0);
        cfg.k_steps = 1;
        cfg.privacy.s = 1.0;
        cfg.lw = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            temperature: 1.0,
        };

        let state = &group.members[0];
        let batch = state.dataset.samples(state.dataset.train_idx());
        let grads =
            proxy_loss_grads_per_sample(&state.theta, &state.phi, &batch, &cfg.lw).unwrap();
        let clipped: Vec<WeightVector> = grads
            .iter()
            .map(|g| clip_gradient(g, cfg.privacy.clip_c).unwrap())
            .collect();
        let mut expected = WeightVector::zeros(clipped[0].len());
        for g in &clipped {
            expected.add_assign(g);
        }
        let expected = expected.scale(-cfg.eta_l / clipped.len() as f64);

        let delta = client_local_round(&mut group.members[0], 0, &cfg).unwrap();
        for (a, b) in delta.as_slice().iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn phi_matches_plain_sgd_oracle_when_beta_zero() {
        // With beta = 0 the local model ignores theta entirely; its
        // trajectory must equal an independently coded plain-SGD loop over
        // the same batches.
        let mut group = mk_group(3, 1, 2, 4);
        let mut cfg = mk_cfg(3, 1, 1.0);
        cfg.lw = LossWeights {
            alpha: 0.7,
            beta: 0.0,
            temperature: 1.0,
        };
        cfg.k_steps = 3;

        let ds = group.members[0].dataset.clone();
        let mut oracle_phi = LinearModel::zeros(2, 4);
        for step in 0..cfg.k_steps {
            let mut batch_rng = RngStream::new(cfg.seed, Purpose::DataSubsample, 0, 0, step);
            let idx = subsample_data(&ds, cfg.privacy.s, &mut batch_rng).unwrap();
            let batch = ds.samples(&idx);
            // plain softmax-CE batch gradient, derived from scratch
            let mut grad = vec![0.0; oracle_phi.param_len()];
            for Sample { x, y } in &batch {
                let p = oracle_phi.forward(x).unwrap();
                for k in 0..2 {
                    let gk = p.as_slice()[k] - if k == *y { 1.0 } else { 0.0 };
                    for (j, xi) in x.iter().enumerate() {
                        grad[k * 4 + j] += gk * xi / batch.len() as f64;
                    }
                    grad[2 * 4 + k] += gk / batch.len() as f64;
                }
            }
            oracle_phi = sgd_step(&oracle_phi, &WeightVector(grad), cfg.eta_l).unwrap();
        }

        client_local_round(&mut group.members[0], 0, &cfg).unwrap();
        let got = group.members[0].phi.flatten();
        let want = oracle_phi.flatten();
        for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_mean_examples() {
        let v = WeightVector(vec![1.0, -2.0]);
        // single delta passes through scaled by eta_g
        let one = aggregate_mean(&[(0, v.clone())], 2.0).unwrap();
        assert_eq!(one.as_slice(), &[2.0, -4.0]);

        // opposite deltas cancel
        let zero = aggregate_mean(&[(0, v.clone()), (1, v.scale(-1.0))], 1.0).unwrap();
        assert!(zero.as_slice().iter().all(|&x| x == 0.0));

        // permuting input order changes nothing, bitwise
        let a = WeightVector(vec![0.1, 0.2, 0.3]);
        let b = WeightVector(vec![-0.7, 0.9, 1.3]);
        let c = WeightVector(vec![2.2, -1.1, 0.4]);
        let fwd = aggregate_mean(&[(0, a.clone()), (1, b.clone()), (2, c.clone())], 1.0).unwrap();
        let rev = aggregate_mean(&[(2, c), (0, a), (1, b)], 1.0).unwrap();
        assert_eq!(fwd, rev);

        assert!(matches!(
            aggregate_mean(&[], 1.0),
            Err(CotrainError::EmptyAggregation)
        ));
    }

    #[test]
    fn rotate_aggregator_examples() {
        let group = vec![3, 7, 9];
        assert_eq!(rotate_aggregator(&group, 123, 0), 3);
        let seq: Vec<usize> = (0..4).map(|t| rotate_aggregator(&group, t, 1)).collect();
        assert_eq!(seq, vec![3, 7, 9, 3]);
        for t in 0..20 {
            assert!(group.contains(&rotate_aggregator(&group, t, 5)));
        }
    }

    #[test]
    fn broadcast_synchronizes_participants() {
        let mut group = mk_group(5, 4, 2, 4);
        let cfg = mk_cfg(5, 3, 0.5);
        for round in 0..3 {
            run_group_round(&mut group, round, &cfg).unwrap();
            let global = group.global_theta.flatten();
            for m in &group.members {
                // l = 1: everyone participates and holds the global bitwise
                assert_eq!(m.theta.flatten(), global);
            }
        }
        // DP step ledger: rounds * K per client at l = 1
        for m in &group.members {
            assert_eq!(m.dp_step_count, 3 * cfg.k_steps);
        }
    }

    #[test]
    fn two_identical_clients_match_single_client_trajectory() {
        // Same data and full batches (s = 1 makes batches RNG-independent),
        // sigma = 0: a two-client group follows the same global trajectory
        // as a lone client, bitwise.
        let pool = gen_synthetic(2, 4, 5.0, 200, 7).unwrap();
        let spec = PartitionSpec::alpha(0.5, 1, 60);
        let ds = partition_alpha(&pool, &spec, 7).unwrap().remove(0);
        let init = LinearModel::zeros(2, 4);

        let mk_member = |id: usize| ClientState::new(id, 0, ds.clone(), &init);
        let mut pair = GroupState {
            group_id: 0,
            members: vec![mk_member(0), mk_member(1)],
            global_theta: init.clone(),
        };
        let mut solo = GroupState {
            group_id: 0,
            members: vec![mk_member(0)],
            global_theta: init.clone(),
        };
        let mut cfg = mk_cfg(7, 4, 0.0);
        cfg.privacy.s = 1.0;
        for round in 0..4 {
            run_group_round(&mut pair, round, &cfg).unwrap();
            run_group_round(&mut solo, round, &cfg).unwrap();
            assert_eq!(pair.global_theta.flatten(), solo.global_theta.flatten());
        }
    }

    #[test]
    fn byz_zero_member_shrinks_mean_by_count_ratio() {
        // k identical clean clients, one sends a zero delta: the mean shrinks
        // by (k-1)/k.
        let pool = gen_synthetic(2, 4, 5.0, 200, 9).unwrap();
        let spec = PartitionSpec::alpha(0.5, 1, 60);
        let ds = partition_alpha(&pool, &spec, 9).unwrap().remove(0);
        let init = LinearModel::zeros(2, 4);
        let k = 4usize;
        let members: Vec<ClientState> = (0..k)
            .map(|id| ClientState::new(id, 0, ds.clone(), &init))
            .collect();
        let mut cfg = mk_cfg(9, 1, 0.0);
        cfg.privacy.s = 1.0; // full batches so all honest deltas coincide

        let mut clean = GroupState {
            group_id: 0,
            members: members.clone(),
            global_theta: init.clone(),
        };
        run_group_round(&mut clean, 0, &cfg).unwrap();
        let clean_delta = clean.global_theta.flatten();

        let mut attacked_members = members;
        attacked_members[k - 1].malicious = Some(AttackKind::ByzZero);
        let mut attacked = GroupState {
            group_id: 0,
            members: attacked_members,
            global_theta: init,
        };
        run_group_round(&mut attacked, 0, &cfg).unwrap();
        let attacked_delta = attacked.global_theta.flatten();

        let ratio = (k - 1) as f64 / k as f64;
        for (a, c) in attacked_delta.as_slice().iter().zip(clean_delta.as_slice()) {
            assert!((a - c * ratio).abs() < 1e-12, "{a} vs {c}*{ratio}");
        }
    }

    #[test]
    fn reduction_identity_group_protocol_equals_fedavg() {
        // alpha = beta = 0, V = M, no defense: bitwise equal trajectories.
        let datasets = mk_dataset(11, 4);
        let init = LinearModel::zeros(2, 4);
        let mut cfg = mk_cfg(11, 10, 0.8);
        cfg.lw = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            temperature: 1.0,
        };
        cfg.privacy.l = 0.5;

        let mut group = GroupState {
            group_id: 0,
            members: datasets
                .iter()
                .enumerate()
                .map(|(i, ds)| ClientState::new(i, 0, ds.clone(), &init))
                .collect(),
            global_theta: init.clone(),
        };
        let mut fedavg_clients: Vec<ClientState> = datasets
            .iter()
            .enumerate()
            .map(|(i, ds)| ClientState::new(i, 0, ds.clone(), &init))
            .collect();

        for round in 0..cfg.rounds {
            run_group_round(&mut group, round, &cfg).unwrap();
        }
        let fedavg_reports = fedavg_baseline(&mut fedavg_clients, &cfg).unwrap();
        assert_eq!(fedavg_reports.len(), 10);

        for (a, b) in group.members.iter().zip(&fedavg_clients) {
            assert_eq!(a.theta.flatten(), b.theta.flatten(), "client {}", a.id);
        }
        assert_eq!(
            group.global_theta.flatten(),
            fedavg_clients[0].theta.flatten()
        );
    }

    #[test]
    fn fedavg_single_client_is_dp_local_training() {
        let datasets = mk_dataset(13, 1);
        let init = LinearModel::zeros(2, 4);
        let cfg = mk_cfg(13, 5, 0.5);

        let mut fedavg_clients = vec![ClientState::new(0, 0, datasets[0].clone(), &init)];
        fedavg_baseline(&mut fedavg_clients, &cfg).unwrap();

        // Independent single-client loop with the same streams. The server
        // applies eta_g * (theta_local - server), so mirror that arithmetic.
        let mut server = init.flatten();
        let phi = init.clone();
        let lw = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            temperature: 1.0,
        };
        for round in 0..cfg.rounds {
            let mut theta = LinearModel::from_flat(2, 4, &server).unwrap();
            for step in 0..cfg.k_steps {
                theta = dp_proxy_step(
                    &theta,
                    &phi,
                    &datasets[0],
                    &lw,
                    &cfg.privacy,
                    cfg.eta_l,
                    cfg.seed,
                    0,
                    round,
                    step,
                )
                .unwrap();
            }
            server = server.add(&theta.flatten().sub(&server).scale(cfg.eta_g));
        }
        assert_eq!(fedavg_clients[0].theta.flatten(), server);
    }

    #[test]
    fn local_baseline_learns_separated_data() {
        let pool = gen_synthetic(2, 4, 6.0, 400, 17).unwrap();
        let spec = PartitionSpec::alpha(0.0, 2, 100);
        let datasets = partition_alpha(&pool, &spec, 17).unwrap();
        let init = LinearModel::zeros(2, 4);
        let mut clients: Vec<ClientState> = datasets
            .into_iter()
            .enumerate()
            .map(|(i, ds)| ClientState::new(i, 0, ds, &init))
            .collect();
        let mut cfg = mk_cfg(17, 20, 0.0);
        cfg.eta_l = 1.0;
        let reports = local_baseline(&mut clients, &cfg).unwrap();
        let last = reports.last().unwrap();
        for (_, acc) in last.acc_phi.iter() {
            assert!(*acc > 0.9, "local accuracy {acc}");
        }
    }

    #[test]
    fn local_baseline_isolated_from_attacks() {
        let datasets = mk_dataset(19, 2);
        let init = LinearModel::zeros(2, 4);
        let cfg = mk_cfg(19, 3, 0.0);

        let mut clean: Vec<ClientState> = datasets
            .iter()
            .enumerate()
            .map(|(i, ds)| ClientState::new(i, 0, ds.clone(), &init))
            .collect();
        let mut attacked = clean.clone();
        attacked[1].malicious = Some(AttackKind::ByzRandom);

        let a = local_baseline(&mut clean, &cfg).unwrap();
        let b = local_baseline(&mut attacked, &cfg).unwrap();
        assert_eq!(
            a.last().unwrap().acc_phi.get(&0),
            b.last().unwrap().acc_phi.get(&0)
        );
    }

    #[test]
    fn defended_round_reports_filtered_ids() {
        let mut group = mk_group(23, 5, 2, 4);
        group.members[2].malicious = Some(AttackKind::ByzRandom);
        let mut cfg = mk_cfg(23, 1, 0.0);
        cfg.byz_random_sigma = 50.0;
        cfg.defense = DefenseConfig {
            kind: DefenseKind::Secure,
            m: None,
            f: None,
        };
        let outcome = run_group_round(&mut group, 0, &cfg).unwrap();
        assert!(outcome.filtered_ids.contains(&2), "{outcome:?}");
    }
}
