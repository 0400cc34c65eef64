//! Decentralized group formation from one DP warm-up epoch.
//!
//! Every client takes a single differentially private epoch on the proxy
//! path from the common initial weights, then scores its L1 distance to a
//! random set of peers. Mutual nearest neighbors pair up, leftovers join
//! their nearest unassigned peer, and pairs merge greedily under
//! single-linkage until groups reach size `V`. The separation diagnostic
//! reports how far apart warm-up weights of different data distributions
//! land compared to same-distribution ones.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cotrain::{dp_proxy_step, CotrainError};
use crate::data::ClientDataset;
use crate::model::{LinearModel, LossWeights, WeightVector};
use crate::privacy::PrivacyParams;
use crate::rng::{Purpose, RngStream, WARMUP_ROUND};

#[derive(Debug, Error)]
pub enum GroupingError {
    #[error("weight vectors have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("H = {h} outside 1..={max}")]
    BadH { h: usize, max: usize },
    #[error("group size V = {v} exceeds client count {m}")]
    VTooLarge { v: usize, m: usize },
    #[error("group size V must be at least 2, got {0}")]
    VTooSmall(usize),
    #[error("empty training set for client {0}")]
    EmptyTrainingSet(usize),
    #[error("separation report needs >= 2 distributions with >= 2 clients each")]
    InsufficientClients,
    #[error("warm-up failed: {0}")]
    Warmup(#[from] CotrainError),
    #[error("invalid grouping input: {0}")]
    Invalid(String),
}

/// L1 distance between two flat weight vectors.
pub fn dissimilarity(a: &WeightVector, b: &WeightVector) -> Result<f64, GroupingError> {
    if a.len() != b.len() {
        return Err(GroupingError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .sum())
}

/// Steps in one warm-up epoch: the training split covered once at the DP
/// batch size.
pub fn warmup_epoch_steps(r_train: usize, s: f64) -> u64 {
    if r_train == 0 {
        return 0;
    }
    let batch = ((s * r_train as f64).floor() as usize).max(1);
    r_train.div_ceil(batch) as u64
}

/// Warm-up with an explicit step count; zero steps returns the initial
/// weights untouched.
#[allow(clippy::too_many_arguments)]
pub fn warmup_for_steps(
    dataset: &ClientDataset,
    init: &LinearModel,
    lw: &LossWeights,
    privacy: &PrivacyParams,
    eta_l: f64,
    seed: u64,
    client_id: usize,
    steps: u64,
) -> Result<LinearModel, GroupingError> {
    if steps == 0 {
        return Ok(init.clone());
    }
    if dataset.train_idx().is_empty() {
        return Err(GroupingError::EmptyTrainingSet(client_id));
    }
    // Local model frozen at the shared init; only the proxy trains.
    let mut theta = init.clone();
    for step in 0..steps {
        theta = dp_proxy_step(
            &theta,
            init,
            dataset,
            lw,
            privacy,
            eta_l,
            seed,
            client_id,
            WARMUP_ROUND,
            step,
        )?;
    }
    Ok(theta)
}

/// One DP epoch on the proxy path from the common initial weights; the local
/// model stays untouched. Returns the model whose flattened weights feed the
/// similarity scoring.
pub fn warmup_one_epoch(
    dataset: &ClientDataset,
    init: &LinearModel,
    lw: &LossWeights,
    privacy: &PrivacyParams,
    eta_l: f64,
    seed: u64,
    client_id: usize,
) -> Result<LinearModel, GroupingError> {
    let r_train = dataset.train_idx().len();
    if r_train == 0 {
        return Err(GroupingError::EmptyTrainingSet(client_id));
    }
    let steps = warmup_epoch_steps(r_train, privacy.s);
    warmup_for_steps(dataset, init, lw, privacy, eta_l, seed, client_id, steps)
}

/// Symmetric store of scored pairwise dissimilarities, keyed `(i, j)` with
/// `i < j`.
#[derive(Debug, Clone, Default)]
pub struct SimilarityCache {
    clients: usize,
    scores: BTreeMap<(usize, usize), f64>,
}

impl SimilarityCache {
    pub fn new(clients: usize) -> Self {
        SimilarityCache {
            clients,
            scores: BTreeMap::new(),
        }
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn key(i: usize, j: usize) -> (usize, usize) {
        if i < j {
            (i, j)
        } else {
            (j, i)
        }
    }

    pub fn insert(&mut self, i: usize, j: usize, value: f64) {
        assert_ne!(i, j, "no self-similarity");
        self.scores.insert(Self::key(i, j), value);
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.scores.get(&Self::key(i, j)).copied()
    }

    /// Scored peers of `i` in ascending dissimilarity, ties by peer index.
    pub fn neighbors(&self, i: usize) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = (0..self.clients)
            .filter(|&j| j != i)
            .filter_map(|j| self.get(i, j).map(|d| (j, d)))
            .collect();
        out.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        out
    }

    /// Nearest scored peer of `i`, ties to the lowest index.
    pub fn nearest(&self, i: usize) -> Option<usize> {
        self.neighbors(i).first().map(|&(j, _)| j)
    }
}

/// Each client scores its L1 distance to `h` randomly selected peers;
/// scoring fills both directions, so every client ends up with at least `h`
/// scored neighbors.
pub fn sample_and_score(
    weights: &[WeightVector],
    h: usize,
    seed: u64,
) -> Result<SimilarityCache, GroupingError> {
    let m = weights.len();
    if m < 2 {
        return Ok(SimilarityCache::new(m));
    }
    if h == 0 || h > m - 1 {
        return Err(GroupingError::BadH { h, max: m - 1 });
    }
    let mut cache = SimilarityCache::new(m);
    for i in 0..m {
        let mut rng = RngStream::new(seed, Purpose::PeerSelection, i as u64, 0, 0);
        // draw from the m-1 others, skipping self by index shift
        let peers = rng.sample_indices(m - 1, h);
        for p in peers {
            let j = if p >= i { p + 1 } else { p };
            if cache.get(i, j).is_none() {
                cache.insert(i, j, dissimilarity(&weights[i], &weights[j])?);
            }
        }
    }
    Ok(cache)
}

/// Step 2 of group formation: mutual nearest neighbors pair first, remaining
/// clients join their nearest unassigned peer, anything still left pairs
/// randomly, and a final odd client joins the nearest existing pair as a
/// temporary triple. `M = 1` yields a singleton group.
pub fn mutual_pairing(
    cache: &SimilarityCache,
    seed: u64,
) -> Result<Vec<Vec<usize>>, GroupingError> {
    let m = cache.clients();
    if m == 0 {
        return Ok(Vec::new());
    }
    if m == 1 {
        return Ok(vec![vec![0]]);
    }

    let mut assigned = vec![false; m];
    let mut groups: Vec<Vec<usize>> = Vec::new();

    // mutual nearest neighbors
    for i in 0..m {
        if assigned[i] {
            continue;
        }
        if let Some(k) = cache.nearest(i) {
            if !assigned[k] && cache.nearest(k) == Some(i) {
                assigned[i] = true;
                assigned[k] = true;
                let mut pair = vec![i, k];
                pair.sort_unstable();
                groups.push(pair);
            }
        }
    }

    // unassigned clients join their most similar unassigned peer
    for i in 0..m {
        if assigned[i] {
            continue;
        }
        let candidate = cache
            .neighbors(i)
            .into_iter()
            .find(|&(j, _)| !assigned[j]);
        if let Some((k, _)) = candidate {
            assigned[i] = true;
            assigned[k] = true;
            let mut pair = vec![i, k];
            pair.sort_unstable();
            groups.push(pair);
        }
    }

    // whoever is left pairs randomly
    let mut leftovers: Vec<usize> = (0..m).filter(|&i| !assigned[i]).collect();
    let mut rng = RngStream::new(seed, Purpose::RandomPairing, 0, 0, 0);
    rng.shuffle(&mut leftovers);
    while leftovers.len() >= 2 {
        let a = leftovers.pop().unwrap();
        let b = leftovers.pop().unwrap();
        let mut pair = vec![a, b];
        pair.sort_unstable();
        assigned[a] = true;
        assigned[b] = true;
        groups.push(pair);
    }

    // a single odd client joins the nearest existing pair
    if let Some(last) = leftovers.pop() {
        if groups.is_empty() {
            groups.push(vec![last]);
        } else {
            let mut best: Option<(f64, usize)> = None;
            for (gi, g) in groups.iter().enumerate() {
                let link = g
                    .iter()
                    .filter_map(|&member| cache.get(last, member))
                    .fold(f64::INFINITY, f64::min);
                let better = match best {
                    None => true,
                    Some((cur, _)) => link < cur,
                };
                if better {
                    best = Some((link, gi));
                }
            }
            let gi = best.map(|(_, gi)| gi).unwrap_or(0);
            groups[gi].push(last);
            groups[gi].sort_unstable();
        }
    }

    groups.sort_by_key(|g| g[0]);
    Ok(groups)
}

/// Final client partition plus its symmetric matrix view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    clients: usize,
    groups: Vec<Vec<usize>>,
}

impl GroupAssignment {
    /// Validates that `groups` is a disjoint cover of `0..clients`.
    pub fn new(clients: usize, mut groups: Vec<Vec<usize>>) -> Result<Self, GroupingError> {
        for g in groups.iter_mut() {
            g.sort_unstable();
        }
        groups.sort_by_key(|g| g.first().copied().unwrap_or(usize::MAX));
        let mut seen = vec![false; clients];
        for g in &groups {
            for &c in g {
                if c >= clients {
                    return Err(GroupingError::Invalid(format!(
                        "client {c} out of range {clients}"
                    )));
                }
                if seen[c] {
                    return Err(GroupingError::Invalid(format!("client {c} in two groups")));
                }
                seen[c] = true;
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(GroupingError::Invalid("groups do not cover all clients".into()));
        }
        Ok(GroupAssignment { clients, groups })
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn into_groups(self) -> Vec<Vec<usize>> {
        self.groups
    }

    /// Size of the single undersized group, when the client count is not a
    /// multiple of the target size.
    pub fn remainder_group_size(&self, v: usize) -> Option<usize> {
        self.groups.iter().map(|g| g.len()).find(|&s| s != v)
    }

    /// Symmetric boolean membership matrix with a zero diagonal.
    pub fn matrix_view(&self) -> Vec<Vec<bool>> {
        let mut mat = vec![vec![false; self.clients]; self.clients];
        for g in &self.groups {
            for &a in g {
                for &b in g {
                    if a != b {
                        mat[a][b] = true;
                    }
                }
            }
        }
        mat
    }
}

fn linkage(cache: &SimilarityCache, a: &[usize], b: &[usize]) -> f64 {
    // Single linkage: maximum similarity between any members is the minimum
    // pairwise dissimilarity. Unscored pairs count as unknown (infinite).
    let mut best = f64::INFINITY;
    for &x in a {
        for &y in b {
            if let Some(d) = cache.get(x, y) {
                best = best.min(d);
            }
        }
    }
    best
}

/// Step 3: greedily merge the two most similar groups whose combined size
/// stays within `V`, then normalize so at most one undersized group remains.
pub fn merge_groups(
    initial: Vec<Vec<usize>>,
    cache: &SimilarityCache,
    v: usize,
) -> Result<GroupAssignment, GroupingError> {
    let m: usize = initial.iter().map(|g| g.len()).sum();
    if v < 2 {
        return Err(GroupingError::VTooSmall(v));
    }
    if v > m {
        return Err(GroupingError::VTooLarge { v, m });
    }
    let mut groups = initial;

    // Greedy single-linkage merging under the size cap. Ties break toward
    // the lowest leading client ids.
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..groups.len() {
            for j in (i + 1)..groups.len() {
                if groups[i].len() + groups[j].len() > v {
                    continue;
                }
                let d = linkage(cache, &groups[i], &groups[j]);
                let candidate = (d, groups[i][0], groups[j][0]);
                let better = match best {
                    None => true,
                    Some((bd, bi, bj)) => {
                        (candidate.0, candidate.1, candidate.2) < (bd, groups[bi][0], groups[bj][0])
                    }
                };
                if better {
                    best = Some((d, i, j));
                }
            }
        }
        match best {
            Some((_, i, j)) => {
                let merged_in = groups.swap_remove(j);
                groups[i].extend(merged_in);
                groups[i].sort_unstable();
            }
            None => break,
        }
    }

    // Normalize the remainder: while two undersized groups exist, fill the
    // larger from the other, moving the members most similar to it first.
    loop {
        let undersized: Vec<usize> = (0..groups.len())
            .filter(|&i| groups[i].len() < v)
            .collect();
        if undersized.len() < 2 {
            break;
        }
        // pick the most similar undersized pair
        let mut best: Option<(f64, usize, usize)> = None;
        for (a_pos, &i) in undersized.iter().enumerate() {
            for &j in undersized.iter().skip(a_pos + 1) {
                let d = linkage(cache, &groups[i], &groups[j]);
                let better = match best {
                    None => true,
                    Some((bd, _, _)) => d < bd,
                };
                if better {
                    best = Some((d, i, j));
                }
            }
        }
        let (_, i, j) = best.unwrap();
        // fill the larger group to exactly v from the smaller
        let (target, source) = if groups[i].len() >= groups[j].len() {
            (i, j)
        } else {
            (j, i)
        };
        let need = v - groups[target].len();
        let take = need.min(groups[source].len());
        let target_members = groups[target].clone();
        let mut movers: Vec<(f64, usize)> = groups[source]
            .iter()
            .map(|&c| {
                let d = target_members
                    .iter()
                    .filter_map(|&t| cache.get(c, t))
                    .fold(f64::INFINITY, f64::min);
                (d, c)
            })
            .collect();
        movers.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let moving: Vec<usize> = movers[..take].iter().map(|&(_, c)| c).collect();
        groups[source].retain(|c| !moving.contains(c));
        groups[target].extend(moving);
        groups[target].sort_unstable();
        groups.retain(|g| !g.is_empty());
    }

    GroupAssignment::new(m, groups)
}

/// Ratio of cross-distribution to within-distribution mean L1 distance of
/// warm-up weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub mean_intra_l1: f64,
    pub mean_inter_l1: f64,
    /// `mean_inter_l1 / mean_intra_l1`; larger means the distributions are
    /// easier to tell apart after one epoch.
    pub ratio: f64,
}

/// Compares warm-up weights within vs across ground-truth distributions.
pub fn separation_report(
    weights_by_distribution: &[Vec<WeightVector>],
) -> Result<SeparationReport, GroupingError> {
    if weights_by_distribution.len() < 2
        || weights_by_distribution.iter().any(|d| d.len() < 2)
    {
        return Err(GroupingError::InsufficientClients);
    }
    let mut intra = Vec::new();
    for dist in weights_by_distribution {
        for i in 0..dist.len() {
            for j in (i + 1)..dist.len() {
                intra.push(dissimilarity(&dist[i], &dist[j])?);
            }
        }
    }
    let mut inter = Vec::new();
    for a in 0..weights_by_distribution.len() {
        for b in (a + 1)..weights_by_distribution.len() {
            for wa in &weights_by_distribution[a] {
                for wb in &weights_by_distribution[b] {
                    inter.push(dissimilarity(wa, wb)?);
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mean_intra_l1 = mean(&intra);
    let mean_inter_l1 = mean(&inter);
    Ok(SeparationReport {
        mean_intra_l1,
        mean_inter_l1,
        ratio: mean_inter_l1 / mean_intra_l1.max(1e-300),
    })
}
