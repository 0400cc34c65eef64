//! Poisoning attacks and aggregation defenses.
//!
//! Attacks: label flipping (data poisoning, `y -> C-1-y`) and three byzantine
//! corruptions of the reported update (zero, random, flip around the global
//! model). Defenses: m-Krum, a 3-sigma anomaly filter on leave-one-out L2
//! scores, their combination ("secure aggregation"), and the ideal defense
//! that knows the malicious set exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ClientDataset;
use crate::model::WeightVector;
use crate::rng::RngStream;

#[derive(Debug, Error, PartialEq)]
pub enum RobustnessError {
    #[error("insufficient participants for m-Krum: need at least f+3 = {needed}, have {have}")]
    InsufficientParticipants { needed: usize, have: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// Attack families. The fraction/activation knobs live in [`AttackConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    LabelFlip,
    ByzZero,
    ByzRandom,
    ByzFlip,
}

impl AttackKind {
    /// Model-poisoning attacks that corrupt the reported update.
    pub fn is_byzantine(self) -> bool {
        matches!(
            self,
            AttackKind::ByzZero | AttackKind::ByzRandom | AttackKind::ByzFlip
        )
    }
}

/// When malicious behavior starts relative to group formation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackActivation {
    /// Corrupt the phase-1 similarity scoring as well.
    BeforeGrouping,
    /// Honest grouping, attacks begin with co-training.
    AfterGrouping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Fraction of clients marked malicious; `floor(fraction * M)` clients.
    pub malicious_fraction: f64,
    pub activation: AttackActivation,
    /// Noise scale of the byzantine-random attack.
    pub byz_random_sigma: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::None,
            malicious_fraction: 0.0,
            activation: AttackActivation::AfterGrouping,
            byz_random_sigma: 1.0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), RobustnessError> {
        if !(0.0..=0.5).contains(&self.malicious_fraction) {
            return Err(RobustnessError::InvalidParam(format!(
                "malicious_fraction {} outside [0, 0.5]",
                self.malicious_fraction
            )));
        }
        if !(self.byz_random_sigma > 0.0) {
            return Err(RobustnessError::InvalidParam(format!(
                "byz_random_sigma {} must be positive",
                self.byz_random_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    None,
    Mkrum,
    Anomaly,
    /// Anomaly filter first, m-Krum on the survivors.
    Secure,
    /// Oracle that excludes exactly the malicious participants.
    Ideal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    /// Updates m-Krum keeps; defaults to `n - f`.
    #[serde(default)]
    pub m: Option<usize>,
    /// Assumed malicious count; defaults to `floor(0.3 * n)`.
    #[serde(default)]
    pub f: Option<usize>,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig::none()
    }
}

impl DefenseConfig {
    pub fn none() -> Self {
        DefenseConfig {
            kind: DefenseKind::None,
            m: None,
            f: None,
        }
    }

    pub fn of_kind(kind: DefenseKind) -> Self {
        DefenseConfig { kind, m: None, f: None }
    }

    /// Resolves `(f, m)` for a round with `n` participants.
    pub fn resolve(&self, n: usize) -> (usize, usize) {
        let f = self.f.unwrap_or((0.3 * n as f64).floor() as usize);
        let m = self.m.unwrap_or(n.saturating_sub(f)).max(1);
        (f, m)
    }
}

/// Flips every label to `num_classes - 1 - y`; features untouched.
pub fn attack_label_flip(dataset: &mut ClientDataset) {
    dataset.flip_labels();
}

/// The byzantine-flip model `w_g + (w_g - w_l)`: the honest local model
/// reflected around the global model.
pub fn byz_flip_model(w_g: &WeightVector, w_l: &WeightVector) -> WeightVector {
    w_g.scale(2.0).sub(w_l)
}

/// Corrupts a reported update.
///
/// `update` is the honest delta the client would have sent. Zero and random
/// replace it outright. Flip reports the model `w_g + (w_g - w_l)` — the
/// real local model reflected around the global model `w_g` — transmitted as
/// the equivalent delta. The caller passes the round's global model as
/// `w_g`, which is exactly the delta reference `theta^(t-1)`, so the
/// reported delta is `w_g - w_l`.
pub fn attack_byzantine(
    update: &WeightVector,
    kind: AttackKind,
    w_g: &WeightVector,
    w_l: &WeightVector,
    rng: &mut RngStream,
    sigma: f64,
) -> Result<WeightVector, RobustnessError> {
    match kind {
        AttackKind::ByzZero => Ok(WeightVector::zeros(update.len())),
        AttackKind::ByzRandom => Ok(WeightVector(
            (0..update.len()).map(|_| sigma * rng.next_gaussian()).collect(),
        )),
        AttackKind::ByzFlip => {
            if w_g.len() != w_l.len() || w_g.len() != update.len() {
                return Err(RobustnessError::ShapeMismatch(format!(
                    "flip needs equal shapes, got {}, {}, {}",
                    update.len(),
                    w_g.len(),
                    w_l.len()
                )));
            }
            Ok(byz_flip_model(w_g, w_l).sub(w_g))
        }
        AttackKind::None | AttackKind::LabelFlip => Ok(update.clone()),
    }
}

/// m-Krum selection: for each update, score = sum of squared L2 distances to
/// its `n - f - 2` nearest peers; the `m` lowest-scoring indices win, ties
/// to the lowest index. Returned ascending.
pub fn mkrum(deltas: &[WeightVector], f: usize, m: usize) -> Result<Vec<usize>, RobustnessError> {
    let n = deltas.len();
    if n < f + 3 {
        return Err(RobustnessError::InsufficientParticipants {
            needed: f + 3,
            have: n,
        });
    }
    if m == 0 || m > n {
        return Err(RobustnessError::InvalidParam(format!(
            "m = {m} outside 1..={n}"
        )));
    }
    let neighbors = n - f - 2;
    let mut scores: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d = deltas[i].sub(&deltas[j]);
                d.as_slice().iter().map(|v| v * v).sum::<f64>()
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        scores.push((dists[..neighbors].iter().sum(), i));
    }
    scores.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut selected: Vec<usize> = scores[..m].iter().map(|&(_, i)| i).collect();
    selected.sort_unstable();
    Ok(selected)
}

fn coordinate_median(vectors: &[&WeightVector]) -> WeightVector {
    let dim = vectors[0].len();
    let mut median = vec![0.0; dim];
    let mut column = vec![0.0; vectors.len()];
    for (d, slot) in median.iter_mut().enumerate() {
        for (row, v) in vectors.iter().enumerate() {
            column[row] = v.as_slice()[d];
        }
        column.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = column.len();
        *slot = if n % 2 == 1 {
            column[n / 2]
        } else {
            0.5 * (column[n / 2 - 1] + column[n / 2])
        };
    }
    WeightVector(median)
}

/// 3-sigma anomaly filter. Each update's score is its L2 distance to the
/// coordinate-wise median of the *other* updates; an update is dropped when
/// its score exceeds `mean + 3*std` of the other updates' scores. Fewer than
/// three inputs pass through untouched.
pub fn anomaly_filter(deltas: &[WeightVector]) -> Vec<usize> {
    let n = deltas.len();
    if n < 3 {
        return (0..n).collect();
    }
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let others: Vec<&WeightVector> = deltas
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, d)| d)
                .collect();
            deltas[i].sub(&coordinate_median(&others)).l2_norm()
        })
        .collect();

    (0..n)
        .filter(|&i| {
            let others: Vec<f64> = scores
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, s)| *s)
                .collect();
            let mean = others.iter().sum::<f64>() / others.len() as f64;
            let var =
                others.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / others.len() as f64;
            scores[i] <= mean + 3.0 * var.sqrt()
        })
        .collect()
}

/// Indices kept by a defense, plus whether the secure pipeline had to fall
/// back to m-Krum on the unfiltered set.
#[derive(Debug, Clone, PartialEq)]
pub struct SecureAggOutcome {
    pub kept: Vec<usize>,
    pub anomaly_fallback: bool,
}

/// Applies the configured defense to a round's delta list.
///
/// `malicious` flags the participants, used only by the ideal defense.
pub fn secure_aggregate(
    deltas: &[WeightVector],
    defense: &DefenseConfig,
    malicious: &[bool],
) -> Result<SecureAggOutcome, RobustnessError> {
    let n = deltas.len();
    if malicious.len() != n {
        return Err(RobustnessError::ShapeMismatch(format!(
            "{n} deltas but {} malicious flags",
            malicious.len()
        )));
    }
    let all = || (0..n).collect::<Vec<usize>>();
    let outcome = |kept: Vec<usize>, fallback: bool| {
        Ok(SecureAggOutcome {
            kept,
            anomaly_fallback: fallback,
        })
    };
    match defense.kind {
        DefenseKind::None => outcome(all(), false),
        DefenseKind::Anomaly => outcome(anomaly_filter(deltas), false),
        DefenseKind::Mkrum => {
            let (f, m) = defense.resolve(n);
            outcome(mkrum(deltas, f, m.min(n))?, false)
        }
        DefenseKind::Secure => {
            let (f, m) = defense.resolve(n);
            let survivors = anomaly_filter(deltas);
            if survivors.len() >= f + 3 {
                let subset: Vec<WeightVector> =
                    survivors.iter().map(|&i| deltas[i].clone()).collect();
                let picked = mkrum(&subset, f, m.min(subset.len()))?;
                outcome(picked.into_iter().map(|i| survivors[i]).collect(), false)
            } else if n >= f + 3 {
                // Fail open to the stronger statistical filter on the
                // original set rather than aborting the round.
                outcome(mkrum(deltas, f, m.min(n))?, true)
            } else {
                // Group too small for m-Krum at all; keep the anomaly pass.
                outcome(survivors, true)
            }
        }
        DefenseKind::Ideal => outcome(
            (0..n).filter(|&i| !malicious[i]).collect(),
            false,
        ),
    }
}

/// Accuracy drop in percentage points relative to a clean baseline; negative
/// when the attacked run did better.
pub fn attack_impact(acc_baseline: f64, acc_attacked: f64) -> f64 {
    (acc_baseline - acc_attacked) * 100.0
}

/// Accuracy gap in points between the ideal defense and the evaluated one.
pub fn ideal_delta(acc_ideal: f64, acc_defended: f64) -> f64 {
    (acc_ideal - acc_defended) * 100.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, partition_alpha, PartitionSpec};
    use crate::rng::Purpose;

    fn scalars(vals: &[f64]) -> Vec<WeightVector> {
        vals.iter().map(|&v| WeightVector(vec![v])).collect()
    }

    #[test]
    fn label_flip_examples() {
        let pool = gen_synthetic(10, 2, 1.0, 20, 1).unwrap();
        let spec = PartitionSpec::alpha(1.0, 1, 50);
        let mut ds = partition_alpha(&pool, &spec, 1).unwrap().remove(0);
        let before: Vec<usize> = ds.data().labels().to_vec();
        attack_label_flip(&mut ds);
        for (b, a) in before.iter().zip(ds.data().labels()) {
            assert_eq!(*a, 9 - b); // 10 classes: 3 -> 6
        }
        // involution
        attack_label_flip(&mut ds);
        assert_eq!(ds.data().labels(), &before[..]);

        // histogram is exactly reversed
        let pool2 = gen_synthetic(2, 2, 1.0, 20, 2).unwrap();
        let spec2 = PartitionSpec::alpha(0.25, 1, 16);
        let mut ds2 = partition_alpha(&pool2, &spec2, 2).unwrap().remove(0);
        let count = |ds: &ClientDataset, y: usize| {
            ds.data().labels().iter().filter(|&&v| v == y).count()
        };
        let (c0, c1) = (count(&ds2, 0), count(&ds2, 1));
        attack_label_flip(&mut ds2);
        assert_eq!(count(&ds2, 0), c1);
        assert_eq!(count(&ds2, 1), c0);
    }

    #[test]
    fn byzantine_attack_examples() {
        let mut rng = RngStream::new(3, Purpose::ByzRandom, 0, 0, 0);
        let update = WeightVector(vec![0.5, -0.5]);

        // zero: any update -> 0
        let z = attack_byzantine(
            &update,
            AttackKind::ByzZero,
            &WeightVector(vec![1.0, 1.0]),
            &WeightVector(vec![0.0, 2.0]),
            &mut rng,
            1.0,
        )
        .unwrap();
        assert_eq!(z.as_slice(), &[0.0, 0.0]);

        // flip in model space: w_g=(1,1), w_l=(0,2) -> model (2,0)
        let model = byz_flip_model(&WeightVector(vec![1.0, 1.0]), &WeightVector(vec![0.0, 2.0]));
        assert_eq!(model.as_slice(), &[2.0, 0.0]);

        // the wire carries the equivalent delta: with theta_prev = w_g, the
        // reported model theta_prev + delta is exactly w_g + (w_g - w_l)
        let w_g = WeightVector(vec![1.0, 1.0]);
        let w_l = WeightVector(vec![0.0, 2.0]);
        let delta =
            attack_byzantine(&update, AttackKind::ByzFlip, &w_g, &w_l, &mut rng, 1.0).unwrap();
        let reported_model = w_g.add(&delta);
        assert_eq!(reported_model.as_slice(), model.as_slice());

        // flip with w_l = w_g reports the unchanged global: zero delta
        let noop =
            attack_byzantine(&update, AttackKind::ByzFlip, &w_g, &w_g, &mut rng, 1.0).unwrap();
        assert_eq!(noop.as_slice(), &[0.0, 0.0]);
        assert_eq!(w_g.add(&noop).as_slice(), w_g.as_slice());

        // flip shape mismatch errors
        assert!(attack_byzantine(
            &update,
            AttackKind::ByzFlip,
            &WeightVector(vec![1.0]),
            &w_l,
            &mut rng,
            1.0
        )
        .is_err());

        // random: deterministic given stream
        let r1 = attack_byzantine(
            &update,
            AttackKind::ByzRandom,
            &w_g,
            &w_l,
            &mut RngStream::new(3, Purpose::ByzRandom, 1, 2, 0),
            2.5,
        )
        .unwrap();
        let r2 = attack_byzantine(
            &update,
            AttackKind::ByzRandom,
            &w_g,
            &w_l,
            &mut RngStream::new(3, Purpose::ByzRandom, 1, 2, 0),
            2.5,
        )
        .unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.len(), 2);
    }

    #[test]
    fn mkrum_scalar_example() {
        // deltas (0.0, 0.1, 0.2, 10.0), f=1, m=2 -> scores (0.01, 0.01, 0.01,
        // 96.04), select {0, 1}
        let deltas = scalars(&[0.0, 0.1, 0.2, 10.0]);
        let selected = mkrum(&deltas, 1, 2).unwrap();
        assert_eq!(selected, vec![0, 1]);
    }

    #[test]
    fn mkrum_degenerate_and_invariances() {
        // all identical: scores all zero, first m indices win
        let same = scalars(&[2.0, 2.0, 2.0, 2.0, 2.0]);
        assert_eq!(mkrum(&same, 1, 3).unwrap(), vec![0, 1, 2]);

        // translation invariance
        let deltas = scalars(&[0.3, -0.1, 0.25, 5.0, 0.27]);
        let base = mkrum(&deltas, 1, 3).unwrap();
        let shifted: Vec<WeightVector> = deltas
            .iter()
            .map(|d| d.add(&WeightVector(vec![17.5])))
            .collect();
        assert_eq!(mkrum(&shifted, 1, 3).unwrap(), base);

        // n < f + 3 errors
        assert!(matches!(
            mkrum(&scalars(&[1.0, 2.0, 3.0]), 1, 1),
            Err(RobustnessError::InsufficientParticipants { .. })
        ));
    }

    #[test]
    fn mkrum_matches_brute_force_on_random_instances() {
        // Independent oracle: full pairwise matrix + naive selection sort.
        fn brute_force(deltas: &[WeightVector], f: usize, m: usize) -> Vec<usize> {
            let n = deltas.len();
            let mut dist = vec![vec![0.0f64; n]; n];
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for (a, b) in deltas[i].as_slice().iter().zip(deltas[j].as_slice()) {
                        s += (a - b) * (a - b);
                    }
                    dist[i][j] = s;
                }
            }
            let mut scored: Vec<(f64, usize)> = (0..n)
                .map(|i| {
                    let mut row: Vec<f64> =
                        (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
                    row.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    (row.iter().take(n - f - 2).sum(), i)
                })
                .collect();
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut out: Vec<usize> = scored[..m].iter().map(|&(_, i)| i).collect();
            out.sort_unstable();
            out
        }

        let mut rng = RngStream::new(31, Purpose::ByzRandom, 7, 0, 0);
        for _ in 0..200 {
            let f = rng.next_usize(3); // f <= 2
            let n = (f + 3) + rng.next_usize(8 - (f + 3) + 1); // n <= 8
            let m = 1 + rng.next_usize(n);
            let dim = 1 + rng.next_usize(4);
            let deltas: Vec<WeightVector> = (0..n)
                .map(|_| {
                    WeightVector((0..dim).map(|_| (rng.next_f64() - 0.5) * 20.0).collect())
                })
                .collect();
            assert_eq!(
                mkrum(&deltas, f, m).unwrap(),
                brute_force(&deltas, f, m),
                "n={n} f={f} m={m}"
            );
        }
    }

    #[test]
    fn anomaly_filter_examples() {
        // all equal -> all kept
        let same = scalars(&[1.0; 5]);
        assert_eq!(anomaly_filter(&same), vec![0, 1, 2, 3, 4]);

        // scalar example: the 50.0 outlier is flagged
        let deltas = scalars(&[1.0, 1.1, 0.9, 1.0, 50.0]);
        assert_eq!(anomaly_filter(&deltas), vec![0, 1, 2, 3]);

        // below three inputs: pass-through
        let two = scalars(&[1.0, 100.0]);
        assert_eq!(anomaly_filter(&two), vec![0, 1]);
    }

    #[test]
    fn secure_aggregate_pipeline() {
        // Clean, identical deltas: the anomaly layer keeps everyone; m-Krum
        // then selects its m = n - f = 4 lowest scores (ties to the lowest
        // index), which cannot distort the mean when deltas coincide.
        let clean = scalars(&[0.5; 5]);
        let no_mal = vec![false; 5];
        assert_eq!(anomaly_filter(&clean), vec![0, 1, 2, 3, 4]);
        let out = secure_aggregate(&clean, &DefenseConfig::of_kind(DefenseKind::Secure), &no_mal)
            .unwrap();
        assert_eq!(out.kept, vec![0, 1, 2, 3]);
        assert!(!out.anomaly_fallback);
        let kept_mean: f64 = out.kept.iter().map(|&i| clean[i].as_slice()[0]).sum::<f64>()
            / out.kept.len() as f64;
        assert_eq!(kept_mean, 0.5);

        // 30% byz-random among tight clean deltas: all malicious filtered
        let mut rng = RngStream::new(41, Purpose::ByzRandom, 0, 0, 0);
        let mut deltas = Vec::new();
        let mut mal = Vec::new();
        for i in 0..10 {
            if i < 3 {
                deltas.push(WeightVector(
                    (0..6).map(|_| 10.0 * rng.next_gaussian()).collect(),
                ));
                mal.push(true);
            } else {
                deltas.push(WeightVector(
                    (0..6).map(|_| 0.5 + 0.01 * rng.next_gaussian()).collect(),
                ));
                mal.push(false);
            }
        }
        let out =
            secure_aggregate(&deltas, &DefenseConfig::of_kind(DefenseKind::Secure), &mal).unwrap();
        assert!(out.kept.iter().all(|&i| !mal[i]), "kept {:?}", out.kept);

        // ideal keeps exactly the benign
        let out = secure_aggregate(&deltas, &DefenseConfig::of_kind(DefenseKind::Ideal), &mal)
            .unwrap();
        assert_eq!(out.kept, vec![3, 4, 5, 6, 7, 8, 9]);

        // ideal with no malicious clients is a no-op
        let out = secure_aggregate(&clean, &DefenseConfig::of_kind(DefenseKind::Ideal), &no_mal)
            .unwrap();
        assert_eq!(out.kept, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn secure_aggregate_fallback_path() {
        // An anomaly layer that drops too many survivors triggers m-Krum on
        // the originals. Construct 5 deltas where one is extreme; f=2 needs
        // 5 survivors but anomaly keeps 4 -> fallback.
        let deltas = scalars(&[1.0, 1.05, 0.95, 1.0, 500.0]);
        let cfg = DefenseConfig {
            kind: DefenseKind::Secure,
            m: Some(2),
            f: Some(2),
        };
        let out = secure_aggregate(&deltas, &cfg, &[false; 5]).unwrap();
        assert!(out.anomaly_fallback);
        assert_eq!(out.kept.len(), 2);
        assert!(!out.kept.contains(&4));
    }

    #[test]
    fn impact_metrics() {
        assert!((attack_impact(0.60, 0.45) - 15.0).abs() < 1e-12);
        assert_eq!(attack_impact(0.5, 0.5), 0.0);
        assert!(attack_impact(0.4, 0.5) < 0.0);

        assert_eq!(ideal_delta(0.5, 0.5), 0.0);
        assert!((ideal_delta(0.58, 0.50) - 8.0).abs() < 1e-12);
        assert!(ideal_delta(0.50, 0.58) < 0.0);
    }
}
