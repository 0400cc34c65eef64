//! Differential privacy mechanism for proxy-model updates.
//!
//! Per-sample gradients are clipped to an L2 ball of radius `C`, averaged,
//! and perturbed with Gaussian noise of per-coordinate standard deviation
//! `(2C / sR) * sigma_g`. The noise level `sigma_g` comes from a closed-form
//! calibration against the privacy budget; client and data subsampling
//! amplify the budget.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ClientDataset;
use crate::model::WeightVector;
use crate::rng::RngStream;

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("invalid privacy parameter: {0}")]
    InvalidParam(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("non-finite gradient")]
    NonFiniteGradient,
}

/// Everything governing the DP mechanism for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    /// Privacy budget epsilon for the whole training run.
    pub epsilon: f64,
    /// Privacy budget delta; conventionally `1/R`.
    pub delta: f64,
    /// L2 clipping bound for per-sample gradients.
    pub clip_c: f64,
    /// Calibrated Gaussian noise level.
    pub sigma_g: f64,
    /// Data subsampling ratio in (0, 1].
    pub s: f64,
    /// Client subsampling ratio in (0, 1].
    pub l: f64,
    /// Local optimization steps per round.
    pub k: u64,
    /// Communication rounds.
    pub t: u64,
    /// Number of gradients aggregated before release; 1 in the peer-to-peer
    /// setting where raw per-client gradients are exchanged.
    pub m_prime: u64,
    /// Multiplicative constant hidden by the calibration bound.
    pub calib_const: f64,
}

impl PrivacyParams {
    /// Builds params and fills `sigma_g` from [`calibrate_sigma`].
    #[allow(clippy::too_many_arguments)]
    pub fn calibrated(
        epsilon: f64,
        delta: f64,
        clip_c: f64,
        s: f64,
        l: f64,
        k: u64,
        t: u64,
        m_prime: u64,
        calib_const: f64,
    ) -> Result<Self, PrivacyError> {
        if !(clip_c > 0.0) {
            return Err(PrivacyError::InvalidParam(format!(
                "clip_c must be positive, got {clip_c}"
            )));
        }
        if !(s > 0.0 && s <= 1.0) {
            return Err(PrivacyError::InvalidParam(format!(
                "s must be in (0,1], got {s}"
            )));
        }
        if !(l > 0.0 && l <= 1.0) {
            return Err(PrivacyError::InvalidParam(format!(
                "l must be in (0,1], got {l}"
            )));
        }
        let sigma_g = calibrate_sigma(epsilon, delta, s, l, t, k, m_prime, calib_const)?;
        Ok(PrivacyParams {
            epsilon,
            delta,
            clip_c,
            s,
            l,
            k,
            t,
            m_prime,
            calib_const,
            sigma_g,
        })
    }

    /// A noiseless variant used by non-DP baselines and tests.
    pub fn noiseless(clip_c: f64, s: f64, l: f64, k: u64, t: u64) -> Self {
        PrivacyParams {
            epsilon: f64::INFINITY,
            delta: 0.0,
            clip_c,
            sigma_g: 0.0,
            s,
            l,
            k,
            t,
            m_prime: 1,
            calib_const: 1.0,
        }
    }
}

/// Clips a gradient to the L2 ball of radius `c`:
/// `g / max(1, ||g||_2 / c)`. Direction is preserved and vectors already
/// inside the ball pass through unchanged.
pub fn clip_gradient(g: &WeightVector, c: f64) -> Result<WeightVector, PrivacyError> {
    if !(c > 0.0) {
        return Err(PrivacyError::InvalidParam(format!(
            "clip bound must be positive, got {c}"
        )));
    }
    if !g.is_finite() {
        return Err(PrivacyError::NonFiniteGradient);
    }
    let scale = 1.0 / (g.l2_norm() / c).max(1.0);
    Ok(g.scale(scale))
}

/// Mean of pre-clipped per-sample gradients plus Gaussian noise with
/// per-coordinate standard deviation `(2c / s_r) * sigma_g`.
///
/// `s_r` is the subsampled batch size `floor(s * R)` that was used to draw
/// the batch; the caller guarantees every input is already clipped.
pub fn noisy_mean(
    per_sample_grads: &[WeightVector],
    c: f64,
    sigma_g: f64,
    s_r: f64,
    rng: &mut RngStream,
) -> Result<WeightVector, PrivacyError> {
    if per_sample_grads.is_empty() {
        return Err(PrivacyError::EmptyInput("per-sample gradient list"));
    }
    if !(s_r > 0.0) {
        return Err(PrivacyError::InvalidParam(format!(
            "sR must be positive, got {s_r}"
        )));
    }
    let dim = per_sample_grads[0].len();
    let mut out = vec![0.0; dim];
    for g in per_sample_grads {
        if g.len() != dim {
            return Err(PrivacyError::InvalidParam(format!(
                "gradient length {} differs from {dim}",
                g.len()
            )));
        }
        for (acc, v) in out.iter_mut().zip(g.as_slice()) {
            *acc += v;
        }
    }
    let inv = 1.0 / s_r;
    let noise_std = 2.0 * c * inv * sigma_g;
    for acc in out.iter_mut() {
        *acc *= inv;
        if noise_std > 0.0 {
            *acc += noise_std * rng.next_gaussian();
        }
    }
    Ok(WeightVector(out))
}

/// Closed-form noise calibration:
///
/// ```text
/// sigma_g = c * s * sqrt(l*T*K * ln(2*T*l/delta) * ln(2/delta)) / (eps * sqrt(M'))
/// ```
///
/// with natural logarithms and `c = calib_const` exposing the constant the
/// asymptotic bound hides.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_sigma(
    epsilon: f64,
    delta: f64,
    s: f64,
    l: f64,
    t: u64,
    k: u64,
    m_prime: u64,
    calib_const: f64,
) -> Result<f64, PrivacyError> {
    if !(epsilon > 0.0) {
        return Err(PrivacyError::InvalidParam(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PrivacyError::InvalidParam(format!(
            "delta must be in (0,1), got {delta}"
        )));
    }
    for (name, v) in [("s", s), ("l", l), ("calib_const", calib_const)] {
        if !(v > 0.0) {
            return Err(PrivacyError::InvalidParam(format!(
                "{name} must be positive, got {v}"
            )));
        }
    }
    if t == 0 || k == 0 || m_prime == 0 {
        return Err(PrivacyError::InvalidParam(
            "T, K and M' must be at least 1".into(),
        ));
    }
    let t = t as f64;
    let k = k as f64;
    let m_prime = m_prime as f64;
    let inner = l * t * k * (2.0 * t * l / delta).ln() * (2.0 / delta).ln();
    Ok(calib_const * s * inner.sqrt() / (epsilon * m_prime.sqrt()))
}

/// Uniform subset of `floor(l * |group|)` clients, at least one, returned in
/// ascending id order.
pub fn subsample_clients(
    group: &[usize],
    l: f64,
    rng: &mut RngStream,
) -> Result<Vec<usize>, PrivacyError> {
    if group.is_empty() {
        return Err(PrivacyError::EmptyInput("client group"));
    }
    if !(l > 0.0 && l <= 1.0) {
        return Err(PrivacyError::InvalidParam(format!(
            "l must be in (0,1], got {l}"
        )));
    }
    let mut sorted = group.to_vec();
    sorted.sort_unstable();
    let take = ((l * sorted.len() as f64).floor() as usize).max(1);
    if take >= sorted.len() {
        return Ok(sorted);
    }
    let mut picked: Vec<usize> = rng
        .sample_indices(sorted.len(), take)
        .into_iter()
        .map(|i| sorted[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Uniform batch of `floor(s * |train|)` training rows, at least one,
/// returned as dataset row indices in draw order.
pub fn subsample_data(
    dataset: &ClientDataset,
    s: f64,
    rng: &mut RngStream,
) -> Result<Vec<usize>, PrivacyError> {
    let train = dataset.train_idx();
    if train.is_empty() {
        return Err(PrivacyError::EmptyInput("training split"));
    }
    if !(s > 0.0 && s <= 1.0) {
        return Err(PrivacyError::InvalidParam(format!(
            "s must be in (0,1], got {s}"
        )));
    }
    let take = ((s * train.len() as f64).floor() as usize).max(1);
    if take >= train.len() {
        return Ok(train.to_vec());
    }
    Ok(rng
        .sample_indices(train.len(), take)
        .into_iter()
        .map(|i| train[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, partition_alpha, PartitionSpec};
    use crate::rng::Purpose;

    #[test]
    fn clip_examples() {
        let g = WeightVector(vec![3.0, 4.0]);
        let clipped = clip_gradient(&g, 1.0).unwrap();
        assert!((clipped.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((clipped.as_slice()[1] - 0.8).abs() < 1e-15);

        // norm exactly C stays untouched
        let at_bound = clip_gradient(&g, 5.0).unwrap();
        assert_eq!(at_bound, g);

        // zero in, zero out
        let z = WeightVector::zeros(4);
        assert_eq!(clip_gradient(&z, 1.0).unwrap(), z);

        // non-finite rejected
        let bad = WeightVector(vec![f64::NAN]);
        assert_eq!(
            clip_gradient(&bad, 1.0).unwrap_err(),
            PrivacyError::NonFiniteGradient
        );
    }

    #[test]
    fn clip_norm_bound_holds_on_random_vectors() {
        let mut rng = RngStream::new(2, Purpose::DpNoise, 9, 0, 0);
        for _ in 0..500 {
            let dim = 1 + rng.next_usize(128);
            let g = WeightVector(
                (0..dim)
                    .map(|_| (rng.next_f64() - 0.5) * 200.0)
                    .collect(),
            );
            let c = 0.1 + rng.next_f64() * 5.0;
            let clipped = clip_gradient(&g, c).unwrap();
            assert!(clipped.l2_norm() <= c * (1.0 + 1e-12));
            // direction preserved
            if g.l2_norm() > 0.0 {
                let cos = g
                    .as_slice()
                    .iter()
                    .zip(clipped.as_slice())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / (g.l2_norm() * clipped.l2_norm()).max(1e-300);
                assert!(cos > 1.0 - 1e-9);
            }
        }
    }

    #[test]
    fn noisy_mean_noiseless_is_exact_mean() {
        let grads = vec![
            WeightVector(vec![1.0, 2.0]),
            WeightVector(vec![3.0, -2.0]),
            WeightVector(vec![-1.0, 0.0]),
        ];
        let mut rng = RngStream::new(0, Purpose::DpNoise, 0, 0, 0);
        let mean = noisy_mean(&grads, 1.0, 0.0, 3.0, &mut rng).unwrap();
        assert!((mean.as_slice()[0] - 1.0).abs() < 1e-12);
        assert!((mean.as_slice()[1] - 0.0).abs() < 1e-12);

        // singleton with sR = 1 passes through
        let g = clip_gradient(&WeightVector(vec![5.0, 0.0]), 1.0).unwrap();
        let single = noisy_mean(std::slice::from_ref(&g), 1.0, 0.0, 1.0, &mut rng).unwrap();
        assert_eq!(single, g);

        assert_eq!(
            noisy_mean(&[], 1.0, 0.0, 1.0, &mut rng).unwrap_err(),
            PrivacyError::EmptyInput("per-sample gradient list")
        );
    }

    #[test]
    fn noisy_mean_std_matches_formula() {
        // sigma_g=1, C=1, sR=100 -> per-coordinate std 0.02
        let zeros = vec![WeightVector::zeros(8)];
        let mut samples = Vec::new();
        for trial in 0..2000u64 {
            let mut rng = RngStream::new(77, Purpose::DpNoise, trial, 0, 0);
            let out = noisy_mean(&zeros, 1.0, 1.0, 100.0, &mut rng).unwrap();
            samples.extend_from_slice(out.as_slice());
        }
        let n = samples.len() as f64;
        let mean: f64 = samples.iter().sum::<f64>() / n;
        let var: f64 = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!(
            (std - 0.02).abs() / 0.02 < 0.1,
            "std {std} not within 10% of 0.02"
        );
    }

    #[test]
    fn noisy_mean_deterministic_given_stream() {
        let grads = vec![WeightVector(vec![0.5, -0.5, 0.1])];
        let a = noisy_mean(
            &grads,
            1.0,
            2.0,
            10.0,
            &mut RngStream::new(5, Purpose::DpNoise, 1, 2, 3),
        )
        .unwrap();
        let b = noisy_mean(
            &grads,
            1.0,
            2.0,
            10.0,
            &mut RngStream::new(5, Purpose::DpNoise, 1, 2, 3),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn calibrate_sigma_reference_value() {
        // s=1, l=1, T=100, K=1, delta=0.005, eps=15, M'=1, c=1 -> 5.3120
        let sigma = calibrate_sigma(15.0, 0.005, 1.0, 1.0, 100, 1, 1, 1.0).unwrap();
        assert!((sigma - 5.3120141115106305).abs() < 1e-9, "sigma {sigma}");
    }

    #[test]
    fn calibrate_sigma_scalings() {
        let base = calibrate_sigma(10.0, 0.01, 0.5, 0.5, 50, 2, 1, 1.0).unwrap();
        let eps_doubled = calibrate_sigma(20.0, 0.01, 0.5, 0.5, 50, 2, 1, 1.0).unwrap();
        assert!((eps_doubled - base / 2.0).abs() < 1e-12);

        let m_quadrupled = calibrate_sigma(10.0, 0.01, 0.5, 0.5, 50, 2, 4, 1.0).unwrap();
        assert!((m_quadrupled - base / 2.0).abs() < 1e-12);
    }

    #[test]
    fn calibrate_sigma_monotonicity() {
        let grid = [1.0, 2.0, 4.0, 8.0, 16.0];
        let at = |eps: f64, t: u64, k: u64, l: f64, m: u64| {
            calibrate_sigma(eps, 0.005, 0.5, l, t, k, m, 1.0).unwrap()
        };
        // decreasing in epsilon and M'
        for w in grid.windows(2) {
            assert!(at(w[1], 100, 1, 0.5, 1) < at(w[0], 100, 1, 0.5, 1));
        }
        for m in [1u64, 2, 4, 8, 16].windows(2) {
            assert!(at(10.0, 100, 1, 0.5, m[1]) < at(10.0, 100, 1, 0.5, m[0]));
        }
        // increasing in T, K, l
        for t in [10u64, 20, 40, 80, 160].windows(2) {
            assert!(at(10.0, t[1], 1, 0.5, 1) > at(10.0, t[0], 1, 0.5, 1));
        }
        for k in [1u64, 2, 4, 8, 16].windows(2) {
            assert!(at(10.0, 100, k[1], 0.5, 1) > at(10.0, 100, k[0], 0.5, 1));
        }
        for l in [0.1, 0.2, 0.4, 0.8, 1.0f64].windows(2) {
            assert!(at(10.0, 100, 1, l[1], 1) > at(10.0, 100, 1, l[0], 1));
        }
    }

    #[test]
    fn calibrate_sigma_rejects_bad_inputs() {
        assert!(calibrate_sigma(15.0, 1.0, 1.0, 1.0, 100, 1, 1, 1.0).is_err());
        assert!(calibrate_sigma(15.0, 1.5, 1.0, 1.0, 100, 1, 1, 1.0).is_err());
        assert!(calibrate_sigma(-1.0, 0.01, 1.0, 1.0, 100, 1, 1, 1.0).is_err());
        assert!(calibrate_sigma(15.0, 0.01, 0.0, 1.0, 100, 1, 1, 1.0).is_err());
        assert!(calibrate_sigma(15.0, 0.01, 1.0, 1.0, 0, 1, 1, 1.0).is_err());
    }

    #[test]
    fn subsample_clients_examples() {
        let group = vec![9, 3, 7, 5, 1, 2, 8, 4];
        let mut rng = RngStream::new(1, Purpose::ClientSubsample, 0, 0, 0);

        let full = subsample_clients(&group, 1.0, &mut rng).unwrap();
        assert_eq!(full, vec![1, 2, 3, 4, 5, 7, 8, 9]);

        let half = subsample_clients(
            &group,
            0.5,
            &mut RngStream::new(1, Purpose::ClientSubsample, 0, 1, 0),
        )
        .unwrap();
        assert_eq!(half.len(), 4);
        assert!(half.windows(2).all(|w| w[0] < w[1]));
        assert!(half.iter().all(|id| group.contains(id)));

        // determinism
        let again = subsample_clients(
            &group,
            0.5,
            &mut RngStream::new(1, Purpose::ClientSubsample, 0, 1, 0),
        )
        .unwrap();
        assert_eq!(half, again);

        assert!(subsample_clients(&[], 0.5, &mut rng).is_err());
    }

    #[test]
    fn subsample_data_examples() {
        let pool = gen_synthetic(2, 3, 1.0, 100, 7).unwrap();
        let spec = PartitionSpec::alpha(1.0, 2, 50);
        let clients = partition_alpha(&pool, &spec, 7).unwrap();
        let ds = &clients[0];
        let r_train = ds.train_idx().len();

        let mut rng = RngStream::new(7, Purpose::DataSubsample, 0, 0, 0);
        let full = subsample_data(ds, 1.0, &mut rng).unwrap();
        assert_eq!(full, ds.train_idx().to_vec());

        let batch = subsample_data(ds, 0.1, &mut rng).unwrap();
        assert_eq!(batch.len(), (0.1 * r_train as f64).floor() as usize);
        assert!(batch.iter().all(|i| ds.train_idx().contains(i)));
    }
}
