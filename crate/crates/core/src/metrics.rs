//! Statistics for comparing a surrogate against the reference system.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ks::PhysicalTrajectory;
use crate::tangent::{kaplan_yorke, Pairing};

pub const DEFAULT_BINS: usize = 90;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// First-order Wasserstein distance between two empirical distributions.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("wasserstein1 needs non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Contract("wasserstein1 samples must be finite".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        let sum: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        return Ok(sum / a.len() as f64);
    }
    // integrate |F_a - F_b| over the merged breakpoints
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut x = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - x);
        x = next;
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AngleDistribution {
    pub pairing: Option<Pairing>,
    pub samples: Vec<f64>,
    /// `n_bins + 1` edges in degrees.
    pub edges: Vec<f64>,
    /// Density per degree; integrates to one.
    pub density: Vec<f64>,
}

/// Normalized histogram over `[0, 90]` degrees; the last bin is closed.
pub fn histogram(samples: &[f64], n_bins: usize, pairing: Option<Pairing>) -> Result<AngleDistribution> {
    const LO: f64 = 0.0;
    const HI: f64 = 90.0;
    if n_bins == 0 {
        return Err(Error::Contract("histogram needs at least one bin".into()));
    }
    if samples.is_empty() {
        return Err(Error::Contract("histogram needs samples".into()));
    }
    if let Some(bad) = samples.iter().find(|s| !(LO..=HI).contains(*s)) {
        return Err(Error::Contract(format!("angle {bad} outside [0, 90]")));
    }
    let width = (HI - LO) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for &s in samples {
        let bin = (((s - LO) / width) as usize).min(n_bins - 1);
        counts[bin] += 1;
    }
    let norm = samples.len() as f64 * width;
    Ok(AngleDistribution {
        pairing,
        samples: samples.to_vec(),
        edges: (0..=n_bins).map(|i| LO + i as f64 * width).collect(),
        density: counts.iter().map(|&c| c as f64 / norm).collect(),
    })
}

/// Normalized error series `|u_hat - u| / sqrt(<|u|^2>)`, the mean taken over the reference.
pub fn error_series(reference: &[Vec<f64>], predicted: &[Vec<f64>]) -> Result<Vec<f64>> {
    if reference.len() != predicted.len() || reference.is_empty() {
        return Err(Error::Contract(format!(
            "error series needs equal non-empty lengths, got {} and {}",
            reference.len(),
            predicted.len()
        )));
    }
    let energy = reference
        .iter()
        .map(|u| u.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / reference.len() as f64;
    if !(energy > 0.0) {
        return Err(Error::Contract("reference has zero energy".into()));
    }
    let scale = energy.sqrt();
    reference
        .iter()
        .zip(predicted)
        .map(|(u, p)| {
            if u.len() != p.len() {
                return Err(Error::Contract("state widths differ".into()));
            }
            Ok(u.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / scale)
        })
        .collect()
}

/// First threshold crossing of an error series sampled every `dt` from time zero, in Lyapunov times.
pub fn horizon_from_errors(errors: &[f64], dt: f64, lambda1: f64, threshold: f64) -> Result<f64> {
    if !(lambda1 > 0.0) || !(dt > 0.0) {
        return Err(Error::Contract(format!("need lambda1 > 0 and dt > 0, got {lambda1}, {dt}")));
    }
    if errors.is_empty() {
        return Err(Error::Contract("empty error series".into()));
    }
    if errors[0] > threshold {
        return Ok(0.0);
    }
    for i in 1..errors.len() {
        if errors[i] > threshold {
            let (e0, e1) = (errors[i - 1], errors[i]);
            let frac = (threshold - e0) / (e1 - e0);
            return Ok(((i - 1) as f64 + frac) * dt * lambda1);
        }
    }
    Ok((errors.len() - 1) as f64 * dt * lambda1)
}

/// Prediction horizon for generic vector sequences sharing sampling `dt`.
pub fn horizon_from_series(
    reference: &[Vec<f64>],
    predicted: &[Vec<f64>],
    dt: f64,
    lambda1: f64,
    threshold: f64,
) -> Result<f64> {
    horizon_from_errors(&error_series(reference, predicted)?, dt, lambda1, threshold)
}

/// Time until the normalized error first exceeds `threshold`, in Lyapunov times.
pub fn prediction_horizon(
    reference: &PhysicalTrajectory,
    predicted: &PhysicalTrajectory,
    lambda1: f64,
    threshold: f64,
) -> Result<f64> {
    if reference.len() != predicted.len()
        || (reference.dt_sample - predicted.dt_sample).abs() > 1e-12 * reference.dt_sample
    {
        return Err(Error::Contract(format!(
            "mismatched sampling: {} samples at {} vs {} at {}",
            reference.len(),
            reference.dt_sample,
            predicted.len(),
            predicted.dt_sample
        )));
    }
    let r: Vec<Vec<f64>> = reference.states.iter().map(|s| s.u.clone()).collect();
    let p: Vec<Vec<f64>> = predicted.states.iter().map(|s| s.u.clone()).collect();
    horizon_from_series(&r, &p, reference.dt_sample, lambda1, threshold)
}

/// Exponents and CLV angle samples of one system.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StabilityAnalysis {
    pub lambdas: Vec<f64>,
    pub angles: BTreeMap<Pairing, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub le_reference: Vec<f64>,
    pub le_surrogate_mean: Vec<f64>,
    pub le_surrogate_std: Vec<f64>,
    /// Per-member spectra, truncated to the compared length.
    pub le_members: Vec<Vec<f64>>,
    pub dky_reference: f64,
    pub dky_surrogate_mean: f64,
    pub dky_surrogate_std: f64,
    pub wasserstein_per_pairing: BTreeMap<Pairing, f64>,
    /// Smallest unstable-stable angle in the reference and in the pooled ensemble.
    pub min_unstable_stable: (f64, f64),
    pub horizon_lt: Vec<f64>,
    pub horizon_median: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Aggregates an ensemble of surrogate analyses against the reference.
pub fn compare(
    reference: &StabilityAnalysis,
    members: &[StabilityAnalysis],
    horizons: &[f64],
) -> Result<ComparisonReport> {
    if members.is_empty() {
        return Err(Error::Contract("compare needs at least one surrogate member".into()));
    }
    let m = members
        .iter()
        .map(|s| s.lambdas.len())
        .min()
        .unwrap_or(0)
        .min(reference.lambdas.len());
    if m == 0 {
        return Err(Error::Contract("no exponents to compare".into()));
    }
    // order members canonically so the report does not depend on their order
    let mut le_members: Vec<Vec<f64>> = members.iter().map(|s| s.lambdas[..m].to_vec()).collect();
    le_members.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let (le_surrogate_mean, le_surrogate_std) = (0..m)
        .map(|i| mean_std(&le_members.iter().map(|l| l[i]).collect::<Vec<_>>()))
        .unzip();
    let dkys: Vec<f64> = members.iter().map(|s| kaplan_yorke(&s.lambdas).dimension).collect();
    let (dky_surrogate_mean, dky_surrogate_std) = mean_std(&dkys);

    let mut wasserstein_per_pairing = BTreeMap::new();
    for pairing in Pairing::ALL {
        let Some(ref_angles) = reference.angles.get(&pairing) else {
            continue;
        };
        let mut pooled: Vec<f64> = members
            .iter()
            .filter_map(|s| s.angles.get(&pairing))
            .flatten()
            .copied()
            .collect();
        pooled.sort_by(f64::total_cmp);
        if ref_angles.is_empty() || pooled.is_empty() {
            continue;
        }
        wasserstein_per_pairing.insert(pairing, wasserstein1(ref_angles, &pooled)?);
    }
    let min_of = |angles: Option<&Vec<f64>>| angles.map_or(f64::NAN, |a| a.iter().copied().fold(f64::INFINITY, f64::min));
    let pooled_min = members
        .iter()
        .map(|s| min_of(s.angles.get(&Pairing::UnstableStable)))
        .fold(f64::INFINITY, f64::min);

    let mut horizon_lt = horizons.to_vec();
    horizon_lt.sort_by(f64::total_cmp);
    Ok(ComparisonReport {
        le_reference: reference.lambdas[..m].to_vec(),
        le_surrogate_mean,
        le_surrogate_std,
        le_members,
        dky_reference: kaplan_yorke(&reference.lambdas).dimension,
        dky_surrogate_mean,
        dky_surrogate_std,
        wasserstein_per_pairing,
        min_unstable_stable: (min_of(reference.angles.get(&Pairing::UnstableStable)), pooled_min),
        horizon_median: median(&horizon_lt),
        horizon_lt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein1(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein1(&[1.0, 5.0, 3.0], &[3.0, 1.0, 5.0]).unwrap(), 0.0);
        assert!(wasserstein1(&[], &[1.0]).is_err());
        // unequal sizes: {0, 2} vs {1} transports half a unit each way
        assert!((wasserstein1(&[0.0, 2.0], &[1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((wasserstein1(&[0.0], &[0.0, 0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    fn sample_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0..100.0f64, 1..40)
    }

    proptest! {
        #[test]
        fn wasserstein_is_symmetric_and_nonnegative(a in sample_vec(), b in sample_vec()) {
            let ab = wasserstein1(&a, &b).unwrap();
            let ba = wasserstein1(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
        }

        #[test]
        fn wasserstein_triangle(a in sample_vec(), b in sample_vec(), c in sample_vec()) {
            let ab = wasserstein1(&a, &b).unwrap();
            let bc = wasserstein1(&b, &c).unwrap();
            let ac = wasserstein1(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9 * (1.0 + ab + bc));
        }

        #[test]
        fn wasserstein_shift(a in sample_vec(), c in -1e3..1e3f64) {
            let b: Vec<f64> = a.iter().map(|v| v + c).collect();
            let d = wasserstein1(&a, &b).unwrap();
            prop_assert!((d - c.abs()).abs() <= 1e-9 * (1.0 + c.abs()));
        }

        #[test]
        fn wasserstein_duplicated_samples_are_identical(a in sample_vec()) {
            let doubled: Vec<f64> = a.iter().chain(&a).copied().collect();
            prop_assert!(wasserstein1(&a, &doubled).unwrap() < 1e-9);
        }

        #[test]
        fn horizon_monotone_in_threshold(
            errors in prop::collection::vec(0.0..2.0f64, 1..50),
            t1 in 0.0..2.0f64,
            dt in 0.0..1.0f64,
        ) {
            let t2 = t1 + dt;
            let h1 = horizon_from_errors(&errors, 0.25, 0.05, t1).unwrap();
            let h2 = horizon_from_errors(&errors, 0.25, 0.05, t2).unwrap();
            prop_assert!(h2 >= h1);
        }
    }

    #[test]
    fn histogram_single_bin() {
        let h = histogram(&[45.0; 7], 9, None).unwrap();
        let nonzero: Vec<_> = h.density.iter().filter(|&&d| d > 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert!((h.density[4] - 0.1).abs() < 1e-15);
        assert!(histogram(&[91.0], 9, None).is_err());
        assert!(histogram(&[1.0], 0, None).is_err());
    }

    #[test]
    fn histogram_uniform_flat_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<f64> = (0..100_000).map(|_| rng.random_range(0.0..=90.0)).collect();
        let h = histogram(&s, 9, None).unwrap();
        let flat = 1.0 / 90.0;
        assert!(h.density.iter().all(|d| (d - flat).abs() / flat < 0.05));
        let integral: f64 = h.density.iter().zip(h.edges.windows(2)).map(|(d, e)| d * (e[1] - e[0])).sum();
        assert!((integral - 1.0).abs() < 1e-9);
        let fine = histogram(&s, DEFAULT_BINS, None).unwrap();
        assert!((fine.density.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn horizon_examples() {
        let h = horizon_from_errors(&[0.1, 0.6], 0.05, 0.045, 0.5).unwrap();
        assert!((h - 0.04 * 0.045).abs() < 1e-12);
        assert_eq!(horizon_from_errors(&[0.7, 0.1], 0.05, 0.045, 0.5).unwrap(), 0.0);
        assert!((horizon_from_errors(&[0.0; 11], 0.1, 0.05, 0.5).unwrap() - 0.05).abs() < 1e-15);
        assert!(horizon_from_errors(&[0.0], 0.1, 0.0, 0.5).is_err());
    }

    #[test]
    fn prediction_horizon_on_trajectories() {
        use crate::ks::PhysicalState;
        let states: Vec<PhysicalState> = (0..20)
            .map(|i| PhysicalState::new(vec![(i as f64).sin() + 2.0, 1.0], i as f64 * 0.25))
            .collect();
        let r = PhysicalTrajectory {
            length: 22.0,
            dt_sample: 0.25,
            states,
        };
        assert!((prediction_horizon(&r, &r, 0.05, 0.5).unwrap() - 19.0 * 0.25 * 0.05).abs() < 1e-12);
        let mut offset = r.clone();
        offset.states.iter_mut().for_each(|s| s.u[0] += 10.0);
        assert_eq!(prediction_horizon(&r, &offset, 0.05, 0.5).unwrap(), 0.0);
        let mut resampled = r.clone();
        resampled.dt_sample = 0.5;
        assert!(prediction_horizon(&r, &resampled, 0.05, 0.5).is_err());
    }

    fn analysis(lambdas: &[f64], angles: &[f64]) -> StabilityAnalysis {
        StabilityAnalysis {
            lambdas: lambdas.to_vec(),
            angles: Pairing::ALL.iter().map(|&p| (p, angles.to_vec())).collect(),
        }
    }

    #[test]
    fn compare_degenerate_ensemble() {
        let r = analysis(&[0.05, 0.0, -0.1, -0.5], &[10.0, 20.0, 80.0]);
        let rep = compare(&r, std::slice::from_ref(&r), &[1.5]).unwrap();
        assert_eq!(rep.le_surrogate_mean, r.lambdas);
        assert!(rep.le_surrogate_std.iter().all(|&s| s == 0.0));
        assert!(rep.wasserstein_per_pairing.values().all(|&w| w == 0.0));
        assert_eq!(rep.wasserstein_per_pairing.len(), 3);
        assert_eq!(rep.dky_reference, rep.dky_surrogate_mean);
        assert_eq!(rep.horizon_median, 1.5);
        assert!(compare(&r, &[], &[]).is_err());
    }

    #[test]
    fn compare_truncates_and_is_permutation_invariant() {
        let r = analysis(&[0.05, 0.0, -0.1, -0.5], &[10.0, 20.0]);
        let a = analysis(&[0.04, 0.01, -0.2], &[11.0, 30.0]);
        let b = analysis(&[0.06, -0.01, -0.15, -0.4, -0.9], &[12.0, 5.0, 40.0]);
        let ab = compare(&r, &[a.clone(), b.clone()], &[1.0, 2.0]).unwrap();
        let ba = compare(&r, &[b, a], &[2.0, 1.0]).unwrap();
        assert_eq!(ab, ba);
        assert_eq!(ab.le_reference.len(), 3);
        assert!((ab.le_surrogate_mean[0] - 0.05).abs() < 1e-15);
        assert_eq!(ab.min_unstable_stable, (10.0, 5.0));
    }
}
