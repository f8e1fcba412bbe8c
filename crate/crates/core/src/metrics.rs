//! Water-filling power allocation and the evaluation metrics: NMSE, actual
//! and upper-bound spectral efficiency, and energy efficiency.

use serde::{Deserialize, Serialize};

use crate::{CMatrix, Error, Result, C64};

/// Relative tolerance on `‖p‖₁ = P_t` at which bisection stops.
pub const WATERFILL_TOLERANCE: f64 = 1e-9;
const WATERFILL_MAX_ITER: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerAllocation {
    /// Per-stream power in watts.
    pub p: Vec<f64>,
    /// Water level in watts.
    pub tau: f64,
    /// Indices with `p_s > 0`, ascending.
    pub active_set: Vec<usize>,
}

impl PowerAllocation {
    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }
}

fn levels(gains: &[f64], noise: f64, tau: f64) -> Vec<f64> {
    gains
        .iter()
        .map(|&g| if g > 0.0 { (tau - noise / g).max(0.0) } else { 0.0 })
        .collect()
}

/// Water-filling over per-stream gains `λ_s²`: `p_s = (τ − σ²/λ_s²)⁺` with the
/// water level `τ` found by bisection so that `Σ p_s = P_t`.
///
/// Streams with zero gain get no power and take no part in the search.
pub fn waterfill(gains: &[f64], noise: f64, total_power: f64) -> Result<PowerAllocation> {
    if total_power.is_nan() || total_power <= 0.0 {
        return Err(Error::Validation(vec![format!("total power must be positive, got {total_power}")]));
    }
    if noise.is_nan() || noise < 0.0 {
        return Err(Error::Validation(vec![format!("noise power must be nonnegative, got {noise}")]));
    }
    if let Some((index, &value)) = gains.iter().enumerate().find(|(_, g)| g.is_nan() || **g < 0.0) {
        return Err(Error::NegativePower { index, value });
    }
    let floor = gains
        .iter()
        .filter(|&&g| g > 0.0)
        .map(|&g| noise / g)
        .fold(f64::INFINITY, f64::min);
    if !floor.is_finite() {
        return Err(Error::AllGainsZero);
    }

    // Σp(τ) is continuous and nondecreasing, zero at `lo` and ≥ P_t at `hi`.
    let (mut lo, mut hi) = (floor, floor + total_power);
    let mut tau = hi;
    for _ in 0..WATERFILL_MAX_ITER {
        tau = 0.5 * (lo + hi);
        let sum: f64 = levels(gains, noise, tau).iter().sum();
        if (sum - total_power).abs() <= WATERFILL_TOLERANCE * total_power {
            break;
        }
        if sum < total_power {
            lo = tau;
        } else {
            hi = tau;
        }
    }
    let p = levels(gains, noise, tau);
    let active_set = p.iter().enumerate().filter(|(_, &x)| x > 0.0).map(|(i, _)| i).collect();
    Ok(PowerAllocation { p, tau, active_set })
}

/// `‖αH − Λ‖²_F / ‖Λ‖²_F` for one realization. A zero target gives `0` when
/// `αH` is zero too and `∞` otherwise.
pub fn nmse_single(alpha: C64, h: &CMatrix, target: &[f64]) -> f64 {
    let num = crate::optimizer::residual_energy(alpha, h, target);
    let den: f64 = target.iter().map(|l| l * l).sum();
    if den == 0.0 {
        if num == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        num / den
    }
}

/// Mean per-trial NMSE over `(α, H, Λ)` triples.
pub fn nmse<'a, I>(trials: I) -> f64
where
    I: IntoIterator<Item = (C64, &'a CMatrix, &'a [f64])>,
{
    let (mut sum, mut n) = (0.0, 0usize);
    for (alpha, h, target) in trials {
        sum += nmse_single(alpha, h, target);
        n += 1;
    }
    if n == 0 { 0.0 } else { sum / n as f64 }
}

/// Actual spectral efficiency with inter-stream interference from the
/// off-diagonal entries of `αH`.
pub fn spectral_efficiency(alpha: C64, h: &CMatrix, p: &[f64], noise: f64) -> f64 {
    assert_eq!(h.nrows(), p.len(), "H rows must match the power vector");
    assert_eq!(h.ncols(), p.len(), "H columns must match the power vector");
    let gain = |s: usize, t: usize| (alpha * h[(s, t)]).norm_sqr();
    (0..p.len())
        .map(|s| {
            let interference: f64 = (0..p.len()).filter(|&t| t != s).map(|t| p[t] * gain(s, t)).sum();
            (1.0 + p[s] * gain(s, s) / (interference + noise)).log2()
        })
        .sum()
}

/// Interference-free spectral efficiency `Σ log₂(1 + p_s λ_s² / σ²)`.
pub fn se_upper_bound(target: &[f64], p: &[f64], noise: f64) -> f64 {
    assert_eq!(target.len(), p.len());
    target.iter().zip(p).map(|(l, ps)| (1.0 + ps * l * l / noise).log2()).sum()
}

/// `(η_SE / P_t, η_SE^ub / P_t)`.
pub fn energy_efficiency(se: f64, se_ub: f64, total_power: f64) -> (f64, f64) {
    (se / total_power, se_ub / total_power)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nmse: f64,
    pub se: f64,
    pub se_ub: f64,
    pub ee: f64,
    pub ee_ub: f64,
}

impl MetricsReport {
    /// Water-fill over the target gains, then score the actual channel with
    /// that allocation.
    pub fn evaluate(alpha: C64, h: &CMatrix, target: &[f64], noise: f64, total_power: f64) -> Result<(Self, PowerAllocation)> {
        let gains: Vec<f64> = target.iter().map(|l| l * l).collect();
        let alloc = waterfill(&gains, noise, total_power)?;
        let se = spectral_efficiency(alpha, h, &alloc.p, noise);
        let se_ub = se_upper_bound(target, &alloc.p, noise);
        let (ee, ee_ub) = energy_efficiency(se, se_ub, total_power);
        let report = MetricsReport { nmse: nmse_single(alpha, h, target), se, se_ub, ee, ee_ub };
        Ok((report, alloc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Try every nonempty active set; for each, solve `τ` in closed form and
    /// keep the one whose implied powers are all positive and whose inactive
    /// streams sit at or above the water level.
    fn exhaustive(gains: &[f64], noise: f64, total: f64) -> Vec<f64> {
        let n = gains.len();
        for mask in 1u32..(1 << n) {
            let set: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
            if set.iter().any(|&i| gains[i] <= 0.0) {
                continue;
            }
            let tau = (total + set.iter().map(|&i| noise / gains[i]).sum::<f64>()) / set.len() as f64;
            let ok_active = set.iter().all(|&i| tau - noise / gains[i] > 0.0);
            let ok_inactive = (0..n)
                .filter(|i| !set.contains(i))
                .all(|i| gains[i] <= 0.0 || tau <= noise / gains[i]);
            if ok_active && ok_inactive {
                return (0..n).map(|i| if set.contains(&i) { tau - noise / gains[i] } else { 0.0 }).collect();
            }
        }
        panic!("no consistent active set");
    }

    #[test]
    fn equal_gains_split_evenly() {
        let a = waterfill(&[2.0, 2.0], 0.1, 1.0).unwrap();
        assert!((a.p[0] - 0.5).abs() < 1e-9 && (a.p[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn weak_stream_below_water() {
        let a = waterfill(&[1.0, 0.25], 1.0, 1.0).unwrap();
        assert!((a.p[0] - 1.0).abs() < 1e-9);
        assert_eq!(a.p[1], 0.0);
        assert!((a.tau - 2.0).abs() < 1e-9);
        assert_eq!(a.active_set, vec![0]);
    }

    #[test]
    fn negligible_noise_is_nearly_uniform() {
        // Gains of a reference-scale target against 1e-14 W noise.
        let gains = [3e-9, 2e-9, 1.5e-9, 1e-9, 8e-10, 5e-10];
        let a = waterfill(&gains, 1e-14, 0.1).unwrap();
        for p in &a.p {
            assert!((p / (0.1 / 6.0) - 1.0).abs() < 0.01, "{:?}", a.p);
        }
    }

    #[test]
    fn zero_gains() {
        assert!(matches!(waterfill(&[0.0, 0.0], 1.0, 1.0), Err(Error::AllGainsZero)));
        let a = waterfill(&[0.0, 1.0], 1.0, 1.0).unwrap();
        assert_eq!(a.p[0], 0.0);
        assert!((a.p[1] - 1.0).abs() < 1e-9);
        assert!(waterfill(&[1.0], 1.0, 0.0).is_err());
        assert!(matches!(waterfill(&[1.0, -1.0], 1.0, 1.0), Err(Error::NegativePower { index: 1, .. })));
    }

    #[test]
    fn matches_exhaustive_active_sets() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let n = rng.random_range(1..=8);
            let gains: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.random_range(-3.0..1.0))).collect();
            let noise = 10f64.powf(rng.random_range(-2.0..0.0));
            let total = 10f64.powf(rng.random_range(-2.0..1.0));
            let a = waterfill(&gains, noise, total).unwrap();
            let oracle = exhaustive(&gains, noise, total);
            assert!((a.total() - total).abs() <= 1e-9 * total);
            for (x, y) in a.p.iter().zip(&oracle) {
                assert!((x - y).abs() <= 1e-8 * total, "{:?} vs {oracle:?}", a.p);
            }
        }
    }

    #[test]
    fn beats_random_feasible_allocations() {
        let target = [1.2, 0.9, 0.5, 0.2];
        let gains: Vec<f64> = target.iter().map(|l| l * l).collect();
        let (noise, total) = (0.3, 2.0);
        let best = se_upper_bound(&target, &waterfill(&gains, noise, total).unwrap().p, noise);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let w: Vec<f64> = (0..4).map(|_| -rng.random::<f64>().ln()).collect();
            let sum: f64 = w.iter().sum();
            let p: Vec<f64> = w.iter().map(|x| x / sum * total).collect();
            assert!(se_upper_bound(&target, &p, noise) <= best + 1e-9);
        }
    }

    proptest! {
        #[test]
        fn kkt_and_permutation(
            gains in prop::collection::vec(1e-3f64..10.0, 1..8),
            noise in 1e-3f64..2.0,
            total in 1e-2f64..10.0,
            rot in 0usize..8,
        ) {
            let a = waterfill(&gains, noise, total).unwrap();
            prop_assert!((a.total() - total).abs() <= 1e-9 * total);
            for (i, &g) in gains.iter().enumerate() {
                if a.p[i] > 0.0 {
                    prop_assert_eq!(a.p[i], a.tau - noise / g);
                } else {
                    prop_assert!(a.tau <= noise / g + 1e-9 * total);
                }
            }
            let k = rot % gains.len();
            let mut rotated = gains.clone();
            rotated.rotate_left(k);
            let b = waterfill(&rotated, noise, total).unwrap();
            let mut expect = a.p.clone();
            expect.rotate_left(k);
            for (x, y) in b.p.iter().zip(&expect) {
                prop_assert!((x - y).abs() <= 1e-8 * total);
            }
        }
    }

    #[test]
    fn nmse_examples() {
        let target = [2.0, 1.0];
        let h = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![C64::new(2.0, 0.0), C64::new(1.0, 0.0)]));
        assert_eq!(nmse_single(C64::new(1.0, 0.0), &h, &target), 0.0);
        assert_eq!(nmse_single(C64::new(0.0, 0.0), &h, &target), 1.0);
        // Per-trial ratios 0.1 and 0.3 average to 0.2.
        let t = [1.0];
        let h1 = CMatrix::from_element(1, 1, C64::new(1.0 - 0.1f64.sqrt(), 0.0));
        let h2 = CMatrix::from_element(1, 1, C64::new(1.0 - 0.3f64.sqrt(), 0.0));
        let one = C64::new(1.0, 0.0);
        let m = nmse([(one, &h1, &t[..]), (one, &h2, &t[..])]);
        assert!((m - 0.2).abs() < 1e-12);
    }

    #[test]
    fn se_examples() {
        let one = C64::new(1.0, 0.0);
        let h = CMatrix::from_element(1, 1, C64::new(0.0, 2.0));
        assert!((spectral_efficiency(one, &h, &[0.25], 1.0) - 1.0).abs() < 1e-12);

        let h = CMatrix::from_element(2, 2, one);
        assert!((spectral_efficiency(one, &h, &[1.0, 1.0], 1.0) - 2.0 * 1.5f64.log2()).abs() < 1e-12);

        let target = [1.5, 0.7, 0.1];
        let diag = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(3, target.iter().map(|&l| C64::new(l, 0.0))));
        let p = [0.4, 0.3, 0.3];
        let a = spectral_efficiency(one, &diag, &p, 0.05);
        assert!((a - se_upper_bound(&target, &p, 0.05)).abs() < 1e-12);

        assert_eq!(se_upper_bound(&[0.0, 0.0], &[0.5, 0.5], 1.0), 0.0);
        let (ee1, _) = energy_efficiency(4.0, 5.0, 1.0);
        let (ee2, _) = energy_efficiency(4.0, 5.0, 2.0);
        assert_eq!(ee1, 2.0 * ee2);
    }

    #[test]
    fn report_on_exact_fit() {
        let target = vec![1.0, 0.5];
        let h = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![C64::new(1.0, 0.0), C64::new(0.5, 0.0)]));
        let (r, alloc) = MetricsReport::evaluate(C64::new(1.0, 0.0), &h, &target, 0.1, 1.0).unwrap();
        assert_eq!(r.nmse, 0.0);
        assert!((r.se - r.se_ub).abs() < 1e-12);
        assert_eq!(r.ee, r.se / 1.0);
        assert_eq!(alloc.p.len(), 2);
    }
}
