//! Helpers shared by the integration suites: relative comparisons, random
//! kernel profiles, and random mixture geometry.
#![allow(dead_code)]

use kscl::kernel::KernelProfile;
use rand::Rng;

/// Relative comparison with an absolute floor of one, the convention used by
/// the closed-form versus generic agreement checks.
pub fn assert_rel(a: f64, b: f64, tol: f64, what: &str) {
    let denom = a.abs().max(b.abs()).max(1.0);
    assert!(
        (a - b).abs() <= tol * denom,
        "{what}: {a} vs {b} (rel err {:.3e})",
        (a - b).abs() / denom
    );
}

fn sign<R: Rng>(rng: &mut R) -> f64 {
    if rng.gen_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

/// Random kernel profile on the sloped branch. The curvature combination
/// 5f'/(8f) - f''/(2f') is sampled directly and bounded away from zero so the
/// candidate locations it produces stay well-conditioned.
pub fn random_sloped_kernel<R: Rng>(rng: &mut R, tau: f64) -> KernelProfile {
    let f_tau = rng.gen_range(0.5..3.0);
    let f1 = rng.gen_range(0.4..1.5) * sign(rng);
    let coef = rng.gen_range(0.8..3.0) * sign(rng);
    let f2 = 2.0 * f1 * (5.0 * f1 / (8.0 * f_tau) - coef);
    let f0 = f_tau + rng.gen_range(0.5..4.0);
    KernelProfile::new(tau, f0, f_tau, f1, f2, None).unwrap()
}

/// Random sloped kernel with a prescribed curvature-to-slope ratio magnitude.
/// Spikes driven by covariance-shape differences scale with f''/f', so large
/// ratios are the regime where those spikes detach from the bulk.
pub fn random_curved_kernel<R: Rng>(rng: &mut R, tau: f64, lo: f64, hi: f64) -> KernelProfile {
    let f_tau = rng.gen_range(0.8..2.5);
    let f1 = rng.gen_range(0.3..1.0) * sign(rng);
    let f2 = rng.gen_range(lo..hi) * sign(rng) * f1;
    let f0 = f_tau + rng.gen_range(0.5..4.0);
    KernelProfile::new(tau, f0, f_tau, f1, f2, None).unwrap()
}

/// Random kernel profile on the vanishing-slope branch.
pub fn random_flat_kernel<R: Rng>(rng: &mut R, tau: f64) -> KernelProfile {
    let f_tau = rng.gen_range(0.5..3.0);
    let f2 = rng.gen_range(0.5..3.0) * sign(rng);
    let f0 = rng.gen_range(0.8..5.0);
    KernelProfile::new(tau, f0, f_tau, 0.0, f2, None).unwrap()
}

/// Random class sizes summing to n, every class at least `min_frac` of n.
pub fn random_sizes<R: Rng>(rng: &mut R, k: usize, n: usize, min_frac: f64) -> Vec<usize> {
    let min = ((n as f64) * min_frac).ceil() as usize;
    loop {
        let mut cuts: Vec<usize> = (0..k - 1).map(|_| rng.gen_range(1..n)).collect();
        cuts.sort_unstable();
        cuts.push(n);
        let mut sizes = Vec::with_capacity(k);
        let mut prev = 0;
        for &c in &cuts {
            sizes.push(c - prev);
            prev = c;
        }
        if sizes.iter().all(|&s| s >= min) {
            return sizes;
        }
    }
}

/// First and second moments of a discrete spectral measure.
pub fn measure_moments(atoms: &[(f64, f64)]) -> (f64, f64) {
    let m1 = atoms.iter().map(|&(u, w)| w * u).sum();
    let m2 = atoms.iter().map(|&(u, w)| w * u * u).sum();
    (m1, m2)
}
