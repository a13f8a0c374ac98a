//! Coupled fixed point for the per-class Stieltjes transforms.
//!
//! For z off the real support (or with positive imaginary part) the system
//! g_a = -1/(c0 (z - s_a(g))), with s_a(g) = (1/p) tr C_a (I + sum_b c_b g_b C_b)^{-1},
//! is iterated from the large-z asymptote g_a = -1/(c0 z). The same iteration is
//! used on the real axis, where all quantities stay real.

use super::SpectralContext;
use crate::error::{Error, Result};
use num_complex::Complex64;

/// Sup-norm update tolerance and defining-system residual bound.
pub const SOLVER_TOL: f64 = 1e-12;
/// Iteration cap.
pub const SOLVER_CAP: usize = 10_000;
/// Number of non-contracting steps tolerated before damping kicks in.
const DAMP_AFTER: usize = 100;
const DAMPING: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct StieltjesSolution {
    pub z: Complex64,
    /// Per-class transforms g_a(z).
    pub g: Vec<Complex64>,
    /// g_circ(z) = c0 sum_a c_a g_a(z): Stieltjes transform of the bulk measure.
    pub g_circ: Complex64,
    /// Sup-norm residual of the defining system at the returned iterate.
    pub residual: f64,
    pub iterations: usize,
}

pub(crate) struct IterateOutcome {
    pub g: Vec<Complex64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs the damped fixed point. Never fails on non-convergence; callers decide
/// what residual they require.
pub(crate) fn iterate_g(
    ctx: &SpectralContext,
    z: Complex64,
    tol: f64,
    cap: usize,
    warm: Option<&[Complex64]>,
) -> Result<IterateOutcome> {
    let k = ctx.k();
    let mut g: Vec<Complex64> = match warm {
        Some(w) => w.to_vec(),
        None => vec![-(z * ctx.c0).inv(); k],
    };
    let mut cg = vec![Complex64::default(); k];
    let mut damping = 0.0;
    let mut non_contracting = 0usize;
    let mut prev_diff = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cap {
        iterations = it + 1;
        for a in 0..k {
            cg[a] = g[a] * ctx.c[a];
        }
        let s = ctx.engine.s_traces(&cg)?;
        let mut diff: f64 = 0.0;
        for a in 0..k {
            let target = -((z - s[a]) * ctx.c0).inv();
            let next = target * (1.0 - damping) + g[a] * damping;
            diff = diff.max((next - g[a]).norm());
            g[a] = next;
        }
        if !diff.is_finite() {
            return Err(Error::Solver { z, residual: f64::INFINITY, iterations });
        }
        if diff < tol {
            converged = true;
            break;
        }
        if diff > prev_diff {
            non_contracting += 1;
            if non_contracting >= DAMP_AFTER {
                damping = DAMPING;
            }
        }
        prev_diff = diff;
    }
    for a in 0..k {
        cg[a] = g[a] * ctx.c[a];
    }
    let s = ctx.engine.s_traces(&cg)?;
    let mut residual: f64 = 0.0;
    for a in 0..k {
        residual = residual.max((g[a] + ((z - s[a]) * ctx.c0).inv()).norm());
    }
    Ok(IterateOutcome { g, residual, iterations, converged })
}

/// Solves the system at a point where full accuracy is attainable (off-support
/// real points or points with non-negligible imaginary part) and enforces the
/// residual bound.
pub fn solve_g(ctx: &SpectralContext, z: Complex64) -> Result<StieltjesSolution> {
    solve_g_warm(ctx, z, None)
}

pub(crate) fn solve_g_warm(
    ctx: &SpectralContext,
    z: Complex64,
    warm: Option<&[Complex64]>,
) -> Result<StieltjesSolution> {
    let out = iterate_g(ctx, z, SOLVER_TOL, SOLVER_CAP, warm)?;
    let scale = out.g.iter().map(|v| v.norm()).fold(1.0, f64::max);
    if out.residual > SOLVER_TOL * scale {
        return Err(Error::Solver { z, residual: out.residual, iterations: out.iterations });
    }
    let mut g_circ = Complex64::default();
    for a in 0..ctx.k() {
        g_circ += out.g[a] * ctx.c[a];
    }
    g_circ *= ctx.c0;
    Ok(StieltjesSolution {
        z,
        g: out.g,
        g_circ,
        residual: out.residual,
        iterations: out.iterations,
    })
}

/// Real-axis solve (z off the support); errors if the real iteration cannot
/// reach the residual target.
pub fn solve_g_real(ctx: &SpectralContext, x: f64) -> Result<StieltjesSolution> {
    solve_g(ctx, Complex64::new(x, 0.0))
}

/// Real parts of a solution known to be real (off-support evaluation).
pub(crate) fn real_g(sol: &StieltjesSolution) -> Vec<f64> {
    sol.g.iter().map(|v| v.re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{build_engine, CovarianceSpec};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    pub(crate) fn single_class_ctx(p: usize, n: usize, beta: f64) -> SpectralContext {
        let cov = CovarianceSpec::ScaledIdentity { beta };
        let m = DMatrix::zeros(p, 1);
        let engine = build_engine(&[cov], &m, p).unwrap();
        SpectralContext::synthetic(
            p as f64 / n as f64,
            DVector::from_vec(vec![1.0]),
            DVector::zeros(1),
            DMatrix::zeros(1, 1),
            DVector::from_vec(vec![2.0 * beta * beta]),
            beta,
            engine,
        )
    }

    #[test]
    fn identity_covariance_matches_quadratic_root() {
        // Single class, C = I, c0 = 2: c0 z g^2 + (c0 z - c0 + 1) g + 1 = 0.
        // At z = -1: 2 g^2 + 3 g - 1 = 0 (signs: c0 z = -2, c0 z - c0 + 1 = -3, so
        // -2 g^2 - 3 g + 1 = 0), root on the principal branch g = (-3 + sqrt 17)/4.
        let ctx = single_class_ctx(64, 32, 1.0);
        let sol = solve_g_real(&ctx, -1.0).unwrap();
        let expected = (-3.0 + 17f64.sqrt()) / 4.0;
        assert_relative_eq!(sol.g[0].re, expected, epsilon = 1e-11);
        assert!(sol.g[0].im.abs() < 1e-12);
        assert!(sol.residual < 1e-12);
    }

    #[test]
    fn large_z_asymptote() {
        let ctx = single_class_ctx(64, 32, 1.0);
        let z = -1e6;
        let sol = solve_g_real(&ctx, z).unwrap();
        assert!((sol.g[0].re + 1.0 / (2.0 * z)).abs() < 1e-8);
        // g_circ is the transform of a probability measure: ~ -1/z.
        assert!((sol.g_circ.re + 1.0 / z).abs() < 1e-8);
    }

    #[test]
    fn nevanlinna_property_upper_half_plane() {
        let ctx = single_class_ctx(48, 24, 1.5);
        for &(re, im) in &[(0.5, 0.3), (-2.0, 1.0), (3.0, 0.05), (0.0, 2.0)] {
            let sol = solve_g(&ctx, Complex64::new(re, im)).unwrap();
            assert!(sol.g_circ.im > 0.0, "Im g at ({re},{im}) = {}", sol.g_circ.im);
        }
    }
}
