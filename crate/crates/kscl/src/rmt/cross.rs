//! Two-point deterministic equivalents: the coupling matrix R linking
//! resolvents at two spectral points, the class-wise quadratic forms feeding
//! the fluctuation formulas, and the analytic derivative of the fixed point.

use super::{solve::solve_g_real, SpectralContext};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Class-wise limits of the two-resolvent forms at a pair of real points.
#[derive(Debug, Clone)]
pub struct CrossBlocks {
    pub z1: f64,
    pub z2: f64,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    /// (I - Omega)^{-1}, equal to R + I.
    pub r_plus_i: DMatrix<f64>,
    /// Per class a: limit of (1/p) J^T Q(z1) D_a Q(z2) J (k x k).
    pub e_j: Vec<DMatrix<f64>>,
    /// Per class a: limit of M^T W Q(z1) D_a Q(z2) W^T M (k x k).
    pub e_m: Vec<DMatrix<f64>>,
    /// Per class a: limit of psi^T Q(z1) D_a Q(z2) psi.
    pub e_psi: Vec<f64>,
}

fn lift(ctx: &SpectralContext, g: &[f64]) -> Vec<Complex64> {
    (0..ctx.k())
        .map(|a| Complex64::new(ctx.c[a] * g[a], 0.0))
        .collect()
}

/// Omega_ab = c0 c_a g_a(z1) g_a(z2) (1/p) tr C_a A_1^{-1} C_b A_2^{-1}.
fn omega(ctx: &SpectralContext, g1: &[f64], g2: &[f64]) -> Result<DMatrix<f64>> {
    let ct = ctx.engine.cross_traces(&lift(ctx, g1), &lift(ctx, g2))?;
    let k = ctx.k();
    Ok(DMatrix::from_fn(k, k, |a, b| {
        ctx.c0 * ctx.c[a] * g1[a] * g2[a] * ct[(a, b)].re
    }))
}

fn r_plus_i_from(ctx: &SpectralContext, g1: &[f64], g2: &[f64]) -> Result<DMatrix<f64>> {
    let k = ctx.k();
    let om = omega(ctx, g1, g2)?;
    (DMatrix::identity(k, k) - om)
        .try_inverse()
        .ok_or_else(|| Error::Numerical("two-point coupling matrix I - Omega is singular".into()))
}

/// Action of the resolvent equivalent on the class-indicator span, as a k x k
/// matrix in the basis (j_1, ..., j_k).
fn qbar_rep(ctx: &SpectralContext, z: f64, g: &[f64]) -> DMatrix<f64> {
    let k = ctx.k();
    let s: f64 = (0..k).map(|i| ctx.c[i] * g[i]).sum();
    DMatrix::from_fn(k, k, |x, y| {
        let mut v = -ctx.c[y] * (1.0 / z + ctx.c0 * g[x] * g[y] / s);
        if x == y {
            v += ctx.c0 * g[x];
        }
        v
    })
}

pub fn cross_blocks(ctx: &SpectralContext, z1: f64, z2: f64) -> Result<CrossBlocks> {
    let k = ctx.k();
    let g1: Vec<f64> = solve_g_real(ctx, z1)?.g.iter().map(|v| v.re).collect();
    let g2: Vec<f64> = solve_g_real(ctx, z2)?.g.iter().map(|v| v.re).collect();
    let r_plus_i = r_plus_i_from(ctx, &g1, &g2)?;
    let r = &r_plus_i - DMatrix::identity(k, k);

    let q1 = qbar_rep(ctx, z1, &g1);
    let q2 = qbar_rep(ctx, z2, &g2);
    let dc_over_c0 = DMatrix::from_diagonal(&(&ctx.c / ctx.c0));
    let ones = DVector::from_element(k, 1.0);
    let mut e_j = Vec::with_capacity(k);
    for a in 0..k {
        // D_a on the indicator span is e_a e_a^T; P D_b P is (e_b - c_b 1)(e_b - c)^T.
        let mut mid = DMatrix::zeros(k, k);
        mid[(a, a)] = 1.0;
        for b in 0..k {
            let left = {
                let mut v = &ones * (-ctx.c[b]);
                v[b] += 1.0;
                v
            };
            let right = {
                let mut v = -ctx.c.clone();
                v[b] += 1.0;
                v
            };
            mid += left * right.transpose() * r[(a, b)];
        }
        e_j.push(&dc_over_c0 * &q1 * mid * &q2);
    }

    let cg1 = lift(ctx, &g1);
    let cg2 = lift(ctx, &g2);
    let mut e_m = Vec::with_capacity(k);
    for a in 0..k {
        let w: Vec<Complex64> = (0..k)
            .map(|b| Complex64::new(r_plus_i[(b, a)], 0.0))
            .collect();
        let block = ctx.engine.m_ainv_cw_ainv_m(&cg1, &cg2, &w)?;
        e_m.push(block.map(|v| v.re) / (z1 * z2));
    }

    let e_psi: Vec<f64> = (0..k)
        .map(|a| {
            ctx.c0
                * (0..k)
                    .map(|b| ctx.c[b] * g1[b] * g2[b] * ctx.trace_sq[b] * r_plus_i[(a, b)])
                    .sum::<f64>()
        })
        .collect();

    Ok(CrossBlocks {
        z1,
        z2,
        g1,
        g2,
        r_plus_i,
        e_j,
        e_m,
        e_psi,
    })
}

/// Analytic derivative of the fixed point: c_a g_a' = c0 [(I - Omega)^{-1} (c g^2)]_a.
pub fn g_derivative(ctx: &SpectralContext, _z: f64, g: &[f64]) -> Result<Vec<f64>> {
    let k = ctx.k();
    let rpi = r_plus_i_from(ctx, g, g)?;
    let cg2 = DVector::from_fn(k, |a, _| ctx.c[a] * g[a] * g[a]);
    let out = rpi * cg2 * ctx.c0;
    Ok((0..k).map(|a| out[a] / ctx.c[a]).collect())
}

/// Central finite-difference derivative of the fixed point (slow, test oracle).
pub fn fd_g_derivative(ctx: &SpectralContext, z: f64, step: f64) -> Result<Vec<f64>> {
    let plus = solve_g_real(ctx, z + step)?;
    let minus = solve_g_real(ctx, z - step)?;
    Ok((0..ctx.k())
        .map(|a| (plus.g[a].re - minus.g[a].re) / (2.0 * step))
        .collect())
}
