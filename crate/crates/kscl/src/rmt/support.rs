//! Support geometry of the limiting bulk spectrum, plus the kernel-dependent
//! exclusion points (h zeros and the deterministic-zero preimage).

use super::solve::{iterate_g, solve_g_real};
use super::{bundle, SpectralContext};
use crate::error::{Error, Result};
use crate::kernel::{Branch, KernelProfile};
use num_complex::Complex64;

/// Imaginary offset used to probe the real axis.
pub const SUPPORT_EPS: f64 = 1e-6;
/// A point belongs to the support when Im g_circ(x + i eps) exceeds this.
const IN_SUPPORT_TOL: f64 = 1e-3;
/// Bisection tolerance for bulk edges (limited by the smoothing of the indicator).
const EDGE_TOL: f64 = 1e-8;
/// Bisection tolerance for root locations that feed downstream formulas.
const ROOT_TOL: f64 = 1e-12;
/// Iteration budget for classification solves (relaxed accuracy; the indicator
/// separates by three orders of magnitude, so full residual is not needed).
const SCAN_CAP: usize = 2_000;
const SCAN_TOL: f64 = 1e-11;
/// Grid density for the kernel-dependent root scans.
const H_GRID: usize = 400;

#[derive(Debug, Clone, Default)]
pub struct SpectralSupport {
    /// Closed bulk intervals, in increasing order.
    pub bulks: Vec<(f64, f64)>,
    /// Off-support points where the bulk matrix itself can carry eigenvalues:
    /// the deterministic zero of the centered Gram and real zeros of g_circ in gaps.
    pub isolated: Vec<f64>,
    /// Zeros of h(tau, x) off the support (filled by [`augment_with_kernel`]).
    pub h_zeros: Vec<f64>,
    /// Preimage of the deterministic zero eigenvalue (generic branch only).
    pub exclusion_f: Option<f64>,
    /// Interval that was scanned.
    pub scanned: (f64, f64),
}

impl SpectralSupport {
    pub fn contains(&self, x: f64) -> bool {
        self.bulks.iter().any(|&(a, b)| x >= a && x <= b)
    }

    /// Gap intervals strictly between consecutive bulks.
    pub fn gaps(&self) -> Vec<(f64, f64)> {
        self.bulks
            .windows(2)
            .map(|w| (w[0].1, w[1].0))
            .collect()
    }

    /// Rightmost bulk edge (0 when no bulk was found).
    pub fn right_edge(&self) -> f64 {
        self.bulks.last().map(|b| b.1).unwrap_or(0.0)
    }

    pub fn left_edge(&self) -> f64 {
        self.bulks.first().map(|b| b.0).unwrap_or(0.0)
    }

    /// Search intervals for isolated-eigenvalue candidates: left exterior, gaps,
    /// right exterior. The exterior extent is 3x the rightmost edge scale or the
    /// kernel-dependent `reach`, whichever is larger.
    pub fn search_intervals(&self, reach: f64) -> Vec<(f64, f64)> {
        let r = (self.right_edge().abs().max(1.0) * 3.0).max(reach);
        let mut out = Vec::new();
        if self.bulks.is_empty() {
            out.push((-r, r));
            return out;
        }
        out.push((-r, self.left_edge()));
        out.extend(self.gaps());
        out.push((self.right_edge(), r));
        out
    }
}

/// Conservative outer bound on where kernel-dependent isolated eigenvalues can
/// sit. For a large position x the class resolvent weights decay like
/// -1/(c0 x), so roots of the class-structure determinant are confined to
/// |x| <~ ||D|| max_a(c_a)/c0 and zeros of the scalar factor to
/// |x| <~ |coef| sum_a c_a trace_sq_a / c0; a kernel with a large curvature
/// coefficient pushes both far beyond the bulk scale.
pub(crate) fn kernel_reach(ctx: &SpectralContext, kernel: &KernelProfile) -> f64 {
    let d_norm = ctx.engine.m_m().norm()
        + (kernel.f2 / kernel.f1).abs() * ctx.t_mat.norm()
        + kernel.coef().abs() * ctx.t.norm_squared();
    let h_reach = kernel.coef().abs()
        * ctx
            .c
            .iter()
            .zip(ctx.trace_sq.iter())
            .map(|(c, t)| c * t)
            .sum::<f64>()
        / ctx.c0;
    3.0 * (d_norm * ctx.c.max() / ctx.c0 + h_reach) + 1.0
}

fn im_g_circ(ctx: &SpectralContext, x: f64, warm: Option<&[Complex64]>) -> Result<(f64, Vec<Complex64>)> {
    let z = Complex64::new(x, SUPPORT_EPS);
    let out = iterate_g(ctx, z, SCAN_TOL, SCAN_CAP, warm)?;
    let mut gc = Complex64::default();
    for a in 0..ctx.k() {
        gc += out.g[a] * ctx.c[a];
    }
    Ok((gc.im * ctx.c0, out.g))
}

/// Scans `interval` at `resolution` points, bisects the in/out transitions to 1e-8,
/// and locates the kernel-independent exclusion points.
pub fn scan_support(
    ctx: &SpectralContext,
    interval: (f64, f64),
    resolution: usize,
) -> Result<SpectralSupport> {
    let (lo, hi) = interval;
    if !(hi > lo) || resolution < 2 {
        return Err(Error::Invalid(format!(
            "support scan needs an increasing interval and at least 2 points, got [{lo}, {hi}] x {resolution}"
        )));
    }
    let step = (hi - lo) / (resolution - 1) as f64;
    let mut flags = Vec::with_capacity(resolution);
    let mut warm: Option<Vec<Complex64>> = None;
    for i in 0..resolution {
        let x = lo + step * i as f64;
        let (im, g) = im_g_circ(ctx, x, warm.as_deref())?;
        warm = Some(g);
        flags.push(im > IN_SUPPORT_TOL);
    }

    // Refine each transition by bisection on the indicator.
    let mut edges: Vec<(f64, bool)> = Vec::new(); // (edge position, entering_support)
    for i in 1..resolution {
        if flags[i] != flags[i - 1] {
            let mut a = lo + step * (i - 1) as f64;
            let mut b = lo + step * i as f64;
            let fa = flags[i - 1];
            while b - a > EDGE_TOL {
                let mid = 0.5 * (a + b);
                let (im, _) = im_g_circ(ctx, mid, None)?;
                if (im > IN_SUPPORT_TOL) == fa {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            edges.push((0.5 * (a + b), !fa));
        }
    }

    let mut bulks = Vec::new();
    let mut open: Option<f64> = if flags[0] { Some(lo) } else { None };
    for (pos, entering) in edges {
        if entering {
            open = Some(pos);
        } else if let Some(start) = open.take() {
            bulks.push((start, pos));
        }
    }
    if let Some(start) = open {
        bulks.push((start, hi));
    }

    let mut support = SpectralSupport {
        bulks,
        isolated: Vec::new(),
        h_zeros: Vec::new(),
        exclusion_f: None,
        scanned: interval,
    };

    // The centered Gram always has one deterministic zero eigenvalue.
    if !support.contains(0.0) {
        support.isolated.push(0.0);
    }
    // Real zeros of g_circ inside interior gaps.
    for (a, b) in support.gaps() {
        let pad = 1e-4 * (1.0 + b - a);
        let (ga, gb) = (a + pad, b - pad);
        if gb <= ga {
            continue;
        }
        let pts = 24;
        let mut prev: Option<(f64, f64)> = None;
        for i in 0..=pts {
            let x = ga + (gb - ga) * i as f64 / pts as f64;
            let val = match solve_g_real(ctx, x) {
                Ok(sol) => sol.g_circ.re,
                Err(_) => continue,
            };
            if let Some((px, pv)) = prev {
                if pv.signum() != val.signum() && pv != 0.0 {
                    if let Some(root) =
                        bisect(&|x| Ok(solve_g_real(ctx, x)?.g_circ.re), px, x, pv, ROOT_TOL)?
                    {
                        support.isolated.push(root);
                    }
                }
            }
            prev = Some((x, val));
        }
    }
    support.isolated.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(support)
}

/// Fills the kernel-dependent exclusion data: zeros of h on the off-support
/// search intervals, and the deterministic-zero preimage F(tau) for the generic branch.
pub fn augment_with_kernel(
    support: &mut SpectralSupport,
    ctx: &SpectralContext,
    kernel: &KernelProfile,
) -> Result<()> {
    match kernel.branch {
        Branch::Generic => {
            support.exclusion_f = Some(kernel.f_cap());
            let mut zeros = Vec::new();
            for (a, b) in support.search_intervals(kernel_reach(ctx, kernel)) {
                let pad = 1e-4 * (1.0 + (b - a).abs());
                let (ga, gb) = (a + pad, b - pad);
                if gb <= ga {
                    continue;
                }
                let h_at = |x: f64| -> Result<f64> {
                    let sol = solve_g_real(ctx, x)?;
                    let g: Vec<f64> = sol.g.iter().map(|v| v.re).collect();
                    Ok(bundle::h_tau(ctx, kernel, &g))
                };
                let mut prev: Option<(f64, f64)> = None;
                for i in 0..=H_GRID {
                    let x = ga + (gb - ga) * i as f64 / H_GRID as f64;
                    let val = match h_at(x) {
                        Ok(v) => v,
                        Err(_) => continue,
                    };
                    if let Some((px, pv)) = prev {
                        if pv.signum() != val.signum() && pv != 0.0 && val != 0.0 {
                            if let Some(root) = bisect(&h_at, px, x, pv, ROOT_TOL)? {
                                zeros.push(root);
                            }
                        }
                    }
                    prev = Some((x, val));
                }
            }
            zeros.sort_by(|x, y| x.partial_cmp(y).unwrap());
            support.h_zeros = zeros;
        }
        Branch::ZeroDerivative => {
            // h0(z) = 1 - (f''/f) S2 / z vanishes exactly at (f''/f) S2.
            support.exclusion_f = None;
            let root = (kernel.f2 / kernel.f_tau) * ctx.s2();
            support.h_zeros = if support.contains(root) { vec![] } else { vec![root] };
        }
    }
    Ok(())
}

/// Sign-change bisection; returns None if the bracket degenerates.
pub(crate) fn bisect(
    f: &dyn Fn(f64) -> Result<f64>,
    mut a: f64,
    mut b: f64,
    mut fa: f64,
    tol: f64,
) -> Result<Option<f64>> {
    while b - a > tol {
        let mid = 0.5 * (a + b);
        let fm = f(mid)?;
        if fm == 0.0 {
            return Ok(Some(mid));
        }
        if fm.signum() == fa.signum() {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    Ok(Some(0.5 * (a + b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{build_engine, CovarianceSpec};
    use nalgebra::{DMatrix, DVector};

    fn identity_ctx(c0: f64) -> SpectralContext {
        let p = 64;
        let cov = CovarianceSpec::ScaledIdentity { beta: 1.0 };
        let engine = build_engine(&[cov], &DMatrix::zeros(p, 1), p).unwrap();
        SpectralContext::synthetic(
            c0,
            DVector::from_vec(vec![1.0]),
            DVector::zeros(1),
            DMatrix::zeros(1, 1),
            DVector::from_vec(vec![2.0]),
            1.0,
            engine,
        )
    }

    #[test]
    fn single_bulk_edges_match_closed_form() {
        // C = I: bulk edges (1 -+ sqrt(1/c0))^2 at c0 = 2: [0.0858.., 2.9142..].
        let ctx = identity_ctx(2.0);
        let support = scan_support(&ctx, (-0.5, 4.0), 1200).unwrap();
        assert_eq!(support.bulks.len(), 1);
        let (lo, hi) = support.bulks[0];
        let exp_lo = (1.0 - (0.5f64).sqrt()).powi(2);
        let exp_hi = (1.0 + (0.5f64).sqrt()).powi(2);
        // Edge localization is limited by the i*eps smoothing of the indicator.
        assert!((lo - exp_lo).abs() < 5e-3, "lo = {lo}, expected {exp_lo}");
        assert!((hi - exp_hi).abs() < 5e-3, "hi = {hi}, expected {exp_hi}");
        // 0 is off-support here, so it is a deterministic isolated point.
        assert_eq!(support.isolated.len(), 1);
        assert_eq!(support.isolated[0], 0.0);
    }

    #[test]
    fn h_zero_matches_hand_value_for_flat_branch() {
        use crate::kernel::KernelProfile;
        let ctx = identity_ctx(2.0);
        let kernel = KernelProfile::new(2.0, 3.0, 1.0, 0.0, 0.5, None).unwrap();
        assert_eq!(kernel.branch, Branch::ZeroDerivative);
        let mut support = scan_support(&ctx, (-0.5, 4.0), 800).unwrap();
        augment_with_kernel(&mut support, &ctx, &kernel).unwrap();
        // (f''/f) S2 with S2 = 2/c0 = 1: root at 0.5, inside the bulk, so dropped.
        assert!(support.h_zeros.is_empty());
    }
}
