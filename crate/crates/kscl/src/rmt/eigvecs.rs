//! Predicted eigenvector statistics at isolated eigenvalues: class-indicator
//! projections, signed alignment coefficients, and per-class fluctuation
//! covariances within and across eigenvectors.

use super::bundle::{GBundle, ZeroBundle};
use super::cross;
use super::SpectralContext;
use crate::error::{Error, Result};
use crate::kernel::{Branch, KernelProfile};
use nalgebra::{DMatrix, DVector};

/// Relative singular-value threshold below which a direction counts as null.
pub const NULL_TOL: f64 = 1e-8;
/// Smallest alignment coefficient usable as an anchor for fluctuation ratios.
const ANCHOR_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ProjectionEstimate {
    pub rho: f64,
    /// Scalar spectrum factor at rho.
    pub h: f64,
    /// Per-class Stieltjes coordinates at rho.
    pub g: Vec<f64>,
    pub gamma: DMatrix<f64>,
    /// Residue of the inverse structure matrix at rho.
    pub xi: DMatrix<f64>,
    /// Predicted class-indicator projection of the eigenspace, (1/p) J^T Pi J.
    pub matrix: DMatrix<f64>,
    /// Signed per-class alignment coefficients of the eigenvector class means.
    pub alphas: DVector<f64>,
    /// Dimension of the null space at rho (the eigenvalue multiplicity).
    pub multiplicity: usize,
    /// Total alignment, clamped to [0, multiplicity].
    pub alignment: f64,
    /// True when the raw alignment fell outside [0, multiplicity].
    pub clipped: bool,
    pub branch: Branch,
}

/// Eigenvector statistics predicted at an isolated eigenvalue location.
pub fn projection_estimate(
    ctx: &SpectralContext,
    kernel: &KernelProfile,
    rho: f64,
) -> Result<ProjectionEstimate> {
    match kernel.branch {
        Branch::Generic => {
            let b = GBundle::at(ctx, kernel, rho)?;
            let primes = b.primes(ctx, kernel)?;
            let xi = residue_of_inverse(&b.matrix, &primes.matrix_prime)?;
            Ok(finish(ctx, rho, b.h, b.g, b.gamma, xi, Branch::Generic))
        }
        Branch::ZeroDerivative => {
            let zb = ZeroBundle::at(ctx, kernel, rho)?;
            let xi = residue_of_inverse(&zb.matrix, &zb.matrix_prime)?;
            let g = vec![-1.0 / (ctx.c0 * rho); ctx.k()];
            Ok(finish(
                ctx,
                rho,
                zb.h0,
                g,
                zb.gamma0,
                xi,
                Branch::ZeroDerivative,
            ))
        }
    }
}

/// Residue of z -> G(z)^{-1} at a root where G is singular, from the null
/// spaces of G and the derivative G'.
///
/// The null dimension is gated on the singular values, but the null bases are
/// extracted from symmetric eigendecompositions of G G^T and G^T G: the SVD of
/// these doubly near-rank-deficient matrices can return singular vectors that
/// badly miss the claimed singular value, while the Gram eigenvectors stay
/// accurate thanks to the large eigengap. The residue is invariant under
/// within-nullspace basis changes, so any orthonormal bases work.
fn residue_of_inverse(g: &DMatrix<f64>, g_prime: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = g.nrows();
    let svd = g.clone().svd(false, false);
    let smax = svd.singular_values.max().max(1e-300);
    let m = (0..k)
        .filter(|&i| svd.singular_values[i] < NULL_TOL * smax)
        .count();
    if m == 0 {
        return Err(Error::Invalid(format!(
            "structure matrix is not singular here (min ratio {:.3e})",
            svd.singular_values.min() / smax
        )));
    }
    let v_l = smallest_eigenvectors(&(g * g.transpose()), m);
    let v_r = smallest_eigenvectors(&(g.transpose() * g), m);
    let mid = v_l.transpose() * g_prime * &v_r;
    let mid_inv = mid.try_inverse().ok_or_else(|| {
        Error::Numerical("derivative is singular on the null space of the structure matrix".into())
    })?;
    Ok(v_r * mid_inv * v_l.transpose())
}

/// Orthonormal eigenvectors of a symmetric matrix for its m smallest eigenvalues.
fn smallest_eigenvectors(sym: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let eig = sym.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..sym.nrows()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let mut basis = DMatrix::zeros(sym.nrows(), m);
    for (j, &i) in order.iter().take(m).enumerate() {
        basis.set_column(j, &eig.eigenvectors.column(i));
    }
    basis
}

fn finish(
    ctx: &SpectralContext,
    rho: f64,
    h: f64,
    g: Vec<f64>,
    gamma: DMatrix<f64>,
    xi: DMatrix<f64>,
    branch: Branch,
) -> ProjectionEstimate {
    let k = ctx.k();
    let multiplicity = {
        // The null dimension is recoverable from xi's rank.
        let svd = xi.clone().svd(false, false);
        let smax = svd.singular_values.max().max(1e-300);
        svd.singular_values
            .iter()
            .filter(|&&s| s > NULL_TOL * smax)
            .count()
            .max(1)
    };
    let matrix = -h * &gamma * &xi;

    let anchor = (0..k).find(|&a| matrix[(a, a)] > 1e-12);
    let mut alphas = DVector::zeros(k);
    if let Some(b) = anchor {
        for a in 0..k {
            let mag = (ctx.c0 * matrix[(a, a)] / ctx.c[a]).max(0.0).sqrt();
            alphas[a] = mag * matrix[(b, a)].signum();
        }
    }
    let raw: f64 = (0..k).map(|a| ctx.c0 * matrix[(a, a)] / ctx.c[a]).sum();
    let cap = multiplicity as f64;
    let clipped = !(-1e-6..=cap + 1e-6).contains(&raw);
    let alignment = raw.clamp(0.0, cap);

    ProjectionEstimate {
        rho,
        h,
        g,
        gamma,
        xi,
        matrix,
        alphas,
        multiplicity,
        alignment,
        clipped,
        branch,
    }
}

fn anchor_class(alphas: &DVector<f64>) -> Result<usize> {
    let (idx, best) = alphas
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.abs().partial_cmp(&b.abs()).unwrap())
        .expect("nonempty alphas");
    if best.abs() <= ANCHOR_TOL {
        return Err(Error::Invalid(
            "eigenvector carries no class alignment to anchor fluctuations".into(),
        ));
    }
    Ok(idx)
}

/// Per-class covariance between the class-mean fluctuations of two isolated
/// eigenvectors (variance when both arguments are the same estimate).
pub fn eigvec_covariance(
    ctx: &SpectralContext,
    kernel: &KernelProfile,
    ei: &ProjectionEstimate,
    ej: &ProjectionEstimate,
) -> Result<DVector<f64>> {
    if ei.branch != ej.branch {
        return Err(Error::Invalid(
            "cannot mix kernel branches in a fluctuation pair".into(),
        ));
    }
    let k = ctx.k();
    let e_blocks = two_point_blocks(ctx, kernel, ei, ej)?;
    let b = anchor_class(&ei.alphas)?;
    let d = anchor_class(&ej.alphas)?;
    let denom = (ctx.c[b] * ctx.c[d]).sqrt() * ei.alphas[b] * ej.alphas[d];
    let mut out = DVector::zeros(k);
    for a in 0..k {
        let k_a = (ei.xi.transpose() * &e_blocks[a] * &ej.xi) * (ei.h * ej.h);
        out[a] = ctx.c0 * k_a[(b, d)] / denom - ei.alphas[a] * ej.alphas[a];
    }
    Ok(out)
}

/// The class-resolved two-point blocks entering eigenvector fluctuations.
fn two_point_blocks(
    ctx: &SpectralContext,
    kernel: &KernelProfile,
    ei: &ProjectionEstimate,
    ej: &ProjectionEstimate,
) -> Result<Vec<DMatrix<f64>>> {
    let k = ctx.k();
    let ti = &ei.gamma * &ctx.t;
    let tj = &ej.gamma * &ctx.t;
    match ei.branch {
        Branch::Generic => {
            let cb = cross::cross_blocks(ctx, ei.rho, ej.rho)?;
            let coef = kernel.coef();
            let zz = ei.rho * ej.rho;
            let hh = ei.h * ej.h;
            Ok((0..k)
                .map(|a| {
                    // The mean-channel block enters weighted by the two-point
                    // class resolvent factor z1 z2 c0 c_a g_a(z1) g_a(z2); the
                    // weight restores the projector sum rule over classes.
                    // The trace-channel legs attach through coef Gamma t with
                    // no scalar-factor weight (matching the h-free coef t t^T
                    // term of the structure matrix), so the overall h_i h_j
                    // applied downstream is cancelled on that block.
                    let wm = zz * ctx.c0 * ctx.c[a] * ei.g[a] * ej.g[a];
                    &cb.e_j[a]
                        + &ei.gamma * &cb.e_m[a] * &ej.gamma * wm
                        + (&ti * tj.transpose()) * (coef * coef * cb.e_psi[a] / hh)
                })
                .collect())
        }
        Branch::ZeroDerivative => {
            let fr = kernel.f2 / kernel.f_tau;
            let zz = ei.rho * ej.rho;
            let hh = ei.h * ej.h;
            Ok((0..k)
                .map(|a| {
                    // As in the generic branch, the trace-channel legs carry
                    // no scalar-factor weight; cancel the downstream h contributions.
                    let w = ctx.c[a] / ctx.c0 / zz;
                    let mut e = DMatrix::zeros(k, k);
                    e[(a, a)] = w;
                    e + (&ti * tj.transpose()) * (fr * fr * w * ctx.trace_sq[a] / hh)
                })
                .collect())
        }
    }
}

/// Per-class mean and standard deviation of the entries of the dominant
/// eigenvector of the normalized Laplacian, at sample count n.
pub fn u1_statistics(
    ctx: &SpectralContext,
    kernel: &KernelProfile,
    n: usize,
    psi_var: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let k = ctx.k();
    let nf = n as f64;
    let fac = kernel.f1 / (2.0 * kernel.f_tau) / (nf * ctx.c0.sqrt());
    let means = DVector::from_fn(k, |a, _| nf.powf(-0.5) + ctx.t[a] * fac);
    let stds = DVector::from_fn(k, |a, _| psi_var[a].sqrt() * fac.abs());
    (means, stds)
}

/// Per-class covariance between the dominant-eigenvector class means and
/// those of an isolated informative eigenvector.
pub fn u1_cross_covariance(
    ctx: &SpectralContext,
    kernel: &KernelProfile,
    ej: &ProjectionEstimate,
    n: usize,
) -> Result<DVector<f64>> {
    let k = ctx.k();
    let d = anchor_class(&ej.alphas)?;
    // Row vector t^T Gamma Xi evaluated at the anchor class.
    let t_gx = (ej.xi.transpose() * (&ej.gamma * &ctx.t))[d];
    let inner_coef = match ej.branch {
        Branch::Generic => kernel.coef(),
        Branch::ZeroDerivative => kernel.f2 / kernel.f_tau,
    };
    // The dominant eigenvector couples to the norm fluctuations with per-entry
    // weight f'/(2 f_tau) / (n sqrt(c0)), and the class-mass normalization of
    // the covariance restores one factor sqrt(p) = sqrt(c0 n), leaving 1/sqrt(n).
    let prefactor = kernel.f1 / (2.0 * kernel.f_tau) / (n as f64).sqrt()
        * (ctx.c0 / ctx.c[d]).sqrt()
        / ej.alphas[d];
    Ok(DVector::from_fn(k, |a, _| {
        let v_ad = ctx.c[a] * ej.g[a] * ctx.trace_sq[a] * inner_coef * t_gx;
        prefactor * v_ad
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::CovarianceSpec;
    use crate::model::{ClassSpec, MixtureModel};
    use crate::rmt::{find_spikes, SpikeOrigin};

    fn axis_class(
        p: usize,
        axis: usize,
        value: f64,
        covariance: CovarianceSpec,
        size: usize,
    ) -> ClassSpec {
        let mut mean = DVector::zeros(p);
        mean[axis] = value;
        ClassSpec { mean, covariance, size }
    }

    fn three_class_fixture() -> (SpectralContext, KernelProfile) {
        let p = 64;
        let model = MixtureModel::new(
            vec![
                axis_class(p, 0, 5.0, CovarianceSpec::ScaledIdentity { beta: 1.0 }, 4),
                axis_class(p, 1, 5.0, CovarianceSpec::ScaledIdentity { beta: 1.0 }, 4),
                axis_class(p, 2, 5.0, CovarianceSpec::ScaledIdentity { beta: 1.0 }, 8),
            ],
            p,
            0.0,
        )
        .unwrap();
        let ctx = SpectralContext::from_model(&model).unwrap();
        let kernel = KernelProfile::new(2.0, 22.0, 4.0, -1.0, 8.0, None).unwrap();
        (ctx, kernel)
    }

    #[test]
    fn fluctuation_blocks_satisfy_projector_sum_rule() {
        // Summing the class blocks recovers the idempotent-projector identity
        // h^2 Xi^T (sum_a E_a) Xi = -h Gamma Xi, i.e. the per-class alignment
        // and fluctuation weights of any isolated eigenvector add up to one.
        let (ctx, kernel) = three_class_fixture();
        for rho in [2.9725, 10.375 / 4.0 + 10.375 / 9.375] {
            let est = projection_estimate(&ctx, &kernel, rho).unwrap();
            let blocks = two_point_blocks(&ctx, &kernel, &est, &est).unwrap();
            let mut e_sum = DMatrix::<f64>::zeros(3, 3);
            for b in &blocks {
                e_sum += b;
            }
            let lhs = est.xi.transpose() * e_sum * &est.xi * (est.h * est.h);
            let rhs = -(&est.gamma * &est.xi) * est.h;
            assert!(
                (&lhs - &rhs).amax() < 1e-10,
                "sum rule violated at rho={rho}: {:.3e}",
                (&lhs - &rhs).amax()
            );

            let var = eigvec_covariance(&ctx, &kernel, &est, &est).unwrap();
            let total: f64 = (0..3).map(|a| est.alphas[a].powi(2) + var[a]).sum();
            assert!((total - 1.0).abs() < 1e-10, "weights total {total}");
        }
    }

    #[test]
    fn residue_matches_two_sided_inverse_limit() {
        let (ctx, kernel) = three_class_fixture();
        let rho = 2.9725;
        let est = projection_estimate(&ctx, &kernel, rho).unwrap();
        let delta = 1e-5;
        let plus = GBundle::at(&ctx, &kernel, rho + delta)
            .unwrap()
            .matrix
            .try_inverse()
            .unwrap();
        let minus = GBundle::at(&ctx, &kernel, rho - delta)
            .unwrap()
            .matrix
            .try_inverse()
            .unwrap();
        let numeric = (plus - minus) * (delta / 2.0);
        assert!(
            (&numeric - &est.xi).amax() < 1e-5 * est.xi.amax(),
            "residue mismatch: {:.3e}",
            (&numeric - &est.xi).amax()
        );
    }

    #[test]
    fn three_class_alignments_match_closed_forms() {
        let (ctx, kernel) = three_class_fixture();

        // Spike detaching from the population eigenvalue ell = 7.25 whose
        // direction separates classes 1 and 2.
        let est1 = projection_estimate(&ctx, &kernel, 2.9725).unwrap();
        assert_eq!(est1.multiplicity, 1);
        assert!(!est1.clipped);
        assert!(
            (est1.alignment - 2244.0 / 2900.0).abs() < 1e-9,
            "alignment {}",
            est1.alignment
        );
        assert!(est1.alphas[0] > 0.0 && est1.alphas[1] < 0.0);
        assert!(est1.alphas[2].abs() < 1e-6, "alphas: {:?}", est1.alphas);
        assert!((est1.alphas[0] + est1.alphas[1]).abs() < 1e-9);

        // Spike from ell = 10.375, separating class 3 from classes 1 and 2.
        let rho3 = 10.375 / 4.0 + 10.375 / 9.375;
        let est3 = projection_estimate(&ctx, &kernel, rho3).unwrap();
        assert!(
            (est3.alignment - 5369.0 / 6225.0).abs() < 1e-9,
            "alignment {}",
            est3.alignment
        );
        assert!(est3.alphas[0] > 0.0 && est3.alphas[1] > 0.0 && est3.alphas[2] < 0.0);
    }

    #[test]
    fn three_class_fluctuations_match_closed_forms() {
        let (ctx, kernel) = three_class_fixture();
        let est1 = projection_estimate(&ctx, &kernel, 2.9725).unwrap();
        let var = eigvec_covariance(&ctx, &kernel, &est1, &est1).unwrap();
        // Equal covariances give sigma_a^2 = c_a (1 - alignment) here.
        let bracket = 1.0 - 2244.0 / 2900.0;
        for a in 0..3 {
            assert!(
                (var[a] - ctx.c[a] * bracket).abs() < 1e-8,
                "var[{a}] = {} vs {}",
                var[a],
                ctx.c[a] * bracket
            );
        }

        // Orthogonal population directions under equal covariances make the
        // cross-eigenvector covariance vanish identically.
        let rho3 = 10.375 / 4.0 + 10.375 / 9.375;
        let est3 = projection_estimate(&ctx, &kernel, rho3).unwrap();
        let cross = eigvec_covariance(&ctx, &kernel, &est1, &est3).unwrap();
        assert!(cross.amax() < 1e-8, "cross: {:?}", cross);
    }

    #[test]
    fn dominant_eigenvector_moments_hand_values() {
        let p = 32;
        let model = MixtureModel::new(
            vec![
                axis_class(p, 0, 2.0, CovarianceSpec::ScaledIdentity { beta: 1.2 }, 4),
                axis_class(p, 0, -2.0, CovarianceSpec::ScaledIdentity { beta: 0.8 }, 4),
            ],
            p,
            0.0,
        )
        .unwrap();
        let ctx = SpectralContext::from_model(&model).unwrap();
        let stats = model.compute_statistics().unwrap();
        let f = (-1.0f64).exp();
        let kernel = KernelProfile::new(2.0, 1.0, f, -f / 2.0, f / 4.0, None).unwrap();
        let (means, stds) = u1_statistics(&ctx, &kernel, 8, &stats.psi_var);

        // f'(tau)/(2 f(tau)) = -1/4 here, divided by n sqrt(c0) = 8 * 2.
        let t1 = 6.4 / 32.0f64.sqrt();
        let fac = -0.25 / (8.0 * 2.0);
        assert!((means[0] - (1.0 / 8.0f64.sqrt() + t1 * fac)).abs() < 1e-12);
        assert!((means[1] - (1.0 / 8.0f64.sqrt() - t1 * fac)).abs() < 1e-12);
        assert!((stds[0] - 2.88f64.sqrt() / 64.0).abs() < 1e-12);
        assert!((stds[1] - 1.28f64.sqrt() / 64.0).abs() < 1e-12);
    }

    #[test]
    fn flat_kernel_block_projection_is_exact() {
        // Three classes differing only by which coordinate block carries the
        // higher variance; a kernel flat at tau isolates a multiplicity-2
        // eigenvalue whose eigenspace aligns with the classes completely.
        let p = 60;
        let rest = DMatrix::identity(20, 20) * 0.5;
        let hot = DMatrix::identity(20, 20) * 1.5;
        let classes = (0..3)
            .map(|a| ClassSpec {
                mean: DVector::zeros(p),
                covariance: CovarianceSpec::BlockSymmetric {
                    d1: rest.clone(),
                    d2: hot.clone(),
                    position: a,
                },
                size: 5,
            })
            .collect();
        let model = MixtureModel::new(classes, p, 0.0).unwrap();
        let ctx = SpectralContext::from_model(&model).unwrap();
        let tau = model.compute_tau();
        assert!((tau - 5.0 / 3.0).abs() < 1e-12);
        let kernel = KernelProfile::new(tau, 3.0, 1.0, 0.0, 0.5, None).unwrap();
        assert_eq!(kernel.branch, Branch::ZeroDerivative);

        let report = find_spikes(&ctx, &kernel).unwrap();
        let informative: Vec<_> = report.informative().collect();
        assert_eq!(informative.len(), 1, "spikes: {:?}", report.spikes);
        assert_eq!(informative[0].multiplicity, 2);
        assert!((informative[0].rho - 1.0 / 36.0).abs() < 1e-12);
        let scalar: Vec<_> = report
            .spikes
            .iter()
            .filter(|s| s.origin == SpikeOrigin::ScalarZero)
            .collect();
        assert_eq!(scalar.len(), 1);
        assert!((scalar[0].rho - 11.0 / 48.0).abs() < 1e-12);

        let est = projection_estimate(&ctx, &kernel, informative[0].rho).unwrap();
        assert_eq!(est.multiplicity, 2);
        let expected =
            (DMatrix::identity(3, 3) - DMatrix::from_element(3, 3, 1.0 / 3.0)) / 12.0;
        assert!(
            (&est.matrix - &expected).amax() < 1e-10,
            "matrix: {}",
            est.matrix
        );
        assert!((est.alignment - 2.0).abs() < 1e-10);
        assert!(!est.clipped);
    }
}
