//! Deterministic-equivalent matrices whose singular points locate isolated
//! eigenvalues, together with their z-derivatives (needed for eigenvector
//! projections) and the larger companion matrix used to classify roots.

use super::{cross, solve::solve_g_real, SpectralContext};
use crate::error::{Error, Result};
use crate::kernel::{Branch, KernelProfile};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Gamma_z = diag(c_a g_a) - (c_a g_a c_b g_b / s), s = sum c_i g_i, for a real
/// fixed-point solution g at some off-support z.
pub fn gamma_z(ctx: &SpectralContext, g: &[f64]) -> DMatrix<f64> {
    let k = ctx.k();
    let s: f64 = (0..k).map(|a| ctx.c[a] * g[a]).sum();
    DMatrix::from_fn(k, k, |a, b| {
        let mut v = -ctx.c[a] * g[a] * ctx.c[b] * g[b] / s;
        if a == b {
            v += ctx.c[a] * g[a];
        }
        v
    })
}

/// h(tau, z) = 1 + coef * sum_a c_a g_a (2/p) tr C_a^2 (generic branch only).
pub fn h_tau(ctx: &SpectralContext, kernel: &KernelProfile, g: &[f64]) -> f64 {
    let acc: f64 = (0..ctx.k())
        .map(|a| ctx.c[a] * g[a] * ctx.trace_sq[a])
        .sum();
    1.0 + kernel.coef() * acc
}

fn to_complex(g: &[f64], c: &DVector<f64>) -> Vec<Complex64> {
    g.iter()
        .zip(c.iter())
        .map(|(&ga, &ca)| Complex64::new(ca * ga, 0.0))
        .collect()
}

/// The k x k matrix G_z = h I + D Gamma together with every ingredient needed
/// downstream, evaluated at a real off-support point.
#[derive(Debug, Clone)]
pub struct GBundle {
    pub z: f64,
    pub g: Vec<f64>,
    /// s = sum_a c_a g_a.
    pub s: f64,
    pub h: f64,
    pub gamma: DMatrix<f64>,
    /// M^T A^{-1} M at this z.
    pub m_ainv_m: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// G_z itself.
    pub matrix: DMatrix<f64>,
}

/// z-derivatives of the [`GBundle`] quantities.
#[derive(Debug, Clone)]
pub struct GPrimes {
    pub g_prime: Vec<f64>,
    pub h_prime: f64,
    pub gamma_prime: DMatrix<f64>,
    pub d_prime: DMatrix<f64>,
    /// G'_z.
    pub matrix_prime: DMatrix<f64>,
}

impl GBundle {
    pub fn at(ctx: &SpectralContext, kernel: &KernelProfile, z: f64) -> Result<Self> {
        let sol = solve_g_real(ctx, z)?;
        let g: Vec<f64> = sol.g.iter().map(|v| v.re).collect();
        Self::from_g(ctx, kernel, z, g)
    }

    /// Builds the bundle from an externally obtained fixed-point solution.
    pub fn from_g(ctx: &SpectralContext, kernel: &KernelProfile, z: f64, g: Vec<f64>) -> Result<Self> {
        if kernel.branch != Branch::Generic {
            return Err(Error::Kernel(
                "the generic equivalent needs f'(tau) != 0; use the zero-derivative bundle".into(),
            ));
        }
        let k = ctx.k();
        let cg = to_complex(&g, &ctx.c);
        let m_ainv_m = ctx.engine.m_ainv_m(&cg)?.map(|v| v.re);
        let gamma = gamma_z(ctx, &g);
        let h = h_tau(ctx, kernel, &g);
        let ttt = &ctx.t * ctx.t.transpose();
        let d = &m_ainv_m * h - &ctx.t_mat * (h * kernel.f2 / kernel.f1) + ttt * kernel.coef();
        let matrix = DMatrix::identity(k, k) * h + &d * &gamma;
        let s = (0..k).map(|a| ctx.c[a] * g[a]).sum();
        Ok(GBundle {
            z,
            g,
            s,
            h,
            gamma,
            m_ainv_m,
            d,
            matrix,
        })
    }

    pub fn primes(&self, ctx: &SpectralContext, kernel: &KernelProfile) -> Result<GPrimes> {
        let k = ctx.k();
        let gp = cross::g_derivative(ctx, self.z, &self.g)?;
        let s_prime: f64 = (0..k).map(|a| ctx.c[a] * gp[a]).sum();
        let h_prime: f64 = kernel.coef()
            * (0..k)
                .map(|a| ctx.c[a] * gp[a] * ctx.trace_sq[a])
                .sum::<f64>();
        let gamma_prime = DMatrix::from_fn(k, k, |a, b| {
            let (ca, cb) = (ctx.c[a], ctx.c[b]);
            let mut v = -(ca * gp[a] * cb * self.g[b] + ca * self.g[a] * cb * gp[b]
                - ca * self.g[a] * cb * self.g[b] * s_prime / self.s)
                / self.s;
            if a == b {
                v += ca * gp[a];
            }
            v
        });
        let cg = to_complex(&self.g, &ctx.c);
        let w: Vec<Complex64> = (0..k)
            .map(|a| Complex64::new(ctx.c[a] * gp[a], 0.0))
            .collect();
        let m_ainv_m_prime = -(ctx.engine.m_ainv_cw_ainv_m(&cg, &cg, &w)?.map(|v| v.re));
        let d_prime = &self.m_ainv_m * h_prime + &m_ainv_m_prime * self.h
            - &ctx.t_mat * (h_prime * kernel.f2 / kernel.f1);
        let matrix_prime =
            DMatrix::identity(k, k) * h_prime + &d_prime * &self.gamma + &self.d * &gamma_prime;
        Ok(GPrimes {
            g_prime: gp,
            h_prime,
            gamma_prime,
            d_prime,
            matrix_prime,
        })
    }
}

/// The (2k+1) x (2k+1) companion matrix whose kernel dimension at a root of h
/// decides whether that root is an isolated eigenvalue.
pub fn h_z(ctx: &SpectralContext, kernel: &KernelProfile, z: f64) -> Result<DMatrix<f64>> {
    let k = ctx.k();
    let b = GBundle::at(ctx, kernel, z)?;
    let coef = kernel.coef();
    let mm = ctx.engine.m_m();
    let ttt = &ctx.t * ctx.t.transpose();
    let core = mm + &ttt * coef - &ctx.t_mat * (kernel.f2 / kernel.f1);
    let ones = DVector::from_element(k, 1.0);
    let h11 =
        DMatrix::identity(k, k) + &core * &b.gamma - &ones * ctx.c.transpose() * (kernel.f_cap() / z);
    let h12 = mm - &b.m_ainv_m;
    let h13 = &ctx.t * (b.h - 1.0);
    // Gamma is symmetric, so coef * t^T Gamma = (coef * Gamma t)^T.
    let h31 = (&b.gamma * &ctx.t * coef).transpose();

    let n = 2 * k + 1;
    let mut out = DMatrix::zeros(n, n);
    out.view_mut((0, 0), (k, k)).copy_from(&h11);
    out.view_mut((0, k), (k, k)).copy_from(&h12);
    out.view_mut((0, 2 * k), (k, 1)).copy_from(&h13);
    out.view_mut((k, 0), (k, k)).copy_from(&b.gamma);
    out.view_mut((k, k), (k, k))
        .copy_from(&DMatrix::identity(k, k));
    out.view_mut((2 * k, 0), (1, k)).copy_from(&h31);
    out[(2 * k, 2 * k)] = b.h;
    Ok(out)
}

/// Everything the zero-derivative branch needs at a real z != 0; all quantities
/// are closed-form (the fixed point reduces to g_a = -1/(c0 z) exactly).
#[derive(Debug, Clone)]
pub struct ZeroBundle {
    pub z: f64,
    pub h0: f64,
    pub gamma0: DMatrix<f64>,
    pub d0: DMatrix<f64>,
    /// G0_z.
    pub matrix: DMatrix<f64>,
    pub h0_prime: f64,
    pub gamma0_prime: DMatrix<f64>,
    /// G0'_z.
    pub matrix_prime: DMatrix<f64>,
}

impl ZeroBundle {
    pub fn at(ctx: &SpectralContext, kernel: &KernelProfile, z: f64) -> Result<Self> {
        if z.abs() < 1e-12 {
            return Err(Error::Numerical(
                "zero-derivative bundle is singular at z = 0".into(),
            ));
        }
        let k = ctx.k();
        let fr = kernel.f2 / kernel.f_tau;
        let kappa0 = fr * ctx.s2();
        let h0 = 1.0 - kappa0 / z;
        let dc = DMatrix::from_diagonal(&ctx.c);
        let gamma0 = &dc * (-1.0 / (ctx.c0 * z));
        let ttt = &ctx.t * ctx.t.transpose();
        let d0 = &ctx.t_mat * (2.0 * fr * h0) + &ttt * fr;
        let matrix = DMatrix::identity(k, k) * h0 + &d0 * &gamma0;
        let h0_prime = kappa0 / (z * z);
        let gamma0_prime = &dc * (1.0 / (ctx.c0 * z * z));
        let d0_prime = &ctx.t_mat * (2.0 * fr * h0_prime);
        let matrix_prime =
            DMatrix::identity(k, k) * h0_prime + &d0_prime * &gamma0 + &d0 * &gamma0_prime;
        Ok(ZeroBundle {
            z,
            h0,
            gamma0,
            d0,
            matrix,
            h0_prime,
            gamma0_prime,
            matrix_prime,
        })
    }
}

/// The k x k companion matrix of the zero-derivative branch; its eigenvalues off
/// the bulk are spike candidates, and G0_z = -(h0/z) H0_z away from the h0 zero.
pub fn h0_z(ctx: &SpectralContext, kernel: &KernelProfile, z: f64) -> Result<DMatrix<f64>> {
    let k = ctx.k();
    let fr = kernel.f2 / kernel.f_tau;
    let kappa0 = fr * ctx.s2();
    let h0 = 1.0 - kappa0 / z;
    if h0.abs() < 1e-14 {
        return Err(Error::Numerical(
            "companion matrix undefined where h0 vanishes".into(),
        ));
    }
    let dc = DMatrix::from_diagonal(&ctx.c);
    let ttt = &ctx.t * ctx.t.transpose();
    Ok(&ttt * &dc * (fr / (h0 * ctx.c0)) + &ctx.t_mat * &dc * (2.0 * fr / ctx.c0)
        - DMatrix::identity(k, k) * z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::CovarianceSpec;
    use crate::model::{ClassSpec, MixtureModel};
    use nalgebra::DVector;

    fn axis_mean(p: usize, axis: usize, value: f64) -> DVector<f64> {
        let mut v = DVector::zeros(p);
        v[axis] = value;
        v
    }

    /// Three classes, distinct scaled-identity covariances (t != 0, T != 0).
    fn mixed_model() -> MixtureModel {
        let p = 60;
        let classes = vec![
            ClassSpec {
                mean: axis_mean(p, 0, 3.0),
                covariance: CovarianceSpec::ScaledIdentity { beta: 1.0 },
                size: 10,
            },
            ClassSpec {
                mean: axis_mean(p, 1, -2.0),
                covariance: CovarianceSpec::ScaledIdentity { beta: 1.4 },
                size: 8,
            },
            ClassSpec {
                mean: axis_mean(p, 2, 1.0),
                covariance: CovarianceSpec::ScaledIdentity { beta: 0.8 },
                size: 12,
            },
        ];
        MixtureModel::new(classes, p, 0.0).unwrap()
    }

    fn quad_kernel(tau: f64) -> KernelProfile {
        KernelProfile::new(tau, 22.0, 4.0, -1.0, 8.0, None).unwrap()
    }

    #[test]
    fn g_matrix_row_and_column_identities() {
        let model = mixed_model();
        let ctx = SpectralContext::from_model(&model).unwrap();
        let kernel = quad_kernel(model.compute_tau());
        let b = GBundle::at(&ctx, &kernel, 9.0).unwrap();
        let k = ctx.k();
        let ones = DVector::from_element(k, 1.0);
        // G 1 = h 1 and c^T G = h c^T.
        let g1 = &b.matrix * &ones;
        let cg = b.matrix.transpose() * &ctx.c;
        for a in 0..k {
            assert!((g1[a] - b.h).abs() < 1e-10, "G1 row {a}: {} vs {}", g1[a], b.h);
            assert!(
                (cg[a] - b.h * ctx.c[a]).abs() < 1e-10,
                "c^T G col {a}: {} vs {}",
                cg[a],
                b.h * ctx.c[a]
            );
        }
    }

    #[test]
    fn companion_determinant_factorization() {
        // det H = h^{1-k} det(G - h F(tau)/z 1 c^T).
        let model = mixed_model();
        let ctx = SpectralContext::from_model(&model).unwrap();
        let kernel = quad_kernel(model.compute_tau());
        let z = 9.0;
        let b = GBundle::at(&ctx, &kernel, z).unwrap();
        let h_mat = h_z(&ctx, &kernel, z).unwrap();
        let k = ctx.k();
        let ones = DVector::from_element(k, 1.0);
        let g_bar = &b.matrix - &ones * ctx.c.transpose() * (b.h * kernel.f_cap() / z);
        let lhs = h_mat.determinant();
        let rhs = b.h.powi(1 - k as i32) * g_bar.determinant();
        assert!(
            (lhs - rhs).abs() < 1e-9 * rhs.abs().max(1.0),
            "det H = {lhs}, factored = {rhs}"
        );
    }

    #[test]
    fn derivative_bundle_matches_finite_differences() {
        let model = mixed_model();
        let ctx = SpectralContext::from_model(&model).unwrap();
        let kernel = quad_kernel(model.compute_tau());
        let z = 9.0;
        let b = GBundle::at(&ctx, &kernel, z).unwrap();
        let primes = b.primes(&ctx, &kernel).unwrap();
        let step = 1e-5;
        let plus = GBundle::at(&ctx, &kernel, z + step).unwrap();
        let minus = GBundle::at(&ctx, &kernel, z - step).unwrap();
        let fd = (&plus.matrix - &minus.matrix) / (2.0 * step);
        let err = (&fd - &primes.matrix_prime).norm() / primes.matrix_prime.norm();
        assert!(err < 1e-5, "relative FD mismatch on G': {err}");
        let fd_h = (plus.h - minus.h) / (2.0 * step);
        assert!((fd_h - primes.h_prime).abs() < 1e-6 * primes.h_prime.abs().max(1e-3));
    }

    /// Equal proportions (1/4, 1/4, 1/2), unit covariances, means 5 e_a, c0 = 4:
    /// h(tau, z) reduces to 1 + (123/16) g(z), whose root is z = x(-16/123),
    /// and the informative determinant roots sit at the hand-computed points.
    #[test]
    fn quadratic_kernel_three_class_oracles() {
        let p = 64;
        let classes = vec![
            ClassSpec {
                mean: axis_mean(p, 0, 5.0),
                covariance: CovarianceSpec::ScaledIdentity { beta: 1.0 },
                size: 4,
            },
            ClassSpec {
                mean: axis_mean(p, 1, 5.0),
                covariance: CovarianceSpec::ScaledIdentity { beta: 1.0 },
                size: 4,
            },
            ClassSpec {
                mean: axis_mean(p, 2, 5.0),
                covariance: CovarianceSpec::ScaledIdentity { beta: 1.0 },
                size: 8,
            },
        ];
        let model = MixtureModel::new(classes, p, 0.0).unwrap();
        assert!((model.compute_tau() - 2.0).abs() < 1e-12);
        let ctx = SpectralContext::from_model(&model).unwrap();
        let kernel = quad_kernel(2.0);

        // h vanishes at rho_plus = x(-1/7.6875) = 1.921875 + 7.6875/6.6875.
        let rho_plus = 1.921875 + 7.6875 / 6.6875;
        let b = GBundle::at(&ctx, &kernel, rho_plus).unwrap();
        assert!(b.h.abs() < 1e-8, "h at rho_plus: {}", b.h);

        // G restricted to the complement of c is singular at rho = 2.9725
        // (spike of the class-mean structure) and regular between the roots.
        let vc = SpectralContext::complement_basis(&ctx.c);
        let reduced = |z: f64| {
            let b = GBundle::at(&ctx, &kernel, z).unwrap();
            let r = vc.transpose() * &b.matrix * &vc;
            let svd = r.svd(false, false);
            let max = svd.singular_values.max();
            svd.singular_values.min() / max
        };
        assert!(reduced(2.9725) < 1e-7, "reduced G not singular at 2.9725");
        assert!(reduced(3.4) > 1e-4, "reduced G spuriously singular at 3.4");
        assert!(
            reduced(7.25 / 4.0 + 7.25 / 6.25) < 1e-7,
            "reduced G not singular at the second informative root"
        );
    }

    #[test]
    fn zero_branch_matches_companion_identity() {
        let model = mixed_model();
        let ctx = SpectralContext::from_model(&model).unwrap();
        let tau = model.compute_tau();
        let kernel = KernelProfile::new(tau, 3.0, 1.0, 0.0, 0.5, None).unwrap();
        assert_eq!(kernel.branch, Branch::ZeroDerivative);
        let z = 1.7;
        let zb = ZeroBundle::at(&ctx, &kernel, z).unwrap();
        let h0 = h0_z(&ctx, &kernel, z).unwrap();
        let expected = &h0 * (-zb.h0 / z);
        assert!(
            (&zb.matrix - &expected).norm() < 1e-12 * expected.norm().max(1.0),
            "G0 != -(h0/z) H0"
        );
        // Analytic primes against finite differences.
        let step = 1e-6;
        let plus = ZeroBundle::at(&ctx, &kernel, z + step).unwrap();
        let minus = ZeroBundle::at(&ctx, &kernel, z - step).unwrap();
        let fd = (&plus.matrix - &minus.matrix) / (2.0 * step);
        assert!((&fd - &zb.matrix_prime).norm() < 1e-6 * zb.matrix_prime.norm().max(1.0));
    }
}
