//! Gaussian mixture model specification and its population statistics.
//!
//! Samples follow x_i = mu_a + sqrt(p) w_i with w_i ~ (0, C_a / p), class a of k,
//! n_a samples per class, n total, dimension p. Everything the asymptotic theory
//! needs is collected in [`ClassStatistics`]: centered means, trace offsets t,
//! trace cross products T, squared-trace scales, and norm-fluctuation variances.

use crate::covariance::{build_engine, CovarianceSpec, ResolventEngine};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct ClassSpec {
    pub mean: DVector<f64>,
    pub covariance: CovarianceSpec,
    pub size: usize,
}

#[derive(Debug, Clone)]
pub struct MixtureModel {
    pub classes: Vec<ClassSpec>,
    pub p: usize,
    pub n: usize,
    /// Excess kurtosis of the sampling entries (0 for Gaussian), >= -2.
    pub kurtosis: f64,
}

/// Population statistics entering the deterministic equivalents.
#[derive(Debug, Clone)]
pub struct ClassStatistics {
    /// p x k matrix of centered class means (columns sum to zero against c).
    pub m: DMatrix<f64>,
    /// t_a = tr(C_a - C_mean)/sqrt(p).
    pub t: DVector<f64>,
    /// T_ab = tr((C_a - C_mean)(C_b - C_mean))/p.
    pub t_mat: DMatrix<f64>,
    /// (2/p) tr C_a^2.
    pub trace_sq: DVector<f64>,
    /// Limiting variance of the centered norm fluctuation psi_i per class.
    pub psi_var: DVector<f64>,
    /// Mixture covariance sum_a c_a C_a.
    pub mixture: CovarianceSpec,
}

impl MixtureModel {
    pub fn new(classes: Vec<ClassSpec>, p: usize, kurtosis: f64) -> Result<Self> {
        let n = classes.iter().map(|c| c.size).sum();
        let model = MixtureModel { classes, p, n, kurtosis };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes.len();
        if k == 0 {
            return Err(Error::Invalid("model needs at least one class".into()));
        }
        if self.p == 0 {
            return Err(Error::Invalid("model dimension p must be positive".into()));
        }
        if self.kurtosis < -2.0 {
            return Err(Error::Invalid(format!(
                "excess kurtosis must be >= -2, got {}",
                self.kurtosis
            )));
        }
        let nsum: usize = self.classes.iter().map(|c| c.size).sum();
        if nsum != self.n {
            return Err(Error::Dimension(format!(
                "class sizes sum to {nsum}, model says n = {}",
                self.n
            )));
        }
        for (a, class) in self.classes.iter().enumerate() {
            if class.size == 0 {
                return Err(Error::Invalid(format!("class {a} is empty")));
            }
            if class.mean.len() != self.p {
                return Err(Error::Dimension(format!(
                    "class {a} mean has dimension {}, expected {}",
                    class.mean.len(),
                    self.p
                )));
            }
            class.covariance.validate(self.p, k)?;
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    /// c_0 = p / n.
    pub fn c0(&self) -> f64 {
        self.p as f64 / self.n as f64
    }

    /// Class proportions c_a = n_a / n.
    pub fn proportions(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.k(),
            self.classes.iter().map(|c| c.size as f64 / self.n as f64),
        )
    }

    /// Distance concentration point tau = (2/p) tr C_mean.
    pub fn compute_tau(&self) -> f64 {
        let c = self.proportions();
        let k = self.k();
        let mixed: f64 = self
            .classes
            .iter()
            .enumerate()
            .map(|(a, cl)| c[a] * cl.covariance.trace(self.p, k))
            .sum();
        2.0 * mixed / self.p as f64
    }

    /// Centered class means as a p x k matrix.
    pub fn centered_means(&self) -> DMatrix<f64> {
        let k = self.k();
        let c = self.proportions();
        let mut grand = DVector::zeros(self.p);
        for (a, cl) in self.classes.iter().enumerate() {
            grand += &cl.mean * c[a];
        }
        let mut m = DMatrix::zeros(self.p, k);
        for (a, cl) in self.classes.iter().enumerate() {
            m.set_column(a, &(&cl.mean - &grand));
        }
        m
    }

    /// Mixture covariance sum_a c_a C_a, in the tightest representation available.
    pub fn mixture_covariance(&self) -> Result<CovarianceSpec> {
        let k = self.k();
        let c = self.proportions();
        if self
            .classes
            .iter()
            .all(|cl| matches!(cl.covariance, CovarianceSpec::ScaledIdentity { .. }))
        {
            let beta = self
                .classes
                .iter()
                .enumerate()
                .map(|(a, cl)| match cl.covariance {
                    CovarianceSpec::ScaledIdentity { beta } => c[a] * beta,
                    _ => unreachable!(),
                })
                .sum();
            return Ok(CovarianceSpec::ScaledIdentity { beta });
        }
        let diags: Vec<Option<DVector<f64>>> = self
            .classes
            .iter()
            .map(|cl| cl.covariance.diagonal_realization(self.p, k))
            .collect();
        if diags.iter().all(|d| d.is_some()) {
            let mut mix = DVector::zeros(self.p);
            for (a, d) in diags.into_iter().enumerate() {
                mix += d.unwrap() * c[a];
            }
            // Collapse to a spectral measure with exact per-value weights.
            let mut vals: Vec<f64> = mix.iter().copied().collect();
            vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let mut atoms: Vec<(f64, f64)> = Vec::new();
            for v in vals {
                match atoms.last_mut() {
                    Some(last) if last.0 == v => last.1 += 1.0,
                    _ => atoms.push((v, 1.0)),
                }
            }
            for a in &mut atoms {
                a.1 /= self.p as f64;
            }
            return Ok(CovarianceSpec::SpectralMeasure { atoms });
        }
        let mut mix = DMatrix::zeros(self.p, self.p);
        for (a, cl) in self.classes.iter().enumerate() {
            mix += cl.covariance.realize_dense(self.p, k)? * c[a];
        }
        Ok(CovarianceSpec::Dense(mix))
    }

    /// Assembles all population statistics.
    pub fn compute_statistics(&self) -> Result<ClassStatistics> {
        let k = self.k();
        let p = self.p as f64;
        let c = self.proportions();
        let m = self.centered_means();

        let traces: Vec<f64> = self
            .classes
            .iter()
            .map(|cl| cl.covariance.trace(self.p, k))
            .collect();
        let mix_trace: f64 = traces.iter().zip(c.iter()).map(|(tr, ca)| tr * ca).sum();
        let t = DVector::from_iterator(
            k,
            traces.iter().map(|tr| (tr - mix_trace) / p.sqrt()),
        );

        // Pairwise tr(C_a C_b), then center both sides against the mixture.
        let mut prod = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in a..k {
                let v = self.classes[a]
                    .covariance
                    .trace_prod(&self.classes[b].covariance, self.p, k)?;
                prod[(a, b)] = v;
                prod[(b, a)] = v;
            }
        }
        let pc = &prod * &c;
        let cpc = c.dot(&pc);
        let mut t_mat = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in 0..k {
                t_mat[(a, b)] = (prod[(a, b)] - pc[a] - pc[b] + cpc) / p;
            }
        }

        let trace_sq = DVector::from_iterator(
            k,
            self.classes
                .iter()
                .map(|cl| 2.0 * cl.covariance.trace_sq(self.p, k) / p),
        );
        let psi_var = DVector::from_iterator(
            k,
            self.classes.iter().map(|cl| {
                2.0 * cl.covariance.trace_sq(self.p, k) / p
                    + self.kurtosis * cl.covariance.trace_diag_sq(self.p, k) / p
            }),
        );

        let stats = ClassStatistics {
            m,
            t,
            t_mat,
            trace_sq,
            psi_var,
            mixture: self.mixture_covariance()?,
        };
        debug_assert!((&stats.m * &c).norm() < 1e-10, "centered means must annihilate c");
        debug_assert!(stats.t.dot(&c).abs() < 1e-10, "t must be centered against c");
        Ok(stats)
    }

    /// Resolvent engine over the class covariances and centered means.
    pub fn engine(&self) -> Result<ResolventEngine> {
        let covs: Vec<CovarianceSpec> =
            self.classes.iter().map(|cl| cl.covariance.clone()).collect();
        build_engine(&covs, &self.centered_means(), self.p)
    }

    /// Non-fatal growth diagnostics: statistics that must stay O(1) for the
    /// asymptotic regime to be meaningful.
    pub fn growth_check(&self) -> Vec<String> {
        let k = self.k();
        let mut warnings = Vec::new();
        let m = self.centered_means();
        for (a, cl) in self.classes.iter().enumerate() {
            let mean_norm = m.column(a).norm();
            if mean_norm > 10.0 {
                warnings.push(format!(
                    "class {a}: centered mean norm {mean_norm:.2} exceeds 10; growth-rate assumptions strained"
                ));
            }
            let op = cl.covariance.op_norm(self.p, k);
            if op > 50.0 {
                warnings.push(format!(
                    "class {a}: covariance operator norm {op:.2} exceeds 50"
                ));
            }
        }
        if let Ok(stats) = self.compute_statistics() {
            for (a, ta) in stats.t.iter().enumerate() {
                if ta.abs() > 10.0 {
                    warnings.push(format!(
                        "class {a}: trace offset t = {ta:.2} exceeds 10 in magnitude"
                    ));
                }
            }
        }
        warnings
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn fig3_like(p: usize, n: usize) -> MixtureModel {
        // Three classes, proportions (1/4, 1/4, 1/2), means 4 e_i, C_i = (1 + 2(i-1)/sqrt p) I.
        let sizes = [n / 4, n / 4, n / 2];
        let classes = (0..3)
            .map(|i| {
                let mut mean = DVector::zeros(p);
                mean[i] = 4.0;
                ClassSpec {
                    mean,
                    covariance: CovarianceSpec::ScaledIdentity {
                        beta: 1.0 + 2.0 * i as f64 / (p as f64).sqrt(),
                    },
                    size: sizes[i],
                }
            })
            .collect();
        MixtureModel::new(classes, p, 0.0).unwrap()
    }

    #[test]
    fn tau_single_identity_class() {
        let model = MixtureModel::new(
            vec![ClassSpec {
                mean: DVector::zeros(16),
                covariance: CovarianceSpec::ScaledIdentity { beta: 1.0 },
                size: 8,
            }],
            16,
            0.0,
        )
        .unwrap();
        assert_relative_eq!(model.compute_tau(), 2.0);
    }

    #[test]
    fn tau_small_diagonal_example() {
        let model = MixtureModel::new(
            vec![ClassSpec {
                mean: DVector::zeros(4),
                covariance: CovarianceSpec::SpectralMeasure {
                    atoms: vec![(1.0, 0.25), (2.0, 0.25), (3.0, 0.25), (4.0, 0.25)],
                },
                size: 4,
            }],
            4,
            0.0,
        )
        .unwrap();
        assert_relative_eq!(model.compute_tau(), 5.0);
    }

    #[test]
    fn tau_fig3_configuration() {
        let p = 2048;
        let model = fig3_like(p, 512);
        assert_relative_eq!(model.compute_tau(), 2.0 + 5.0 / (p as f64).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn statistics_invariants() {
        let model = fig3_like(512, 128);
        let stats = model.compute_statistics().unwrap();
        let c = model.proportions();
        assert!((stats.m.clone() * &c).norm() < 1e-10);
        assert!(stats.t.dot(&c).abs() < 1e-10);
        assert!((&stats.t_mat * &c).norm() < 1e-10);
        // Identical scaled identities: T_ab = tr(C_a' C_b')/p with C_a' = (beta_a - mean) I.
        let p = 512f64;
        let betas: Vec<f64> = (0..3).map(|i| 1.0 + 2.0 * i as f64 / p.sqrt()).collect();
        let mixed: f64 = betas.iter().zip(c.iter()).map(|(b, ca)| b * ca).sum();
        for a in 0..3 {
            for b in 0..3 {
                let expect = (betas[a] - mixed) * (betas[b] - mixed);
                assert_relative_eq!(stats.t_mat[(a, b)], expect, epsilon = 1e-12);
            }
        }
        // Gaussian entries: psi variance is (2/p) tr C^2 exactly.
        for a in 0..3 {
            assert_relative_eq!(stats.psi_var[a], stats.trace_sq[a], epsilon = 1e-12);
        }
    }

    #[test]
    fn growth_check_flags_large_means() {
        let p = 64;
        let mut mean = DVector::zeros(p);
        mean[0] = 100.0;
        let model = MixtureModel::new(
            vec![
                ClassSpec {
                    mean,
                    covariance: CovarianceSpec::ScaledIdentity { beta: 1.0 },
                    size: 8,
                },
                ClassSpec {
                    mean: DVector::zeros(p),
                    covariance: CovarianceSpec::ScaledIdentity { beta: 1.0 },
                    size: 8,
                },
            ],
            p,
            0.0,
        )
        .unwrap();
        assert!(!model.growth_check().is_empty());
    }

    #[test]
    fn size_mismatch_rejected() {
        let bad = MixtureModel {
            classes: vec![ClassSpec {
                mean: DVector::zeros(4),
                covariance: CovarianceSpec::ScaledIdentity { beta: 1.0 },
                size: 3,
            }],
            p: 4,
            n: 5,
            kurtosis: 0.0,
        };
        assert!(bad.validate().is_err());
    }
}
