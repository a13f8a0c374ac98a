//! Class covariance representations and the resolvent engines built from them.
//!
//! Every per-class covariance is a p x p symmetric PSD matrix, given in one of
//! four forms. The spectral machinery never needs the matrices themselves, only
//! traces of products with the joint resolvent A(z)^{-1} = (I + sum_b c_b g_b C_b)^{-1}
//! and projections of the centered means through it. When all classes are
//! simultaneously diagonalizable those quantities collapse to sums over joint
//! eigenvalue sectors; otherwise a dense fallback factors A(z) explicitly.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Symmetric PSD covariance of one class.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceSpec {
    /// Explicit p x p symmetric PSD matrix.
    Dense(DMatrix<f64>),
    /// beta * I_p with beta > 0.
    ScaledIdentity { beta: f64 },
    /// Block-diagonal with k blocks of size p/k: block `position` is d2, the rest d1.
    BlockSymmetric {
        d1: DMatrix<f64>,
        d2: DMatrix<f64>,
        position: usize,
    },
    /// Deterministic diagonal realization of a discrete spectral measure:
    /// `atoms` is a list of (eigenvalue, weight) with nonnegative eigenvalues and
    /// weights summing to one.
    SpectralMeasure { atoms: Vec<(f64, f64)> },
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("{what} must be square, got {}x{}", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::Invalid(format!("{what} is not symmetric at ({i},{j})")));
            }
        }
    }
    Ok(())
}

/// Largest-remainder apportionment of p coordinates to atom weights.
fn apportion(weights: &[f64], p: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = weights.iter().map(|w| (w * p as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut rema: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (i, w * p as f64 - counts[i] as f64))
        .collect();
    rema.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in rema.into_iter().take(p.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

impl CovarianceSpec {
    /// Validates shape and structural constraints for a model with k classes in dimension p.
    pub fn validate(&self, p: usize, k: usize) -> Result<()> {
        match self {
            CovarianceSpec::Dense(m) => {
                check_symmetric(m, "dense covariance")?;
                if m.nrows() != p {
                    return Err(Error::Dimension(format!(
                        "dense covariance is {}x{}, model dimension is {p}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                Ok(())
            }
            CovarianceSpec::ScaledIdentity { beta } => {
                if !(*beta > 0.0) {
                    return Err(Error::Invalid(format!("scaled identity needs beta > 0, got {beta}")));
                }
                Ok(())
            }
            CovarianceSpec::BlockSymmetric { d1, d2, position } => {
                check_symmetric(d1, "block d1")?;
                check_symmetric(d2, "block d2")?;
                if k == 0 || p % k != 0 {
                    return Err(Error::Dimension(format!(
                        "block-symmetric covariance needs p divisible by k, got p={p}, k={k}"
                    )));
                }
                let b = p / k;
                if d1.nrows() != b || d2.nrows() != b {
                    return Err(Error::Dimension(format!(
                        "block sizes {}x{} and {}x{} do not match p/k = {b}",
                        d1.nrows(),
                        d1.ncols(),
                        d2.nrows(),
                        d2.ncols()
                    )));
                }
                if *position >= k {
                    return Err(Error::Invalid(format!("block position {position} out of range (k={k})")));
                }
                Ok(())
            }
            CovarianceSpec::SpectralMeasure { atoms } => {
                if atoms.is_empty() {
                    return Err(Error::Invalid("spectral measure needs at least one atom".into()));
                }
                let mut total = 0.0;
                for &(u, w) in atoms {
                    if !(u >= 0.0) {
                        return Err(Error::Invalid(format!("spectral atom {u} is negative")));
                    }
                    if !(w > 0.0) {
                        return Err(Error::Invalid(format!("spectral weight {w} is not positive")));
                    }
                    total += w;
                }
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::Invalid(format!(
                        "spectral weights sum to {total}, expected 1 within 1e-12"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Diagonal of the matrix as a length-p vector, when the representation is
    /// exactly diagonal. Dense inputs qualify only if all off-diagonal entries are zero.
    pub fn diagonal_realization(&self, p: usize, k: usize) -> Option<DVector<f64>> {
        match self {
            CovarianceSpec::ScaledIdentity { beta } => Some(DVector::from_element(p, *beta)),
            CovarianceSpec::SpectralMeasure { atoms } => {
                let weights: Vec<f64> = atoms.iter().map(|a| a.1).collect();
                let counts = apportion(&weights, p);
                let mut d = DVector::zeros(p);
                let mut at = 0;
                for (idx, &cnt) in counts.iter().enumerate() {
                    for _ in 0..cnt {
                        d[at] = atoms[idx].0;
                        at += 1;
                    }
                }
                Some(d)
            }
            CovarianceSpec::BlockSymmetric { d1, d2, position } => {
                let is_diag = |m: &DMatrix<f64>| {
                    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
                };
                if !is_diag(d1) || !is_diag(d2) {
                    return None;
                }
                let b = p / k;
                let mut d = DVector::zeros(p);
                for blk in 0..k {
                    let src = if blk == *position { d2 } else { d1 };
                    for i in 0..b {
                        d[blk * b + i] = src[(i, i)];
                    }
                }
                Some(d)
            }
            CovarianceSpec::Dense(m) => {
                let diag_only =
                    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0));
                if diag_only {
                    Some(DVector::from_fn(p, |i, _| m[(i, i)]))
                } else {
                    None
                }
            }
        }
    }

    /// Materializes the full p x p matrix. Guarded against very large dimensions.
    pub fn realize_dense(&self, p: usize, k: usize) -> Result<DMatrix<f64>> {
        if p > 4096 {
            return Err(Error::Dimension(format!(
                "dense realization requested at p = {p}; supported up to 4096"
            )));
        }
        if let Some(d) = self.diagonal_realization(p, k) {
            return Ok(DMatrix::from_diagonal(&d));
        }
        match self {
            CovarianceSpec::Dense(m) => Ok(m.clone()),
            CovarianceSpec::BlockSymmetric { d1, d2, position } => {
                let b = p / k;
                let mut out = DMatrix::zeros(p, p);
                for blk in 0..k {
                    let src = if blk == *position { d2 } else { d1 };
                    out.view_mut((blk * b, blk * b), (b, b)).copy_from(src);
                }
                Ok(out)
            }
            _ => unreachable!("diagonal cases handled above"),
        }
    }

    pub fn trace(&self, p: usize, k: usize) -> f64 {
        match self {
            CovarianceSpec::Dense(m) => m.trace(),
            CovarianceSpec::ScaledIdentity { beta } => beta * p as f64,
            CovarianceSpec::BlockSymmetric { d1, d2, .. } => (k as f64 - 1.0) * d1.trace() + d2.trace(),
            CovarianceSpec::SpectralMeasure { .. } => {
                self.diagonal_realization(p, k).unwrap().sum()
            }
        }
    }

    /// tr C^2.
    pub fn trace_sq(&self, p: usize, k: usize) -> f64 {
        match self {
            CovarianceSpec::Dense(m) => m.iter().map(|v| v * v).sum(),
            CovarianceSpec::ScaledIdentity { beta } => beta * beta * p as f64,
            CovarianceSpec::BlockSymmetric { d1, d2, .. } => {
                let sq = |m: &DMatrix<f64>| m.iter().map(|v| v * v).sum::<f64>();
                (k as f64 - 1.0) * sq(d1) + sq(d2)
            }
            CovarianceSpec::SpectralMeasure { .. } => self
                .diagonal_realization(p, k)
                .unwrap()
                .iter()
                .map(|v| v * v)
                .sum(),
        }
    }

    /// tr(diag(C)^2), entering the entrywise-kurtosis correction of the norm fluctuation.
    pub fn trace_diag_sq(&self, p: usize, k: usize) -> f64 {
        match self {
            CovarianceSpec::Dense(m) => (0..p).map(|i| m[(i, i)] * m[(i, i)]).sum(),
            CovarianceSpec::BlockSymmetric { d1, d2, .. } => {
                let dsq = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m[(i, i)] * m[(i, i)]).sum::<f64>();
                (k as f64 - 1.0) * dsq(d1) + dsq(d2)
            }
            _ => self.trace_sq(p, k),
        }
    }

    /// Operator norm (largest eigenvalue; the matrix is PSD).
    pub fn op_norm(&self, p: usize, k: usize) -> f64 {
        if let Some(d) = self.diagonal_realization(p, k) {
            return d.amax();
        }
        match self {
            CovarianceSpec::Dense(m) => m.clone().symmetric_eigen().eigenvalues.amax(),
            CovarianceSpec::BlockSymmetric { d1, d2, .. } => {
                let top = |m: &DMatrix<f64>| m.clone().symmetric_eigen().eigenvalues.amax();
                top(d1).max(top(d2))
            }
            _ => unreachable!(),
        }
    }

    /// tr(C_a C_b) for two covariances of the same model.
    pub fn trace_prod(&self, other: &CovarianceSpec, p: usize, k: usize) -> Result<f64> {
        if let CovarianceSpec::ScaledIdentity { beta } = self {
            return Ok(beta * other.trace(p, k));
        }
        if let CovarianceSpec::ScaledIdentity { beta } = other {
            return Ok(beta * self.trace(p, k));
        }
        match (self.diagonal_realization(p, k), other.diagonal_realization(p, k)) {
            (Some(a), Some(b)) => Ok(a.dot(&b)),
            _ => {
                if let (
                    CovarianceSpec::BlockSymmetric { d1: a1, d2: a2, position: pa },
                    CovarianceSpec::BlockSymmetric { d1: b1, d2: b2, position: pb },
                ) = (self, other)
                {
                    let pr = |x: &DMatrix<f64>, y: &DMatrix<f64>| (x * y).trace();
                    let mut acc = 0.0;
                    for blk in 0..k {
                        let xa = if blk == *pa { a2 } else { a1 };
                        let xb = if blk == *pb { b2 } else { b1 };
                        acc += pr(xa, xb);
                    }
                    return Ok(acc);
                }
                let a = self.realize_dense(p, k)?;
                let b = other.realize_dense(p, k)?;
                Ok(a.iter().zip(b.transpose().iter()).map(|(x, y)| x * y).sum())
            }
        }
    }

    /// Exact empirical spectral atoms (eigenvalue, weight), weights summing to one.
    pub fn spectrum(&self, p: usize, k: usize) -> Result<Vec<(f64, f64)>> {
        if let Some(d) = self.diagonal_realization(p, k) {
            let mut vals: Vec<f64> = d.iter().copied().collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut out: Vec<(f64, f64)> = Vec::new();
            for v in vals {
                match out.last_mut() {
                    Some(last) if last.0 == v => last.1 += 1.0,
                    _ => out.push((v, 1.0)),
                }
            }
            for e in &mut out {
                e.1 /= p as f64;
            }
            return Ok(out);
        }
        match self {
            CovarianceSpec::Dense(m) => {
                let eig = m.clone().symmetric_eigen();
                Ok(eig.eigenvalues.iter().map(|&v| (v, 1.0 / p as f64)).collect())
            }
            CovarianceSpec::BlockSymmetric { d1, d2, .. } => {
                let e1 = d1.clone().symmetric_eigen().eigenvalues;
                let e2 = d2.clone().symmetric_eigen().eigenvalues;
                let mut out: Vec<(f64, f64)> = Vec::new();
                let w1 = (k as f64 - 1.0) / p as f64;
                out.extend(e1.iter().map(|&v| (v, w1)));
                out.extend(e2.iter().map(|&v| (v, 1.0 / p as f64)));
                Ok(out)
            }
            _ => unreachable!(),
        }
    }

    /// Factor S with S S^T = C, for sampling. Small negative eigenvalues from
    /// roundoff are clamped to zero; genuinely negative ones are an error.
    pub fn sqrt_factor(&self, p: usize, k: usize) -> Result<CovSqrt> {
        if let CovarianceSpec::ScaledIdentity { beta } = self {
            return Ok(CovSqrt::Scalar(beta.sqrt()));
        }
        if let Some(d) = self.diagonal_realization(p, k) {
            return Ok(CovSqrt::Diagonal(d.map(|v| v.sqrt())));
        }
        let dense_sqrt = |m: &DMatrix<f64>| -> Result<DMatrix<f64>> {
            let eig = m.clone().symmetric_eigen();
            let scale = eig.eigenvalues.amax().max(1.0);
            let mut vals = eig.eigenvalues.clone();
            for v in vals.iter_mut() {
                if *v < -1e-10 * scale {
                    return Err(Error::Invalid(format!(
                        "covariance has negative eigenvalue {v:.3e}; not PSD"
                    )));
                }
                *v = v.max(0.0).sqrt();
            }
            Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
        };
        match self {
            CovarianceSpec::Dense(m) => Ok(CovSqrt::Dense(dense_sqrt(m)?)),
            CovarianceSpec::BlockSymmetric { d1, d2, position } => Ok(CovSqrt::Blocks {
                s1: dense_sqrt(d1)?,
                s2: dense_sqrt(d2)?,
                position: *position,
                block: p / k,
            }),
            _ => unreachable!(),
        }
    }
}

/// Symmetric square root of a covariance, in a form matching its structure.
#[derive(Debug, Clone)]
pub enum CovSqrt {
    Scalar(f64),
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
    Blocks { s1: DMatrix<f64>, s2: DMatrix<f64>, position: usize, block: usize },
}

impl CovSqrt {
    /// Applies the factor to a p x m matrix of draws.
    pub fn apply(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            CovSqrt::Scalar(s) => z * *s,
            CovSqrt::Diagonal(d) => {
                let mut out = z.clone();
                for mut col in out.column_iter_mut() {
                    col.component_mul_assign(d);
                }
                out
            }
            CovSqrt::Dense(s) => s * z,
            CovSqrt::Blocks { s1, s2, position, block } => {
                let mut out = DMatrix::zeros(z.nrows(), z.ncols());
                let k = z.nrows() / block;
                for blk in 0..k {
                    let src = if blk == *position { s2 } else { s1 };
                    let rows = z.rows(blk * block, *block);
                    out.rows_mut(blk * block, *block).copy_from(&(src * rows));
                }
                out
            }
        }
    }
}

/// Joint-eigenbasis representation of all class covariances plus the centered means:
/// sector j carries weight w_j = dim_j / p, one eigenvalue per class, and the
/// k x k Gram of the centered means restricted to the sector.
#[derive(Debug, Clone)]
pub struct JointSpectrumEngine {
    pub k: usize,
    pub weights: Vec<f64>,
    pub evals: Vec<Vec<f64>>,
    pub grams: Vec<DMatrix<f64>>,
    pub m_m: DMatrix<f64>,
}

/// Dense fallback: materialized covariances, complex resolvent factored per evaluation.
#[derive(Debug, Clone)]
pub struct DenseEngine {
    pub k: usize,
    pub p: usize,
    pub covs: Vec<DMatrix<f64>>,
    pub m: DMatrix<f64>,
    pub m_m: DMatrix<f64>,
}

/// Resolvent-side computations shared by the deterministic-equivalent machinery.
#[derive(Debug, Clone)]
pub enum ResolventEngine {
    Joint(JointSpectrumEngine),
    Dense(DenseEngine),
}

impl JointSpectrumEngine {
    fn dens(&self, cg: &[Complex64]) -> Vec<Complex64> {
        self.evals
            .iter()
            .map(|u| {
                let mut d = Complex64::new(1.0, 0.0);
                for (a, &ua) in u.iter().enumerate() {
                    d += cg[a] * ua;
                }
                d
            })
            .collect()
    }
}

impl DenseEngine {
    fn a_inverse(&self, cg: &[Complex64]) -> Result<DMatrix<Complex64>> {
        let mut a = DMatrix::<Complex64>::identity(self.p, self.p);
        for (b, cov) in self.covs.iter().enumerate() {
            a.zip_apply(cov, |av, cv| *av += cg[b] * cv);
        }
        a.try_inverse().ok_or_else(|| Error::Numerical("resolvent matrix is singular".into()))
    }
}

impl ResolventEngine {
    pub fn k(&self) -> usize {
        match self {
            ResolventEngine::Joint(e) => e.k,
            ResolventEngine::Dense(e) => e.k,
        }
    }

    pub fn m_m(&self) -> &DMatrix<f64> {
        match self {
            ResolventEngine::Joint(e) => &e.m_m,
            ResolventEngine::Dense(e) => &e.m_m,
        }
    }

    /// s_a = (1/p) tr C_a A^{-1} with A = I + sum_b cg_b C_b.
    pub fn s_traces(&self, cg: &[Complex64]) -> Result<Vec<Complex64>> {
        match self {
            ResolventEngine::Joint(e) => {
                let dens = e.dens(cg);
                Ok((0..e.k)
                    .map(|a| {
                        let mut acc = Complex64::default();
                        for (j, d) in dens.iter().enumerate() {
                            acc += e.weights[j] * e.evals[j][a] / d;
                        }
                        acc
                    })
                    .collect())
            }
            ResolventEngine::Dense(e) => {
                let ainv = e.a_inverse(cg)?;
                Ok(e.covs
                    .iter()
                    .map(|c| {
                        let mut acc = Complex64::default();
                        for i in 0..e.p {
                            for j in 0..e.p {
                                acc += c[(i, j)] * ainv[(j, i)];
                            }
                        }
                        acc / e.p as f64
                    })
                    .collect())
            }
        }
    }

    /// M^T A^{-1} M.
    pub fn m_ainv_m(&self, cg: &[Complex64]) -> Result<DMatrix<Complex64>> {
        match self {
            ResolventEngine::Joint(e) => {
                let dens = e.dens(cg);
                let mut out = DMatrix::<Complex64>::zeros(e.k, e.k);
                for (j, d) in dens.iter().enumerate() {
                    let w = d.inv();
                    out.zip_apply(&e.grams[j], |ov, gv| *ov += w * gv);
                }
                Ok(out)
            }
            ResolventEngine::Dense(e) => {
                let ainv = e.a_inverse(cg)?;
                let mc = e.m.map(|v| Complex64::new(v, 0.0));
                Ok(mc.transpose() * ainv * mc)
            }
        }
    }

    /// Cross traces (1/p) tr C_a A_1^{-1} C_b A_2^{-1} as a k x k matrix.
    pub fn cross_traces(&self, cg1: &[Complex64], cg2: &[Complex64]) -> Result<DMatrix<Complex64>> {
        match self {
            ResolventEngine::Joint(e) => {
                let d1 = e.dens(cg1);
                let d2 = e.dens(cg2);
                let mut out = DMatrix::<Complex64>::zeros(e.k, e.k);
                for j in 0..e.weights.len() {
                    let w = e.weights[j] / (d1[j] * d2[j]);
                    for a in 0..e.k {
                        for b in 0..e.k {
                            out[(a, b)] += w * e.evals[j][a] * e.evals[j][b];
                        }
                    }
                }
                Ok(out)
            }
            ResolventEngine::Dense(e) => {
                let a1 = self.dense_ainv(cg1)?;
                let a2 = self.dense_ainv(cg2)?;
                let xs: Vec<DMatrix<Complex64>> = e
                    .covs
                    .iter()
                    .map(|c| {
                        let cc = c.map(|v| Complex64::new(v, 0.0));
                        &cc * &a1
                    })
                    .collect();
                let ys: Vec<DMatrix<Complex64>> = e
                    .covs
                    .iter()
                    .map(|c| {
                        let cc = c.map(|v| Complex64::new(v, 0.0));
                        &cc * &a2
                    })
                    .collect();
                let mut out = DMatrix::<Complex64>::zeros(e.k, e.k);
                for a in 0..e.k {
                    for b in 0..e.k {
                        let mut acc = Complex64::default();
                        for i in 0..e.p {
                            for j in 0..e.p {
                                acc += xs[a][(i, j)] * ys[b][(j, i)];
                            }
                        }
                        out[(a, b)] = acc / e.p as f64;
                    }
                }
                Ok(out)
            }
        }
    }

    fn dense_ainv(&self, cg: &[Complex64]) -> Result<DMatrix<Complex64>> {
        match self {
            ResolventEngine::Dense(e) => e.a_inverse(cg),
            _ => unreachable!(),
        }
    }

    /// M^T A_1^{-1} (sum_b w_b C_b) A_2^{-1} M.
    pub fn m_ainv_cw_ainv_m(
        &self,
        cg1: &[Complex64],
        cg2: &[Complex64],
        w: &[Complex64],
    ) -> Result<DMatrix<Complex64>> {
        match self {
            ResolventEngine::Joint(e) => {
                let d1 = e.dens(cg1);
                let d2 = e.dens(cg2);
                let mut out = DMatrix::<Complex64>::zeros(e.k, e.k);
                for j in 0..e.weights.len() {
                    let mut uw = Complex64::default();
                    for (b, &wb) in w.iter().enumerate() {
                        uw += wb * e.evals[j][b];
                    }
                    let f = uw / (d1[j] * d2[j]);
                    out.zip_apply(&e.grams[j], |ov, gv| *ov += f * gv);
                }
                Ok(out)
            }
            ResolventEngine::Dense(e) => {
                let a1 = e.a_inverse(cg1)?;
                let a2 = e.a_inverse(cg2)?;
                let mut cw = DMatrix::<Complex64>::zeros(e.p, e.p);
                for (b, cov) in e.covs.iter().enumerate() {
                    cw.zip_apply(cov, |ov, cv| *ov += w[b] * cv);
                }
                let mc = e.m.map(|v| Complex64::new(v, 0.0));
                Ok(mc.transpose() * a1 * cw * a2 * mc)
            }
        }
    }
}

/// Builds the engine for a list of covariances and the (already centered) mean matrix.
///
/// Prefers the joint-sector representation: exact when every covariance has a
/// diagonal realization, or when the materialized covariances commute (detected by
/// diagonalizing a generic linear combination). Falls back to the dense engine.
pub fn build_engine(
    covs: &[CovarianceSpec],
    m: &DMatrix<f64>,
    p: usize,
) -> Result<ResolventEngine> {
    let k = covs.len();
    let m_m = m.transpose() * m;

    let diags: Vec<Option<DVector<f64>>> =
        covs.iter().map(|c| c.diagonal_realization(p, k)).collect();
    if diags.iter().all(|d| d.is_some()) {
        let diags: Vec<DVector<f64>> = diags.into_iter().map(|d| d.unwrap()).collect();
        return Ok(ResolventEngine::Joint(group_sectors(&diags, m, p, k, m_m)));
    }

    let dense: Vec<DMatrix<f64>> = covs
        .iter()
        .map(|c| c.realize_dense(p, k))
        .collect::<Result<_>>()?;

    // Generic linear combination: if its eigenbasis diagonalizes every class,
    // the family commutes and the sector representation is exact.
    let mut combo = DMatrix::<f64>::zeros(p, p);
    for (a, c) in dense.iter().enumerate() {
        combo += c * (1.0 + a as f64 * 0.618_033_988_749_894_9);
    }
    let eig = combo.symmetric_eigen();
    let v = &eig.eigenvectors;
    let mut all_diag = true;
    let mut rotated: Vec<DMatrix<f64>> = Vec::with_capacity(k);
    for c in &dense {
        let r = v.transpose() * c * v;
        let scale = r.amax().max(1.0);
        'outer: for i in 0..p {
            for j in 0..p {
                if i != j && r[(i, j)].abs() > 1e-9 * scale {
                    all_diag = false;
                    break 'outer;
                }
            }
        }
        if !all_diag {
            break;
        }
        rotated.push(r);
    }
    if all_diag {
        let diags: Vec<DVector<f64>> = rotated
            .iter()
            .map(|r| DVector::from_fn(p, |i, _| r[(i, i)]))
            .collect();
        let m_rot = v.transpose() * m;
        return Ok(ResolventEngine::Joint(group_sectors(&diags, &m_rot, p, k, m_m)));
    }

    Ok(ResolventEngine::Dense(DenseEngine { k, p, covs: dense, m: m.clone(), m_m }))
}

/// Groups coordinates sharing an identical eigenvalue tuple across classes.
fn group_sectors(
    diags: &[DVector<f64>],
    m: &DMatrix<f64>,
    p: usize,
    k: usize,
    m_m: DMatrix<f64>,
) -> JointSpectrumEngine {
    use std::collections::HashMap;
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut weights: Vec<f64> = Vec::new();
    let mut evals: Vec<Vec<f64>> = Vec::new();
    let mut grams: Vec<DMatrix<f64>> = Vec::new();
    for i in 0..p {
        let key: Vec<u64> = diags.iter().map(|d| d[i].to_bits()).collect();
        let j = *index.entry(key).or_insert_with(|| {
            weights.push(0.0);
            evals.push(diags.iter().map(|d| d[i]).collect());
            grams.push(DMatrix::zeros(k, k));
            weights.len() - 1
        });
        weights[j] += 1.0;
        let row = m.row(i);
        for a in 0..k {
            for b in 0..k {
                grams[j][(a, b)] += row[a] * row[b];
            }
        }
    }
    for w in &mut weights {
        *w /= p as f64;
    }
    JointSpectrumEngine { k, weights, evals, grams, m_m }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn atoms_engine() -> (Vec<CovarianceSpec>, DMatrix<f64>, usize) {
        let p = 12;
        let covs = vec![
            CovarianceSpec::SpectralMeasure { atoms: vec![(1.0, 0.5), (3.0, 0.5)] },
            CovarianceSpec::ScaledIdentity { beta: 2.0 },
        ];
        let mut m = DMatrix::zeros(p, 2);
        m[(0, 0)] = 1.0;
        m[(0, 1)] = -1.0;
        m[(7, 0)] = 0.5;
        (covs, m, p)
    }

    #[test]
    fn apportionment_is_exact_and_deterministic() {
        let counts = apportion(&[0.5, 0.5], 5);
        assert_eq!(counts.iter().sum::<usize>(), 5);
        assert_eq!(counts, vec![3, 2]);
        let counts = apportion(&[0.2, 0.3, 0.5], 10);
        assert_eq!(counts, vec![2, 3, 5]);
    }

    #[test]
    fn joint_and_dense_engines_agree() {
        let (covs, m, p) = atoms_engine();
        let joint = build_engine(&covs, &m, p).unwrap();
        assert!(matches!(joint, ResolventEngine::Joint(_)));
        let dense_covs: Vec<CovarianceSpec> = covs
            .iter()
            .map(|c| CovarianceSpec::Dense(c.realize_dense(p, 2).unwrap()))
            .collect();
        // A generic dense pair here is still commuting (both diagonal), so force the
        // dense path by constructing the engine directly.
        let dense = ResolventEngine::Dense(DenseEngine {
            k: 2,
            p,
            covs: dense_covs.iter().map(|c| c.realize_dense(p, 2).unwrap()).collect(),
            m: m.clone(),
            m_m: m.transpose() * &m,
        });
        let cg = [Complex64::new(0.2, 0.3), Complex64::new(-0.1, 0.05)];
        let cg2 = [Complex64::new(-0.3, 0.7), Complex64::new(0.4, 0.1)];
        let s1 = joint.s_traces(&cg).unwrap();
        let s2 = dense.s_traces(&cg).unwrap();
        for (a, b) in s1.iter().zip(s2.iter()) {
            assert_relative_eq!(a.re, b.re, epsilon = 1e-12);
            assert_relative_eq!(a.im, b.im, epsilon = 1e-12);
        }
        let m1 = joint.m_ainv_m(&cg).unwrap();
        let m2 = dense.m_ainv_m(&cg).unwrap();
        assert!((&m1 - &m2).iter().map(|v| v.norm()).fold(0.0, f64::max) < 1e-12);
        let c1 = joint.cross_traces(&cg, &cg2).unwrap();
        let c2 = dense.cross_traces(&cg, &cg2).unwrap();
        assert!((&c1 - &c2).iter().map(|v| v.norm()).fold(0.0, f64::max) < 1e-12);
        let w = [Complex64::new(0.7, -0.2), Complex64::new(0.1, 0.4)];
        let e1 = joint.m_ainv_cw_ainv_m(&cg, &cg2, &w).unwrap();
        let e2 = dense.m_ainv_cw_ainv_m(&cg, &cg2, &w).unwrap();
        assert!((&e1 - &e2).iter().map(|v| v.norm()).fold(0.0, f64::max) < 1e-12);
    }

    #[test]
    fn commuting_dense_covariances_use_joint_path() {
        let p = 6;
        let d1 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]));
        // A rotation shared by both keeps the pair commuting but non-diagonal.
        let mut rot = DMatrix::identity(p, p);
        let (c, s) = (0.6f64, 0.8f64);
        rot[(0, 0)] = c;
        rot[(0, 1)] = -s;
        rot[(1, 0)] = s;
        rot[(1, 1)] = c;
        let c1 = &rot * &d1 * rot.transpose();
        let c2 = &rot * DMatrix::from_diagonal(&DVector::from_vec(vec![2.0; p])) * rot.transpose();
        let m = DMatrix::zeros(p, 2);
        let eng = build_engine(
            &[CovarianceSpec::Dense(c1), CovarianceSpec::Dense(c2)],
            &m,
            p,
        )
        .unwrap();
        assert!(matches!(eng, ResolventEngine::Joint(_)));
    }

    #[test]
    fn block_symmetric_traces() {
        let k = 2;
        let p = 8;
        let d1 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let d2 = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0, 2.0, 2.0]));
        let c = CovarianceSpec::BlockSymmetric { d1: d1.clone(), d2: d2.clone(), position: 1 };
        c.validate(p, k).unwrap();
        assert_relative_eq!(c.trace(p, k), 10.0 + 8.0);
        assert_relative_eq!(c.trace_sq(p, k), 30.0 + 16.0);
        let spec = c.spectrum(p, k).unwrap();
        let total: f64 = spec.iter().map(|s| s.1).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sqrt_factor_reproduces_covariance() {
        let p = 6;
        let mut a = DMatrix::<f64>::from_fn(p, p, |i, j| ((3 * i + 5 * j + 1) as f64).sin());
        a = &a * a.transpose() + DMatrix::identity(p, p);
        let c = CovarianceSpec::Dense(a.clone());
        let s = c.sqrt_factor(p, 1).unwrap();
        let id = DMatrix::identity(p, p);
        let sm = s.apply(&id);
        assert!((&sm * sm.transpose() - &a).amax() < 1e-10);
    }
}
