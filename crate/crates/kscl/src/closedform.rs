//! Closed-form predictions for three structured mixture regimes, mirroring in
//! exact arithmetic what the generic fixed-point machinery computes
//! numerically: a covariance shared by every class (the class means carry the
//! signal), trace-scaled copies of one covariance (the scaling carries the
//! signal), and block-symmetric covariances with constant mean and trace (the
//! block correlations carry the signal).
//!
//! All spectral integrals are finite sums over the discrete spectrum of the
//! population covariance; no quadrature is involved. The shared primitive is
//! the inverse Stieltjes map x(g): every detached eigenvalue of the additive
//! model sits at x(-1/l) for a population-side location l, and detachment
//! itself is the slope condition x'(-1/l) > 0.

use crate::covariance::CovarianceSpec;
use crate::error::{Error, Result};
use crate::kernel::{Branch, KernelProfile};
use crate::rmt::{SpikeOrigin, MULTIPLICITY_TOL};
use nalgebra::{DMatrix, DVector};

/// Relative distance (to the largest population eigenvalue) below which an
/// eigenvalue of the perturbed matrix counts as bulk rather than detached.
pub const GAP_REL_TOL: f64 = 1e-4;
/// Relative threshold for pole detection in the inverse spectral map.
const POLE_TOL: f64 = 1e-12;

fn mom1(atoms: &[(f64, f64)]) -> f64 {
    atoms.iter().map(|&(u, w)| w * u).sum()
}

fn mom2(atoms: &[(f64, f64)]) -> f64 {
    atoms.iter().map(|&(u, w)| w * u * u).sum()
}

/// Integral of u/(u - l) against the discrete measure.
fn int1(atoms: &[(f64, f64)], l: f64) -> f64 {
    atoms.iter().map(|&(u, w)| w * u / (u - l)).sum()
}

/// Integral of u^2/(u - l)^2 against the discrete measure.
fn int2(atoms: &[(f64, f64)], l: f64) -> f64 {
    atoms.iter().map(|&(u, w)| w * u * u / ((u - l) * (u - l))).sum()
}

/// The functional inverse of the bulk Stieltjes transform for a mixture whose
/// classes share one population spectrum: x(g) = -1/(c0 g) + int u/(1 + g u).
///
/// On every interval where x is increasing, x maps back into a gap of the
/// limiting spectrum; the increasing-slope test is therefore the exact
/// detachment criterion for candidate isolated eigenvalues.
#[derive(Debug, Clone)]
pub struct InverseStieltjesCurve {
    pub c0: f64,
    /// Discrete population spectrum as (eigenvalue, weight) atoms.
    pub atoms: Vec<(f64, f64)>,
}

impl InverseStieltjesCurve {
    pub fn new(c0: f64, atoms: Vec<(f64, f64)>) -> Result<Self> {
        if !(c0 > 0.0) || !c0.is_finite() {
            return Err(Error::Invalid(format!("dimension ratio must be positive, got {c0}")));
        }
        if atoms.is_empty() {
            return Err(Error::Invalid("spectral measure needs at least one atom".into()));
        }
        if atoms.iter().any(|&(u, w)| !u.is_finite() || !(w > 0.0)) {
            return Err(Error::Invalid("spectral atoms must be finite with positive weight".into()));
        }
        Ok(InverseStieltjesCurve { c0, atoms })
    }

    /// The curve of a covariance specification's exact spectrum.
    pub fn from_covariance(cov: &CovarianceSpec, p: usize, k: usize, c0: f64) -> Result<Self> {
        Self::new(c0, cov.spectrum(p, k)?)
    }

    fn guard(&self, g: f64) -> Result<()> {
        if !g.is_finite() || g.abs() < POLE_TOL {
            return Err(Error::Pole { g });
        }
        for &(u, _) in &self.atoms {
            if (1.0 + g * u).abs() < POLE_TOL * (g * u).abs().max(1.0) {
                return Err(Error::Pole { g });
            }
        }
        Ok(())
    }

    /// Evaluates x(g) together with the validity flag x'(g) > 0.
    pub fn x_of_g(&self, g: f64) -> Result<(f64, bool)> {
        self.guard(g)?;
        let value = -1.0 / (self.c0 * g)
            + self.atoms.iter().map(|&(u, w)| w * u / (1.0 + g * u)).sum::<f64>();
        Ok((value, self.x_prime(g)? > 0.0))
    }

    /// x'(g) = 1/(c0 g^2) - int u^2/(1 + g u)^2.
    pub fn x_prime(&self, g: f64) -> Result<f64> {
        self.guard(g)?;
        let tail: f64 = self
            .atoms
            .iter()
            .map(|&(u, w)| {
                let d = 1.0 + g * u;
                w * u * u / (d * d)
            })
            .sum();
        Ok(1.0 / (self.c0 * g * g) - tail)
    }

    /// Spike location for a population-side location l: evaluation at g = -1/l.
    fn rho_of_ell(&self, ell: f64) -> Result<(f64, bool)> {
        if !ell.is_finite() || ell.abs() < POLE_TOL {
            return Err(Error::Pole { g: f64::INFINITY });
        }
        self.x_of_g(-1.0 / ell)
    }
}

/// One candidate isolated eigenvalue of a structured regime.
#[derive(Debug, Clone)]
pub struct CandidateSpike {
    /// Population-side location (a perturbed covariance eigenvalue or a trace
    /// functional); for the vanishing-slope branch it coincides with `rho`.
    pub ell: f64,
    /// Whether the detachment condition holds, so the spike actually exists.
    pub separable: bool,
    /// Additive-model location x(-1/ell); None when the spike does not detach.
    pub rho: Option<f64>,
    /// Predicted isolated eigenvalue of the centered normalized Laplacian.
    pub lambda: Option<f64>,
    pub multiplicity: usize,
    /// Same classification the generic spike finder reports.
    pub origin: SpikeOrigin,
}

/// Output of the structured-regime routines: candidate spikes plus whatever
/// eigenvector statistics the regime admits in closed form. The statistics
/// vectors run parallel to `candidates` and stay `None` where a quantity is
/// not defined (non-detached spike, multiple eigenvalue, trace channel).
#[derive(Debug, Clone, Default)]
pub struct SpecialCaseResult {
    pub candidates: Vec<CandidateSpike>,
    /// Per-candidate, per-class squared class-mean coefficients of the unit
    /// eigenvector (the square of the projection onto j_a / sqrt(n_a)).
    pub alpha_sq: Vec<Option<DVector<f64>>>,
    /// Per-candidate, per-class variances of the class-block fluctuations.
    pub sigma_sq: Vec<Option<DVector<f64>>>,
    /// Squared cross-covariances between class blocks of two isolated
    /// eigenvectors, as (candidate i, candidate j, per-class values).
    pub cross_sq: Vec<(usize, usize, DVector<f64>)>,
    /// Per-candidate class projection matrices (1/p) J^T Pi J.
    pub projections: Vec<Option<DMatrix<f64>>>,
    /// Per-candidate alignments tr diag(c)^{-1} (1/p) J^T Pi J.
    pub alignments: Vec<Option<f64>>,
    /// Population eigenvalues that sit too close to the bulk to classify.
    pub near_bulk: Vec<f64>,
    /// Dominant-eigenvector per-class squared means (sqrt(n_a)-scaled entries).
    pub u1_alpha_sq: Option<DVector<f64>>,
    /// Dominant-eigenvector per-class entry variances (same scaling).
    pub u1_sigma_sq: Option<DVector<f64>>,
    /// Squared cross-covariance between the dominant and the informative
    /// eigenvector, per class.
    pub u1_cross_sq: Option<DVector<f64>>,
}

impl SpecialCaseResult {
    fn with_candidates(candidates: Vec<CandidateSpike>) -> Self {
        let n = candidates.len();
        SpecialCaseResult {
            candidates,
            alpha_sq: vec![None; n],
            sigma_sq: vec![None; n],
            cross_sq: Vec::new(),
            projections: vec![None; n],
            alignments: vec![None; n],
            near_bulk: Vec::new(),
            u1_alpha_sq: None,
            u1_sigma_sq: None,
            u1_cross_sq: None,
        }
    }
}

/// Builds a candidate from a population location, mapping through the curve
/// and the kernel. A pole (location on top of an atom) counts as not detached.
fn candidate_from_ell(
    curve: &InverseStieltjesCurve,
    ell: f64,
    multiplicity: usize,
    origin: SpikeOrigin,
    kernel: &KernelProfile,
) -> CandidateSpike {
    match curve.rho_of_ell(ell) {
        Ok((rho, true)) => CandidateSpike {
            ell,
            separable: true,
            rho: Some(rho),
            lambda: Some(kernel.map_to_l(rho)),
            multiplicity,
            origin,
        },
        _ => CandidateSpike {
            ell,
            separable: false,
            rho: None,
            lambda: None,
            multiplicity,
            origin,
        },
    }
}

fn validate_proportions(c: &DVector<f64>, c0: f64) -> Result<()> {
    if c.is_empty() || c.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Invalid("class proportions must be positive".into()));
    }
    if (c.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("class proportions must sum to one, got {}", c.sum())));
    }
    if !(c0 > 0.0) {
        return Err(Error::Invalid(format!("dimension ratio must be positive, got {c0}")));
    }
    Ok(())
}

/// Shared data of the shared-covariance regime: detached eigenvalues of
/// C + M diag(c) M^T together with their eigenvectors.
struct SharedCovWork {
    result: SpecialCaseResult,
    /// Eigenvector column for each unit-multiplicity informative candidate.
    vectors: Vec<Option<DVector<f64>>>,
    ups: Vec<Option<DVector<f64>>>,
    c_dense: DMatrix<f64>,
    atoms: Vec<(f64, f64)>,
}

fn shared_cov_work(
    cov: &CovarianceSpec,
    means: &[DVector<f64>],
    c: &DVector<f64>,
    c0: f64,
    p: usize,
    kernel: &KernelProfile,
) -> Result<SharedCovWork> {
    if kernel.branch != Branch::Generic {
        return Err(Error::Kernel(
            "shared-covariance closed forms need a nonvanishing kernel slope; \
             a flat-slope kernel is blind to mean structure"
                .into(),
        ));
    }
    let k = c.len();
    validate_proportions(c, c0)?;
    if means.len() != k {
        return Err(Error::Dimension(format!("{} means for {} classes", means.len(), k)));
    }
    if means.iter().any(|m| m.len() != p) {
        return Err(Error::Dimension("class mean dimension differs from p".into()));
    }
    cov.validate(p, k)?;

    let atoms = cov.spectrum(p, k)?;
    let curve = InverseStieltjesCurve::new(c0, atoms.clone())?;

    // Centered means and the rank-deficient perturbation M diag(c) M^T.
    let mbar: DVector<f64> = means
        .iter()
        .zip(c.iter())
        .fold(DVector::zeros(p), |acc, (m, &ca)| acc + m * ca);
    let cols: Vec<DVector<f64>> = means.iter().map(|m| m - &mbar).collect();
    let m_mat = DMatrix::from_columns(&cols);
    let c_dense = cov.realize_dense(p, k)?;
    let perturbed = &c_dense + &m_mat * DMatrix::from_diagonal(c) * m_mat.transpose();
    let eig = perturbed.symmetric_eigen();

    let scale = atoms.iter().map(|&(u, _)| u.abs()).fold(0.0, f64::max).max(1e-12);
    let gap = GAP_REL_TOL * scale;

    // Detached eigenvalues: beyond the gap distance from every population atom.
    let mut detached: Vec<(f64, usize)> = Vec::new();
    let mut near_bulk = Vec::new();
    for (idx, &val) in eig.eigenvalues.iter().enumerate() {
        let dist = atoms.iter().map(|&(u, _)| (val - u).abs()).fold(f64::INFINITY, f64::min);
        if dist > gap {
            detached.push((val, idx));
        } else if dist > 0.5 * gap {
            near_bulk.push(val);
        }
    }
    detached.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // Group near-identical detached eigenvalues into multiplicity classes.
    let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
    for (val, idx) in detached {
        match groups.last_mut() {
            Some((rep, idxs)) if (val - *rep).abs() <= MULTIPLICITY_TOL * rep.abs().max(1.0) => {
                idxs.push(idx);
            }
            _ => groups.push((val, vec![idx])),
        }
    }

    let mut candidates = Vec::new();
    let mut vectors: Vec<Option<DVector<f64>>> = Vec::new();
    let mut ups: Vec<Option<DVector<f64>>> = Vec::new();
    for (ell, idxs) in &groups {
        candidates.push(candidate_from_ell(&curve, *ell, idxs.len(), SpikeOrigin::Informative, kernel));
        if idxs.len() == 1 {
            let mut v = eig.eigenvectors.column(idxs[0]).into_owned();
            fix_sign(&mut v);
            let u = DVector::from_fn(k, |b, _| v.dot(&m_mat.column(b).into_owned()));
            vectors.push(Some(v));
            ups.push(Some(u));
        } else {
            vectors.push(None);
            ups.push(None);
        }
    }

    // Trace-channel candidate: it exists at the zero of the scalar spectral
    // factor, and its eigenvector carries no class-mean information.
    let ell_plus = 2.0 * kernel.coef() * mom2(&atoms);
    candidates.push(candidate_from_ell(&curve, ell_plus, 1, SpikeOrigin::ScalarZero, kernel));
    vectors.push(None);
    ups.push(None);

    let mut result = SpecialCaseResult::with_candidates(candidates);
    result.near_bulk = near_bulk;
    Ok(SharedCovWork { result, vectors, ups, c_dense, atoms })
}

/// Sign convention: first coordinate of nonnegligible size is positive.
fn fix_sign(v: &mut DVector<f64>) {
    let norm = v.norm();
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12 * norm.max(1.0)) {
        if *first < 0.0 {
            *v *= -1.0;
        }
    }
}

/// Isolated eigenvalues when every class shares the covariance `cov` and the
/// signal sits in the class means: detached eigenvalues of C + M diag(c) M^T
/// plus the trace-channel candidate 2 (5f'/(8f) - f''/(2f')) int u^2.
pub fn equal_cov_spikes(
    cov: &CovarianceSpec,
    means: &[DVector<f64>],
    c: &DVector<f64>,
    c0: f64,
    p: usize,
    kernel: &KernelProfile,
) -> Result<SpecialCaseResult> {
    Ok(shared_cov_work(cov, means, c, c0, p, kernel)?.result)
}

/// Per-class eigenvector statistics in the shared-covariance regime: squared
/// means, fluctuation variances, pairwise squared cross-covariances, class
/// projections, and alignments for every detached unit-multiplicity
/// informative eigenvalue.
pub fn equal_cov_clustering(
    cov: &CovarianceSpec,
    means: &[DVector<f64>],
    c: &DVector<f64>,
    c0: f64,
    p: usize,
    kernel: &KernelProfile,
) -> Result<SpecialCaseResult> {
    let work = shared_cov_work(cov, means, c, c0, p, kernel)?;
    let SharedCovWork { mut result, vectors, ups, c_dense, atoms } = work;
    let k = c.len();

    // Quality factors q = 1 - c0 int u^2/(u-l)^2 per qualifying candidate.
    let mut q_of: Vec<Option<f64>> = vec![None; result.candidates.len()];
    for (i, cand) in result.candidates.iter().enumerate() {
        if cand.origin != SpikeOrigin::Informative || !cand.separable {
            continue;
        }
        if cand.multiplicity != 1 {
            return Err(Error::Invalid(format!(
                "eigenvector statistics need unit multiplicity, got {} at l = {}",
                cand.multiplicity, cand.ell
            )));
        }
        let ell = cand.ell;
        let q = 1.0 - c0 * int2(&atoms, ell);
        let up = ups[i].as_ref().expect("unit-multiplicity candidate has an eigenvector");
        let weighted: f64 = (0..k).map(|b| c[b] * up[b] * up[b]).sum();
        result.alpha_sq[i] =
            Some(DVector::from_fn(k, |a, _| c[a] * up[a] * up[a] * q / ell));
        result.sigma_sq[i] =
            Some(DVector::from_fn(k, |a, _| c[a] * (1.0 - q / ell * weighted)));
        let dcu = DVector::from_fn(k, |a, _| c[a] * up[a]);
        result.projections[i] = Some(&dcu * dcu.transpose() * (q / (ell * c0)));
        result.alignments[i] = Some(q / ell * weighted);
        q_of[i] = Some(q);
    }

    // The trace-channel eigenvector projects onto no class direction.
    for (i, cand) in result.candidates.iter().enumerate() {
        if cand.origin == SpikeOrigin::ScalarZero && cand.separable {
            result.projections[i] = Some(DMatrix::zeros(k, k));
            result.alignments[i] = Some(0.0);
        }
    }

    // Pairwise squared cross-covariances between informative eigenvectors.
    let qualifying: Vec<usize> = (0..result.candidates.len()).filter(|&i| q_of[i].is_some()).collect();
    for (a_pos, &i) in qualifying.iter().enumerate() {
        for &j in &qualifying[a_pos + 1..] {
            let (li, lj) = (result.candidates[i].ell, result.candidates[j].ell);
            let (qi, qj) = (q_of[i].unwrap(), q_of[j].unwrap());
            let vi = vectors[i].as_ref().unwrap();
            let vj = vectors[j].as_ref().unwrap();
            let vcv = vi.dot(&(&c_dense * vj));
            let cross = DVector::from_fn(k, |a, _| {
                c[a] * c[a] / (li * lj) * qi * qj * vcv * vcv
            });
            result.cross_sq.push((i, j, cross));
        }
    }
    Ok(result)
}

/// Shared preprocessing of the trace-scaled regime: centered scaling vector,
/// spectral moments, and the signal strength.
struct ScaledCovWork {
    gamma_c: DVector<f64>,
    m1: f64,
    m2: f64,
    /// Signal strength sum_a c_a gamma_a^2 of the centered scalings.
    strength: f64,
    atoms: Vec<(f64, f64)>,
}

fn scaled_cov_work(
    cov: &CovarianceSpec,
    gamma: &DVector<f64>,
    c: &DVector<f64>,
    c0: f64,
    p: usize,
) -> Result<ScaledCovWork> {
    let k = c.len();
    validate_proportions(c, c0)?;
    if gamma.len() != k {
        return Err(Error::Dimension(format!("{} scalings for {} classes", gamma.len(), k)));
    }
    cov.validate(p, k)?;
    let atoms = cov.spectrum(p, k)?;
    let shift = c.dot(gamma);
    let gamma_c = DVector::from_fn(k, |a, _| gamma[a] - shift);
    let strength = (0..k).map(|a| c[a] * gamma_c[a] * gamma_c[a]).sum();
    Ok(ScaledCovWork { gamma_c, m1: mom1(&atoms), m2: mom2(&atoms), strength, atoms })
}

/// Isolated eigenvalues when class a has covariance (1 + gamma_a/sqrt(p)) C
/// and all means coincide. At most one informative spike exists; with a
/// sloped kernel its population location is l = coef (2 m2 + m1^2 c.gamma^2),
/// and with a flat-slope kernel the spike sits directly at
/// (f''/(f c0)) (2 m2 + m1^2 c.gamma^2).
pub fn scaled_cov_spikes(
    cov: &CovarianceSpec,
    gamma: &DVector<f64>,
    c: &DVector<f64>,
    c0: f64,
    p: usize,
    kernel: &KernelProfile,
) -> Result<SpecialCaseResult> {
    let work = scaled_cov_work(cov, gamma, c, c0, p)?;
    let signal = work.m1 * work.m1 * work.strength;
    let total = 2.0 * work.m2 + signal;
    let has_signal = signal > 1e-12 * total.abs().max(1.0);

    let candidates = match kernel.branch {
        Branch::Generic => {
            if !has_signal {
                // Without scaling differences the candidate collapses onto the
                // zero of the scalar spectral factor, which is not an
                // eigenvalue here: no spike detaches.
                Vec::new()
            } else {
                let curve = InverseStieltjesCurve::new(c0, work.atoms.clone())?;
                let ell = kernel.coef() * total;
                vec![candidate_from_ell(&curve, ell, 1, SpikeOrigin::Informative, kernel)]
            }
        }
        Branch::ZeroDerivative => {
            let rho = kernel.f2 / kernel.f_tau * total / c0;
            let origin =
                if has_signal { SpikeOrigin::Informative } else { SpikeOrigin::ScalarZero };
            vec![CandidateSpike {
                ell: rho,
                separable: true,
                rho: Some(rho),
                lambda: Some(kernel.map_to_l(rho)),
                multiplicity: 1,
                origin,
            }]
        }
    };
    Ok(SpecialCaseResult::with_candidates(candidates))
}

/// Eigenvector statistics of the trace-scaled regime: dominant-eigenvector
/// means/variances, informative-eigenvector means/variances, their squared
/// cross-covariance, and the class projection. Entry scaling matches the
/// spike statistics elsewhere: class blocks are projected onto j_a/sqrt(n_a).
pub fn scaled_cov_clustering(
    cov: &CovarianceSpec,
    gamma: &DVector<f64>,
    c: &DVector<f64>,
    c0: f64,
    p: usize,
    kernel: &KernelProfile,
) -> Result<SpecialCaseResult> {
    let mut result = scaled_cov_spikes(cov, gamma, c, c0, p, kernel)?;
    let work = scaled_cov_work(cov, gamma, c, c0, p)?;
    let k = c.len();
    let total = 2.0 * work.m2 + work.m1 * work.m1 * work.strength;
    let pf = p as f64;

    // Dominant eigenvector: per-class squared mean and entry variance of the
    // sqrt(n_a)-scaled coordinates.
    let slope = kernel.f1 / (2.0 * kernel.f_tau);
    result.u1_alpha_sq = Some(DVector::from_fn(k, |a, _| {
        let m = 1.0 + work.gamma_c[a] * work.m1 * slope / pf.sqrt();
        c[a] * m * m
    }));
    result.u1_sigma_sq =
        Some(DVector::from_fn(k, |a, _| c[a] * slope * slope * 2.0 * work.m2 / pf));

    // Informative eigenvector statistics, when the spike detaches.
    let info = result
        .candidates
        .iter()
        .position(|cand| cand.origin == SpikeOrigin::Informative && cand.separable);
    if let Some(i) = info {
        let q = match kernel.branch {
            Branch::Generic => 1.0 - c0 * int2(&work.atoms, result.candidates[i].ell),
            Branch::ZeroDerivative => 1.0,
        };
        let m1sq = work.m1 * work.m1;
        result.alpha_sq[i] = Some(DVector::from_fn(k, |a, _| {
            c[a] * m1sq * work.gamma_c[a] * work.gamma_c[a] * q / total
        }));
        result.sigma_sq[i] = Some(DVector::from_fn(k, |a, _| {
            c[a] * (1.0 - m1sq * work.strength * q / total)
        }));
        let dg = DVector::from_fn(k, |a, _| c[a] * work.gamma_c[a]);
        result.projections[i] = Some(&dg * dg.transpose() * (q * m1sq / (c0 * total)));
        result.alignments[i] = Some(q * m1sq * work.strength / total);
        result.u1_cross_sq = Some(DVector::from_fn(k, |a, _| {
            c[a] * c[a] / pf * slope * slope * (2.0 * work.m2) * (2.0 * work.m2) * q / total
        }));
    }
    Ok(result)
}

/// Validated block data of the constant-trace regime.
struct BlockWork {
    /// (1/p) tr (D1 - D2)^2.
    theta: f64,
    /// (2/p) tr ((k-1) D1^2 + D2^2), the per-class squared-trace scale.
    s2p: f64,
    /// Spectrum of the mixture covariance (unit mass): eigenvalues of
    /// ((k-1) D1 + D2)/k, each with weight k/p.
    curve: InverseStieltjesCurve,
}

fn block_work(
    d1: &DMatrix<f64>,
    d2: &DMatrix<f64>,
    k: usize,
    c0: f64,
    p: usize,
) -> Result<BlockWork> {
    if k < 2 {
        return Err(Error::Invalid("block regime needs at least two classes".into()));
    }
    if p % k != 0 {
        return Err(Error::Dimension(format!("p = {p} not divisible by k = {k}")));
    }
    let b = p / k;
    if d1.nrows() != b || d1.ncols() != b || d2.nrows() != b || d2.ncols() != b {
        return Err(Error::Dimension(format!(
            "block matrices must be {b} x {b} for p = {p}, k = {k}"
        )));
    }
    if !(c0 > 0.0) {
        return Err(Error::Invalid(format!("dimension ratio must be positive, got {c0}")));
    }
    let pf = p as f64;
    let kf = k as f64;
    let diff = d1 - d2;
    let theta = diff.iter().map(|v| v * v).sum::<f64>() / pf;
    let s2p = 2.0 / pf
        * ((kf - 1.0) * d1.iter().map(|v| v * v).sum::<f64>()
            + d2.iter().map(|v| v * v).sum::<f64>());
    let mix = (d1 * (kf - 1.0) + d2) / kf;
    let eigs = mix.symmetric_eigen().eigenvalues;
    let atoms: Vec<(f64, f64)> = eigs.iter().map(|&u| (u, kf / pf)).collect();
    Ok(BlockWork { theta, s2p, curve: InverseStieltjesCurve::new(c0, atoms)? })
}

/// Isolated eigenvalues of the block-symmetric constant-trace regime: class a
/// carries block D2 at position a and D1 elsewhere, class sizes are equal,
/// and all means coincide. The informative spike has multiplicity k - 1; the
/// trace-channel spike is simple.
pub fn trace_const_spikes(
    d1: &DMatrix<f64>,
    d2: &DMatrix<f64>,
    k: usize,
    c0: f64,
    p: usize,
    kernel: &KernelProfile,
) -> Result<SpecialCaseResult> {
    let work = block_work(d1, d2, k, c0, p)?;
    let kf = k as f64;

    let candidates = match kernel.branch {
        Branch::Generic => {
            let ell = -(work.theta / kf) * (kernel.f2 / kernel.f1);
            let ell_plus = kernel.coef() * work.s2p;
            vec![
                candidate_from_ell(&work.curve, ell, k - 1, SpikeOrigin::Informative, kernel),
                candidate_from_ell(&work.curve, ell_plus, 1, SpikeOrigin::ScalarZero, kernel),
            ]
        }
        Branch::ZeroDerivative => {
            let fr = kernel.f2 / kernel.f_tau;
            let rho = 2.0 * fr * work.theta / (c0 * kf);
            let rho_plus = fr * work.s2p / c0;
            let zero_cand = |rho: f64, mult: usize, origin| CandidateSpike {
                ell: rho,
                separable: true,
                rho: Some(rho),
                lambda: Some(kernel.map_to_l(rho)),
                multiplicity: mult,
                origin,
            };
            vec![
                zero_cand(rho, k - 1, SpikeOrigin::Informative),
                zero_cand(rho_plus, 1, SpikeOrigin::ScalarZero),
            ]
        }
    };

    let mut result = SpecialCaseResult::with_candidates(candidates);

    // Class projections: the informative eigenspace projects onto the
    // centering projector I - 11^T/k with an explicit scale; the
    // trace-channel eigenvector projects onto no class direction.
    let centering = DMatrix::from_fn(k, k, |a, b| {
        if a == b { 1.0 - 1.0 / kf } else { -1.0 / kf }
    });
    for i in 0..result.candidates.len() {
        let cand = &result.candidates[i];
        if !cand.separable {
            continue;
        }
        match cand.origin {
            SpikeOrigin::Informative => {
                let scale = match kernel.branch {
                    Branch::Generic => {
                        work.curve.x_prime(-1.0 / cand.ell)? / (kf * cand.ell * cand.ell)
                    }
                    Branch::ZeroDerivative => 1.0 / (kf * c0),
                };
                result.projections[i] = Some(&centering * scale);
                result.alignments[i] = Some(c0 * scale * kf * (kf - 1.0));
            }
            SpikeOrigin::ScalarZero => {
                result.projections[i] = Some(DMatrix::zeros(k, k));
                result.alignments[i] = Some(0.0);
            }
            _ => {}
        }
    }
    Ok(result)
}

/// Class projection and alignment of one candidate from the block regime.
pub fn trace_const_projection(
    result: &SpecialCaseResult,
    idx: usize,
) -> Result<(DMatrix<f64>, f64)> {
    let proj = result
        .projections
        .get(idx)
        .and_then(|p| p.clone())
        .ok_or_else(|| Error::Invalid(format!("candidate {idx} has no projection")))?;
    let align = result.alignments[idx].expect("projection and alignment are set together");
    Ok((proj, align))
}
