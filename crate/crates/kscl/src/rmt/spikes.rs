//! Locating the isolated eigenvalues of the centered kernel Laplacian:
//! where they sit, their multiplicities, and whether their eigenvectors carry
//! class information.

use super::bundle::{self, GBundle};
use super::support::{self, SpectralSupport};
use super::SpectralContext;
use crate::error::Result;
use crate::kernel::{Branch, KernelProfile};
use nalgebra::{DMatrix, DVector};

/// Relative singular-value threshold deciding rank deficiency and multiplicity.
pub const MULTIPLICITY_TOL: f64 = 1e-8;
/// Half-width of the windows excluded around scalar-factor zeros and bulk atoms
/// during the determinant root scan.
const EXCLUSION_HALF_WIDTH: f64 = 1e-6;
/// Minimum grid density per search interval for the determinant root scan.
const ROOT_GRID: usize = 400;
/// Grid cap for long intervals.
const ROOT_GRID_MAX: usize = 4000;
/// Target grid spacing; long intervals get denser grids up to the cap so that
/// narrow even-multiplicity dips are not strided over.
const ROOT_STEP: f64 = 0.05;
/// Location accuracy of accepted roots.
const ROOT_TOL: f64 = 1e-12;

/// What produced an isolated eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeOrigin {
    /// Root of the class-structure determinant; the eigenvector aligns with classes.
    Informative,
    /// Zero of the scalar spectrum factor; the eigenvector carries no class
    /// information.
    ScalarZero,
    /// The deterministic zero eigenvalue that the centered Laplacian always has.
    DeterministicZero,
    /// An atom of the bulk matrix surviving inside a spectral gap.
    BulkAtom,
}

#[derive(Debug, Clone)]
pub struct SpikeLocation {
    /// Position in the underlying additive model (before affine mapping).
    pub rho: f64,
    /// Predicted eigenvalue of the centered normalized Laplacian.
    pub lambda: f64,
    pub multiplicity: usize,
    pub origin: SpikeOrigin,
}

impl SpikeLocation {
    pub fn informative(&self) -> bool {
        self.origin == SpikeOrigin::Informative
    }
}

#[derive(Debug, Clone)]
pub struct SpikeReport {
    pub support: SpectralSupport,
    /// All predicted isolated eigenvalues, sorted by increasing rho.
    pub spikes: Vec<SpikeLocation>,
}

impl SpikeReport {
    pub fn informative(&self) -> impl Iterator<Item = &SpikeLocation> {
        self.spikes.iter().filter(|s| s.informative())
    }
}

/// Default interval on which the bulk spectrum is scanned.
pub fn default_scan_interval(ctx: &SpectralContext) -> (f64, f64) {
    let hi = 3.0 * (1.0 + (1.0 / ctx.c0).sqrt()).powi(2) * ctx.cov_norm_bound.max(1e-3);
    (-0.05 * hi, hi)
}

pub fn find_spikes(ctx: &SpectralContext, kernel: &KernelProfile) -> Result<SpikeReport> {
    match kernel.branch {
        Branch::Generic => find_spikes_generic(ctx, kernel),
        Branch::ZeroDerivative => find_spikes_zero_derivative(ctx, kernel),
    }
}

fn find_spikes_generic(ctx: &SpectralContext, kernel: &KernelProfile) -> Result<SpikeReport> {
    let mut support = support::scan_support(ctx, default_scan_interval(ctx), 2000)?;
    support::augment_with_kernel(&mut support, ctx, kernel)?;
    let mut spikes = Vec::new();

    // The exact zero eigenvalue of the centered Laplacian is isolated whenever
    // its preimage F(tau) falls outside the bulk.
    let f_cap = kernel.f_cap();
    if !support.contains(f_cap) {
        spikes.push(SpikeLocation {
            rho: f_cap,
            lambda: 0.0,
            multiplicity: 1,
            origin: SpikeOrigin::DeterministicZero,
        });
    }

    // Gap atoms of the bulk matrix; the atom at zero is the preimage of the
    // deterministic zero and is already accounted for above.
    for &x in &support.isolated {
        if x.abs() > 1e-12 {
            spikes.push(SpikeLocation {
                rho: x,
                lambda: kernel.map_to_l(x),
                multiplicity: 1,
                origin: SpikeOrigin::BulkAtom,
            });
        }
    }

    // A zero of the scalar factor produces an isolated eigenvalue exactly when
    // the companion matrix becomes singular there.
    for &x in &support.h_zeros {
        if x.abs() < 1e-9 {
            continue;
        }
        let hm = bundle::h_z(ctx, kernel, x)?;
        let svd = hm.svd(false, false);
        if svd.singular_values.min() < MULTIPLICITY_TOL * svd.singular_values.max() {
            spikes.push(SpikeLocation {
                rho: x,
                lambda: kernel.map_to_l(x),
                multiplicity: 1,
                origin: SpikeOrigin::ScalarZero,
            });
        }
    }

    // Roots of the class-structure determinant, restricted to the complement of
    // the proportion vector where the informative eigenvalues live.
    if ctx.k() >= 2 {
        let mut excluded: Vec<f64> = support.h_zeros.clone();
        excluded.extend(support.isolated.iter().copied());
        for interval in support.search_intervals(support::kernel_reach(ctx, kernel)) {
            scan_reduced_roots(ctx, kernel, interval, &excluded, &mut spikes)?;
        }
    }

    spikes.sort_by(|a, b| a.rho.partial_cmp(&b.rho).unwrap());
    Ok(SpikeReport { support, spikes })
}

/// Determinant, scaled smallest singular value, and deficiency count of the
/// reduced matrix at x.
fn reduced_metrics(
    ctx: &SpectralContext,
    kernel: &KernelProfile,
    vc: &DMatrix<f64>,
    x: f64,
) -> Result<(f64, f64, usize)> {
    let b = GBundle::at(ctx, kernel, x)?;
    let reduced = vc.transpose() * &b.matrix * vc;
    let det = reduced.determinant();
    let svd = reduced.svd(false, false);
    let scale = svd.singular_values.max().max(b.h.abs()).max(1e-300);
    let smin = svd.singular_values.min() / scale;
    let deficient = svd
        .singular_values
        .iter()
        .filter(|&&s| s < MULTIPLICITY_TOL * scale)
        .count();
    Ok((det, smin, deficient))
}

fn scan_reduced_roots(
    ctx: &SpectralContext,
    kernel: &KernelProfile,
    interval: (f64, f64),
    excluded: &[f64],
    out: &mut Vec<SpikeLocation>,
) -> Result<()> {
    let vc = SpectralContext::complement_basis(&ctx.c);
    let (lo, hi) = interval;
    let pad = 1e-4 * (1.0 + (hi - lo).abs());
    let (a, b) = (lo + pad, hi - pad);
    if b <= a {
        return Ok(());
    }
    let near_excluded = |x: f64| {
        excluded
            .iter()
            .any(|&e| (x - e).abs() < EXCLUSION_HALF_WIDTH)
    };
    let grid = (((b - a) / ROOT_STEP).ceil() as usize).clamp(ROOT_GRID, ROOT_GRID_MAX);
    let step = (b - a) / grid as f64;
    let mut xs = Vec::with_capacity(grid + 1);
    let mut dets = Vec::with_capacity(grid + 1);
    let mut smins = Vec::with_capacity(grid + 1);
    for i in 0..=grid {
        let x = a + step * i as f64;
        let (det, smin) = if near_excluded(x) {
            (f64::NAN, f64::NAN)
        } else {
            match reduced_metrics(ctx, kernel, &vc, x) {
                Ok((d, s, _)) => (d, s),
                Err(_) => (f64::NAN, f64::NAN),
            }
        };
        xs.push(x);
        dets.push(det);
        smins.push(smin);
    }

    let mut found: Vec<f64> = Vec::new();

    // Odd-multiplicity roots: sign changes of the determinant.
    for i in 1..=grid {
        let (d0, d1) = (dets[i - 1], dets[i]);
        if !d0.is_finite() || !d1.is_finite() || d0 == 0.0 || d0.signum() == d1.signum() {
            continue;
        }
        if excluded
            .iter()
            .any(|&e| e > xs[i - 1] && e < xs[i])
        {
            continue;
        }
        let det_at = |x: f64| Ok(reduced_metrics(ctx, kernel, &vc, x)?.0);
        if let Some(root) = support::bisect(&det_at, xs[i - 1], xs[i], d0, ROOT_TOL)? {
            let (_, smin, deficient) = reduced_metrics(ctx, kernel, &vc, root)?;
            if smin < 1e-7 {
                found.push(root);
                out.push(SpikeLocation {
                    rho: root,
                    lambda: kernel.map_to_l(root),
                    multiplicity: deficient.max(1),
                    origin: SpikeOrigin::Informative,
                });
            }
        }
    }

    // Even-multiplicity roots leave no sign change; refine interior local minima
    // of the scaled smallest singular value instead. Any strict dip is worth
    // refining: the post-refinement acceptance bound rejects non-roots.
    for i in 1..grid {
        let v = smins[i];
        if !v.is_finite() {
            continue;
        }
        let (vl, vr) = (smins[i - 1], smins[i + 1]);
        if !vl.is_finite() || !vr.is_finite() || v > vl || v > vr {
            continue;
        }
        // Scalar-factor zeros and bulk atoms also collapse the reduced matrix;
        // dips around them are not class-structure roots.
        if excluded
            .iter()
            .any(|&e| e > xs[i - 1] && e < xs[i + 1])
        {
            continue;
        }
        if found
            .iter()
            .any(|&r| (r - xs[i]).abs() < 2.0 * step.abs())
        {
            continue;
        }
        let smin_at = |x: f64| -> Result<f64> { Ok(reduced_metrics(ctx, kernel, &vc, x)?.1) };
        let root = golden_min(&smin_at, xs[i - 1], xs[i + 1], ROOT_TOL)?;
        let (_, smin, deficient) = reduced_metrics(ctx, kernel, &vc, root)?;
        if smin < 1e-7 {
            found.push(root);
            out.push(SpikeLocation {
                rho: root,
                lambda: kernel.map_to_l(root),
                multiplicity: deficient.max(1),
                origin: SpikeOrigin::Informative,
            });
        }
    }
    Ok(())
}

/// Golden-section minimization of a smooth nonnegative function.
fn golden_min(f: &dyn Fn(f64) -> Result<f64>, mut a: f64, mut b: f64, tol: f64) -> Result<f64> {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    while (b - a).abs() > tol {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2)?;
        }
    }
    Ok(0.5 * (a + b))
}

fn find_spikes_zero_derivative(
    ctx: &SpectralContext,
    kernel: &KernelProfile,
) -> Result<SpikeReport> {
    let k = ctx.k();
    let fr = kernel.f2 / kernel.f_tau;
    let kappa0 = fr * ctx.s2();
    let shift = kernel.zero_shift();

    // Candidate positions are the eigenvalues of the (k+1)-dimensional pencil
    // coupling the class indicators with the norm-fluctuation direction; the
    // pencil is diagonalized through its symmetric similarity transform.
    let ttt = &ctx.t * ctx.t.transpose();
    let mut b0 = DMatrix::zeros(k + 1, k + 1);
    let ul = &ttt * fr + &ctx.t_mat * (2.0 * fr) - DMatrix::from_element(k, k, ctx.c0 * shift);
    b0.view_mut((0, 0), (k, k)).copy_from(&ul);
    for a in 0..k {
        b0[(a, k)] = fr * ctx.t[a];
        b0[(k, a)] = fr * ctx.t[a];
    }
    b0[(k, k)] = fr;
    let mut weights = DVector::zeros(k + 1);
    for a in 0..k {
        weights[a] = (ctx.c[a] / ctx.c0).sqrt();
    }
    weights[k] = ctx.s2().sqrt();
    let sym = DMatrix::from_fn(k + 1, k + 1, |i, j| b0[(i, j)] * weights[i] * weights[j]);
    let magnitude = sym.norm().max(shift.abs()).max(1.0);
    let mut candidates: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().copied().collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // The pencil always carries the exact preimage of the deterministic zero
    // eigenvalue at -shift; remove that single copy.
    let trivial_pos = candidates
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            (*a + shift)
                .abs()
                .partial_cmp(&(*b + shift).abs())
                .unwrap()
        })
        .map(|(i, _)| i);
    if let Some(i) = trivial_pos {
        if (candidates[i] + shift).abs() < 1e-7 * magnitude {
            candidates.remove(i);
        }
    }

    let mut spikes = Vec::new();
    if shift.abs() > 1e-9 {
        spikes.push(SpikeLocation {
            rho: -shift,
            lambda: 0.0,
            multiplicity: 1,
            origin: SpikeOrigin::DeterministicZero,
        });
    }

    // Group the remaining candidates into multiplicity clusters; candidates at
    // the origin are swallowed by the collapsed bulk.
    let cluster_tol = 1e-8 * magnitude;
    let mut i = 0;
    while i < candidates.len() {
        let mut j = i + 1;
        while j < candidates.len() && candidates[j] - candidates[i] < cluster_tol {
            j += 1;
        }
        let rho = candidates[i..j].iter().sum::<f64>() / (j - i) as f64;
        if rho.abs() > 1e-8 * magnitude {
            let h0 = 1.0 - kappa0 / rho;
            let origin = if h0.abs() < 1e-8 {
                SpikeOrigin::ScalarZero
            } else {
                SpikeOrigin::Informative
            };
            spikes.push(SpikeLocation {
                rho,
                lambda: kernel.map_to_l(rho),
                multiplicity: j - i,
                origin,
            });
        }
        i = j;
    }

    spikes.sort_by(|a, b| a.rho.partial_cmp(&b.rho).unwrap());
    let support = SpectralSupport {
        bulks: Vec::new(),
        isolated: Vec::new(),
        h_zeros: if kappa0.abs() > 1e-12 { vec![kappa0] } else { vec![] },
        exclusion_f: None,
        scanned: (0.0, 0.0),
    };
    Ok(SpikeReport { support, spikes })
}
