//! The lipid L2 suppression operator and its complementary projection.
//!
//! From a basis matrix `L` (one frequency-domain scalp spectrum per column)
//! the suppression operator is `(1 + beta L L^H)^{-1}`. With the thin
//! eigendecomposition `L L^H = V diag(lambda) V^H` the action on a spectrum
//! `s` has the closed form
//!
//! ```text
//! op(s) = s - V diag(g) V^H s,     g_i = 1 - 1/(1 + beta lambda_i)
//! ```
//!
//! so only the `N x R` eigenvector block and `R` eigenvalues are stored. The
//! diagonal of the operator never needs materializing either:
//! `op_kk = 1 - sum_i |V_ki|^2 g_i`, which summed over `k` collapses to
//! `N - sum_i g_i` because the eigenvector columns have unit norm. The mean
//! absolute diagonal is the calibration knob: bisection on `log10(beta)`
//! drives it to a target (0.938 by convention), which makes the pipeline
//! invariant to how the basis columns were scaled.
//!
//! Operators persist in the LOP1 format (little-endian): magic `LOP1`, u32 N,
//! u32 R, f64 beta, R f64 eigenvalues, then the eigenvector columns one after
//! another as f32 (re, im) pairs. Storage is f32; loading therefore re-
//! orthonormalizes the columns (modified Gram-Schmidt, twice) so the
//! orthonormality invariant survives the round trip.

use std::path::Path;

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::linalg;
use crate::spectrum::{Domain, SpectralAxis, Spectrum};
use crate::volume::MrsiVolume;
use crate::{Error, Result};

const MAGIC: [u8; 4] = *b"LOP1";
const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Frequency-domain scalp spectra, one column per voxel, each scaled to unit
/// maximum magnitude.
#[derive(Clone, Debug)]
pub struct LipidBasis {
    /// N spectral bins x M scalp spectra.
    pub l: Array2<Complex64>,
    pub axis: SpectralAxis,
    /// All-zero scalp voxels dropped during extraction.
    pub excluded: usize,
}

impl LipidBasis {
    pub fn n_columns(&self) -> usize {
        self.l.ncols()
    }
}

/// The suppression operator in thin eigenform.
#[derive(Clone, Debug)]
pub struct LipidOperator {
    /// N x R orthonormal eigenvectors of `L L^H` with nonzero eigenvalues.
    pub eigvecs: Array2<Complex64>,
    /// Eigenvalues of `L L^H`, descending, all positive.
    pub eigvals: Array1<f64>,
    pub beta: f64,
    pub axis: SpectralAxis,
}

/// Extract the lipid basis from a volume's scalp voxels. Voxels whose FID is
/// identically zero are skipped (they would make a zero column) with a note
/// on stderr.
pub fn build_basis(v: &MrsiVolume) -> Result<LipidBasis> {
    let n = v.axis.n_points;
    let mut cols: Vec<Vec<Complex64>> = Vec::new();
    let mut excluded = 0usize;
    for x in 0..v.nx {
        for y in 0..v.ny {
            if !v.scalp_mask[v.voxel_index(x, y)] {
                continue;
            }
            let spec = v.spectrum_at(x, y).to_frequency();
            let peak = spec.samples.iter().map(|z| z.norm()).fold(0.0f64, f64::max);
            if peak == 0.0 {
                excluded += 1;
                eprintln!("warning: scalp voxel ({x}, {y}) is all zero; excluded from lipid basis");
                continue;
            }
            let inv = 1.0 / peak;
            cols.push(spec.samples.iter().map(|z| z * inv).collect());
        }
    }
    if cols.is_empty() {
        return Err(Error::Config("no usable scalp voxels to build a lipid basis from".into()));
    }
    let m = cols.len();
    let mut l = Array2::from_elem((n, m), ZERO);
    for (j, col) in cols.iter().enumerate() {
        for (i, z) in col.iter().enumerate() {
            l[[i, j]] = *z;
        }
    }
    Ok(LipidBasis { l, axis: v.axis, excluded })
}

/// Eigendecompose `L L^H` (through the SVD of `L`, whose left singular
/// vectors stay orthonormal regardless of conditioning) and attach the
/// regularization weight.
pub fn build_operator(basis: &LipidBasis, beta: f64) -> Result<LipidOperator> {
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("beta must be nonnegative, got {beta}")));
    }
    let svd = linalg::jacobi_svd(&basis.l.view());
    let (n, m) = basis.l.dim();
    let cut = svd.s[0] * (n.max(m) as f64) * f64::EPSILON;
    let rank = svd.s.iter().take_while(|&&s| s > cut).count();
    if rank == 0 {
        return Err(Error::Numeric("lipid basis has numerical rank zero".into()));
    }
    let eigvecs = svd.u.slice(ndarray::s![.., ..rank]).to_owned();
    let eigvals = Array1::from_iter(svd.s.iter().take(rank).map(|&s| s * s));
    Ok(LipidOperator { eigvecs, eigvals, beta, axis: basis.axis })
}

impl LipidOperator {
    pub fn rank(&self) -> usize {
        self.eigvals.len()
    }

    fn check_axis(&self, s: &Spectrum) -> Result<()> {
        if s.axis != self.axis {
            return Err(Error::AxisMismatch("spectrum axis differs from the operator's".into()));
        }
        assert_eq!(s.domain, Domain::Frequency, "operator acts on frequency-domain spectra");
        Ok(())
    }

    /// Per-eigendirection shrinkage `g_i = 1 - 1/(1 + beta lambda_i)`.
    fn shrinkage(&self) -> Vec<f64> {
        self.eigvals.iter().map(|&lam| 1.0 - 1.0 / (1.0 + self.beta * lam)).collect()
    }

    /// `V diag(g) V^H s` — the part of `s` the operator removes.
    fn removed_part(&self, s: &[Complex64]) -> Vec<Complex64> {
        let (n, r) = self.eigvecs.dim();
        let g = self.shrinkage();
        let mut coeff = vec![ZERO; r];
        for i in 0..r {
            let mut acc = ZERO;
            for k in 0..n {
                acc += self.eigvecs[[k, i]].conj() * s[k];
            }
            coeff[i] = acc * g[i];
        }
        let mut out = vec![ZERO; n];
        for i in 0..r {
            let c = coeff[i];
            if c == ZERO {
                continue;
            }
            for k in 0..n {
                out[k] += self.eigvecs[[k, i]] * c;
            }
        }
        out
    }

    /// Apply the suppression operator: `(1 + beta L L^H)^{-1} s`.
    pub fn apply(&self, s: &Spectrum) -> Result<Spectrum> {
        self.check_axis(s)?;
        let removed = self.removed_part(&s.samples);
        let samples = s.samples.iter().zip(&removed).map(|(a, b)| a - b).collect();
        Ok(Spectrum::from_samples(s.axis, Domain::Frequency, samples))
    }

    /// The complement `s - apply(s)`: the lipid component the operator
    /// attributes to `s`. Computed literally as that difference so
    /// `apply(s) + project_lipid(s)` reassembles `s`.
    pub fn project_lipid(&self, s: &Spectrum) -> Result<Spectrum> {
        let kept = self.apply(s)?;
        let samples = s.samples.iter().zip(&kept.samples).map(|(a, b)| a - b).collect();
        Ok(Spectrum::from_samples(s.axis, Domain::Frequency, samples))
    }

    /// Mean absolute diagonal of the operator matrix, via the closed form
    /// (the diagonal is real and positive, so no absolute values are needed).
    pub fn mean_abs_diag(&self) -> f64 {
        let n = self.eigvecs.nrows() as f64;
        let g_sum: f64 = self.shrinkage().iter().sum();
        1.0 - g_sum / n
    }

    /// The infimum of [`Self::mean_abs_diag`] over beta: `1 - R/N`.
    pub fn diag_limit(&self) -> f64 {
        1.0 - self.rank() as f64 / self.eigvecs.nrows() as f64
    }
}

/// Find beta so the operator's mean absolute diagonal hits `target` within
/// `rel_tol * target`, by bisection on `log10(beta)` over [-12, 12] in units
/// where the leading eigenvalue is 1. The diagonal mean decreases strictly
/// and continuously from 1 (beta = 0) to `1 - R/N` (beta -> inf), so the
/// bisection cannot miss.
pub fn calibrate_beta(basis: &LipidBasis, target: f64, rel_tol: f64) -> Result<f64> {
    if target == 1.0 {
        // achieved exactly by the identity operator
        return Ok(0.0);
    }
    let op0 = build_operator(basis, 0.0)?;
    let limit = op0.diag_limit();
    if !(target > limit && target < 1.0) {
        return Err(Error::OutOfRange(format!(
            "target {target} unreachable: mean diagonal ranges over ({limit:.6}, 1.0] for this basis"
        )));
    }
    let lam1 = op0.eigvals[0];
    let mean_at = |log_b: f64| -> f64 {
        let beta = 10f64.powf(log_b) / lam1;
        LipidOperator { beta, ..op0.clone() }.mean_abs_diag()
    };
    let (mut lo, mut hi) = (-12.0f64, 12.0f64);
    // mean(lo) ~ 1 > target; if even the hi end can't push the mean below the
    // target the optimum is effectively beta -> inf territory
    if mean_at(hi) > target {
        return Err(Error::OutOfRange(format!(
            "target {target} needs beta beyond the calibration range (limit {limit:.6})"
        )));
    }
    let mut mid = 0.0;
    for _ in 0..60 {
        mid = 0.5 * (lo + hi);
        if mean_at(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let beta = 10f64.powf(mid) / lam1;
    let achieved = mean_at(mid);
    if (achieved - target).abs() > rel_tol * target {
        return Err(Error::Numeric(format!(
            "calibration stalled: reached {achieved:.6} for target {target:.6}"
        )));
    }
    Ok(beta)
}

/// Serialize an operator in the LOP1 layout.
pub fn operator_to_bytes(op: &LipidOperator) -> Result<Vec<u8>> {
    let (n, r) = op.eigvecs.dim();
    let n32 = u32::try_from(n).map_err(|_| Error::DimOverflow(format!("N = {n}")))?;
    let r32 = u32::try_from(r).map_err(|_| Error::DimOverflow(format!("R = {r}")))?;
    let mut out = Vec::with_capacity(20 + r * 8 + n * r * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&r32.to_le_bytes());
    out.extend_from_slice(&op.beta.to_le_bytes());
    for &lam in op.eigvals.iter() {
        out.extend_from_slice(&lam.to_le_bytes());
    }
    for j in 0..r {
        for i in 0..n {
            let z = op.eigvecs[[i, j]];
            out.extend_from_slice(&(z.re as f32).to_le_bytes());
            out.extend_from_slice(&(z.im as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Write an operator as a LOP1 file.
pub fn write_operator(op: &LipidOperator, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, operator_to_bytes(op)?)?;
    Ok(())
}

/// Read a LOP1 file. The eigenvector columns are stored in f32, so they are
/// re-orthonormalized (two rounds of modified Gram-Schmidt) before use.
pub fn read_operator(path: impl AsRef<Path>, axis: SpectralAxis) -> Result<LipidOperator> {
    let bytes = std::fs::read(path)?;
    let mut buf = bytes.as_slice();
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if buf.len() < n {
            return Err(Error::Truncated(format!("{what}: need {n} more bytes, have {}", buf.len())));
        }
        let (head, tail) = buf.split_at(n);
        buf = tail;
        Ok(head)
    };
    if take(4, "magic")? != MAGIC {
        return Err(Error::BadMagic);
    }
    let n = u32::from_le_bytes(take(4, "N")?.try_into().unwrap()) as usize;
    let r = u32::from_le_bytes(take(4, "R")?.try_into().unwrap()) as usize;
    let beta = f64::from_le_bytes(take(8, "beta")?.try_into().unwrap());
    if n != axis.n_points {
        return Err(Error::AxisMismatch(format!(
            "operator has {n} bins but the axis has {}",
            axis.n_points
        )));
    }
    let mut eigvals = Array1::zeros(r);
    for i in 0..r {
        eigvals[i] = f64::from_le_bytes(take(8, "eigenvalues")?.try_into().unwrap());
    }
    let vec_bytes = n
        .checked_mul(r)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| Error::DimOverflow(format!("{n} x {r} eigenvector block")))?;
    let raw = take(vec_bytes, "eigenvectors")?;
    let mut eigvecs = Array2::from_elem((n, r), ZERO);
    let mut it = raw.chunks_exact(8);
    for j in 0..r {
        for i in 0..n {
            let c = it.next().unwrap();
            let re = f32::from_le_bytes(c[0..4].try_into().unwrap());
            let im = f32::from_le_bytes(c[4..8].try_into().unwrap());
            eigvecs[[i, j]] = Complex64::new(re as f64, im as f64);
        }
    }
    for _ in 0..2 {
        for j in 0..r {
            for i in 0..j {
                let mut c = ZERO;
                for k in 0..n {
                    c += eigvecs[[k, i]].conj() * eigvecs[[k, j]];
                }
                for k in 0..n {
                    let sub = c * eigvecs[[k, i]];
                    eigvecs[[k, j]] -= sub;
                }
            }
            let nrm: f64 = (0..n).map(|k| eigvecs[[k, j]].norm_sqr()).sum::<f64>().sqrt();
            if nrm == 0.0 {
                return Err(Error::Format("stored eigenvector column collapsed to zero".into()));
            }
            let inv = 1.0 / nrm;
            for k in 0..n {
                eigvecs[[k, j]] *= inv;
            }
        }
    }
    Ok(LipidOperator { eigvecs, eigvals, beta, axis })
}
