//! Water removal by Hankel singular value decomposition.
//!
//! A free-induction decay is modelled as a sum of damped complex
//! exponentials,
//!
//! ```text
//! fid[t] = sum_k a_k e^{i phi_k} e^{(i 2 pi f_k - d_k) t dt},
//! ```
//!
//! whose Hankel matrix `H[i, j] = fid[i + j]` has rank equal to the number of
//! components. The signal subspace is the span of the leading left singular
//! vectors of `H`; because the subspace is shift-invariant, the row-shifted
//! least-squares problem `U_top Z = U_bottom` has the signal poles
//! `z_k = e^{(i 2 pi f_k - d_k) dt}` as the eigenvalues of `Z`. Amplitudes
//! and phases then follow from one linear fit of the full FID against the
//! pole Vandermonde basis.
//!
//! The left singular vectors are taken from the Hermitian eigendecomposition
//! of `H H^H`, which is far cheaper than a full SVD and is all the truncation
//! needs.
//!
//! [`remove_water`] keeps only the fitted components whose frequency falls in
//! a chosen ppm band (the water region, by default) and subtracts exactly
//! that partial reconstruction, leaving everything else untouched bit for
//! bit.

use std::f64::consts::{PI, TAU};

use ndarray::{s, Array2};
use num_complex::Complex64;

use crate::linalg::{eigvals, gram_aah, hermitian_eig_desc, qr_lstsq};
use crate::spectrum::{Domain, SpectralAxis, Spectrum};
use crate::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// One fitted damped-exponential component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HsvdComponent {
    pub frequency_hz: f64,
    /// Decay rate in 1/s; never negative. Growing poles are renormalized to
    /// the unit circle and marked `clamped`.
    pub damping_per_s: f64,
    pub amplitude: f64,
    /// Phase in (-pi, pi].
    pub phase_rad: f64,
    pub clamped: bool,
}

impl HsvdComponent {
    /// The component's position on the chemical-shift axis.
    pub fn ppm(&self, axis: SpectralAxis) -> f64 {
        axis.ref_ppm - self.frequency_hz / axis.transmitter_mhz
    }
}

/// Hankel row count: ceil(N / 2); the column count is N - rows + 1.
fn hankel_rows(n: usize) -> usize {
    n.div_ceil(2)
}

/// Decompose a time-domain FID into its `rank` strongest damped-exponential
/// components, strongest amplitude first. Poles outside the unit circle are
/// pulled back onto it (zero damping) before the amplitude fit, so the
/// returned components always describe a bounded signal; such components are
/// marked `clamped`. Degenerate poles at the origin are dropped.
pub fn hsvd_decompose(fid: &Spectrum, rank: usize) -> Result<Vec<HsvdComponent>> {
    assert_eq!(fid.domain, Domain::Time, "hsvd_decompose expects a time-domain signal");
    let n = fid.axis.n_points;
    let rows = hankel_rows(n);
    let cols = n - rows + 1;
    if rank == 0 {
        return Err(Error::Config("decomposition rank must be at least 1".into()));
    }
    // the shift-invariance fit drops one row, hence rows - 1
    let max_rank = cols.min(rows.saturating_sub(1));
    if rank > max_rank {
        return Err(Error::Config(format!(
            "rank {rank} too large: {n} samples support at most {max_rank}"
        )));
    }
    if fid.samples.iter().all(|z| *z == ZERO) {
        return Ok(Vec::new());
    }

    let mut hankel = Array2::from_elem((rows, cols), ZERO);
    for i in 0..rows {
        for j in 0..cols {
            hankel[[i, j]] = fid.samples[i + j];
        }
    }
    let gram = gram_aah(&hankel.view());
    let (_, vectors) = hermitian_eig_desc(&gram.view())?;
    let u = vectors.slice(s![.., ..rank]);

    // poles from the shift-invariance of the signal subspace
    let z_mat = qr_lstsq(&u.slice(s![..rows - 1, ..]), &u.slice(s![1.., ..]))?;
    let poles = eigvals(&z_mat.view())?;

    let bw = fid.axis.bandwidth_hz;
    let mut kept: Vec<(Complex64, bool)> = Vec::with_capacity(poles.len());
    for z in poles {
        let r = z.norm();
        if r == 0.0 || !r.is_finite() {
            continue;
        }
        if r > 1.0 {
            kept.push((z / r, true));
        } else {
            kept.push((z, false));
        }
    }
    if kept.is_empty() {
        return Ok(Vec::new());
    }

    // one amplitude/phase fit of the full FID against the pole basis
    let mut vander = Array2::from_elem((n, kept.len()), ZERO);
    for (k, (z, _)) in kept.iter().enumerate() {
        let mut p = Complex64::new(1.0, 0.0);
        for t in 0..n {
            vander[[t, k]] = p;
            p *= z;
        }
    }
    let rhs =
        Array2::from_shape_vec((n, 1), fid.samples.clone()).expect("fid length matches axis");
    let amps = qr_lstsq(&vander.view(), &rhs.view())?;

    let mut components: Vec<HsvdComponent> = kept
        .iter()
        .zip(amps.column(0))
        .map(|(&(z, clamped), a)| {
            let mut phase_rad = a.arg();
            if phase_rad <= -PI {
                phase_rad += TAU;
            }
            HsvdComponent {
                frequency_hz: z.arg() * bw / TAU,
                damping_per_s: if clamped { 0.0 } else { -z.norm().ln() * bw },
                amplitude: a.norm(),
                phase_rad,
                clamped,
            }
        })
        .filter(|c| {
            c.frequency_hz.is_finite()
                && c.damping_per_s.is_finite()
                && c.amplitude.is_finite()
        })
        .collect();
    components.sort_by(|a, b| b.amplitude.total_cmp(&a.amplitude));
    Ok(components)
}

/// Synthesize the time-domain signal a component list describes.
pub fn reconstruct(components: &[HsvdComponent], axis: SpectralAxis) -> Spectrum {
    let dt = axis.dt();
    let mut fid = vec![ZERO; axis.n_points];
    for c in components {
        for (t, z) in fid.iter_mut().enumerate() {
            let time = t as f64 * dt;
            *z += Complex64::from_polar(
                c.amplitude * (-c.damping_per_s * time).exp(),
                c.phase_rad + TAU * c.frequency_hz * time,
            );
        }
    }
    Spectrum::from_samples(axis, Domain::Time, fid)
}

/// Remove whatever the rank-`rank` decomposition places inside `band_ppm`
/// (low, high): the fit runs over the whole FID, but only the in-band
/// components are reconstructed and subtracted, so signals outside the band
/// are untouched — bit for bit when nothing falls inside.
pub fn remove_water(fid: &Spectrum, rank: usize, band_ppm: (f64, f64)) -> Result<Spectrum> {
    let components = hsvd_decompose(fid, rank)?;
    let in_band: Vec<HsvdComponent> = components
        .into_iter()
        .filter(|c| {
            let ppm = c.ppm(fid.axis);
            ppm >= band_ppm.0 && ppm <= band_ppm.1
        })
        .collect();
    if in_band.is_empty() {
        return Ok(fid.clone());
    }
    let water = reconstruct(&in_band, fid.axis);
    let samples =
        fid.samples.iter().zip(&water.samples).map(|(s, w)| s - w).collect();
    Ok(Spectrum::from_samples(fid.axis, Domain::Time, samples))
}
