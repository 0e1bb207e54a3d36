//! Spectral axes, complex spectra and the Fourier conventions used everywhere.
//!
//! Conventions, fixed once here and relied on by every other module:
//!
//! * The discrete Fourier transform is unitary (`1/sqrt(N)` both ways), so
//!   Parseval holds exactly and energy comparisons are domain-free.
//! * Frequency-domain spectra are fftshifted: bin `k` sits at
//!   `f = (k - floor(N/2)) * bandwidth / N` Hz, so index 0 is `-bandwidth/2`
//!   and the carrier (0 Hz) is at bin `floor(N/2)`.
//! * Chemical shift: `ppm(f) = ref_ppm - f / transmitter_mhz`. ppm decreases
//!   as the frequency offset increases; the downfield (high-ppm) end of the
//!   spectrum is at negative Hz offsets.

use num_complex::Complex64;
use rustfft::FftPlanner;
use std::sync::{Arc, Mutex, OnceLock};

use crate::{Error, Result};

/// Sampling grid shared by every spectrum of an acquisition: number of FID
/// points, spectral bandwidth in Hz, transmitter frequency in MHz (one ppm
/// equals `transmitter_mhz` Hz) and the carrier position in ppm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralAxis {
    pub n_points: usize,
    pub bandwidth_hz: f64,
    pub transmitter_mhz: f64,
    pub ref_ppm: f64,
}

impl SpectralAxis {
    pub fn new(n_points: usize, bandwidth_hz: f64, transmitter_mhz: f64, ref_ppm: f64) -> Result<Self> {
        if n_points == 0 {
            return Err(Error::Config("n_points must be positive".into()));
        }
        if !(bandwidth_hz > 0.0) || !(transmitter_mhz > 0.0) {
            return Err(Error::Config("bandwidth_hz and transmitter_mhz must be positive".into()));
        }
        Ok(SpectralAxis { n_points, bandwidth_hz, transmitter_mhz, ref_ppm })
    }

    /// Dwell time in seconds.
    pub fn dt(&self) -> f64 {
        1.0 / self.bandwidth_hz
    }

    /// Time of FID sample `t` in seconds.
    pub fn time_at(&self, t: usize) -> f64 {
        t as f64 / self.bandwidth_hz
    }

    /// Frequency in Hz of fftshifted bin `k`.
    pub fn freq_at(&self, k: usize) -> f64 {
        (k as f64 - (self.n_points / 2) as f64) * self.bandwidth_hz / self.n_points as f64
    }

    /// Hz per bin.
    pub fn hz_per_bin(&self) -> f64 {
        self.bandwidth_hz / self.n_points as f64
    }

    /// ppm width of one bin (positive).
    pub fn ppm_per_bin(&self) -> f64 {
        self.hz_per_bin() / self.transmitter_mhz
    }

    /// Chemical shift of fftshifted bin `k`. Strictly decreasing in `k`.
    pub fn index_to_ppm(&self, k: usize) -> f64 {
        self.ref_ppm - self.freq_at(k) / self.transmitter_mhz
    }

    /// Frequency offset in Hz of a chemical shift.
    pub fn ppm_to_freq(&self, ppm: f64) -> f64 {
        (self.ref_ppm - ppm) * self.transmitter_mhz
    }

    /// Fractional fftshifted bin index of a chemical shift. Errors when the
    /// shift falls outside the sampled axis.
    pub fn ppm_to_index(&self, ppm: f64) -> Result<f64> {
        let k = self.ppm_to_freq(ppm) / self.hz_per_bin() + (self.n_points / 2) as f64;
        if k < 0.0 || k > (self.n_points - 1) as f64 {
            return Err(Error::OutOfRange(format!(
                "{} ppm is outside the axis ({:.3}..{:.3} ppm)",
                ppm,
                self.index_to_ppm(self.n_points - 1),
                self.index_to_ppm(0)
            )));
        }
        Ok(k)
    }

    /// Inclusive bin range whose chemical shifts lie inside `[lo_ppm, hi_ppm]`.
    /// Bins are ordered by frequency, so high ppm maps to low indices; the
    /// returned range is in bin order. Empty when the band misses the axis.
    pub fn band_range(&self, lo_ppm: f64, hi_ppm: f64) -> std::ops::Range<usize> {
        debug_assert!(lo_ppm <= hi_ppm);
        let n = self.n_points;
        // first bin with ppm <= hi, last bin with ppm >= lo
        let mut start = n;
        let mut end = 0usize;
        for k in 0..n {
            let p = self.index_to_ppm(k);
            if p <= hi_ppm && p >= lo_ppm {
                if start == n {
                    start = k;
                }
                end = k + 1;
            }
        }
        if start == n {
            0..0
        } else {
            start..end
        }
    }
}

/// Which domain a [`Spectrum`]'s samples live in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Time,
    Frequency,
}

/// One complex-valued signal on a [`SpectralAxis`], either a time-domain FID
/// or an fftshifted frequency-domain spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub samples: Vec<Complex64>,
    pub domain: Domain,
    pub axis: SpectralAxis,
}

fn planner() -> &'static Mutex<FftPlanner<f64>> {
    static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
    PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()))
}

/// Raw (unshifted, unnormalized) forward DFT plan from the shared planner.
pub(crate) fn plan_raw_forward(n: usize) -> Arc<dyn rustfft::Fft<f64>> {
    planner().lock().unwrap().plan_fft_forward(n)
}

/// Raw (unshifted, unnormalized) inverse DFT plan from the shared planner.
pub(crate) fn plan_raw_inverse(n: usize) -> Arc<dyn rustfft::Fft<f64>> {
    planner().lock().unwrap().plan_fft_inverse(n)
}

/// Unitary forward DFT of a buffer, fftshifted in place.
pub fn fft_forward(buf: &mut [Complex64]) {
    let n = buf.len();
    plan_raw_forward(n).process(buf);
    let scale = 1.0 / (n as f64).sqrt();
    for v in buf.iter_mut() {
        *v *= scale;
    }
    // move DC to bin floor(n/2)
    buf.rotate_left(n - n / 2);
}

/// Unitary inverse DFT of an fftshifted buffer, in place.
pub fn fft_inverse(buf: &mut [Complex64]) {
    let n = buf.len();
    buf.rotate_left(n / 2);
    plan_raw_inverse(n).process(buf);
    let scale = 1.0 / (n as f64).sqrt();
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

impl Spectrum {
    pub fn zeros(axis: SpectralAxis, domain: Domain) -> Self {
        Spectrum { samples: vec![Complex64::new(0.0, 0.0); axis.n_points], domain, axis }
    }

    pub fn from_samples(axis: SpectralAxis, domain: Domain, samples: Vec<Complex64>) -> Self {
        assert_eq!(samples.len(), axis.n_points, "sample count must match the axis");
        Spectrum { samples, domain, axis }
    }

    /// Forward transform. The input must be time-domain.
    pub fn to_frequency(&self) -> Spectrum {
        assert_eq!(self.domain, Domain::Time, "to_frequency expects a time-domain FID");
        let mut samples = self.samples.clone();
        fft_forward(&mut samples);
        Spectrum { samples, domain: Domain::Frequency, axis: self.axis }
    }

    /// Inverse transform. The input must be frequency-domain.
    pub fn to_time(&self) -> Spectrum {
        assert_eq!(self.domain, Domain::Frequency, "to_time expects a frequency-domain spectrum");
        let mut samples = self.samples.clone();
        fft_inverse(&mut samples);
        Spectrum { samples, domain: Domain::Time, axis: self.axis }
    }

    /// Sum of squared magnitudes. Domain-free by unitarity.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Energy restricted to a ppm band (frequency domain only).
    pub fn band_energy(&self, lo_ppm: f64, hi_ppm: f64) -> f64 {
        assert_eq!(self.domain, Domain::Frequency);
        let r = self.axis.band_range(lo_ppm, hi_ppm);
        self.samples[r].iter().map(|z| z.norm_sqr()).sum()
    }
}
