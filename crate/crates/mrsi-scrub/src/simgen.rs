//! Synthetic data: metabolite spectra, lipid and water nuisance signals,
//! whole phantom volumes, and network training triplets.
//!
//! All generators draw from an explicit `ChaCha8Rng` and are pure given the
//! seed, so every dataset and phantom is reproducible bit for bit. Batch
//! builders derive one seed per sample by hashing the sample index into a
//! base seed, which keeps samples independent of batch size and ordering.
//!
//! Line shapes are Voigt profiles built in the time domain,
//!
//! ```text
//! fid(t) = a e^{i phi} e^{(i 2 pi f - lambda_L) t - (lambda_G t)^2}
//! ```
//!
//! with `lambda_L = pi * lorentz_fwhm` and
//! `lambda_G = pi * gauss_fwhm / (2 sqrt(ln 2))`, so each factor alone
//! produces the stated full width at half maximum of the absorption line.

use std::f64::consts::TAU;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::lipid::LipidOperator;
use crate::spectrum::{plan_raw_forward, plan_raw_inverse, Domain, SpectralAxis, Spectrum};
use crate::volume::MrsiVolume;
use crate::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Canonical lipid resonances (ppm) and their relative amplitudes: methyl,
/// bulk methylene, allylic neighbours, diallylic, and the olefinic line.
pub const LIPID_SHIFTS_PPM: [f64; 7] = [0.90, 1.30, 1.59, 2.03, 2.25, 2.77, 5.31];
pub const LIPID_REL_AMPS: [f64; 7] = [0.70, 1.00, 0.22, 0.07, 0.05, 0.03, 0.10];

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// SplitMix64-style hash of a sample index into a base seed.
pub(crate) fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------- basis ---

#[derive(Clone, Debug, PartialEq)]
pub struct MetabolitePeak {
    pub shift_ppm: f64,
    pub rel_amp: f64,
    /// Doublet splitting in Hz; 0 means a singlet. The text format carries
    /// no splitting column, so parsed bases always hold 0 here.
    pub splitting_hz: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaboliteEntry {
    pub name: String,
    pub peaks: Vec<MetabolitePeak>,
}

/// Peak-table metabolite basis, loadable from a plain text file: one line per
/// metabolite, `name shift_ppm rel_amp [shift_ppm rel_amp ...]`, `#` starts a
/// comment.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaboliteBasis {
    pub entries: Vec<MetaboliteEntry>,
}

impl MetaboliteBasis {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut tokens = line.split_whitespace();
            let name = tokens.next().unwrap().to_string();
            let numbers: Vec<&str> = tokens.collect();
            if numbers.is_empty() || numbers.len() % 2 != 0 {
                return Err(Error::Format(format!(
                    "basis line {}: expected (shift, amplitude) pairs after the name",
                    lineno + 1
                )));
            }
            let mut peaks = Vec::with_capacity(numbers.len() / 2);
            for pair in numbers.chunks(2) {
                let parse = |s: &str| -> Result<f64> {
                    s.parse::<f64>().map_err(|_| {
                        Error::Format(format!("basis line {}: bad number {s:?}", lineno + 1))
                    })
                };
                let shift_ppm = parse(pair[0])?;
                let rel_amp = parse(pair[1])?;
                if !(rel_amp > 0.0) {
                    return Err(Error::Format(format!(
                        "basis line {}: amplitude must be positive, got {rel_amp}",
                        lineno + 1
                    )));
                }
                if !(0.5..=4.5).contains(&shift_ppm) {
                    return Err(Error::Format(format!(
                        "basis line {}: shift {shift_ppm} ppm outside 0.5-4.5",
                        lineno + 1
                    )));
                }
                peaks.push(MetabolitePeak { shift_ppm, rel_amp, splitting_hz: 0.0 });
            }
            entries.push(MetaboliteEntry { name, peaks });
        }
        Ok(MetaboliteBasis { entries })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The basis shipped with the crate (eight common brain metabolites).
    pub fn default_brain() -> Self {
        Self::parse(include_str!("../assets/metabolites.basis")).expect("shipped basis is valid")
    }

    pub fn n_metabolites(&self) -> usize {
        self.entries.len()
    }
}

// ------------------------------------------------------------ parameters ---

/// Ranges the per-spectrum parameters are drawn from.
#[derive(Clone, Debug)]
pub struct MetabConfig {
    pub conc_mean: f64,
    pub conc_sd: f64,
    pub freq_offset_hz: (f64, f64),
    /// Total Voigt width (Lorentzian FWHM + Gaussian FWHM).
    pub total_width_hz: (f64, f64),
    /// Fraction of the total width carried by the Lorentzian part.
    pub lorentz_frac: (f64, f64),
    pub snr: (f64, f64),
    pub n_baseline: usize,
    pub baseline_center_ppm: (f64, f64),
    pub baseline_width_ppm: (f64, f64),
    pub baseline_amp: (f64, f64),
}

impl Default for MetabConfig {
    fn default() -> Self {
        MetabConfig {
            conc_mean: 1.0,
            conc_sd: 5.0,
            freq_offset_hz: (-150.0, 150.0),
            total_width_hz: (4.0, 50.0),
            lorentz_frac: (0.2, 0.8),
            snr: (1.0, 10.0),
            n_baseline: 10,
            baseline_center_ppm: (0.5, 4.5),
            baseline_width_ppm: (0.3, 1.5),
            baseline_amp: (0.0, 0.25),
        }
    }
}

/// One spectrum's worth of drawn parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SimParams {
    pub concentrations: Vec<f64>,
    pub freq_offset_hz: f64,
    pub lorentz_width_hz: f64,
    pub gauss_width_hz: f64,
    pub snr: f64,
    /// (center_ppm, fwhm_ppm, amplitude) per broad baseline component.
    pub baseline: Vec<(f64, f64, f64)>,
    pub global_phase_rad: f64,
    /// Seeds the noise stream of [`simulate_metabolite`].
    pub seed: u64,
}

/// Draw simulation parameters. Concentrations come from a normal with a
/// deliberately huge spread (sd five times the mean) truncated at zero, so a
/// large fraction of metabolites vanish in any given draw.
pub fn sample_params(rng: &mut ChaCha8Rng, basis: &MetaboliteBasis, cfg: &MetabConfig) -> SimParams {
    let concentrations = (0..basis.n_metabolites())
        .map(|_| {
            if cfg.conc_sd == 0.0 {
                cfg.conc_mean
            } else {
                let normal = Normal::new(cfg.conc_mean, cfg.conc_sd).expect("valid sd");
                normal.sample(rng).max(0.0)
            }
        })
        .collect();
    let freq_offset_hz = uniform(rng, cfg.freq_offset_hz);
    let total = uniform(rng, cfg.total_width_hz);
    let frac = uniform(rng, cfg.lorentz_frac);
    let snr = uniform(rng, cfg.snr);
    let baseline = (0..cfg.n_baseline)
        .map(|_| {
            (
                uniform(rng, cfg.baseline_center_ppm),
                uniform(rng, cfg.baseline_width_ppm),
                uniform(rng, cfg.baseline_amp),
            )
        })
        .collect();
    let global_phase_rad = rng.gen_range(0.0..TAU);
    let seed = rng.gen::<u64>();
    SimParams {
        concentrations,
        freq_offset_hz,
        lorentz_width_hz: total * frac,
        gauss_width_hz: total * (1.0 - frac),
        snr,
        baseline,
        global_phase_rad,
        seed,
    }
}

/// Voigt damping rates for the two width components.
fn voigt_rates(lorentz_fwhm: f64, gauss_fwhm: f64) -> (f64, f64) {
    let lambda_l = std::f64::consts::PI * lorentz_fwhm;
    let lambda_g = std::f64::consts::PI * gauss_fwhm / (2.0 * (2f64.ln()).sqrt());
    (lambda_l, lambda_g)
}

fn add_voigt_fid(
    fid: &mut [Complex64],
    axis: SpectralAxis,
    amp: f64,
    phase: f64,
    freq_hz: f64,
    lambda_l: f64,
    lambda_g: f64,
) {
    let dt = axis.dt();
    for (t, z) in fid.iter_mut().enumerate() {
        let time = t as f64 * dt;
        let mag = amp * (-(lambda_l * time) - (lambda_g * time).powi(2)).exp();
        *z += Complex64::from_polar(mag, phase + TAU * freq_hz * time);
    }
}

/// Simulate one metabolite spectrum: Voigt peaks from the basis table in the
/// time domain, then broad Gaussian baseline humps and white noise added in
/// the frequency domain. Noise is scaled so the tallest noiseless metabolite
/// peak magnitude divided by the complex noise standard deviation equals
/// `params.snr`; with no surviving peaks the spectrum stays noiseless.
/// Returns a frequency-domain spectrum.
pub fn simulate_metabolite(
    params: &SimParams,
    basis: &MetaboliteBasis,
    axis: SpectralAxis,
) -> Result<Spectrum> {
    if basis.entries.is_empty() {
        return Err(Error::Config("metabolite basis is empty".into()));
    }
    if params.concentrations.len() != basis.n_metabolites() {
        return Err(Error::Config(format!(
            "{} concentrations for {} metabolites",
            params.concentrations.len(),
            basis.n_metabolites()
        )));
    }
    let (lambda_l, lambda_g) = voigt_rates(params.lorentz_width_hz, params.gauss_width_hz);
    let mut fid = vec![ZERO; axis.n_points];
    for (entry, &conc) in basis.entries.iter().zip(&params.concentrations) {
        if conc == 0.0 {
            continue;
        }
        for peak in &entry.peaks {
            let f0 = axis.ppm_to_freq(peak.shift_ppm) + params.freq_offset_hz;
            let amp = conc * peak.rel_amp;
            if peak.splitting_hz == 0.0 {
                add_voigt_fid(&mut fid, axis, amp, params.global_phase_rad, f0, lambda_l, lambda_g);
            } else {
                for sign in [-0.5, 0.5] {
                    let f = f0 + sign * peak.splitting_hz;
                    add_voigt_fid(
                        &mut fid,
                        axis,
                        amp * 0.5,
                        params.global_phase_rad,
                        f,
                        lambda_l,
                        lambda_g,
                    );
                }
            }
        }
    }
    let mut spec = Spectrum::from_samples(axis, Domain::Time, fid).to_frequency();
    let peak_mag = spec.samples.iter().map(|z| z.norm()).fold(0.0f64, f64::max);

    // baseline humps live directly in the frequency domain
    let phase = Complex64::from_polar(1.0, params.global_phase_rad);
    for &(center, fwhm, amp) in &params.baseline {
        if amp == 0.0 {
            continue;
        }
        let sigma = fwhm / (2.0 * (2.0 * 2f64.ln()).sqrt());
        for (k, z) in spec.samples.iter_mut().enumerate() {
            let d = axis.index_to_ppm(k) - center;
            *z += phase * amp * (-d * d / (2.0 * sigma * sigma)).exp();
        }
    }

    if params.snr.is_finite() && peak_mag > 0.0 {
        // complex sd sigma means sigma/sqrt(2) per real component
        let sigma = peak_mag / params.snr;
        let per_comp = sigma / 2f64.sqrt();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(params.seed);
        for z in spec.samples.iter_mut() {
            let re: f64 = StandardNormal.sample(&mut noise_rng);
            let im: f64 = StandardNormal.sample(&mut noise_rng);
            *z += Complex64::new(re * per_comp, im * per_comp);
        }
    }
    Ok(spec)
}

// ----------------------------------------------------------------- lipid ---

#[derive(Clone, Debug)]
pub struct LipidConfig {
    /// Overall scale drawn as 10^U(range), relative to unit metabolite scale.
    pub scale_log10: (f64, f64),
    /// Pin the scale (bypassing the draw); used by tests and phantom scalp.
    pub scale_override: Option<f64>,
    /// Per-peak total Voigt width.
    pub width_hz: (f64, f64),
    pub lorentz_frac: (f64, f64),
    /// Relative amplitude spread: each peak's table amplitude is multiplied
    /// by U(1 - spread, 1 + spread).
    pub amp_spread: f64,
    /// Shared frequency jitter, U(-jitter, +jitter) Hz per draw.
    pub jitter_hz: f64,
    /// Whether the 5.31 ppm olefinic resonance is generated.
    pub include_olefinic: bool,
}

impl Default for LipidConfig {
    fn default() -> Self {
        LipidConfig {
            scale_log10: (-2.0, 3.0),
            scale_override: None,
            width_hz: (30.0, 150.0),
            lorentz_frac: (0.1, 0.3),
            amp_spread: 0.5,
            jitter_hz: 30.0,
            include_olefinic: true,
        }
    }
}

pub(crate) fn sample_lipid_scale(rng: &mut ChaCha8Rng, cfg: &LipidConfig) -> f64 {
    match cfg.scale_override {
        Some(s) => s,
        None => 10f64.powf(uniform(rng, cfg.scale_log10)),
    }
}

/// Broad Voigt resonances at the canonical lipid shifts, one shared phase and
/// frequency jitter per draw, per-peak widths and amplitude wobble. Returns a
/// frequency-domain spectrum.
pub fn simulate_lipid(rng: &mut ChaCha8Rng, axis: SpectralAxis, cfg: &LipidConfig) -> Spectrum {
    let scale = sample_lipid_scale(rng, cfg);
    let jitter = if cfg.jitter_hz == 0.0 { 0.0 } else { rng.gen_range(-cfg.jitter_hz..cfg.jitter_hz) };
    let phase = rng.gen_range(0.0..TAU);
    let mut fid = vec![ZERO; axis.n_points];
    for (i, (&shift, &rel)) in LIPID_SHIFTS_PPM.iter().zip(&LIPID_REL_AMPS).enumerate() {
        if !cfg.include_olefinic && i == 6 {
            continue;
        }
        let amp = scale * rel * uniform(rng, (1.0 - cfg.amp_spread, 1.0 + cfg.amp_spread));
        let width = uniform(rng, cfg.width_hz);
        let frac = uniform(rng, cfg.lorentz_frac);
        let (lambda_l, lambda_g) = voigt_rates(width * frac, width * (1.0 - frac));
        let f = axis.ppm_to_freq(shift) + jitter;
        add_voigt_fid(&mut fid, axis, amp, phase, f, lambda_l, lambda_g);
    }
    Spectrum::from_samples(axis, Domain::Time, fid).to_frequency()
}

// ----------------------------------------------------------------- water ---

#[derive(Clone, Debug)]
pub struct WaterConfig {
    pub n_components: usize,
    pub center_ppm: f64,
    /// Component frequencies are normal(center, sd), clipped to center+-clip.
    pub freq_sd_ppm: f64,
    pub freq_clip_ppm: f64,
    pub damping: (f64, f64),
    pub weight_log10: (f64, f64),
    pub weight_override: Option<f64>,
}

impl Default for WaterConfig {
    fn default() -> Self {
        WaterConfig {
            n_components: 10,
            center_ppm: 4.7,
            freq_sd_ppm: 0.13,
            freq_clip_ppm: 0.4,
            damping: (5.0, 80.0),
            weight_log10: (-1.0, 2.0),
            weight_override: None,
        }
    }
}

/// The drawn parameters of one water component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaterComponent {
    pub frequency_hz: f64,
    pub damping_per_s: f64,
    pub weight: f64,
    pub phase_rad: f64,
}

/// Draw the component table a water spectrum is synthesized from. Exposed so
/// callers can keep the ground truth for a given random stream.
pub fn water_components(
    rng: &mut ChaCha8Rng,
    axis: SpectralAxis,
    cfg: &WaterConfig,
) -> Vec<WaterComponent> {
    let freq_dist = Normal::new(cfg.center_ppm, cfg.freq_sd_ppm).expect("valid sd");
    (0..cfg.n_components)
        .map(|_| {
            let ppm = freq_dist
                .sample(rng)
                .clamp(cfg.center_ppm - cfg.freq_clip_ppm, cfg.center_ppm + cfg.freq_clip_ppm);
            let damping_per_s = uniform(rng, cfg.damping);
            let weight = match cfg.weight_override {
                Some(w) => w,
                None => 10f64.powf(uniform(rng, cfg.weight_log10)),
            };
            let phase_rad = rng.gen_range(0.0..TAU);
            WaterComponent { frequency_hz: axis.ppm_to_freq(ppm), damping_per_s, weight, phase_rad }
        })
        .collect()
}

/// Residual water: a cluster of damped complex exponentials around the water
/// resonance with wildly varying weights, whose frequency spread produces the
/// asymmetric heavy tails seen in vivo. Returns a frequency-domain spectrum.
pub fn simulate_water(rng: &mut ChaCha8Rng, axis: SpectralAxis, cfg: &WaterConfig) -> Spectrum {
    let mut fid = vec![ZERO; axis.n_points];
    let dt = axis.dt();
    for c in water_components(rng, axis, cfg) {
        if c.weight == 0.0 {
            continue;
        }
        for (t, z) in fid.iter_mut().enumerate() {
            let time = t as f64 * dt;
            *z += Complex64::from_polar(
                c.weight * (-c.damping_per_s * time).exp(),
                c.phase_rad + TAU * c.frequency_hz * time,
            );
        }
    }
    Spectrum::from_samples(axis, Domain::Time, fid).to_frequency()
}

// --------------------------------------------------------------- phantom ---

#[derive(Clone, Debug)]
pub struct PhantomConfig {
    pub nx: usize,
    pub ny: usize,
    pub axis: SpectralAxis,
    /// Add the point-spread-function bleed of scalp lipids into the brain.
    pub lipid_bleed: bool,
    /// Scalp lipid scale range (log10); strong by default.
    pub lipid_scale_log10: (f64, f64),
    pub b0_brain_hz: f64,
    pub b0_scalp_hz: f64,
    /// Concentration multiplier of the "gray matter" level relative to 1.
    pub gray_white_ratio: f64,
    pub metab: MetabConfig,
    pub water: WaterConfig,
    pub lipid: LipidConfig,
}

impl PhantomConfig {
    pub fn new(nx: usize, ny: usize, axis: SpectralAxis) -> Self {
        PhantomConfig {
            nx,
            ny,
            axis,
            lipid_bleed: true,
            lipid_scale_log10: (2.0, 3.0),
            b0_brain_hz: 18.0,
            b0_scalp_hz: 55.0,
            gray_white_ratio: 1.4,
            metab: MetabConfig::default(),
            water: WaterConfig::default(),
            lipid: LipidConfig::default(),
        }
    }
}

/// Normalized elliptical radius of voxel (x, y) for semi-axes (a, b) around
/// the grid center.
fn ell(x: usize, y: usize, nx: usize, ny: usize, a: f64, b: f64) -> f64 {
    let dx = x as f64 - (nx as f64 - 1.0) / 2.0;
    let dy = y as f64 - (ny as f64 - 1.0) / 2.0;
    ((dx / a).powi(2) + (dy / b).powi(2)).sqrt()
}

/// Brain ellipse, 2-voxel skull gap, 2-voxel scalp ring — all radially nested
/// so the masks cannot overlap.
fn phantom_masks(nx: usize, ny: usize) -> (Vec<bool>, Vec<bool>) {
    let a2 = nx as f64 / 2.0 - 1.5;
    let b2 = ny as f64 / 2.0 - 1.5;
    let (a1, b1) = (a2 - 2.0, b2 - 2.0);
    let (ab, bb) = (a1 - 2.0, b1 - 2.0);
    let mut brain = vec![false; nx * ny];
    let mut scalp = vec![false; nx * ny];
    for x in 0..nx {
        for y in 0..ny {
            let idx = x * ny + y;
            if ell(x, y, nx, ny, ab, bb) <= 1.0 {
                brain[idx] = true;
            } else if ell(x, y, nx, ny, a1, b1) > 1.0 && ell(x, y, nx, ny, a2, b2) <= 1.0 {
                scalp[idx] = true;
            }
        }
    }
    (brain, scalp)
}

/// Build a synthetic acquisition: metabolites plus water inside an elliptical
/// brain, strong lipids plus water in a scalp ring, a smooth polynomial B0
/// map baked into the FIDs (and recorded in the map for later correction),
/// and optionally the lipid bleed that k-space truncation smears into the
/// brain.
pub fn build_phantom(
    cfg: &PhantomConfig,
    basis: &MetaboliteBasis,
    rng: &mut ChaCha8Rng,
) -> Result<MrsiVolume> {
    Ok(build_phantom_pair(cfg, basis, rng)?.0)
}

/// Like [`build_phantom`], but also returns the clean metabolite-only volume
/// (no water, no lipid, no field ramp) that cleanup methods are scored
/// against. The generator is consumed identically, so the acquired half is
/// bit-identical to a `build_phantom` call with the same seed.
pub fn build_phantom_pair(
    cfg: &PhantomConfig,
    basis: &MetaboliteBasis,
    rng: &mut ChaCha8Rng,
) -> Result<(MrsiVolume, MrsiVolume)> {
    let (nx, ny) = (cfg.nx, cfg.ny);
    if nx < 16 || ny < 16 {
        return Err(Error::Config(format!("phantom needs at least 16x16 voxels, got {nx}x{ny}")));
    }
    let axis = cfg.axis;
    let (brain, scalp) = phantom_masks(nx, ny);

    // smooth low-frequency field, thresholded into a two-level gray/white map
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(1..=2) as f64,
                rng.gen_range(1..=2) as f64,
                rng.gen_range(0.5..1.0),
                rng.gen_range(0.0..TAU),
            )
        })
        .collect();
    let field: Vec<f64> = (0..nx * ny)
        .map(|idx| {
            let (u, v) = ((idx / ny) as f64 / nx as f64, (idx % ny) as f64 / ny as f64);
            waves.iter().map(|&(p, q, c, ph)| c * (TAU * (p * u + q * v) + ph).cos()).sum()
        })
        .collect();
    let mut brain_vals: Vec<f64> = field
        .iter()
        .zip(&brain)
        .filter_map(|(f, &b)| if b { Some(*f) } else { None })
        .collect();
    brain_vals.sort_by(f64::total_cmp);
    let median = brain_vals[brain_vals.len() / 2];
    let mult: Vec<f64> =
        field.iter().map(|&f| if f > median { cfg.gray_white_ratio } else { 1.0 }).collect();

    // degree-3 polynomial B0 field, rescaled into the brain/scalp caps
    let coeffs: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let poly = |u: f64, v: f64| -> f64 {
        let terms = [
            1.0,
            u,
            v,
            u * u,
            u * v,
            v * v,
            u * u * u,
            u * u * v,
            u * v * v,
            v * v * v,
        ];
        coeffs.iter().zip(terms).map(|(c, t)| c * t).sum()
    };
    let raw_b0: Vec<f64> = (0..nx * ny)
        .map(|idx| {
            let u = 2.0 * (idx / ny) as f64 / (nx as f64 - 1.0) - 1.0;
            let v = 2.0 * (idx % ny) as f64 / (ny as f64 - 1.0) - 1.0;
            poly(u, v)
        })
        .collect();
    let max_over = |mask: &[bool]| {
        raw_b0
            .iter()
            .zip(mask)
            .filter_map(|(b, &m)| if m { Some(b.abs()) } else { None })
            .fold(0.0f64, f64::max)
    };
    let (mb, ms) = (max_over(&brain), max_over(&scalp));
    let scale_brain = if mb > 0.0 { cfg.b0_brain_hz / mb } else { f64::INFINITY };
    let scale_scalp = if ms > 0.0 { cfg.b0_scalp_hz / ms } else { f64::INFINITY };
    let b0_scale = scale_brain.min(scale_scalp);
    let b0_scale = if b0_scale.is_finite() { b0_scale } else { 0.0 };
    let b0_map: Vec<f64> = raw_b0.iter().map(|b| b * b0_scale).collect();

    // shared tissue parameters; per-voxel noise/water/lipid seeds derived
    let base_params = sample_params(rng, basis, &cfg.metab);
    let voxel_seed_base = rng.gen::<u64>();
    let scalp_lipid_cfg = LipidConfig { scale_log10: cfg.lipid_scale_log10, ..cfg.lipid.clone() };

    let mut vol = MrsiVolume::zeros(nx, ny, axis);
    let mut truth = MrsiVolume::zeros(nx, ny, axis);
    let mut lipid_vol = MrsiVolume::zeros(nx, ny, axis);
    let dt = axis.dt();
    for x in 0..nx {
        for y in 0..ny {
            let idx = x * ny + y;
            if !brain[idx] && !scalp[idx] {
                continue;
            }
            let mut vrng = ChaCha8Rng::seed_from_u64(mix_seed(voxel_seed_base, idx as u64));
            let water = simulate_water(&mut vrng, axis, &cfg.water);
            let mut main = vec![ZERO; axis.n_points];
            let mut lipid_part: Option<Vec<Complex64>> = None;
            if brain[idx] {
                let mut p = base_params.clone();
                for c in p.concentrations.iter_mut() {
                    *c *= mult[idx];
                }
                p.seed = vrng.gen::<u64>();
                let m = simulate_metabolite(&p, basis, axis)?;
                for (dst, (a, b)) in main.iter_mut().zip(m.samples.iter().zip(&water.samples)) {
                    *dst = a + b;
                }
                truth.set_fid(x, y, &m.to_time().samples);
            } else {
                let l = simulate_lipid(&mut vrng, axis, &scalp_lipid_cfg);
                for (dst, w) in main.iter_mut().zip(&water.samples) {
                    *dst = *w;
                }
                lipid_part = Some(l.samples);
            }
            // back to the time domain, then bake in the local field offset
            let ramp = |fid: &mut [Complex64]| {
                let df = b0_map[idx];
                for (t, z) in fid.iter_mut().enumerate() {
                    *z *= Complex64::from_polar(1.0, TAU * df * t as f64 * dt);
                }
            };
            let mut fid =
                Spectrum::from_samples(axis, Domain::Frequency, main).to_time().samples;
            ramp(&mut fid);
            vol.set_fid(x, y, &fid);
            if let Some(l) = lipid_part {
                let mut lfid =
                    Spectrum::from_samples(axis, Domain::Frequency, l).to_time().samples;
                ramp(&mut lfid);
                lipid_vol.set_fid(x, y, &lfid);
            }
        }
    }

    // scalp voxels carry the raw lipid; brain voxels get the smeared copy
    if cfg.lipid_bleed {
        let blurred = truncated_acquisition(&lipid_vol, 4);
        for idx in 0..nx * ny {
            if brain[idx] {
                for (dst, src) in
                    vol.data.row_mut(idx).iter_mut().zip(blurred.data.row(idx).iter())
                {
                    *dst += *src;
                }
            }
        }
    }
    for idx in 0..nx * ny {
        if scalp[idx] {
            for (dst, src) in vol.data.row_mut(idx).iter_mut().zip(lipid_vol.data.row(idx).iter())
            {
                *dst += *src;
            }
        }
    }

    truth.brain_mask = brain.clone();
    truth.scalp_mask = scalp.clone();
    truth.has_masks = true;
    vol.brain_mask = brain;
    vol.scalp_mask = scalp;
    vol.b0_map_hz = b0_map;
    vol.has_masks = true;
    vol.has_b0 = true;
    vol.validate()?;
    truth.validate()?;
    Ok((vol, truth))
}

// ------------------------------------------------------- k-space encoding ---

/// Periodic Hamming window with its peak at index 0, matching the DC-first
/// layout of an unshifted discrete Fourier transform.
pub fn hamming_dc(m: usize) -> Vec<f64> {
    (0..m).map(|k| 0.54 + 0.46 * (TAU * k as f64 / m as f64).cos()).collect()
}

fn fft_2d(img: &mut [Complex64], nx: usize, ny: usize, inverse: bool) {
    let plan_y = if inverse { plan_raw_inverse(ny) } else { plan_raw_forward(ny) };
    for x in 0..nx {
        plan_y.process(&mut img[x * ny..(x + 1) * ny]);
    }
    let plan_x = if inverse { plan_raw_inverse(nx) } else { plan_raw_forward(nx) };
    let mut col = vec![ZERO; nx];
    for y in 0..ny {
        for x in 0..nx {
            col[x] = img[x * ny + y];
        }
        plan_x.process(&mut col);
        for x in 0..nx {
            img[x * ny + y] = col[x];
        }
    }
}

/// Transform every time-point image to k-space, weight it by the separable
/// window, and transform back. Masks and field map pass through unchanged.
pub fn apply_kspace_window(v: &MrsiVolume, wx: &[f64], wy: &[f64]) -> MrsiVolume {
    assert_eq!(wx.len(), v.nx);
    assert_eq!(wy.len(), v.ny);
    let (nx, ny) = (v.nx, v.ny);
    let mut out = v.clone();
    let norm = 1.0 / (nx * ny) as f64;
    let mut img = vec![ZERO; nx * ny];
    for t in 0..v.axis.n_points {
        for (idx, z) in img.iter_mut().enumerate() {
            *z = v.data[[idx, t]];
        }
        fft_2d(&mut img, nx, ny, false);
        for kx in 0..nx {
            for ky in 0..ny {
                img[kx * ny + ky] *= wx[kx] * wy[ky];
            }
        }
        fft_2d(&mut img, nx, ny, true);
        for (idx, z) in img.iter().enumerate() {
            out.data[[idx, t]] = z * norm;
        }
    }
    out
}

/// Model the acquisition's spatial response: Hamming apodization of the
/// (already truncated) k-space grid.
pub fn encode_and_reconstruct(v: &MrsiVolume) -> MrsiVolume {
    apply_kspace_window(v, &hamming_dc(v.nx), &hamming_dc(v.ny))
}

/// Reconstruct `v` as if it were a piecewise-constant object at `oversample`
/// times the grid resolution, acquired on the original `nx x ny` k-space
/// grid with Hamming apodization.
///
/// Truncating the fine object's k-space to the coarse grid is what actually
/// smears sharp structures across voxels: the on-grid Hamming window alone
/// is an exact 3-point convolution and cannot reach past nearest neighbours.
pub fn truncated_acquisition(v: &MrsiVolume, oversample: usize) -> MrsiVolume {
    assert!(oversample >= 1, "oversample factor must be at least 1");
    let (nx, ny) = (v.nx, v.ny);
    let (fx, fy) = (nx * oversample, ny * oversample);
    let wx = hamming_dc(nx);
    let wy = hamming_dc(ny);
    let mut out = v.clone();
    let norm = 1.0 / (nx * ny * oversample * oversample) as f64;
    let mut fine = vec![ZERO; fx * fy];
    let mut coarse = vec![ZERO; nx * ny];
    // DC-first coarse index -> fine-grid index of the same spatial frequency
    let fine_index = |kc: usize, n: usize, nf: usize| -> usize {
        if kc <= n / 2 {
            kc
        } else {
            nf - (n - kc)
        }
    };
    for t in 0..v.axis.n_points {
        fine.iter_mut().for_each(|z| *z = ZERO);
        for idx in 0..nx * ny {
            let val = v.data[[idx, t]];
            if val == ZERO {
                continue;
            }
            let (x, y) = (idx / ny, idx % ny);
            for dx in 0..oversample {
                for dy in 0..oversample {
                    fine[(x * oversample + dx) * fy + y * oversample + dy] = val;
                }
            }
        }
        fft_2d(&mut fine, fx, fy, false);
        for kx in 0..nx {
            let fkx = fine_index(kx, nx, fx);
            for ky in 0..ny {
                coarse[kx * ny + ky] =
                    fine[fkx * fy + fine_index(ky, ny, fy)] * (wx[kx] * wy[ky]);
            }
        }
        fft_2d(&mut coarse, nx, ny, true);
        for (idx, z) in coarse.iter().enumerate() {
            out.data[[idx, t]] = z * norm;
        }
    }
    out
}

// --------------------------------------------------------- training data ---

/// Which nuisance signals the network is trained to predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NuisanceMode {
    /// Target is lipid + water.
    LipidAndWater,
    /// Target is lipid only; no water is added anywhere.
    LipidOnly,
}

/// Where training nuisance spectra come from: a parametric generator or a
/// pool of previously extracted spectra (e.g. phantom scalp voxels).
#[derive(Clone, Debug)]
pub enum SpectrumSource {
    LipidGen(LipidConfig),
    WaterGen(WaterConfig),
    Pool(Vec<Spectrum>),
}

impl SpectrumSource {
    pub fn draw(&self, axis: SpectralAxis, rng: &mut ChaCha8Rng) -> Result<Spectrum> {
        match self {
            SpectrumSource::LipidGen(cfg) => Ok(simulate_lipid(rng, axis, cfg)),
            SpectrumSource::WaterGen(cfg) => Ok(simulate_water(rng, axis, cfg)),
            SpectrumSource::Pool(pool) => {
                if pool.is_empty() {
                    return Err(Error::Config("empty spectrum pool".into()));
                }
                let s = &pool[rng.gen_range(0..pool.len())];
                if s.axis != axis {
                    return Err(Error::AxisMismatch(
                        "pooled spectrum axis differs from the requested axis".into(),
                    ));
                }
                Ok(match s.domain {
                    Domain::Frequency => s.clone(),
                    Domain::Time => s.to_frequency(),
                })
            }
        }
    }
}

/// One (input, lipid-projected input, nuisance target) triplet, all in the
/// frequency domain.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub x1: Spectrum,
    pub x2: Spectrum,
    pub target_y: Spectrum,
    pub clean_m: Spectrum,
    pub seed: u64,
}

fn add_vec(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sub_vec(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Build `n` training samples. Per sample: a metabolite spectrum `m`, lipid
/// `l` (and water `w` unless lipid-only), `y = l (+ w)`, `x1 = m + y`,
/// `x2 = (1 - op) x1`. The stored `clean_m` is nudged to the floating-point
/// fixpoint where both `x1 == clean_m + y` and `x1 - y == clean_m` hold
/// bit-for-bit, so downstream residual arithmetic is exact.
#[allow(clippy::too_many_arguments)]
pub fn make_training_set(
    n: usize,
    basis: &MetaboliteBasis,
    metab_cfg: &MetabConfig,
    lipid_source: &SpectrumSource,
    water_source: &SpectrumSource,
    op: &LipidOperator,
    mode: NuisanceMode,
    axis: SpectralAxis,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainingSample>> {
    if op.axis != axis {
        return Err(Error::AxisMismatch("operator axis differs from the sample axis".into()));
    }
    let base = rng.gen::<u64>();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let seed = mix_seed(base, i as u64);
        let mut srng = ChaCha8Rng::seed_from_u64(seed);
        let params = sample_params(&mut srng, basis, metab_cfg);
        let m = simulate_metabolite(&params, basis, axis)?;
        let l = lipid_source.draw(axis, &mut srng)?;
        let y = match mode {
            NuisanceMode::LipidOnly => l.samples,
            NuisanceMode::LipidAndWater => {
                let w = water_source.draw(axis, &mut srng)?;
                add_vec(&l.samples, &w.samples)
            }
        };
        // floating-point fixpoint: adjust m until both identities hold bitwise
        let mut m_adj = m.samples;
        let mut x1 = add_vec(&m_adj, &y);
        let mut converged = false;
        for _ in 0..32 {
            let m_new = sub_vec(&x1, &y);
            let x1_new = add_vec(&m_new, &y);
            if x1_new == x1 && m_new == m_adj {
                converged = true;
                break;
            }
            m_adj = m_new;
            x1 = x1_new;
        }
        if !converged {
            return Err(Error::Numeric("training sample failed to reach exact decomposition".into()));
        }
        let x1 = Spectrum::from_samples(axis, Domain::Frequency, x1);
        let x2 = op.project_lipid(&x1)?;
        out.push(TrainingSample {
            x2,
            target_y: Spectrum::from_samples(axis, Domain::Frequency, y),
            clean_m: Spectrum::from_samples(axis, Domain::Frequency, m_adj),
            x1,
            seed,
        });
    }
    Ok(out)
}
