//! Spectral quality metrics and the side-by-side method comparison harness.
//!
//! Every cleanup method in this crate turns a contaminated spectrum into an
//! estimate of the clean metabolite signal, and they are all scored the same
//! way, over the same chemical-shift bands:
//!
//! - **NRMSE** `= 100 · ‖pred − truth‖₂ / ‖truth‖₂` restricted to a ppm band.
//!   The normalizer is the truth's band ℓ₂ norm, so values are comparable
//!   *between methods* on the same data but are not percentages of peak
//!   height or of signal range.
//! - **SNR** `= max Re(S) over a peak band / sd of Re(S) over a noise band`.
//!   Defaults put the peak band on the NAA singlet (2.10–1.90 ppm) and the
//!   noise band on the signal-free upfield strip (0.40–0.00 ppm).
//! - **FWHM**: the width of the magnitude peak at half its height, with the
//!   two half-height crossings located by linear interpolation between bins.
//! - **Residual maps**: per-voxel trapezoidal integrals `∫|S(ppm)| dppm` over
//!   a band — the picture of how much nuisance signal a method left behind.
//!
//! [`compare`] runs a list of methods voxel-by-voxel over a volume with known
//! ground truth, times each method, and writes per-voxel metrics, aggregate
//! quartiles, and small self-contained SVG plots into an output directory.
//! A metric that is undefined for one voxel (a flat spectrum has no line
//! width, an empty band has no SNR) is recorded as NaN rather than aborting
//! the run; aggregates skip NaNs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::hlsvd::remove_water;
use crate::lipid::LipidOperator;
use crate::spectrum::{Domain, Spectrum};
use crate::volume::MrsiVolume;
use crate::ynet::{infer, YNetWeights};
use crate::{Error, Result};

/// Chemical-shift bands (in ppm, `(low, high)`) that the evaluation reports
/// over: the whole window, the metabolite region, the lipid region, and the
/// water region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandRanges {
    pub whole: (f64, f64),
    pub metabolite: (f64, f64),
    pub lipid: (f64, f64),
    pub water: (f64, f64),
}

impl Default for BandRanges {
    fn default() -> Self {
        BandRanges {
            whole: (0.7, 4.7),
            metabolite: (1.9, 4.2),
            lipid: (0.7, 1.9),
            water: (4.2, 5.2),
        }
    }
}

/// Default SNR peak band: the NAA singlet.
pub const SNR_PEAK_BAND_PPM: (f64, f64) = (1.90, 2.10);
/// Default SNR noise band: a signal-free upfield strip.
pub const SNR_NOISE_BAND_PPM: (f64, f64) = (0.00, 0.40);
/// How far from the nominal peak position [`fwhm`] searches for the maximum
/// and its half-height crossings.
pub const FWHM_SEARCH_PPM: f64 = 0.3;

fn expect_frequency(s: &Spectrum, what: &str) {
    assert_eq!(s.domain, Domain::Frequency, "{what} expects a frequency-domain spectrum");
}

/// Normalized root-mean-square error between `pred` and `truth` over a ppm
/// band, in percent: `100 · ‖pred − truth‖₂ / ‖truth‖₂` over the complex
/// samples whose chemical shift lies inside `band_ppm = (low, high)`.
///
/// Scale-invariant (`nrmse(c·p, c·t) == nrmse(p, t)`) and comparable between
/// methods; not a percentage of peak height. Errors when the truth has no
/// energy in the band.
pub fn nrmse(pred: &Spectrum, truth: &Spectrum, band_ppm: (f64, f64)) -> Result<f64> {
    expect_frequency(pred, "nrmse");
    expect_frequency(truth, "nrmse");
    if pred.axis != truth.axis {
        return Err(Error::AxisMismatch("prediction and truth axes differ".into()));
    }
    let r = truth.axis.band_range(band_ppm.0, band_ppm.1);
    let denom: f64 = truth.samples[r.clone()].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Err(Error::Numeric(format!(
            "ground truth has no energy in {:.2}..{:.2} ppm; NRMSE is undefined there",
            band_ppm.0, band_ppm.1
        )));
    }
    let num: f64 = pred.samples[r.clone()]
        .iter()
        .zip(&truth.samples[r])
        .map(|(p, t)| (p - t).norm_sqr())
        .sum::<f64>()
        .sqrt();
    Ok(100.0 * num / denom)
}

/// Signal-to-noise ratio: the maximum of the real part over `peak_band_ppm`
/// divided by the standard deviation of the real part over `noise_band_ppm`.
///
/// Errors when either band misses the axis or the noise band is constant
/// (a zero spectrum has no noise level to divide by).
pub fn snr(s: &Spectrum, peak_band_ppm: (f64, f64), noise_band_ppm: (f64, f64)) -> Result<f64> {
    expect_frequency(s, "snr");
    let pr = s.axis.band_range(peak_band_ppm.0, peak_band_ppm.1);
    let nr = s.axis.band_range(noise_band_ppm.0, noise_band_ppm.1);
    if pr.is_empty() {
        return Err(Error::OutOfRange(format!(
            "peak band {:.2}..{:.2} ppm is off the axis",
            peak_band_ppm.0, peak_band_ppm.1
        )));
    }
    if nr.len() < 2 {
        return Err(Error::OutOfRange(format!(
            "noise band {:.2}..{:.2} ppm covers fewer than two bins",
            noise_band_ppm.0, noise_band_ppm.1
        )));
    }
    let peak = s.samples[pr].iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    let noise: Vec<f64> = s.samples[nr].iter().map(|z| z.re).collect();
    let mean = noise.iter().sum::<f64>() / noise.len() as f64;
    let var = noise.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (noise.len() - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Err(Error::Numeric(
            "noise band is exactly constant; SNR is undefined".into(),
        ));
    }
    Ok(peak / sd)
}

/// Full width at half maximum of the magnitude peak nearest `peak_ppm`, in
/// ppm. The maximum and both half-height crossings are searched within
/// ±[`FWHM_SEARCH_PPM`] of the nominal position; each crossing is located by
/// linear interpolation between the two straddling bins.
///
/// Errors when the search window misses the axis, the spectrum is zero
/// there, or either flank never drops below half height inside the window.
pub fn fwhm(s: &Spectrum, peak_ppm: f64) -> Result<f64> {
    expect_frequency(s, "fwhm");
    let r = s.axis.band_range(peak_ppm - FWHM_SEARCH_PPM, peak_ppm + FWHM_SEARCH_PPM);
    if r.len() < 3 {
        return Err(Error::OutOfRange(format!(
            "the ±{FWHM_SEARCH_PPM} ppm window around {peak_ppm} ppm covers fewer than 3 bins"
        )));
    }
    let mags: Vec<f64> = s.samples[r].iter().map(|z| z.norm()).collect();
    let k_max = mags
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .unwrap();
    let half = mags[k_max] / 2.0;
    if mags[k_max] == 0.0 {
        return Err(Error::Numeric(format!("spectrum is zero around {peak_ppm} ppm")));
    }
    // left flank: first bin below half, crossing between it and its neighbor
    let mut left = None;
    for j in (0..k_max).rev() {
        if mags[j] < half {
            left = Some(j as f64 + (half - mags[j]) / (mags[j + 1] - mags[j]));
            break;
        }
    }
    let mut right = None;
    for j in k_max + 1..mags.len() {
        if mags[j] < half {
            right = Some(j as f64 - (half - mags[j]) / (mags[j - 1] - mags[j]));
            break;
        }
    }
    match (left, right) {
        (Some(l), Some(rt)) => Ok((rt - l) * s.axis.ppm_per_bin()),
        _ => Err(Error::Numeric(format!(
            "no half-height crossing within {FWHM_SEARCH_PPM} ppm of {peak_ppm} ppm"
        ))),
    }
}

/// Trapezoidal integral of the magnitude spectrum over a ppm band.
/// Bands narrower than two bins integrate to zero.
pub fn band_abs_integral(s: &Spectrum, band_ppm: (f64, f64)) -> f64 {
    expect_frequency(s, "band_abs_integral");
    let r = s.axis.band_range(band_ppm.0, band_ppm.1);
    if r.len() < 2 {
        return 0.0;
    }
    let mags: Vec<f64> = s.samples[r].iter().map(|z| z.norm()).collect();
    let dppm = s.axis.ppm_per_bin();
    mags.windows(2).map(|w| (w[0] + w[1]) / 2.0 * dppm).sum()
}

/// Per-voxel [`band_abs_integral`] over a volume, shaped `(nx, ny)`. When the
/// volume carries masks only brain voxels are evaluated (the rest stay zero);
/// a mask-less volume is integrated everywhere.
pub fn residual_map(v: &MrsiVolume, band_ppm: (f64, f64)) -> Array2<f64> {
    let mut map = Array2::zeros((v.nx, v.ny));
    for x in 0..v.nx {
        for y in 0..v.ny {
            if v.has_masks && !v.brain_mask[v.voxel_index(x, y)] {
                continue;
            }
            let s = v.spectrum_at(x, y).to_frequency();
            map[[x, y]] = band_abs_integral(&s, band_ppm);
        }
    }
    map
}

// ------------------------------------------------------------ comparison ---

/// A nuisance-removal recipe the comparison harness can run on one voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Leave the spectrum untouched; the contamination upper bound.
    None,
    /// Lipid subspace suppression.
    L2,
    /// Subtraction of water components found by the Hankel decomposition.
    Hlsvd,
    /// Water subtraction followed by lipid suppression.
    HlsvdL2,
    /// Lipid-only network prediction subtracted from the input.
    Lipnet,
    /// Joint lipid+water network prediction subtracted from the input.
    Walinet,
    /// Water subtraction followed by the lipid-only network.
    HlsvdLipnet,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::None,
        Method::L2,
        Method::Hlsvd,
        Method::HlsvdL2,
        Method::Lipnet,
        Method::Walinet,
        Method::HlsvdLipnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::L2 => "l2",
            Method::Hlsvd => "hlsvd",
            Method::HlsvdL2 => "hlsvd+l2",
            Method::Lipnet => "lipnet",
            Method::Walinet => "walinet",
            Method::HlsvdLipnet => "hlsvd+lipnet",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// The fitted pieces the methods draw on. Only what the requested methods
/// actually need has to be present: the lipid operator for every method that
/// suppresses or projects lipids, and the matching network weights for the
/// network methods.
#[derive(Clone, Copy, Default)]
pub struct MethodInputs<'a> {
    pub op: Option<&'a LipidOperator>,
    pub walinet: Option<&'a YNetWeights>,
    pub lipnet: Option<&'a YNetWeights>,
}

impl<'a> MethodInputs<'a> {
    fn op(&self, m: Method) -> Result<&'a LipidOperator> {
        self.op.ok_or_else(|| {
            Error::Config(format!("method '{m}' needs a lipid operator and none was provided"))
        })
    }

    fn net(&self, m: Method) -> Result<&'a YNetWeights> {
        let w = match m {
            Method::Walinet => self.walinet,
            _ => self.lipnet,
        };
        w.ok_or_else(|| {
            Error::Config(format!("method '{m}' needs network weights and none were provided"))
        })
    }
}

/// Knobs of the comparison harness.
#[derive(Clone, Debug)]
pub struct CompareConfig {
    pub methods: Vec<Method>,
    pub bands: BandRanges,
    /// Model order of the Hankel water removal.
    pub hlsvd_rank: usize,
    /// Band the Hankel removal treats as water.
    pub water_band_ppm: (f64, f64),
    /// Where the line-width probe looks (the NAA singlet by default).
    pub fwhm_peak_ppm: f64,
    /// How many voxels get a truth/prediction overlay plot.
    pub n_plot_voxels: usize,
    /// Seed of the plot-voxel sampler (everything else is deterministic).
    pub seed: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            methods: vec![Method::None],
            bands: BandRanges::default(),
            hlsvd_rank: 32,
            water_band_ppm: (4.2, 5.2),
            fwhm_peak_ppm: 2.01,
            n_plot_voxels: 4,
            seed: 0,
        }
    }
}

/// One method's metrics on one voxel. `wall_ms` is the method's wall-clock
/// over the whole volume (repeated on each of its rows), not a per-voxel
/// time. Undefined metrics are NaN.
#[derive(Clone, Debug)]
pub struct VoxelRow {
    pub x: usize,
    pub y: usize,
    pub method: Method,
    pub nrmse_whole: f64,
    pub nrmse_metab: f64,
    pub nrmse_lipid: f64,
    pub snr: f64,
    pub fwhm_ppm: f64,
    pub residual_lipid: f64,
    pub residual_water: f64,
    pub wall_ms: f64,
}

/// Five-number summary of one metric for one method, NaN rows skipped.
#[derive(Clone, Debug)]
pub struct AggregateRow {
    pub method: Method,
    pub metric: &'static str,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Everything [`compare`] produced: the rows, the summaries, and where the
/// CSV/SVG files were written.
#[derive(Clone, Debug)]
pub struct CompareReport {
    pub rows: Vec<VoxelRow>,
    pub aggregates: Vec<AggregateRow>,
    pub voxel_csv: PathBuf,
    pub aggregate_csv: PathBuf,
    pub spectra_svg: PathBuf,
    pub nrmse_svg: PathBuf,
}

/// Run one method on one voxel's FID and return the cleaned frequency-domain
/// spectrum. `cfg` supplies the water-removal rank and band; the operator and
/// weights come from `inputs` and are only touched by methods that need them.
pub fn clean_voxel(
    method: Method,
    fid: &Spectrum,
    inputs: &MethodInputs<'_>,
    cfg: &CompareConfig,
) -> Result<Spectrum> {
    let dewater = |f: &Spectrum| remove_water(f, cfg.hlsvd_rank, cfg.water_band_ppm);
    match method {
        Method::None => Ok(fid.to_frequency()),
        Method::L2 => inputs.op(method)?.apply(&fid.to_frequency()),
        Method::Hlsvd => Ok(dewater(fid)?.to_frequency()),
        Method::HlsvdL2 => inputs.op(method)?.apply(&dewater(fid)?.to_frequency()),
        Method::Lipnet | Method::Walinet => {
            Ok(infer(inputs.net(method)?, &fid.to_frequency(), inputs.op(method)?)?.0)
        }
        Method::HlsvdLipnet => {
            let dry = dewater(fid)?.to_frequency();
            Ok(infer(inputs.net(method)?, &dry, inputs.op(method)?)?.0)
        }
    }
}

const METRIC_NAMES: [&str; 8] = [
    "nrmse_whole",
    "nrmse_metab",
    "nrmse_lipid",
    "snr",
    "fwhm_ppm",
    "residual_lipid",
    "residual_water",
    "wall_ms",
];

fn metric_value(row: &VoxelRow, name: &str) -> f64 {
    match name {
        "nrmse_whole" => row.nrmse_whole,
        "nrmse_metab" => row.nrmse_metab,
        "nrmse_lipid" => row.nrmse_lipid,
        "snr" => row.snr,
        "fwhm_ppm" => row.fwhm_ppm,
        "residual_lipid" => row.residual_lipid,
        "residual_water" => row.residual_water,
        "wall_ms" => row.wall_ms,
        _ => unreachable!("unknown metric column"),
    }
}

/// Linear-interpolation quantile of a sorted slice (the common "type 7"
/// definition). Empty input → NaN.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Run every requested method over the brain voxels of `v`, score each
/// cleaned spectrum against the matching voxel of `truth`, and write the
/// per-voxel table, aggregate quartiles, and SVG plots into `out_dir`.
///
/// Outputs: `voxels.csv` (one row per voxel per method), `aggregate.csv`
/// (five-number summaries per method per metric), `spectra.svg`
/// (truth/prediction overlays for a few sampled voxels), `nrmse.svg`
/// (metabolite-band NRMSE box summary per method). Neither input volume is
/// modified. Apart from the wall-clock column, the outputs are a pure
/// function of the inputs and `cfg.seed`.
pub fn compare(
    v: &MrsiVolume,
    truth: &MrsiVolume,
    inputs: &MethodInputs<'_>,
    cfg: &CompareConfig,
    out_dir: impl AsRef<Path>,
) -> Result<CompareReport> {
    if cfg.methods.is_empty() {
        return Err(Error::Config("no methods requested".into()));
    }
    if v.nx != truth.nx || v.ny != truth.ny {
        return Err(Error::Config(format!(
            "volume is {}x{} but truth is {}x{}",
            v.nx, v.ny, truth.nx, truth.ny
        )));
    }
    if v.axis != truth.axis {
        return Err(Error::AxisMismatch("volume and truth axes differ".into()));
    }
    v.validate()?;
    truth.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;

    // voxels under test: the brain when masks exist, everything otherwise
    let voxels: Vec<(usize, usize)> = (0..v.nx)
        .flat_map(|x| (0..v.ny).map(move |y| (x, y)))
        .filter(|&(x, y)| !v.has_masks || v.brain_mask[x * v.ny + y])
        .collect();
    if voxels.is_empty() {
        return Err(Error::Config("no voxels to evaluate (empty brain mask)".into()));
    }

    let truths: Vec<Spectrum> =
        voxels.iter().map(|&(x, y)| truth.spectrum_at(x, y).to_frequency()).collect();

    let mut rows = Vec::with_capacity(voxels.len() * cfg.methods.len());
    let mut preds_by_method: Vec<Vec<Spectrum>> = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let t0 = Instant::now();
        let preds: Vec<Spectrum> = voxels
            .iter()
            .map(|&(x, y)| clean_voxel(method, &v.spectrum_at(x, y), inputs, cfg))
            .collect::<Result<_>>()?;
        let wall_ms = (t0.elapsed().as_secs_f64() * 1e3).max(1e-6);
        for ((&(x, y), pred), t) in voxels.iter().zip(&preds).zip(&truths) {
            let b = &cfg.bands;
            let nan = |r: Result<f64>| r.unwrap_or(f64::NAN);
            rows.push(VoxelRow {
                x,
                y,
                method,
                nrmse_whole: nan(nrmse(pred, t, b.whole)),
                nrmse_metab: nan(nrmse(pred, t, b.metabolite)),
                nrmse_lipid: nan(nrmse(pred, t, b.lipid)),
                snr: nan(snr(pred, SNR_PEAK_BAND_PPM, SNR_NOISE_BAND_PPM)),
                fwhm_ppm: nan(fwhm(pred, cfg.fwhm_peak_ppm)),
                residual_lipid: band_abs_integral(pred, b.lipid),
                residual_water: band_abs_integral(pred, b.water),
                wall_ms,
            });
        }
        preds_by_method.push(preds);
    }

    let mut aggregates = Vec::new();
    for &method in &cfg.methods {
        for name in METRIC_NAMES {
            let mut vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method)
                .map(|r| metric_value(r, name))
                .filter(|x| x.is_finite())
                .collect();
            vals.sort_by(f64::total_cmp);
            aggregates.push(AggregateRow {
                method,
                metric: name,
                min: quantile(&vals, 0.0),
                q1: quantile(&vals, 0.25),
                median: quantile(&vals, 0.5),
                q3: quantile(&vals, 0.75),
                max: quantile(&vals, 1.0),
            });
        }
    }

    let voxel_csv = out_dir.join("voxels.csv");
    let mut text = String::from(
        "voxel_x,voxel_y,method,nrmse_whole,nrmse_metab,nrmse_lipid,snr,fwhm_ppm,\
         residual_lipid,residual_water,wall_ms\n",
    );
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.x,
            r.y,
            r.method,
            r.nrmse_whole,
            r.nrmse_metab,
            r.nrmse_lipid,
            r.snr,
            r.fwhm_ppm,
            r.residual_lipid,
            r.residual_water,
            r.wall_ms
        ));
    }
    fs::write(&voxel_csv, text)?;

    let aggregate_csv = out_dir.join("aggregate.csv");
    let mut text = String::from("method,metric,min,q1,median,q3,max\n");
    for a in &aggregates {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            a.method, a.metric, a.min, a.q1, a.median, a.q3, a.max
        ));
    }
    fs::write(&aggregate_csv, text)?;

    // overlay plots for a deterministic sample of voxels
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_plot = cfg.n_plot_voxels.min(voxels.len());
    let mut picks: Vec<usize> = sample_indices(&mut rng, voxels.len(), n_plot).into_vec();
    picks.sort_unstable();
    let spectra_svg = out_dir.join("spectra.svg");
    fs::write(
        &spectra_svg,
        spectra_overlay_svg(&voxels, &truths, &cfg.methods, &preds_by_method, &picks, cfg),
    )?;
    let nrmse_svg = out_dir.join("nrmse.svg");
    fs::write(&nrmse_svg, nrmse_box_svg(&cfg.methods, &aggregates))?;

    Ok(CompareReport { rows, aggregates, voxel_csv, aggregate_csv, spectra_svg, nrmse_svg })
}

// ------------------------------------------------------------- svg plots ---

const PALETTE: [&str; 7] =
    ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d"];

fn polyline(points: &[(f64, f64)], color: &str, width: f64) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\" points=\"{}\"/>\n",
        pts.join(" ")
    )
}

/// Map a series into panel coordinates, x spread over the panel width and y
/// scaled into `[y0, y0+h]` by the shared `(lo, hi)` value range.
fn series_points(vals: &[f64], x0: f64, y0: f64, w: f64, h: f64, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let span = (hi - lo).max(1e-300);
    vals.iter()
        .enumerate()
        .map(|(i, &v)| {
            let x = x0 + w * i as f64 / (vals.len().max(2) - 1) as f64;
            let y = y0 + h * (1.0 - (v - lo) / span);
            (x, y)
        })
        .collect()
}

/// One panel per sampled voxel: the truth's real part in black, each
/// method's prediction in a palette color. Chemical shift runs high→low
/// left→right, which is bin order, so series plot directly.
fn spectra_overlay_svg(
    voxels: &[(usize, usize)],
    truths: &[Spectrum],
    methods: &[Method],
    preds: &[Vec<Spectrum>],
    picks: &[usize],
    cfg: &CompareConfig,
) -> String {
    let (pw, ph, margin) = (640.0, 150.0, 40.0);
    let height = margin + picks.len() as f64 * (ph + margin);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{height}\" \
         viewBox=\"0 0 {w} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
        w = pw + 2.0 * margin
    );
    svg.push_str(&format!(
        "<text x=\"{margin}\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">\
         real part, {:.1}..{:.1} ppm; truth in black</text>\n",
        cfg.bands.whole.1, cfg.bands.whole.0
    ));
    for (panel, &pick) in picks.iter().enumerate() {
        let y0 = margin + panel as f64 * (ph + margin);
        let r = truths[pick].axis.band_range(cfg.bands.whole.0, cfg.bands.whole.1);
        let series: Vec<(String, Vec<f64>)> = std::iter::once((
            "truth".to_string(),
            truths[pick].samples[r.clone()].iter().map(|z| z.re).collect(),
        ))
        .chain(methods.iter().enumerate().map(|(mi, m)| {
            (m.to_string(), preds[mi][pick].samples[r.clone()].iter().map(|z| z.re).collect())
        }))
        .collect();
        let lo = series.iter().flat_map(|(_, v)| v).copied().fold(f64::INFINITY, f64::min);
        let hi = series.iter().flat_map(|(_, v)| v).copied().fold(f64::NEG_INFINITY, f64::max);
        let (x, y) = voxels[pick];
        svg.push_str(&format!(
            "<text x=\"{margin}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\">\
             voxel ({x}, {y})</text>\n",
            y0 - 6.0
        ));
        svg.push_str(&format!(
            "<rect x=\"{margin}\" y=\"{y0:.2}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" \
             stroke=\"#999\"/>\n"
        ));
        for (si, (label, vals)) in series.iter().enumerate() {
            let color = if si == 0 { "black" } else { PALETTE[(si - 1) % PALETTE.len()] };
            svg.push_str(&polyline(&series_points(vals, margin, y0, pw, ph, lo, hi), color, 1.0));
            svg.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" \
                 fill=\"{color}\">{label}</text>\n",
                margin + pw + 4.0,
                y0 + 14.0 * (si + 1) as f64
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// One box per method for the metabolite-band NRMSE: min/max whiskers, a
/// q1..q3 box, and a median tick.
fn nrmse_box_svg(methods: &[Method], aggregates: &[AggregateRow]) -> String {
    let (w, h, margin) = (120.0 * methods.len() as f64 + 80.0, 320.0, 50.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    svg.push_str(
        "<text x=\"20\" y=\"24\" font-family=\"sans-serif\" font-size=\"13\">\
         metabolite-band NRMSE (%) per method</text>\n",
    );
    let boxes: Vec<&AggregateRow> = methods
        .iter()
        .filter_map(|m| aggregates.iter().find(|a| a.method == *m && a.metric == "nrmse_metab"))
        .collect();
    let top = boxes.iter().map(|a| a.max).filter(|x| x.is_finite()).fold(0.0f64, f64::max);
    let scale = (h - 2.0 * margin) / top.max(1e-300);
    let ypix = |v: f64| h - margin - v * scale;
    for (i, a) in boxes.iter().enumerate() {
        if !a.median.is_finite() {
            continue;
        }
        let cx = 80.0 + 120.0 * i as f64;
        let (bw, color) = (60.0, PALETTE[i % PALETTE.len()]);
        svg.push_str(&format!(
            "<line x1=\"{cx}\" y1=\"{:.2}\" x2=\"{cx}\" y2=\"{:.2}\" stroke=\"{color}\"/>\n",
            ypix(a.min),
            ypix(a.max)
        ));
        svg.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{bw}\" height=\"{:.2}\" fill=\"{color}\" \
             fill-opacity=\"0.3\" stroke=\"{color}\"/>\n",
            cx - bw / 2.0,
            ypix(a.q3),
            (ypix(a.q1) - ypix(a.q3)).max(0.5)
        ));
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n",
            cx - bw / 2.0,
            cx + bw / 2.0,
            y = ypix(a.median)
        ));
        svg.push_str(&format!(
            "<text x=\"{cx}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" \
             text-anchor=\"middle\">{}</text>\n",
            h - margin + 18.0,
            a.method
        ));
        svg.push_str(&format!(
            "<text x=\"{cx}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"middle\">med {:.1}</text>\n",
            ypix(a.median) - 6.0,
            a.median
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
