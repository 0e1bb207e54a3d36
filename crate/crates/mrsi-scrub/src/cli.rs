//! Command-line workflows tying the library together: phantom synthesis,
//! training-set generation, network training, volume cleanup, scoring, and
//! timing benchmarks.
//!
//! One binary, subcommand style. Every knob can come from a config file —
//! plain `key = value` lines with `#` comments, grouped by subcommand in
//! bracketed sections — and any command-line flag overrides the file:
//!
//! ```text
//! # one file can drive a whole workflow
//! seed = 7
//!
//! [phantom]
//! nx = 32
//! ny = 32
//!
//! [remove]
//! method = walinet
//! water_rank = 32
//! ```
//!
//! Unknown sections, unknown keys, and duplicate keys are rejected up front.
//! Every run prints its fully resolved configuration (`config: ...` lines on
//! stderr), and commands that fill a directory also drop the same resolution
//! as a reloadable `config.txt` inside it. Apart from wall-clock columns, a
//! command's outputs are a pure function of (config, seed).
//!
//! Exit codes: 0 success, 1 usage or configuration problems, 2 data and file
//! problems, 3 numeric failures. Voxel-parallel stages (`remove`, `bench`)
//! take `--threads`, falling back to the `MRSI_SCRUB_THREADS` environment
//! variable and then to all cores; per-voxel work is independent and output
//! order is fixed, so the thread count never changes the result.

use crate::lipid::{build_basis, build_operator, calibrate_beta, read_operator, LipidOperator};
use crate::lowrank;
use crate::metrics::{
    band_abs_integral, clean_voxel, compare, BandRanges, CompareConfig, CompareReport, Method,
    MethodInputs,
};
use crate::simgen::{
    build_phantom, build_phantom_pair, make_training_set, LipidConfig, MetabConfig,
    MetaboliteBasis, NuisanceMode, PhantomConfig, SpectrumSource, TrainingSample, WaterConfig,
};
use crate::spectrum::SpectralAxis;
use crate::volume::{read_volume, write_volume, MrsiVolume};
use crate::ynet::{
    load_weights, save_weights, train_epochs, TrainConfig, TrainState, YNetConfig, YNetWeights,
};
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Environment fallback for `--threads`.
pub const THREADS_ENV: &str = "MRSI_SCRUB_THREADS";

/// Calibration target for operators built on the fly from a scalp mask.
const DEFAULT_TARGET_DIAG: f64 = 0.938;

/// ChaCha stream of the pocket phantom that donates scalp spectra when
/// `simulate` has to build its own operator; kept apart from the sample
/// stream so the two draws never interleave.
const OPERATOR_STREAM: u64 = 101;

/// Keys accepted outside any section.
const GLOBAL_KEYS: &[&str] = &["seed", "threads"];

/// Every section (= subcommand) and the keys it accepts.
const SECTIONS: &[(&str, &[&str])] = &[
    (
        "phantom",
        &[
            "nx",
            "ny",
            "n_points",
            "bandwidth_hz",
            "transmitter_mhz",
            "ref_ppm",
            "basis",
            "lipid_bleed",
            "lipid_scale_log10_lo",
            "lipid_scale_log10_hi",
            "b0_brain_hz",
            "b0_scalp_hz",
            "gray_white_ratio",
            "out",
            "truth_out",
        ],
    ),
    (
        "simulate",
        &[
            "n",
            "mode",
            "n_points",
            "bandwidth_hz",
            "transmitter_mhz",
            "ref_ppm",
            "basis",
            "operator",
            "out",
        ],
    ),
    (
        "train",
        &[
            "data",
            "out",
            "history",
            "resume",
            "epochs",
            "lr",
            "lr_decay",
            "lr_decay_every",
            "batch_size",
            "val_fraction",
            "energy_floor",
            "depth",
            "base_channels",
            "kernel",
            "dropout_rate",
            "pool_factor",
            "padded_length",
        ],
    ),
    (
        "remove",
        &[
            "input",
            "out",
            "method",
            "weights",
            "operator",
            "rank",
            "water_rank",
            "band_ppm",
            "beta",
            "target_diag",
        ],
    ),
    ("evaluate", &["input", "truth", "out"]),
    (
        "compare",
        &[
            "input",
            "truth",
            "out",
            "methods",
            "weights",
            "lipnet_weights",
            "operator",
            "water_rank",
            "band_ppm",
            "fwhm_peak_ppm",
            "plot_voxels",
        ],
    ),
    (
        "bench",
        &[
            "out",
            "sizes",
            "n_points",
            "bandwidth_hz",
            "transmitter_mhz",
            "ref_ppm",
            "methods",
            "water_rank",
            "weights",
        ],
    ),
];

/// Parsed key-value config file: `(section, key) -> value`, with `""` as the
/// section of keys before any header. Validated against the key registry at
/// parse time, so a loaded config never holds a key no command would read.
#[derive(Debug, Default)]
pub struct FileConfig {
    entries: BTreeMap<(String, String), String>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<FileConfig> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = idx + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let Some(name) = rest.strip_suffix(']') else {
                    return Err(Error::Config(format!(
                        "config line {lineno}: unterminated section header `{line}`"
                    )));
                };
                let name = name.trim();
                if !SECTIONS.iter().any(|(s, _)| *s == name) {
                    return Err(Error::Config(format!(
                        "config line {lineno}: unknown section [{name}]; sections are named \
                         after the subcommands"
                    )));
                }
                section = name.to_string();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "config line {lineno}: expected `key = value`, got `{line}`"
                )));
            };
            let key = k.trim().to_string();
            let value = v.trim().to_string();
            let known = if section.is_empty() {
                GLOBAL_KEYS.contains(&key.as_str())
            } else {
                SECTIONS
                    .iter()
                    .find(|(s, _)| *s == section)
                    .is_some_and(|(_, keys)| keys.contains(&key.as_str()))
            };
            if !known {
                let place = if section.is_empty() {
                    "outside any section (global keys: seed, threads)".to_string()
                } else {
                    format!("in section [{section}]")
                };
                return Err(Error::Config(format!(
                    "config line {lineno}: unknown key `{key}` {place}"
                )));
            }
            if entries.insert((section.clone(), key), value).is_some() {
                return Err(Error::Config(format!("config line {lineno}: duplicate key")));
            }
        }
        Ok(FileConfig { entries })
    }

    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => FileConfig::parse(&std::fs::read_to_string(p)?),
        }
    }

    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries.get(&(section.to_string(), key.to_string())).map(String::as_str)
    }
}

/// One command's view of the merged configuration: flag beats file beats
/// default, and everything resolved is recorded so the run can log it and
/// reproduce itself from the recorded text.
struct Scope<'a> {
    file: &'a FileConfig,
    section: &'static str,
    globals: Vec<(String, String)>,
    entries: Vec<(String, String)>,
}

impl<'a> Scope<'a> {
    fn new(file: &'a FileConfig, section: &'static str) -> Scope<'a> {
        Scope { file, section, globals: Vec::new(), entries: Vec::new() }
    }

    fn raw(&self, key: &str) -> Option<&'a str> {
        self.file.get(self.section, key)
    }

    fn record(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    fn note_global(&mut self, key: &str, value: impl fmt::Display) {
        self.globals.push((key.to_string(), value.to_string()));
    }

    fn bad(&self, key: &str, raw: &str) -> Error {
        Error::Config(format!("key `{key}` in [{}]: cannot parse `{raw}`", self.section))
    }

    fn num<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: std::str::FromStr + fmt::Display + Copy,
    {
        let v = match flag {
            Some(v) => v,
            None => match self.raw(key) {
                Some(raw) => raw.parse().map_err(|_| self.bad(key, raw))?,
                None => default,
            },
        };
        self.record(key, v);
        Ok(v)
    }

    fn opt_num<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: std::str::FromStr + fmt::Display + Copy,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.raw(key) {
                Some(raw) => Some(raw.parse().map_err(|_| self.bad(key, raw))?),
                None => None,
            },
        };
        if let Some(v) = v {
            self.record(key, v);
        }
        Ok(v)
    }

    fn boolean(&mut self, key: &str, flag: Option<bool>, default: bool) -> Result<bool> {
        let v = match flag {
            Some(v) => v,
            None => match self.raw(key) {
                Some(raw) => match raw {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(self.bad(key, raw)),
                },
                None => default,
            },
        };
        self.record(key, v);
        Ok(v)
    }

    fn text(&mut self, key: &str, flag: Option<String>, default: &str) -> Result<String> {
        let v = flag
            .or_else(|| self.raw(key).map(str::to_string))
            .unwrap_or_else(|| default.to_string());
        self.record(key, &v);
        Ok(v)
    }

    fn pair(&mut self, key: &str, flag: Option<String>, default: (f64, f64)) -> Result<(f64, f64)> {
        let v = match flag.as_deref().or_else(|| self.raw(key)) {
            Some(raw) => parse_pair(raw).ok_or_else(|| self.bad(key, raw))?,
            None => default,
        };
        self.record(key, format_args!("{}:{}", v.0, v.1));
        Ok(v)
    }

    fn path_opt(&mut self, key: &str, flag: Option<PathBuf>) -> Option<PathBuf> {
        let v = flag.or_else(|| self.raw(key).map(PathBuf::from));
        if let Some(p) = &v {
            self.record(key, p.display());
        }
        v
    }

    fn path_req(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        self.path_opt(key, flag).ok_or_else(|| {
            Error::Config(format!(
                "`{key}` is required: pass --{} or set `{key}` in the [{}] config section",
                key.replace('_', "-"),
                self.section
            ))
        })
    }

    fn path_or(&mut self, key: &str, flag: Option<PathBuf>, default: &str) -> PathBuf {
        let v = flag
            .or_else(|| self.raw(key).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(default));
        self.record(key, v.display());
        v
    }

    fn log(&self) {
        for (k, v) in &self.globals {
            eprintln!("config: {k} = {v}");
        }
        for (k, v) in &self.entries {
            eprintln!("config: {}.{k} = {v}", self.section);
        }
    }

    /// The resolved run as reloadable config-file text.
    fn config_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.globals {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push_str(&format!("\n[{}]\n", self.section));
        for (k, v) in &self.entries {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

fn parse_pair(raw: &str) -> Option<(f64, f64)> {
    let (a, b) = raw.split_once(':')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

fn parse_usize_list(raw: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for tok in raw.split(',') {
        let tok = tok.trim();
        out.push(
            tok.parse()
                .map_err(|_| Error::Config(format!("cannot parse `{tok}` in the size list")))?,
        );
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err(Error::Config("the size list is empty".into()));
    }
    Ok(out)
}

fn parse_methods(raw: &str) -> Result<Vec<Method>> {
    let methods: Vec<Method> =
        raw.split(',').map(|m| m.trim().parse()).collect::<Result<_>>()?;
    if methods.is_empty() {
        return Err(Error::Config("the method list is empty".into()));
    }
    Ok(methods)
}

fn needs_operator(m: Method) -> bool {
    !matches!(m, Method::None | Method::Hlsvd)
}

fn needs_network(m: Method) -> bool {
    matches!(m, Method::Lipnet | Method::Walinet | Method::HlsvdLipnet)
}

fn resolve_seed(file: &FileConfig, flag: Option<u64>) -> Result<Option<u64>> {
    match flag {
        Some(s) => Ok(Some(s)),
        None => match file.get("", "seed") {
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                Error::Config(format!("global key `seed`: cannot parse `{raw}`"))
            }),
            None => Ok(None),
        },
    }
}

fn resolve_threads(file: &FileConfig, flag: Option<usize>) -> Result<usize> {
    let t = if let Some(t) = flag {
        t
    } else if let Some(raw) = file.get("", "threads") {
        raw.parse()
            .map_err(|_| Error::Config(format!("global key `threads`: cannot parse `{raw}`")))?
    } else if let Ok(raw) = std::env::var(THREADS_ENV) {
        raw.parse().map_err(|_| {
            Error::Config(format!("{THREADS_ENV}: cannot parse `{raw}` as a thread count"))
        })?
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    };
    if t == 0 {
        return Err(Error::Config("the thread count must be at least 1".into()));
    }
    Ok(t)
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a {threads}-thread pool: {e}")))
}

#[derive(Parser)]
#[command(
    name = "mrsi-scrub",
    version,
    about = "Removes water and lipid nuisance signal from MRSI volumes and benchmarks the \
             cleanup methods against known ground truth."
)]
pub struct Cli {
    /// Key-value config file; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random draw the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for voxel-parallel stages (fallback: MRSI_SCRUB_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Synthesize a ground-truth phantom volume plus its clean metabolite twin.
    Phantom(PhantomArgs),
    /// Generate a directory of training samples with a manifest.
    Simulate(SimulateArgs),
    /// Train network weights on a simulated sample directory.
    Train(TrainArgs),
    /// Clean one volume with one method and write the result.
    Remove(RemoveArgs),
    /// Score a volume against its ground truth, as is.
    Evaluate(EvaluateArgs),
    /// Run several cleanup methods on one volume and tabulate the metrics.
    Compare(CompareArgs),
    /// Time the methods and check how water removal scales with voxel count.
    Bench(BenchArgs),
}

#[derive(Args)]
pub struct PhantomArgs {
    /// Output volume [default: phantom.mrsx].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Clean twin output [default: <out> with a -truth suffix].
    #[arg(long, value_name = "FILE")]
    pub truth_out: Option<PathBuf>,
    /// Grid width in voxels.
    #[arg(long)]
    pub nx: Option<usize>,
    /// Grid height in voxels.
    #[arg(long)]
    pub ny: Option<usize>,
    /// Spectral points per voxel.
    #[arg(long)]
    pub n_points: Option<usize>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Output directory (required).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Nuisance mode: walinet (lipid + water) or lipnet (lipid only).
    #[arg(long)]
    pub mode: Option<String>,
    /// Lipid operator file; omitted, one is built from a seeded pocket phantom.
    #[arg(long, value_name = "FILE")]
    pub operator: Option<PathBuf>,
    /// Spectral points per sample.
    #[arg(long)]
    pub n_points: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Sample directory written by `simulate` (required).
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Weights output [default: weights.ynw].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Per-epoch history CSV [default: <out>.history.csv].
    #[arg(long, value_name = "FILE")]
    pub history: Option<PathBuf>,
    /// Continue a run: weights file whose .opt sidecar holds the optimizer state.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
    /// Total epoch target (a resumed run trains up to this).
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args)]
pub struct RemoveArgs {
    /// Input volume (required).
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Output volume (required).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Cleanup method: none|l2|hlsvd|hlsvd+l2|lipnet|walinet|hlsvd+lipnet.
    #[arg(long)]
    pub method: Option<String>,
    /// Network weights (required by the network methods).
    #[arg(long, value_name = "FILE")]
    pub weights: Option<PathBuf>,
    /// Lipid operator file; omitted, one is built from the input's scalp mask.
    #[arg(long, value_name = "FILE")]
    pub operator: Option<PathBuf>,
    /// Rank-K spatiotemporal denoise after cleanup; bare --rank means 40, 0 disables.
    #[arg(long, num_args = 0..=1, default_missing_value = "40", value_name = "K")]
    pub rank: Option<usize>,
    /// Model order of the water removal.
    #[arg(long)]
    pub water_rank: Option<usize>,
    /// Water band as lo:hi in ppm.
    #[arg(long, value_name = "LO:HI")]
    pub band_ppm: Option<String>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Volume to score (required).
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Ground-truth volume (required).
    #[arg(long, value_name = "FILE")]
    pub truth: Option<PathBuf>,
    /// Report directory (required).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CompareArgs {
    /// Input volume (required).
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Ground-truth volume (required).
    #[arg(long, value_name = "FILE")]
    pub truth: Option<PathBuf>,
    /// Report directory (required).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Comma-separated method list.
    #[arg(long)]
    pub methods: Option<String>,
    /// Weights for the walinet method.
    #[arg(long, value_name = "FILE")]
    pub weights: Option<PathBuf>,
    /// Weights for the lipnet-based methods.
    #[arg(long, value_name = "FILE")]
    pub lipnet_weights: Option<PathBuf>,
    /// Lipid operator file; omitted, one is built from the input's scalp mask.
    #[arg(long, value_name = "FILE")]
    pub operator: Option<PathBuf>,
    /// Model order of the water removal.
    #[arg(long)]
    pub water_rank: Option<usize>,
    /// Water band as lo:hi in ppm.
    #[arg(long, value_name = "LO:HI")]
    pub band_ppm: Option<String>,
    /// How many voxels get an overlay plot.
    #[arg(long)]
    pub plot_voxels: Option<usize>,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Report directory (required).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Comma-separated square grid sizes; the largest is the thread-sweep size.
    #[arg(long)]
    pub sizes: Option<String>,
    /// Spectral points per voxel.
    #[arg(long)]
    pub n_points: Option<usize>,
    /// Comma-separated methods to time.
    #[arg(long)]
    pub methods: Option<String>,
    /// Network weights; omitted, fresh random weights are timed (inference
    /// cost does not depend on the parameter values).
    #[arg(long, value_name = "FILE")]
    pub weights: Option<PathBuf>,
    /// Model order of the water removal.
    #[arg(long)]
    pub water_rank: Option<usize>,
}

/// Parse `args` (first element = program name) and run the chosen command.
/// Returns the process exit code; errors are printed to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // --help and --version render on stdout and are not failures
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let seed = resolve_seed(&file, cli.seed)?;
    match cli.cmd {
        Cmd::Phantom(a) => cmd_phantom(&file, seed, a),
        Cmd::Simulate(a) => cmd_simulate(&file, seed, a),
        Cmd::Train(a) => cmd_train(&file, seed, a),
        Cmd::Remove(a) => cmd_remove(&file, cli.threads, a),
        Cmd::Evaluate(a) => cmd_evaluate(&file, a),
        Cmd::Compare(a) => cmd_compare(&file, seed, a),
        Cmd::Bench(a) => cmd_bench(&file, seed, cli.threads, a),
    }
}

fn resolve_axis(
    sc: &mut Scope<'_>,
    n_points_flag: Option<usize>,
    default_n: usize,
) -> Result<SpectralAxis> {
    let n = sc.num("n_points", n_points_flag, default_n)?;
    let bw = sc.num("bandwidth_hz", None, 2500.0)?;
    let tx = sc.num("transmitter_mhz", None, 297.22)?;
    let rp = sc.num("ref_ppm", None, 4.7)?;
    SpectralAxis::new(n, bw, tx, rp)
}

fn resolve_basis(sc: &mut Scope<'_>) -> Result<MetaboliteBasis> {
    match sc.path_opt("basis", None) {
        Some(p) => MetaboliteBasis::parse(&std::fs::read_to_string(p)?),
        None => Ok(MetaboliteBasis::default_brain()),
    }
}

fn truth_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("phantom");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("mrsx");
    out.with_file_name(format!("{stem}-truth.{ext}"))
}

fn cmd_phantom(file: &FileConfig, seed: Option<u64>, a: PhantomArgs) -> Result<()> {
    let mut sc = Scope::new(file, "phantom");
    let seed = seed.unwrap_or(0);
    sc.note_global("seed", seed);
    let nx = sc.num("nx", a.nx, 32)?;
    let ny = sc.num("ny", a.ny, 32)?;
    let axis = resolve_axis(&mut sc, a.n_points, 512)?;
    let basis = resolve_basis(&mut sc)?;
    let mut cfg = PhantomConfig::new(nx, ny, axis);
    cfg.lipid_bleed = sc.boolean("lipid_bleed", None, cfg.lipid_bleed)?;
    cfg.lipid_scale_log10 = (
        sc.num("lipid_scale_log10_lo", None, cfg.lipid_scale_log10.0)?,
        sc.num("lipid_scale_log10_hi", None, cfg.lipid_scale_log10.1)?,
    );
    cfg.b0_brain_hz = sc.num("b0_brain_hz", None, cfg.b0_brain_hz)?;
    cfg.b0_scalp_hz = sc.num("b0_scalp_hz", None, cfg.b0_scalp_hz)?;
    cfg.gray_white_ratio = sc.num("gray_white_ratio", None, cfg.gray_white_ratio)?;
    let out = sc.path_or("out", a.out, "phantom.mrsx");
    let truth_out = match sc.path_opt("truth_out", a.truth_out) {
        Some(p) => p,
        None => {
            let d = truth_path(&out);
            sc.record("truth_out", d.display());
            d
        }
    };
    sc.log();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (vol, truth) = build_phantom_pair(&cfg, &basis, &mut rng)?;
    write_volume(&vol, &out)?;
    write_volume(&truth, &truth_out)?;
    println!(
        "wrote {} and {} ({nx}x{ny} voxels, {} points)",
        out.display(),
        truth_out.display(),
        axis.n_points
    );
    Ok(())
}

fn cmd_simulate(file: &FileConfig, seed: Option<u64>, a: SimulateArgs) -> Result<()> {
    let mut sc = Scope::new(file, "simulate");
    let seed = seed.unwrap_or(0);
    sc.note_global("seed", seed);
    let n = sc.num("n", a.n, 10_000)?;
    let mode_name = sc.text("mode", a.mode, "walinet")?;
    let mode = match mode_name.as_str() {
        "walinet" => NuisanceMode::LipidAndWater,
        "lipnet" => NuisanceMode::LipidOnly,
        other => {
            return Err(Error::Config(format!("mode must be walinet or lipnet, got `{other}`")))
        }
    };
    let axis = resolve_axis(&mut sc, a.n_points, 512)?;
    let basis = resolve_basis(&mut sc)?;
    let op_path = sc.path_opt("operator", a.operator);
    let out = sc.path_req("out", a.out)?;
    sc.log();

    let op = match op_path {
        Some(p) => read_operator(&p, axis)?,
        None => {
            // a pocket phantom donates scalp spectra for the projection basis
            let mut oprng = ChaCha8Rng::seed_from_u64(seed);
            oprng.set_stream(OPERATOR_STREAM);
            let ph = build_phantom(&PhantomConfig::new(16, 16, axis), &basis, &mut oprng)?;
            let lb = build_basis(&ph)?;
            let beta = calibrate_beta(&lb, DEFAULT_TARGET_DIAG, 1e-3)?;
            build_operator(&lb, beta)?
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = make_training_set(
        n,
        &basis,
        &MetabConfig::default(),
        &SpectrumSource::LipidGen(LipidConfig::default()),
        &SpectrumSource::WaterGen(WaterConfig::default()),
        &op,
        mode,
        axis,
        &mut rng,
    )?;

    std::fs::create_dir_all(&out)?;
    let bands = BandRanges::default();
    let mut manifest = String::from(
        "# one line per sample: file seed mode lipid_scale water_scale\n\
         # scales are band-amplitude ratios measured on the stored spectra:\n\
         # |nuisance target| over the lipid and water bands, each against\n\
         # |clean metabolite| over the metabolite band\n",
    );
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:05}.mrsx");
        let mut v = MrsiVolume::zeros(4, 1, axis);
        v.set_fid(0, 0, &s.x1.to_time().samples);
        v.set_fid(1, 0, &s.x2.to_time().samples);
        v.set_fid(2, 0, &s.target_y.to_time().samples);
        v.set_fid(3, 0, &s.clean_m.to_time().samples);
        write_volume(&v, out.join(&name))?;
        let m_ref = band_abs_integral(&s.clean_m, bands.metabolite);
        let l_ratio = band_abs_integral(&s.target_y, bands.lipid) / m_ref;
        let w_ratio = band_abs_integral(&s.target_y, bands.water) / m_ref;
        manifest.push_str(&format!(
            "{name} {} {mode_name} {l_ratio:.6e} {w_ratio:.6e}\n",
            s.seed
        ));
    }
    std::fs::write(out.join("manifest.txt"), manifest)?;
    std::fs::write(out.join("config.txt"), sc.config_text())?;
    println!("wrote {n} samples into {}", out.display());
    Ok(())
}

/// Read a sample directory back: each file is a 4x1 volume holding the FIDs
/// of (x1, x2, target, clean) as written by `simulate`.
fn load_sample_dir(dir: &Path) -> Result<Vec<TrainingSample>> {
    let mpath = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&mpath).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Config(format!(
                "{} not found: point --data at a directory written by `simulate`",
                mpath.display()
            ))
        } else {
            Error::Io(e)
        }
    })?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(fname), Some(seed_tok)) = (it.next(), it.next()) else {
            return Err(Error::Format(format!(
                "{}:{}: a manifest line starts with `file seed`",
                mpath.display(),
                idx + 1
            )));
        };
        let seed = seed_tok.parse().map_err(|_| {
            Error::Format(format!("{}:{}: bad seed `{seed_tok}`", mpath.display(), idx + 1))
        })?;
        let v = read_volume(dir.join(fname))?;
        if v.nx != 4 || v.ny != 1 {
            return Err(Error::Format(format!(
                "{fname}: a sample file is a 4x1 grid (x1, x2, target, clean), got {}x{}",
                v.nx, v.ny
            )));
        }
        let row = |x: usize| v.spectrum_at(x, 0).to_frequency();
        out.push(TrainingSample {
            x1: row(0),
            x2: row(1),
            target_y: row(2),
            clean_m: row(3),
            seed,
        });
    }
    Ok(out)
}

const OPT_MAGIC: &[u8; 4] = b"YNO1";
const OPT_VERSION: u32 = 1;

/// Optimizer sidecar contents: what [`TrainState`] needs beyond the weights.
struct OptState {
    seed: u64,
    step: u64,
    epochs_done: usize,
    rng_word_pos: [u128; 3],
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
}

/// The optimizer sidecar sits next to the weights as `<weights>.opt`.
fn sidecar_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".opt");
    PathBuf::from(s)
}

fn write_opt_state(path: &Path, seed: u64, st: &TrainState) -> Result<()> {
    let mut b = Vec::with_capacity(96 + 16 * st.adam_m.len());
    b.extend_from_slice(OPT_MAGIC);
    b.extend_from_slice(&OPT_VERSION.to_le_bytes());
    b.extend_from_slice(&seed.to_le_bytes());
    b.extend_from_slice(&st.step.to_le_bytes());
    b.extend_from_slice(&(st.epochs_done as u64).to_le_bytes());
    for p in st.rng_word_pos {
        b.extend_from_slice(&p.to_le_bytes());
    }
    b.extend_from_slice(&(st.adam_m.len() as u64).to_le_bytes());
    for v in st.adam_m.iter().chain(&st.adam_v) {
        b.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, b)?;
    Ok(())
}

fn read_opt_state(path: &Path) -> Result<OptState> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Config(format!(
                "{}: optimizer sidecar not found; resuming needs the .opt file written next \
                 to the weights",
                path.display()
            ))
        } else {
            Error::Io(e)
        }
    })?;
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::Truncated(format!("optimizer sidecar ends inside {what}")));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4, "the magic")? != OPT_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u32::from_le_bytes(take(4, "the version")?.try_into().unwrap());
    if version != OPT_VERSION {
        return Err(Error::Version(version));
    }
    let seed = u64::from_le_bytes(take(8, "the seed")?.try_into().unwrap());
    let step = u64::from_le_bytes(take(8, "the step counter")?.try_into().unwrap());
    let epochs_done = u64::from_le_bytes(take(8, "the epoch counter")?.try_into().unwrap());
    let mut rng_word_pos = [0u128; 3];
    for p in &mut rng_word_pos {
        *p = u128::from_le_bytes(take(16, "a stream position")?.try_into().unwrap());
    }
    let n = u64::from_le_bytes(take(8, "the moment count")?.try_into().unwrap()) as usize;
    let mut read_vec = |what: &str| -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(f64::from_le_bytes(take(8, what)?.try_into().unwrap()));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::Format(format!("{what} contains non-finite values")));
        }
        Ok(v)
    };
    let adam_m = read_vec("the first-moment buffer")?;
    let adam_v = read_vec("the second-moment buffer")?;
    if pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the optimizer state",
            bytes.len() - pos
        )));
    }
    Ok(OptState {
        seed,
        step,
        epochs_done: epochs_done as usize,
        rng_word_pos,
        adam_m,
        adam_v,
    })
}

fn cmd_train(file: &FileConfig, explicit_seed: Option<u64>, a: TrainArgs) -> Result<()> {
    let mut sc = Scope::new(file, "train");
    let data = sc.path_req("data", a.data)?;
    let out = sc.path_or("out", a.out, "weights.ynw");
    let history_path = match sc.path_opt("history", a.history) {
        Some(p) => p,
        None => {
            let d = PathBuf::from(format!("{}.history.csv", out.display()));
            sc.record("history", d.display());
            d
        }
    };
    let resume = sc.path_opt("resume", a.resume);
    let defaults = TrainConfig::default();
    let epochs = sc.num("epochs", a.epochs, defaults.epochs)?;
    let lr = sc.num("lr", None, defaults.lr)?;
    let lr_decay = sc.num("lr_decay", None, defaults.lr_decay)?;
    let lr_decay_every = sc.num("lr_decay_every", None, defaults.lr_decay_every)?;
    let batch_size = sc.num("batch_size", None, defaults.batch_size)?;
    let energy_floor = sc.num("energy_floor", None, defaults.energy_floor)?;
    let val_fraction = sc.num("val_fraction", None, 0.1)?;
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "val_fraction must lie in [0, 1), got {val_fraction}"
        )));
    }

    let samples = load_sample_dir(&data)?;
    if samples.is_empty() {
        return Err(Error::Config(format!(
            "no samples listed in {}",
            data.join("manifest.txt").display()
        )));
    }
    let n_val = ((samples.len() as f64) * val_fraction).round() as usize;
    if n_val >= samples.len() {
        return Err(Error::Config("val_fraction leaves no training data".into()));
    }
    let (tr, va) = samples.split_at(samples.len() - n_val);

    let seed;
    let mut state = match &resume {
        None => {
            seed = explicit_seed.unwrap_or(0);
            let depth = sc.num("depth", None, 4usize)?;
            let base_channels = sc.num("base_channels", None, 16usize)?;
            let kernel = sc.num("kernel", None, 7usize)?;
            let dropout_rate = sc.num("dropout_rate", None, 0.01)?;
            let pool_factor = sc.num("pool_factor", None, 2usize)?;
            let block = pool_factor
                .checked_pow(depth.min(32) as u32)
                .filter(|&b| b > 0)
                .ok_or_else(|| Error::Config("pool_factor^depth overflows".into()))?;
            let n_pts = tr[0].x1.axis.n_points;
            let padded = sc.num("padded_length", None, n_pts.div_ceil(block) * block)?;
            let ycfg = YNetConfig {
                depth,
                base_channels,
                kernel,
                dropout_rate,
                pool_factor,
                padded_length: padded,
                ..YNetConfig::default()
            };
            let boot = TrainConfig { seed, ..TrainConfig::default() };
            TrainState::fresh(&boot, &ycfg)?
        }
        Some(p) => {
            let weights = load_weights(p)?;
            let side = read_opt_state(&sidecar_path(p))?;
            if side.adam_m.len() != weights.num_params() {
                return Err(Error::Format(format!(
                    "{}: optimizer state holds {} moments but the weights have {} parameters",
                    sidecar_path(p).display(),
                    side.adam_m.len(),
                    weights.num_params()
                )));
            }
            if let Some(s) = explicit_seed {
                if s != side.seed {
                    return Err(Error::Config(format!(
                        "a resumed run keeps its original seed ({}); drop the seed override \
                         or set it to match",
                        side.seed
                    )));
                }
            }
            seed = side.seed;
            eprintln!(
                "resume: architecture and optimizer state come from {} ({} epochs done)",
                p.display(),
                side.epochs_done
            );
            TrainState {
                weights,
                adam_m: side.adam_m,
                adam_v: side.adam_v,
                step: side.step,
                epochs_done: side.epochs_done,
                rng_word_pos: side.rng_word_pos,
            }
        }
    };
    sc.note_global("seed", seed);
    sc.log();
    let tcfg = TrainConfig {
        epochs,
        lr,
        lr_decay,
        lr_decay_every,
        batch_size,
        seed,
        energy_floor,
        ..TrainConfig::default()
    };
    let hist = train_epochs(&mut state, tr, va, &tcfg)?;
    save_weights(&state.weights, &out)?;
    write_opt_state(&sidecar_path(&out), seed, &state)?;
    let mut csv = String::from("epoch,lr,train_mse,val_mse\n");
    for r in &hist {
        csv.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e}\n",
            r.epoch, r.lr, r.train_mse, r.val_mse
        ));
    }
    std::fs::write(&history_path, csv)?;
    let last = hist.last().expect("train_epochs ran at least one epoch");
    println!("final validation mse = {:.6e}", last.val_mse);
    println!("wrote {} and {}", out.display(), history_path.display());
    Ok(())
}

/// Load the operator from `path`, or build and calibrate one from the
/// volume's scalp voxels.
fn obtain_operator(
    v: &MrsiVolume,
    path: Option<&Path>,
    beta_override: Option<f64>,
    target_diag: f64,
    method: Method,
) -> Result<LipidOperator> {
    if let Some(p) = path {
        return read_operator(p, v.axis);
    }
    if !v.has_masks || v.scalp_mask.iter().all(|&m| !m) {
        return Err(Error::Config(format!(
            "method '{method}' needs a lipid operator, and the input volume has no scalp \
             mask to build one from; pass --operator or use a volume with masks"
        )));
    }
    let basis = build_basis(v)?;
    let beta = match beta_override {
        Some(b) => b,
        None => calibrate_beta(&basis, target_diag, 1e-3)?,
    };
    build_operator(&basis, beta)
}

fn cmd_remove(file: &FileConfig, threads_flag: Option<usize>, a: RemoveArgs) -> Result<()> {
    let mut sc = Scope::new(file, "remove");
    let threads = resolve_threads(file, threads_flag)?;
    sc.note_global("threads", threads);
    let input = sc.path_req("input", a.input)?;
    let out = sc.path_req("out", a.out)?;
    let method: Method = sc.text("method", a.method, "walinet")?.parse()?;
    let weights_path = sc.path_opt("weights", a.weights);
    let op_path = sc.path_opt("operator", a.operator);
    let rank_merged = sc.num("rank", a.rank, 0usize)?;
    let rank = (rank_merged > 0).then_some(rank_merged);
    let water_rank = sc.num("water_rank", a.water_rank, 32)?;
    let band = sc.pair("band_ppm", a.band_ppm, (4.2, 5.2))?;
    let beta_override = sc.opt_num::<f64>("beta", None)?;
    let target_diag = sc.num("target_diag", None, DEFAULT_TARGET_DIAG)?;
    sc.log();

    let v = read_volume(&input)?;
    v.validate()?;
    let op = if needs_operator(method) {
        Some(obtain_operator(&v, op_path.as_deref(), beta_override, target_diag, method)?)
    } else {
        None
    };
    let w = match (needs_network(method), &weights_path) {
        (true, None) => {
            return Err(Error::Config(format!(
                "method '{method}' needs network weights: pass --weights"
            )))
        }
        (true, Some(p)) => Some(load_weights(p)?),
        (false, _) => None,
    };
    let inputs = MethodInputs {
        op: op.as_ref(),
        walinet: if matches!(method, Method::Walinet) { w.as_ref() } else { None },
        lipnet: if matches!(method, Method::Lipnet | Method::HlsvdLipnet) {
            w.as_ref()
        } else {
            None
        },
    };
    let mcfg =
        CompareConfig { hlsvd_rank: water_rank, water_band_ppm: band, ..CompareConfig::default() };

    let mut cleaned = v.clone();
    if method != Method::None {
        let pool = thread_pool(threads)?;
        let fids: Vec<Result<Vec<Complex64>>> = pool.install(|| {
            (0..v.n_voxels())
                .into_par_iter()
                .map(|idx| {
                    let (x, y) = (idx / v.ny, idx % v.ny);
                    let fid = v.spectrum_at(x, y);
                    // an all-zero FID is already clean; running a method on it
                    // would only spread numerical lint around
                    if fid.samples.iter().all(|z| z.re == 0.0 && z.im == 0.0) {
                        return Ok(fid.samples);
                    }
                    Ok(clean_voxel(method, &fid, &inputs, &mcfg)?.to_time().samples)
                })
                .collect()
        });
        for (idx, r) in fids.into_iter().enumerate() {
            for (t, z) in r?.into_iter().enumerate() {
                cleaned.data[[idx, t]] = z;
            }
        }
    }
    if let Some(k) = rank {
        // rank-K spatiotemporal denoise of the brain voxels; scalp and air
        // rows pass through untouched
        let model = lowrank::fit(&cleaned, k)?;
        let rows = model.u.dot(&model.v);
        for (row, &(x, y)) in model.voxel_index.iter().enumerate() {
            let idx = cleaned.voxel_index(x, y);
            for t in 0..cleaned.axis.n_points {
                cleaned.data[[idx, t]] = rows[[row, t]];
            }
        }
    }
    write_volume(&cleaned, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn print_aggregates(report: &CompareReport) {
    println!(
        "{:<14} {:<14} {:>11} {:>11} {:>11} {:>11} {:>11}",
        "method", "metric", "min", "q1", "median", "q3", "max"
    );
    for a in &report.aggregates {
        println!(
            "{:<14} {:<14} {:>11.4} {:>11.4} {:>11.4} {:>11.4} {:>11.4}",
            a.method.name(),
            a.metric,
            a.min,
            a.q1,
            a.median,
            a.q3,
            a.max
        );
    }
}

fn cmd_evaluate(file: &FileConfig, a: EvaluateArgs) -> Result<()> {
    let mut sc = Scope::new(file, "evaluate");
    let input = sc.path_req("input", a.input)?;
    let truth = sc.path_req("truth", a.truth)?;
    let out = sc.path_req("out", a.out)?;
    sc.log();
    let v = read_volume(&input)?;
    let t = read_volume(&truth)?;
    std::fs::create_dir_all(&out)?;
    // method "none" scores the volume exactly as it is
    let cfg = CompareConfig::default();
    let report = compare(&v, &t, &MethodInputs::default(), &cfg, &out)?;
    std::fs::write(out.join("config.txt"), sc.config_text())?;
    print_aggregates(&report);
    println!("wrote {} and {}", report.voxel_csv.display(), report.aggregate_csv.display());
    Ok(())
}

fn cmd_compare(file: &FileConfig, seed: Option<u64>, a: CompareArgs) -> Result<()> {
    let mut sc = Scope::new(file, "compare");
    let seed = seed.unwrap_or(0);
    sc.note_global("seed", seed);
    let input = sc.path_req("input", a.input)?;
    let truth = sc.path_req("truth", a.truth)?;
    let out = sc.path_req("out", a.out)?;
    let methods = parse_methods(&sc.text("methods", a.methods, "none,l2,hlsvd")?)?;
    let weights_path = sc.path_opt("weights", a.weights);
    let lipnet_path = sc.path_opt("lipnet_weights", a.lipnet_weights);
    let op_path = sc.path_opt("operator", a.operator);
    let water_rank = sc.num("water_rank", a.water_rank, 32)?;
    let band = sc.pair("band_ppm", a.band_ppm, (4.2, 5.2))?;
    let fwhm_peak = sc.num("fwhm_peak_ppm", None, 2.01)?;
    let plot_voxels = sc.num("plot_voxels", a.plot_voxels, 4)?;
    sc.log();

    let v = read_volume(&input)?;
    let t = read_volume(&truth)?;
    let op = match methods.iter().copied().find(|&m| needs_operator(m)) {
        Some(m) => Some(obtain_operator(&v, op_path.as_deref(), None, DEFAULT_TARGET_DIAG, m)?),
        None => None,
    };
    let load_net = |path: &Option<PathBuf>, m: Method, flag: &str| -> Result<Option<YNetWeights>> {
        match path {
            Some(p) => Ok(Some(load_weights(p)?)),
            None if methods.contains(&m)
                || (m == Method::Lipnet && methods.contains(&Method::HlsvdLipnet)) =>
            {
                Err(Error::Config(format!("method '{m}' needs network weights: pass {flag}")))
            }
            None => Ok(None),
        }
    };
    let wal = load_net(&weights_path, Method::Walinet, "--weights")?;
    let lip = load_net(&lipnet_path, Method::Lipnet, "--lipnet-weights")?;
    let inputs = MethodInputs { op: op.as_ref(), walinet: wal.as_ref(), lipnet: lip.as_ref() };
    let cfg = CompareConfig {
        methods,
        hlsvd_rank: water_rank,
        water_band_ppm: band,
        fwhm_peak_ppm: fwhm_peak,
        n_plot_voxels: plot_voxels,
        seed,
        ..CompareConfig::default()
    };
    std::fs::create_dir_all(&out)?;
    let report = compare(&v, &t, &inputs, &cfg, &out)?;
    std::fs::write(out.join("config.txt"), sc.config_text())?;
    print_aggregates(&report);
    println!(
        "wrote {}, {}, {}, {}",
        report.voxel_csv.display(),
        report.aggregate_csv.display(),
        report.spectra_svg.display(),
        report.nrmse_svg.display()
    );
    Ok(())
}

/// Wall time in milliseconds for cleaning every voxel of `v` with `method`
/// on `threads` workers.
fn time_volume_clean(
    v: &MrsiVolume,
    method: Method,
    inputs: &MethodInputs<'_>,
    mcfg: &CompareConfig,
    threads: usize,
) -> Result<f64> {
    let pool = thread_pool(threads)?;
    let t0 = Instant::now();
    let res: Result<Vec<()>> = pool.install(|| {
        (0..v.n_voxels())
            .into_par_iter()
            .map(|idx| {
                let (x, y) = (idx / v.ny, idx % v.ny);
                let f = clean_voxel(method, &v.spectrum_at(x, y), inputs, mcfg)?;
                std::hint::black_box(&f.samples);
                Ok(())
            })
            .collect()
    });
    res?;
    Ok(t0.elapsed().as_secs_f64() * 1e3)
}

/// Coefficient of determination of the ordinary least-squares line through
/// `(x, y)`. Constant y is perfectly explained by a flat line.
fn linear_r2(points: &[(usize, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for &(x, y) in points {
        sx += x as f64;
        sy += y;
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (dx, dy) = (x as f64 - mx, y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if syy == 0.0 {
        return 1.0;
    }
    if sxx == 0.0 {
        return 0.0;
    }
    (sxy * sxy) / (sxx * syy)
}

fn cmd_bench(
    file: &FileConfig,
    seed: Option<u64>,
    threads_flag: Option<usize>,
    a: BenchArgs,
) -> Result<()> {
    let mut sc = Scope::new(file, "bench");
    let seed = seed.unwrap_or(0);
    let max_threads = resolve_threads(file, threads_flag)?;
    sc.note_global("seed", seed);
    sc.note_global("threads", max_threads);
    let out = sc.path_req("out", a.out)?;
    let sizes = parse_usize_list(&sc.text("sizes", a.sizes, "16,24,32")?)?;
    let axis = resolve_axis(&mut sc, a.n_points, 512)?;
    let methods = parse_methods(&sc.text("methods", a.methods, "hlsvd,walinet")?)?;
    let water_rank = sc.num("water_rank", a.water_rank, 32)?;
    let weights_path = sc.path_opt("weights", a.weights);
    sc.log();

    std::fs::create_dir_all(&out)?;
    let basis = MetaboliteBasis::default_brain();
    let mut vols = Vec::with_capacity(sizes.len());
    for &s in &sizes {
        // one stream per size, so the set does not depend on which sizes run
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64);
        vols.push(build_phantom(&PhantomConfig::new(s, s, axis), &basis, &mut rng)?);
    }
    let base = vols.last().expect("the size list is non-empty");
    let w = match &weights_path {
        Some(p) => Some(load_weights(p)?),
        None if methods.iter().any(|&m| needs_network(m)) => {
            // timing is weight-independent, so fresh random weights serve
            let block = 2usize.pow(YNetConfig::default().depth as u32);
            let ycfg = YNetConfig::with_padded_length(axis.n_points.div_ceil(block) * block);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Some(YNetWeights::init(&ycfg, &mut rng)?)
        }
        None => None,
    };
    let op = match methods.iter().copied().find(|&m| needs_operator(m)) {
        Some(m) => Some(obtain_operator(base, None, None, DEFAULT_TARGET_DIAG, m)?),
        None => None,
    };
    let inputs = MethodInputs { op: op.as_ref(), walinet: w.as_ref(), lipnet: w.as_ref() };
    let mcfg = CompareConfig { hlsvd_rank: water_rank, ..CompareConfig::default() };

    // water-removal scaling first (one thread); its largest point doubles as
    // the hlsvd row of the thread sweep
    let mut scaling = Vec::with_capacity(vols.len());
    for v in &vols {
        scaling.push((v.n_voxels(), time_volume_clean(v, Method::Hlsvd, &inputs, &mcfg, 1)?));
    }
    let r2 = linear_r2(&scaling);
    let hlsvd_base = scaling.last().expect("at least one size").1;

    let mut threads_set = vec![1, max_threads];
    threads_set.dedup();
    let mut rows: Vec<(Method, usize, f64)> = Vec::new();
    for &m in &methods {
        for &t in &threads_set {
            let wall = if m == Method::Hlsvd && t == 1 {
                hlsvd_base
            } else {
                time_volume_clean(base, m, &inputs, &mcfg, t)?
            };
            rows.push((m, t, wall));
        }
    }

    let mut csv = String::from("method,threads,nx,ny,n_points,voxels,wall_ms\n");
    for (m, t, wall) in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{:.3}\n",
            m.name(),
            t,
            base.nx,
            base.ny,
            axis.n_points,
            base.n_voxels(),
            wall
        ));
    }
    std::fs::write(out.join("bench.csv"), csv)?;
    let mut csv = String::from("voxels,wall_ms\n");
    for (vx, wall) in &scaling {
        csv.push_str(&format!("{vx},{wall:.3}\n"));
    }
    std::fs::write(out.join("scaling.csv"), csv)?;

    let mut summary = format!("hlsvd_scaling_r2 = {r2:.4}\n");
    for &m in &methods {
        if m == Method::Hlsvd {
            continue;
        }
        let wall = rows
            .iter()
            .find(|(rm, t, _)| *rm == m && *t == 1)
            .expect("every method has a one-thread row")
            .2;
        summary.push_str(&format!("speedup_{}_vs_hlsvd = {:.2}\n", m.name(), hlsvd_base / wall));
    }
    std::fs::write(out.join("summary.txt"), &summary)?;
    std::fs::write(out.join("config.txt"), sc.config_text())?;
    print!("{summary}");
    println!("wrote bench.csv, scaling.csv, summary.txt into {}", out.display());
    Ok(())
}
