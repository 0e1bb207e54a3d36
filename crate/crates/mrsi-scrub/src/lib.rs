//! Water and lipid nuisance-signal removal for proton MRSI spectra.
//!
//! A magnetic resonance spectroscopic imaging (MRSI) voxel records a complex
//! time-domain signal x1 = m + l + w: metabolites of interest m, subcutaneous
//! lipids l that bleed into the brain through the point-spread function, and
//! residual water w that dwarfs everything else. This crate removes l and w
//! three ways and benchmarks them against each other on synthetic volumes
//! with known ground truth:
//!
//! * [`lipid`] — the closed-form L2 suppression operator
//!   `L = (1 + beta * L_b L_b^H)^-1` built from scalp-voxel spectra, with its
//!   beta calibration.
//! * [`hlsvd`] — HSVD harmonic retrieval on the FID's Hankel matrix, used for
//!   band-selective water removal.
//! * [`ynet`] — a dual-encoder 1D convolutional network (modes `walinet` and
//!   `lipnet`) trained on simulated data to predict the nuisance signal
//!   y ~ l + w, so the clean estimate is m~ = x1 - y.
//!
//! Supporting modules: [`spectrum`] (axes, Fourier transforms, unit
//! conversions), [`volume`] (spatial grids and the on-disk format),
//! [`simgen`] (simulation of metabolites, nuisance signals, phantoms and
//! training sets), [`lowrank`] (rank-K spatiotemporal denoising),
//! [`linalg`] (the dense complex kernels everything leans on),
//! [`metrics`] (NRMSE/SNR/FWHM and the comparison harness) and [`cli`].

pub mod cli;
pub mod hlsvd;
pub mod linalg;
pub mod lipid;
pub mod lowrank;
pub mod metrics;
pub mod simgen;
pub mod spectrum;
pub mod volume;
pub mod ynet;

/// Crate-wide error type. Variants map onto the CLI exit codes: config and
/// usage problems exit 1, data and file problems exit 2, numeric failures 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("dimension overflow: {0}")]
    DimOverflow(String),
    #[error("format: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("axis mismatch: {0}")]
    AxisMismatch(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code for this error kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

#[cfg(doctest)]
mod book {
    //! Every chapter of the guide in `book/` is compiled as a doc-test so the
    //! snippets cannot drift from the library.
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }
    chapter!(introduction, "../book/src/introduction.md");
    chapter!(spectral_data, "../book/src/spectral-data.md");
    chapter!(simulation, "../book/src/simulation.md");
    chapter!(water_removal, "../book/src/water-removal.md");
    chapter!(lipid_suppression, "../book/src/lipid-suppression.md");
    chapter!(network, "../book/src/network.md");
    chapter!(evaluation, "../book/src/evaluation.md");
    chapter!(command_line, "../book/src/command-line.md");
}
