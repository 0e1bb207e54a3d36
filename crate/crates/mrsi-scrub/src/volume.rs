//! Spatial grids of FIDs with tissue masks and a B0 field map, plus the MRSX
//! on-disk format.
//!
//! A volume is a 2D `nx x ny` grid of time-domain FIDs sharing one
//! [`SpectralAxis`]. Voxels are addressed `(x, y)` with `y` fastest, matching
//! the file layout (sample index `((x*ny)+y)*n_points + t`). All samples stay
//! in the time domain inside a volume; frequency-domain work happens on
//! per-voxel [`Spectrum`] values.
//!
//! MRSX layout (little-endian): magic `MRSX`, u32 version (= 1), u32 nx, u32
//! ny, u32 n_points, f64 bandwidth_hz, f64 transmitter_mhz, f64 ref_ppm, u8
//! flags (bit 0: masks present, bit 1: b0 map present), then nx·ny·n_points
//! complex samples as f32 (re, im) pairs, then optionally the brain and scalp
//! masks as 0/1 bytes and the b0 map as f64 Hz values.

use std::f64::consts::TAU;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;

use crate::spectrum::{Domain, SpectralAxis, Spectrum};
use crate::{Error, Result};

const MAGIC: [u8; 4] = *b"MRSX";
const VERSION: u32 = 1;

/// A 2D grid of time-domain FIDs with optional tissue masks and B0 map.
#[derive(Clone, Debug, PartialEq)]
pub struct MrsiVolume {
    pub nx: usize,
    pub ny: usize,
    pub axis: SpectralAxis,
    /// Row `x*ny + y` holds the FID of voxel `(x, y)`.
    pub data: Array2<Complex64>,
    pub brain_mask: Vec<bool>,
    pub scalp_mask: Vec<bool>,
    pub b0_map_hz: Vec<f64>,
    /// Whether masks were present in (and will be written back to) the file.
    pub has_masks: bool,
    /// Whether a b0 map was present in (and will be written back to) the file.
    pub has_b0: bool,
}

impl MrsiVolume {
    /// Empty volume: all-zero FIDs, empty masks, zero field map.
    pub fn zeros(nx: usize, ny: usize, axis: SpectralAxis) -> Self {
        let n = nx * ny;
        MrsiVolume {
            nx,
            ny,
            axis,
            data: Array2::from_elem((n, axis.n_points), Complex64::new(0.0, 0.0)),
            brain_mask: vec![false; n],
            scalp_mask: vec![false; n],
            b0_map_hz: vec![0.0; n],
            has_masks: false,
            has_b0: false,
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.nx * self.ny
    }

    /// Flat index of voxel `(x, y)`; `y` runs fastest.
    pub fn voxel_index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.nx && y < self.ny);
        x * self.ny + y
    }

    /// The FID at `(x, y)` as a standalone time-domain [`Spectrum`].
    pub fn spectrum_at(&self, x: usize, y: usize) -> Spectrum {
        let row = self.data.row(self.voxel_index(x, y));
        Spectrum::from_samples(self.axis, Domain::Time, row.to_vec())
    }

    /// Overwrite the FID at `(x, y)`.
    pub fn set_fid(&mut self, x: usize, y: usize, fid: &[Complex64]) {
        assert_eq!(fid.len(), self.axis.n_points);
        let idx = self.voxel_index(x, y);
        for (dst, src) in self.data.row_mut(idx).iter_mut().zip(fid) {
            *dst = *src;
        }
    }

    /// Asserts the structural invariants: mask/map lengths match the grid and
    /// no voxel is flagged as both brain and scalp.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_voxels();
        if self.data.dim() != (n, self.axis.n_points) {
            return Err(Error::Format("sample block does not match grid dimensions".into()));
        }
        if self.brain_mask.len() != n || self.scalp_mask.len() != n || self.b0_map_hz.len() != n {
            return Err(Error::Format("mask or field-map length does not match grid".into()));
        }
        if self.brain_mask.iter().zip(&self.scalp_mask).any(|(b, s)| *b && *s) {
            return Err(Error::Format("brain and scalp masks overlap".into()));
        }
        Ok(())
    }

    /// Demodulate each voxel by its B0 offset (multiply the FID by
    /// `e^{-i 2 pi df t}`) and zero the map so a second application is a
    /// no-op rather than a double shift.
    pub fn b0_correct(mut self) -> MrsiVolume {
        let dt = self.axis.dt();
        for v in 0..self.n_voxels() {
            let df = self.b0_map_hz[v];
            if df == 0.0 {
                continue;
            }
            let mut row = self.data.row_mut(v);
            for (t, z) in row.iter_mut().enumerate() {
                let phase = -TAU * df * (t as f64) * dt;
                *z *= Complex64::from_polar(1.0, phase);
            }
            self.b0_map_hz[v] = 0.0;
        }
        self
    }
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Truncated(format!("{what}: need {n} more bytes, have {}", buf.len())));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn read_u32(buf: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4, what)?.try_into().unwrap()))
}

fn read_f64(buf: &mut &[u8], what: &str) -> Result<f64> {
    Ok(f64::from_le_bytes(take(buf, 8, what)?.try_into().unwrap()))
}

/// Parse an MRSX file.
pub fn read_volume(path: impl AsRef<Path>) -> Result<MrsiVolume> {
    let bytes = std::fs::read(path)?;
    let mut buf = bytes.as_slice();

    let magic = take(&mut buf, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = read_u32(&mut buf, "version")?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let nx = read_u32(&mut buf, "nx")? as usize;
    let ny = read_u32(&mut buf, "ny")? as usize;
    let n_points = read_u32(&mut buf, "n_points")? as usize;
    let bandwidth_hz = read_f64(&mut buf, "bandwidth_hz")?;
    let transmitter_mhz = read_f64(&mut buf, "transmitter_mhz")?;
    let ref_ppm = read_f64(&mut buf, "ref_ppm")?;
    let flags = take(&mut buf, 1, "flags")?[0];
    let has_masks = flags & 1 != 0;
    let has_b0 = flags & 2 != 0;

    let n_voxels = nx.checked_mul(ny).ok_or_else(|| Error::DimOverflow(format!("{nx} x {ny} voxels")))?;
    let n_samples = n_voxels
        .checked_mul(n_points)
        .ok_or_else(|| Error::DimOverflow(format!("{nx} x {ny} x {n_points} samples")))?;
    let payload_bytes = n_samples
        .checked_mul(8)
        .ok_or_else(|| Error::DimOverflow(format!("{n_samples} complex samples")))?;

    let raw = take(&mut buf, payload_bytes, "sample payload")?;
    let mut samples = Vec::with_capacity(n_samples);
    for chunk in raw.chunks_exact(8) {
        let re = f32::from_le_bytes(chunk[0..4].try_into().unwrap());
        let im = f32::from_le_bytes(chunk[4..8].try_into().unwrap());
        samples.push(Complex64::new(re as f64, im as f64));
    }
    let data = Array2::from_shape_vec((n_voxels, n_points), samples).expect("shape checked above");

    let (brain_mask, scalp_mask) = if has_masks {
        let b = take(&mut buf, n_voxels, "brain mask")?;
        let s = take(&mut buf, n_voxels, "scalp mask")?;
        (b.iter().map(|&v| v != 0).collect(), s.iter().map(|&v| v != 0).collect())
    } else {
        (vec![false; n_voxels], vec![false; n_voxels])
    };
    let b0_map_hz = if has_b0 {
        let raw = take(&mut buf, n_voxels * 8, "b0 map")?;
        raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    } else {
        vec![0.0; n_voxels]
    };

    let axis = SpectralAxis::new(n_points, bandwidth_hz, transmitter_mhz, ref_ppm)?;
    let vol = MrsiVolume { nx, ny, axis, data, brain_mask, scalp_mask, b0_map_hz, has_masks, has_b0 };
    vol.validate()?;
    Ok(vol)
}

/// Serialize a volume to MRSX bytes.
pub fn volume_to_bytes(v: &MrsiVolume) -> Result<Vec<u8>> {
    v.validate()?;
    let n_voxels = v.n_voxels();
    let mut out = Vec::with_capacity(45 + v.data.len() * 8 + n_voxels * 10);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let dim_u32 = |d: usize, what: &str| -> Result<u32> {
        u32::try_from(d).map_err(|_| Error::DimOverflow(format!("{what} = {d} exceeds u32")))
    };
    out.extend_from_slice(&dim_u32(v.nx, "nx")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(v.ny, "ny")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(v.axis.n_points, "n_points")?.to_le_bytes());
    out.extend_from_slice(&v.axis.bandwidth_hz.to_le_bytes());
    out.extend_from_slice(&v.axis.transmitter_mhz.to_le_bytes());
    out.extend_from_slice(&v.axis.ref_ppm.to_le_bytes());
    let flags = (v.has_masks as u8) | ((v.has_b0 as u8) << 1);
    out.push(flags);
    for z in v.data.iter() {
        out.extend_from_slice(&(z.re as f32).to_le_bytes());
        out.extend_from_slice(&(z.im as f32).to_le_bytes());
    }
    if v.has_masks {
        out.extend(v.brain_mask.iter().map(|&b| b as u8));
        out.extend(v.scalp_mask.iter().map(|&s| s as u8));
    }
    if v.has_b0 {
        for &b0 in &v.b0_map_hz {
            out.extend_from_slice(&b0.to_le_bytes());
        }
    }
    Ok(out)
}

/// Write a volume as an MRSX file.
pub fn write_volume(v: &MrsiVolume, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, volume_to_bytes(v)?)?;
    Ok(())
}
