//! Volumes, 2D patches and the NVOL on-disk format.
//!
//! NVOL layout (little-endian): `b"NVOL"`, `u16` version (1), `u16` reserved (0),
//! `u32` dims `[nx, ny, nz]`, `f32` spacing `[sx, sy, sz]` in millimetres, then
//! `nx * ny * nz` `f32` voxels with x fastest (`x + nx * (y + ny * z)`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DarError, Result};

const MAGIC: &[u8; 4] = b"NVOL";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 12 + 12;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], voxels: Vec<f32>) -> Result<Self> {
        let v = Self { dims, spacing, voxels };
        v.validate()?;
        Ok(v)
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], value: f32) -> Self {
        Self { dims, spacing, voxels: vec![value; dims[0] * dims[1] * dims[2]] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(DarError::InvalidVolume(format!("zero dimension in {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(DarError::InvalidVolume(format!("non-positive spacing {:?}", self.spacing)));
        }
        let n = self.dims[0] * self.dims[1] * self.dims[2];
        if self.voxels.len() != n {
            return Err(DarError::InvalidVolume(format!(
                "{} voxels for dims {:?}",
                self.voxels.len(),
                self.dims
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.voxels.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(DarError::TruncatedPayload { expected: HEADER_LEN, found: bytes.len() });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(DarError::BadMagic { found: magic });
        }
        if bytes.len() < HEADER_LEN {
            return Err(DarError::TruncatedPayload { expected: HEADER_LEN, found: bytes.len() });
        }
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u16_at(4);
        if version != VERSION {
            return Err(DarError::UnsupportedVersion(version));
        }
        let raw_dims = [u32_at(8), u32_at(12), u32_at(16)];
        let spacing = [f32_at(20), f32_at(24), f32_at(28)];
        let count = (raw_dims[0] as usize)
            .checked_mul(raw_dims[1] as usize)
            .and_then(|n| n.checked_mul(raw_dims[2] as usize))
            .filter(|n| n.checked_mul(4).and_then(|b| b.checked_add(HEADER_LEN)).is_some())
            .ok_or(DarError::DimensionOverflow(raw_dims))?;
        let expected = HEADER_LEN + 4 * count;
        if bytes.len() < expected {
            return Err(DarError::TruncatedPayload { expected, found: bytes.len() });
        }
        let voxels = bytes[HEADER_LEN..expected]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let dims = raw_dims.map(|d| d as usize);
        Volume::new(dims, spacing, voxels)
    }
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| DarError::io(path, e))?;
    Volume::decode(&bytes)
}

pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    volume.validate()?;
    fs::write(path, volume.encode()).map_err(|e| DarError::io(path, e))
}

/// Square 2D array stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Patch {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != size * size {
            return Err(DarError::NonSquare { rows: size, cols: data.len() / size.max(1) });
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: usize, value: f32) -> Self {
        Self { size, data: vec![value; size * size] }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.size + col]
    }
}

/// Three orthogonal views through one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchTriplet {
    pub axial: Patch,
    pub sagittal: Patch,
    pub coronal: Patch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Axial,
    Sagittal,
    Coronal,
}

impl View {
    pub const ALL: [View; 3] = [View::Axial, View::Sagittal, View::Coronal];

    pub fn name(self) -> &'static str {
        match self {
            View::Axial => "axial",
            View::Sagittal => "sagittal",
            View::Coronal => "coronal",
        }
    }

    pub fn parse(s: &str) -> Option<View> {
        View::ALL.into_iter().find(|v| v.name() == s)
    }
}

impl PatchTriplet {
    pub fn view(&self, view: View) -> &Patch {
        match view {
            View::Axial => &self.axial,
            View::Sagittal => &self.sagittal,
            View::Coronal => &self.coronal,
        }
    }

    pub fn map(&self, mut f: impl FnMut(&Patch) -> Patch) -> PatchTriplet {
        PatchTriplet { axial: f(&self.axial), sagittal: f(&self.sagittal), coronal: f(&self.coronal) }
    }

    /// Packs the triplet into an `S x S x 3` volume (z = axial, sagittal, coronal).
    pub fn to_volume(&self) -> Volume {
        let s = self.axial.size;
        let mut voxels = Vec::with_capacity(3 * s * s);
        for v in View::ALL {
            voxels.extend_from_slice(&self.view(v).data);
        }
        Volume { dims: [s, s, 3], spacing: [1.0; 3], voxels }
    }

    pub fn from_volume(vol: &Volume) -> Result<Self> {
        let [nx, ny, nz] = vol.dims;
        if nx != ny || nz != 3 {
            return Err(DarError::ShapeMismatch(format!("patch stack dims {:?}", vol.dims)));
        }
        let n = nx * nx;
        let slice = |i: usize| Patch { size: nx, data: vol.voxels[i * n..(i + 1) * n].to_vec() };
        Ok(PatchTriplet { axial: slice(0), sagittal: slice(1), coronal: slice(2) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_2x2x2() {
        let vol = Volume::new([2, 2, 2], [0.5, 1.0, 2.5], (0..8).map(|i| i as f32 * 0.37 - 1.0).collect())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nvol");
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back, vol);
        let a: Vec<u32> = vol.voxels.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.voxels.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = Volume::filled([1, 1, 1], [1.0; 3], 0.0).encode();
        bytes[0..4].copy_from_slice(b"XVOL");
        assert!(matches!(Volume::decode(&bytes), Err(DarError::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload() {
        let bytes = Volume::filled([10, 10, 10], [1.0; 3], 1.0).encode();
        let short = &bytes[..bytes.len() - 4];
        assert!(matches!(
            Volume::decode(short),
            Err(DarError::TruncatedPayload { expected, found }) if expected == HEADER_LEN + 4000 && found == HEADER_LEN + 3996
        ));
    }

    #[test]
    fn dimension_overflow() {
        let mut bytes = Volume::filled([1, 1, 1], [1.0; 3], 0.0).encode();
        for o in [8, 12, 16] {
            bytes[o..o + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        if usize::BITS <= 64 {
            assert!(matches!(Volume::decode(&bytes), Err(DarError::DimensionOverflow(_))));
        }
    }

    #[test]
    fn triplet_volume_packing() {
        let p = |v: f32| Patch::filled(4, v);
        let t = PatchTriplet { axial: p(1.0), sagittal: p(2.0), coronal: p(3.0) };
        assert_eq!(PatchTriplet::from_volume(&t.to_volume()).unwrap(), t);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn encode_decode_is_bit_exact(
                dims in (1usize..5, 1usize..5, 1usize..5),
                seed in prop::collection::vec(any::<u32>(), 64),
            ) {
                let n = dims.0 * dims.1 * dims.2;
                // arbitrary bit patterns, including NaN payloads
                let voxels: Vec<f32> = (0..n).map(|i| f32::from_bits(seed[i % 64])).collect();
                let vol = Volume { dims: [dims.0, dims.1, dims.2], spacing: [0.7, 1.0, 1.3], voxels };
                let bytes = vol.encode();
                let back = Volume::decode(&bytes).unwrap();
                prop_assert_eq!(back.encode(), bytes);
            }
        }
    }
}
