//! Volume preprocessing: isotropic resampling, cube cropping, tri-planar slicing,
//! patch resizing, intensity windowing and online augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DarError, Result};
use crate::volume::{Patch, PatchTriplet, Volume};

/// Trilinear resample to 1 mm isotropic spacing.
///
/// Output dims are `round(dim * spacing)` (at least 1). Sample positions are
/// voxel-centre aligned, so an already isotropic volume is returned unchanged.
pub fn resample_isotropic(volume: &Volume) -> Result<Volume> {
    volume.validate()?;
    let out_dims: [usize; 3] =
        std::array::from_fn(|a| ((volume.dims[a] as f64 * volume.spacing[a] as f64).round() as usize).max(1));
    if out_dims == volume.dims && volume.spacing == [1.0; 3] {
        return Ok(volume.clone());
    }
    // per-axis source coordinate and interpolation weights
    let axis_taps = |a: usize| -> Vec<(usize, usize, f32)> {
        let n = volume.dims[a];
        let s = volume.spacing[a] as f64;
        (0..out_dims[a])
            .map(|i| {
                let src = ((i as f64 + 0.5) / s - 0.5).clamp(0.0, (n - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let (tx, ty, tz) = (axis_taps(0), axis_taps(1), axis_taps(2));
    let mut voxels = Vec::with_capacity(out_dims.iter().product());
    for &(z0, z1, wz) in &tz {
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let lerp = |a: f32, b: f32, w: f32| a + (b - a) * w;
                let c00 = lerp(volume.get(x0, y0, z0), volume.get(x1, y0, z0), wx);
                let c10 = lerp(volume.get(x0, y1, z0), volume.get(x1, y1, z0), wx);
                let c01 = lerp(volume.get(x0, y0, z1), volume.get(x1, y0, z1), wx);
                let c11 = lerp(volume.get(x0, y1, z1), volume.get(x1, y1, z1), wx);
                voxels.push(lerp(lerp(c00, c10, wy), lerp(c01, c11, wy), wz));
            }
        }
    }
    Volume::new(out_dims, [1.0; 3], voxels)
}

/// Cube of `side` voxels whose centre voxel is `center`; out-of-volume voxels take `fill`.
pub fn crop_cube(volume: &Volume, center: [i64; 3], side: usize, fill: f32) -> Result<Volume> {
    volume.validate()?;
    if (0..3).any(|a| center[a] < 0 || center[a] >= volume.dims[a] as i64) {
        return Err(DarError::CenterOutOfBounds { center, dims: volume.dims });
    }
    let half = (side / 2) as i64;
    let lo: [i64; 3] = std::array::from_fn(|a| center[a] - half);
    let mut voxels = Vec::with_capacity(side * side * side);
    for z in 0..side as i64 {
        for y in 0..side as i64 {
            for x in 0..side as i64 {
                let (sx, sy, sz) = (lo[0] + x, lo[1] + y, lo[2] + z);
                let inside = sx >= 0
                    && sy >= 0
                    && sz >= 0
                    && (sx as usize) < volume.dims[0]
                    && (sy as usize) < volume.dims[1]
                    && (sz as usize) < volume.dims[2];
                voxels.push(if inside { volume.get(sx as usize, sy as usize, sz as usize) } else { fill });
            }
        }
    }
    Volume::new([side; 3], volume.spacing, voxels)
}

/// Central axial (z), sagittal (x) and coronal (y) slices of a cube.
///
/// Axial rows run along y and columns along x; sagittal rows along z, columns
/// along y; coronal rows along z, columns along x.
pub fn extract_triplanar(cube: &Volume) -> Result<PatchTriplet> {
    let [nx, ny, nz] = cube.dims;
    if nx != ny || ny != nz {
        return Err(DarError::NonCubic(cube.dims));
    }
    let s = nx;
    let mid = s / 2;
    let mut axial = Vec::with_capacity(s * s);
    let mut sagittal = Vec::with_capacity(s * s);
    let mut coronal = Vec::with_capacity(s * s);
    for r in 0..s {
        for c in 0..s {
            axial.push(cube.get(c, r, mid));
            sagittal.push(cube.get(mid, c, r));
            coronal.push(cube.get(c, mid, r));
        }
    }
    Ok(PatchTriplet {
        axial: Patch { size: s, data: axial },
        sagittal: Patch { size: s, data: sagittal },
        coronal: Patch { size: s, data: coronal },
    })
}

/// Bilinear resize of a square patch to `target x target`.
pub fn resize_patch(patch: &Patch, target: usize) -> Result<Patch> {
    if patch.data.len() != patch.size * patch.size || patch.size == 0 {
        return Err(DarError::NonSquare { rows: patch.size, cols: patch.data.len() / patch.size.max(1) });
    }
    if target == patch.size {
        return Ok(patch.clone());
    }
    let n = patch.size;
    let scale = n as f64 / target as f64;
    let taps: Vec<(usize, usize, f32)> = (0..target)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = src.floor() as usize;
            (lo, (lo + 1).min(n - 1), (src - lo as f64) as f32)
        })
        .collect();
    let mut data = Vec::with_capacity(target * target);
    for &(r0, r1, wr) in &taps {
        for &(c0, c1, wc) in &taps {
            let top = patch.at(r0, c0) + (patch.at(r0, c1) - patch.at(r0, c0)) * wc;
            let bot = patch.at(r1, c0) + (patch.at(r1, c1) - patch.at(r1, c0)) * wc;
            data.push(top + (bot - top) * wr);
        }
    }
    Ok(Patch { size: target, data })
}

/// Intensity window mapped affinely onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: f32,
    pub hi: f32,
}

impl Window {
    /// Lung window in Hounsfield units.
    pub const LUNG: Window = Window { lo: -1000.0, hi: 400.0 };
    pub const UNIT: Window = Window { lo: 0.0, hi: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if self.lo < self.hi {
            Ok(())
        } else {
            Err(DarError::InvalidWindow { lo: self.lo, hi: self.hi })
        }
    }

    #[inline]
    pub fn apply(&self, v: f32) -> f32 {
        (v.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo)
    }
}

pub fn normalize_intensity(patch: &Patch, window: Window) -> Result<Patch> {
    window.validate()?;
    Ok(Patch { size: patch.size, data: patch.data.iter().map(|&v| window.apply(v)).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    pub crop_side: usize,
    pub patch_size: usize,
    pub window: Window,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self { crop_side: 64, patch_size: 64, window: Window::UNIT }
    }
}

/// Full chain: resample, crop around `center` (given in source voxel coordinates),
/// slice, resize, window. Out-of-volume crop voxels take the window minimum.
pub fn prepare_triplet(volume: &Volume, center: [i64; 3], cfg: &PrepConfig) -> Result<PatchTriplet> {
    cfg.window.validate()?;
    let iso = resample_isotropic(volume)?;
    let iso_center: [i64; 3] = std::array::from_fn(|a| {
        let mm = (center[a] as f64 + 0.5) * volume.spacing[a] as f64;
        ((mm - 0.5).round() as i64).clamp(0, iso.dims[a] as i64 - 1)
    });
    let cube = crop_cube(&iso, iso_center, cfg.crop_side, cfg.window.lo)?;
    let tri = extract_triplanar(&cube)?;
    let mut out = Vec::with_capacity(3);
    for p in [&tri.axial, &tri.sagittal, &tri.coronal] {
        out.push(normalize_intensity(&resize_patch(p, cfg.patch_size)?, cfg.window)?);
    }
    let coronal = out.pop().unwrap();
    let sagittal = out.pop().unwrap();
    let axial = out.pop().unwrap();
    Ok(PatchTriplet { axial, sagittal, coronal })
}

/// One draw of the online augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise rotation in degrees, within `[-90, 90]`.
    pub angle_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { hflip: false, vflip: false, angle_deg: 0.0 };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let hflip = rng.gen_bool(0.5);
        let vflip = rng.gen_bool(0.5);
        let angle_deg = rng.gen_range(-90.0..=90.0);
        Self { hflip, vflip, angle_deg }
    }

    pub fn apply(&self, patch: &Patch) -> Patch {
        let n = patch.size;
        let mut flipped = patch.clone();
        if self.hflip || self.vflip {
            for r in 0..n {
                for c in 0..n {
                    let sr = if self.vflip { n - 1 - r } else { r };
                    let sc = if self.hflip { n - 1 - c } else { c };
                    flipped.data[r * n + c] = patch.at(sr, sc);
                }
            }
        }
        if self.angle_deg == 0.0 {
            return flipped;
        }
        rotate(&flipped, self.angle_deg)
    }
}

fn exact_cos_sin(angle_deg: f64) -> (f64, f64) {
    match angle_deg {
        a if a == 90.0 => (0.0, 1.0),
        a if a == -90.0 => (0.0, -1.0),
        a => {
            let r = a.to_radians();
            (r.cos(), r.sin())
        }
    }
}

/// Rotation about the patch centre with bilinear sampling and zero fill.
/// At +90 degrees this is `out[i][j] = in[j][n-1-i]`.
fn rotate(patch: &Patch, angle_deg: f64) -> Patch {
    let n = patch.size;
    let (cos, sin) = exact_cos_sin(angle_deg);
    let centre = (n as f64 - 1.0) / 2.0;
    let mut data = vec![0.0f32; n * n];
    let sample = |r: i64, c: i64| -> f32 {
        if r < 0 || c < 0 || r >= n as i64 || c >= n as i64 {
            0.0
        } else {
            patch.at(r as usize, c as usize)
        }
    };
    for r in 0..n {
        for c in 0..n {
            let dy = r as f64 - centre;
            let dx = c as f64 - centre;
            let sx = cos * dx - sin * dy + centre;
            let sy = sin * dx + cos * dy + centre;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (wx, wy) = ((sx - x0) as f32, (sy - y0) as f32);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let top = sample(y0, x0) * (1.0 - wx) + sample(y0, x0 + 1) * wx;
            let bot = sample(y0 + 1, x0) * (1.0 - wx) + sample(y0 + 1, x0 + 1) * wx;
            data[r * n + c] = top * (1.0 - wy) + bot * wy;
        }
    }
    Patch { size: n, data }
}

/// Draws one transform and applies it to all three views.
pub fn augment<R: Rng + ?Sized>(triplet: &PatchTriplet, rng: &mut R) -> PatchTriplet {
    let params = AugmentParams::sample(rng);
    triplet.map(|p| params.apply(p))
}
