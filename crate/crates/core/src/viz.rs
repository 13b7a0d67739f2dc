//! Grayscale feature-map dumps and bare line plots rendered from CSV data.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::dar::DarModel;
use crate::error::{DarError, Result};
use crate::nn::{ca_module, na_module};
use crate::volume::Patch;

/// Channel sums at one transferred block, before normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFields {
    pub block: usize,
    pub height: usize,
    pub width: usize,
    pub prd: Vec<f32>,
    pub lr: Vec<f32>,
    pub cf: Vec<f32>,
    pub na: Vec<f32>,
    pub ca: Vec<f32>,
    pub fused: Vec<f32>,
}

/// `block` is 1-based and must lie in `k..=m`.
pub fn feature_fields(dar: &DarModel, patch: &Patch, block: usize) -> Result<FeatureFields> {
    let m = dar.spec().m;
    if block < dar.k || block > m {
        return Err(DarError::BlockOutOfRange { block, k: dar.k, m });
    }
    let out = dar.dar_forward(patch)?;
    let f = &out.features;
    let j = block - 1;
    let fused = f.fused.iter().find(|x| x.block == block).expect("transferred block present");
    let na = na_module(&f.cf[j], &f.prd[j])?;
    let ca = ca_module(&f.lr[j], &f.prd[j])?;
    Ok(FeatureFields {
        block,
        height: fused.height,
        width: fused.width,
        prd: f.prd[j].channel_sum(),
        lr: f.lr[j].channel_sum(),
        cf: f.cf[j].channel_sum(),
        na: na.channel_sum(),
        ca: ca.channel_sum(),
        fused: fused.channel_sum(),
    })
}

/// Min-max to `[0, 1]`; a constant field maps to 0.5.
pub fn normalize_field(v: &[f32]) -> Vec<f32> {
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return vec![0.5; v.len()];
    }
    v.iter().map(|&x| (x - lo) / (hi - lo)).collect()
}

pub fn gray_image(field: &[f32], height: usize, width: usize) -> GrayImage {
    let n = normalize_field(field);
    GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([(n[y as usize * width + x as usize] * 255.0).round() as u8])
    })
}

fn save_png(img: image::DynamicImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| DarError::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Writes `block<b>_{prd,lr,cf,fused}.png` into `out_dir`.
pub fn dump_feature_maps(dar: &DarModel, patch: &Patch, block: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let f = feature_fields(dar, patch, block)?;
    let mut paths = Vec::with_capacity(4);
    for (name, field) in [("prd", &f.prd), ("lr", &f.lr), ("cf", &f.cf), ("fused", &f.fused)] {
        let path = out_dir.join(format!("block{block}_{name}.png"));
        save_png(gray_image(field, f.height, f.width).into(), &path)?;
        paths.push(path);
    }
    Ok(paths)
}

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189], [255, 127, 14], [23, 190, 207]];

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Unlabelled line chart: white background, black axes, one colour per
/// series in the order given. Ranges come from the data.
pub fn plot_lines(series: &[Vec<(f64, f64)>], path: &Path, width: u32, height: u32) -> Result<()> {
    let pts = series.iter().flatten().filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x1 >= x0) {
        return Err(DarError::Config("nothing to plot".into()));
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let margin = 20i64;
    let (w, h) = (width as i64, height as i64);
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = margin + ((x - x0) / (x1 - x0) * (w - 2 * margin) as f64).round() as i64;
        let py = h - margin - ((y - y0) / (y1 - y0) * (h - 2 * margin) as f64).round() as i64;
        (px, py)
    };
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let black = Rgb([0, 0, 0]);
    line(&mut img, (margin, h - margin), (w - margin, h - margin), black);
    line(&mut img, (margin, margin), (margin, h - margin), black);
    for (i, s) in series.iter().enumerate() {
        let c = Rgb(PALETTE[i % PALETTE.len()]);
        let finite: Vec<(i64, i64)> = s.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|&(x, y)| to_px(x, y)).collect();
        for w in finite.windows(2) {
            line(&mut img, w[0], w[1], c);
        }
        for &(px, py) in &finite {
            for d in -2..=2 {
                line(&mut img, (px - 2, py + d), (px + 2, py + d), c);
            }
        }
    }
    save_png(img.into(), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BackboneSpec, Network};

    fn toy(k: usize) -> DarModel {
        let spec = BackboneSpec { m: 2, channels: vec![3, 4], strides: vec![1, 2], input_size: 8, q: 3 };
        let n = |s| Network::init(&spec, s).unwrap();
        DarModel::new(n(1), n(2), n(3), k).unwrap()
    }

    fn patch() -> Patch {
        Patch::new(8, (0..64).map(|i| ((i * 37) % 11) as f32 / 11.0).collect()).unwrap()
    }

    #[test]
    fn constant_field_is_mid_gray() {
        assert_eq!(normalize_field(&[2.0; 6]), vec![0.5; 6]);
        let img = gray_image(&[-1.0; 4], 2, 2);
        assert!(img.pixels().all(|p| p.0[0] == 128));
    }

    #[test]
    fn fused_field_is_sum_of_components() {
        let f = feature_fields(&toy(1), &patch(), 2).unwrap();
        for i in 0..f.fused.len() {
            let sum = f.prd[i] + f.na[i] + f.ca[i];
            assert!((f.fused[i] - sum).abs() <= 1e-4 * (1.0 + sum.abs()));
        }
    }

    #[test]
    fn block_range_enforced() {
        let d = toy(2);
        assert!(matches!(feature_fields(&d, &patch(), 1), Err(DarError::BlockOutOfRange { .. })));
        assert!(matches!(feature_fields(&d, &patch(), 3), Err(DarError::BlockOutOfRange { .. })));
    }

    #[test]
    fn dump_writes_four_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let paths = dump_feature_maps(&toy(1), &patch(), 1, dir.path()).unwrap();
        assert_eq!(paths.len(), 4);
        let img = image::open(&paths[3]).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (8, 8));
    }

    #[test]
    fn plot_renders() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.png");
        plot_lines(&[vec![(0.2, 0.5), (1.0, 0.7)], vec![(0.2, 0.6), (1.0, 0.6)]], &p, 120, 80).unwrap();
        assert_eq!(image::open(&p).unwrap().to_rgb8().dimensions(), (120, 80));
    }
}
