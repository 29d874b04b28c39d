//! PNG reading and writing, and the `rgb/ depth/ gt/` dataset layout.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};

use super::model::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn resized(img: DynamicImage, size: Option<usize>) -> DynamicImage {
    match size {
        Some(n) if img.width() as usize != n || img.height() as usize != n => {
            img.resize_exact(n as u32, n as u32, FilterType::Triangle)
        }
        _ => img,
    }
}

fn is_16bit(img: &DynamicImage) -> bool {
    img.color().bytes_per_pixel() / img.color().channel_count() >= 2
}

/// `[3, H, W]` in `[0, 1]`, bilinearly resized to `size x size` if given.
pub fn load_rgb(path: &Path, size: Option<usize>) -> Result<Tensor<f32>> {
    let img = resized(open(path)?, size);
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    if is_16bit(&img) {
        for (p, px) in img.to_rgb16().pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + p] = px[c] as f32 / 65535.0;
            }
        }
    } else {
        for (p, px) in img.to_rgb8().pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + p] = px[c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// `[1, H, W]` in `[0, 1]`, normalised by the file's bit depth.
pub fn load_depth(path: &Path, size: Option<usize>) -> Result<Tensor<f32>> {
    let img = resized(open(path)?, size);
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = if is_16bit(&img) {
        img.to_luma16().pixels().map(|p| p[0] as f32 / 65535.0).collect()
    } else {
        img.to_luma8().pixels().map(|p| p[0] as f32 / 255.0).collect()
    };
    Tensor::new(&[1, h, w], data)
}

/// Binary mask, thresholded at half intensity.
pub fn load_mask(path: &Path, size: Option<usize>) -> Result<Vec<f32>> {
    let img = resized(open(path)?, size);
    Ok(img
        .to_luma8()
        .pixels()
        .map(|p| if p[0] >= 128 { 1.0 } else { 0.0 })
        .collect())
}

fn save(img: impl Into<DynamicImage>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.into().save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// `(height, width)` of an image file without decoding it.
pub fn dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((h as usize, w as usize))
}

/// Bilinear resize of a single-channel `height x width` map.
pub fn resize_map(map: &[f32], height: usize, width: usize, to_h: usize, to_w: usize) -> Result<Vec<f32>> {
    if (height, width) == (to_h, to_w) {
        return Ok(map.to_vec());
    }
    let img: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_vec(width as u32, height as u32, map.to_vec())
        .ok_or_else(|| Error::Param(format!("{} values for a {height}x{width} map", map.len())))?;
    Ok(image::imageops::resize(&img, to_w as u32, to_h as u32, FilterType::Triangle).into_raw())
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[0, 1]` map as 8-bit grayscale, `round(v * 255)`.
pub fn save_gray(path: &Path, map: &[f32], height: usize, width: usize) -> Result<()> {
    let img = GrayImage::from_vec(width as u32, height as u32, map.iter().map(|&v| to_u8(v)).collect())
        .ok_or_else(|| Error::Param(format!("{} values for a {height}x{width} image", map.len())))?;
    save(img, path)
}

pub fn save_rgb(path: &Path, rgb: &Tensor<f32>) -> Result<()> {
    let (h, w) = (rgb.dim(1), rgb.dim(2));
    let plane = h * w;
    let d = rgb.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([to_u8(d[p]), to_u8(d[plane + p]), to_u8(d[2 * plane + p])])
    });
    save(img, path)
}

/// Writes depth as 16-bit grayscale.
pub fn save_depth(path: &Path, depth: &Tensor<f32>) -> Result<()> {
    let (h, w) = (depth.dim(1), depth.dim(2));
    let px = depth
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_vec(w as u32, h as u32, px)
        .ok_or_else(|| Error::Param("depth buffer size".into()))?;
    save(img, path)
}

pub fn save_rgb_u8(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    let img = RgbImage::from_vec(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::Param("rgb buffer size".into()))?;
    save(img, path)
}

/// Writes samples as `dir/{rgb,depth,gt}/<name>.png`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    for s in samples {
        let file = format!("{}.png", s.name);
        save_rgb(&dir.join("rgb").join(&file), &s.rgb)?;
        save_depth(&dir.join("depth").join(&file), &s.depth)?;
        if let Some(gt) = &s.gt {
            let (h, w) = s.size();
            save_gray(&dir.join("gt").join(&file), gt, h, w)?;
        }
    }
    Ok(())
}

fn pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

/// Reads `dir/rgb/*.png` with matching `depth/` and (if `with_gt`) `gt/`
/// files, resized to `size x size`. Samples are ordered by file name.
pub fn load_dataset(dir: &Path, size: usize, with_gt: bool) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for rgb_path in pngs(&dir.join("rgb"))? {
        let stem = rgb_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let file = format!("{stem}.png");
        let find = |sub: &str| -> Result<PathBuf> {
            let p = dir.join(sub).join(&file);
            if p.exists() {
                Ok(p)
            } else {
                Err(Error::Param(format!("`{}` has no matching {sub}/{file}", rgb_path.display())))
            }
        };
        let gt = if with_gt {
            Some(load_mask(&find("gt")?, Some(size))?)
        } else {
            None
        };
        samples.push(Sample {
            name: stem,
            rgb: load_rgb(&rgb_path, Some(size))?,
            depth: load_depth(&find("depth")?, Some(size))?,
            gt,
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(samples)
}
