//! Directories of PNG or PGM files laid out as `<root>/<label>/<file>`.

use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage};

use super::{tanh_to_byte, LabeledImages, PixelRange};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Bilinear resampling of one `h x w` plane with half-pixel centres and
/// edge clamping.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let coords = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = coords(h, out_h);
    let xs = coords(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            !p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with('.'))
        })
        .collect();
    v.sort();
    Ok(v)
}

fn decode(path: &Path, channels: usize, size: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::parse(path, format!("cannot decode image: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planes: Vec<Vec<f32>> = match channels {
        1 => vec![img.to_luma8().into_raw().into_iter().map(f32::from).collect()],
        3 => {
            let raw = img.to_rgb8().into_raw();
            (0..3)
                .map(|c| raw.iter().skip(c).step_by(3).map(|&b| f32::from(b)).collect())
                .collect()
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "image directories support 1 or 3 channels, not {other}"
            )))
        }
    };
    let mut out = Vec::with_capacity(channels * size * size);
    for p in planes {
        let resized = if (h, w) == (size, size) {
            p
        } else {
            resize_bilinear(&p, h, w, size, size)
        };
        out.extend(resized.into_iter().map(|v| v / 127.5 - 1.0));
    }
    Ok(out)
}

/// Reads every image below `dir`, resized to `target_size` square and
/// scaled to `[-1, 1]`. Each subdirectory is a class: numeric names are used
/// as labels directly, otherwise classes are numbered in sorted order.
/// Files directly under `dir` are unlabeled and get label 0.
pub fn read_image_dir(dir: &Path, channels: usize, target_size: usize) -> Result<LabeledImages<f32>> {
    if target_size == 0 {
        return Err(Error::InvalidArgument("target size must be positive".into()));
    }
    let entries = sorted_entries(dir)?;
    let (subdirs, loose): (Vec<PathBuf>, Vec<PathBuf>) = entries.into_iter().partition(|p| p.is_dir());
    let names: Vec<String> = subdirs
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    let numeric: Option<Vec<u32>> = names.iter().map(|n| n.parse().ok()).collect();
    let class_labels: Vec<u32> = numeric.unwrap_or_else(|| (0..names.len() as u32).collect());

    let mut files: Vec<(PathBuf, u32, String)> = Vec::new();
    if !loose.is_empty() {
        log::warn!(
            "{} unlabeled image(s) directly under {} get label 0",
            loose.len(),
            dir.display()
        );
        for p in loose {
            let id = p.file_name().unwrap().to_string_lossy().into_owned();
            files.push((p, 0, id));
        }
    }
    for ((sub, name), &label) in subdirs.iter().zip(&names).zip(&class_labels) {
        for p in sorted_entries(sub)?.into_iter().filter(|p| p.is_file()) {
            let id = format!("{name}/{}", p.file_name().unwrap().to_string_lossy());
            files.push((p, label, id));
        }
    }
    if files.is_empty() {
        return Err(Error::parse(dir, "no image files found"));
    }
    let mut pixels = Vec::with_capacity(files.len() * channels * target_size * target_size);
    for (p, _, _) in &files {
        pixels.extend(decode(p, channels, target_size)?);
    }
    let n = files.len();
    LabeledImages::new(
        Tensor::new(&[n, channels, target_size, target_size], pixels)?,
        files.iter().map(|f| f.1).collect(),
        files.into_iter().map(|f| f.2).collect(),
        PixelRange::Tanh,
    )
}

/// Writes `[-1, 1]` images as `<root>/<label>/<index>.pgm` (one channel) or
/// `.png` (three channels).
pub fn write_image_dir<T: Scalar>(data: &LabeledImages<T>, root: &Path) -> Result<()> {
    let (c, h, w) = data.image_dims();
    let (ext, color) = match c {
        1 => ("pgm", ColorType::L8),
        3 => ("png", ColorType::Rgb8),
        other => {
            return Err(Error::InvalidArgument(format!(
                "image directories support 1 or 3 channels, not {other}"
            )))
        }
    };
    let plane = h * w;
    for (i, &label) in data.labels.iter().enumerate() {
        let sub = root.join(label.to_string());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let img = &data.images.data()[i * c * plane..(i + 1) * c * plane];
        let mut buf = vec![0u8; c * plane];
        for ch in 0..c {
            for px in 0..plane {
                buf[px * c + ch] = tanh_to_byte(img[ch * plane + px]);
            }
        }
        let path = sub.join(format!("{i:06}.{ext}"));
        let dynimg = match color {
            ColorType::L8 => image::GrayImage::from_raw(w as u32, h as u32, buf).map(DynamicImage::ImageLuma8),
            _ => image::RgbImage::from_raw(w as u32, h as u32, buf).map(DynamicImage::ImageRgb8),
        }
        .expect("buffer matches dimensions");
        dynimg
            .save(&path)
            .map_err(|e| Error::parse(&path, format!("cannot encode image: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_identity() {
        let src: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(resize_bilinear(&src, 3, 4, 3, 4), src);
    }

    #[test]
    fn constant_plane_stays_constant() {
        let src = vec![77.0f32; 64 * 64];
        assert!(resize_bilinear(&src, 64, 64, 32, 32).iter().all(|&v| v == 77.0));
    }

    #[test]
    fn labeled_and_unlabeled_layout() {
        let dir = tempfile::tempdir().unwrap();
        for (sub, n) in [("normal", 3), ("tumor", 2)] {
            std::fs::create_dir(dir.path().join(sub)).unwrap();
            for i in 0..n {
                image::GrayImage::from_pixel(8, 8, image::Luma([i as u8 * 40]))
                    .save(dir.path().join(sub).join(format!("{i}.png")))
                    .unwrap();
            }
        }
        let d = read_image_dir(dir.path(), 1, 4).unwrap();
        assert_eq!(d.len(), 5);
        assert_eq!(d.labels, vec![0, 0, 0, 1, 1]);
        assert_eq!(d.ids[3], "tumor/0.png");

        let flat = tempfile::tempdir().unwrap();
        image::GrayImage::new(4, 4).save(flat.path().join("a.pgm")).unwrap();
        let d = read_image_dir(flat.path(), 1, 4).unwrap();
        assert_eq!(d.labels, vec![0]);
    }

    #[test]
    fn undecodable_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("broken.png"), b"not an image").unwrap();
        let err = read_image_dir(dir.path(), 1, 4).unwrap_err().to_string();
        assert!(err.contains("broken.png"), "{err}");
    }
}
