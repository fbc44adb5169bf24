//! Image, landmark and dataset files.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Rgb, RgbImage};
use log::{info, warn};
use oracle_attn::mask::ComponentCenters;
use oracle_attn::train::Sample;
use oracle_attn::{Scalar, Tensor};

use crate::fail::{Fail, Outcome};

pub const LANDMARKS_REQUIRED: &str = "landmarks required for component critics";

/// Read an 8-bit image as `[1, 3, side, side]` in `[0, 1]`, resizing
/// bilinearly when needed. Grayscale is replicated to three channels and an
/// alpha channel is dropped, each with a notice; other layouts are rejected.
pub fn load_image<T: Scalar>(path: &Path, side: usize) -> Outcome<Tensor<T>> {
    let img = image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| Fail::Data(format!("{}: {e}", path.display())))?
        .decode()
        .map_err(|e| Fail::Data(format!("{}: {e}", path.display())))?;
    let rgb = match img {
        DynamicImage::ImageRgb8(i) => i,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            info!("{}: grayscale, replicated to 3 channels", path.display());
            img.to_rgb8()
        }
        DynamicImage::ImageRgba8(_) => {
            info!("{}: alpha channel dropped", path.display());
            img.to_rgb8()
        }
        other => {
            return Err(Fail::Data(format!(
                "{}: unsupported pixel layout {:?}; 8-bit RGB or grayscale required",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    let plane = side * side;
    let mut data = vec![T::zero(); 3 * plane];
    if w as usize == side && h as usize == side {
        for (i, p) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = T::from_f64c(p.0[c] as f64 / 255.0);
            }
        }
    } else {
        if w != h {
            warn!(
                "{}: {w}x{h} is not square, aspect ratio not kept",
                path.display()
            );
        }
        let f = DynamicImage::ImageRgb8(rgb).to_rgb32f();
        let r = imageops::resize(&f, side as u32, side as u32, FilterType::Triangle);
        for (i, p) in r.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = T::from_f64c((p.0[c] as f64).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Tensor::new(&[1, 3, side, side], data)?)
}

/// `[3, H, W]` or `[1, 3, H, W]` to an 8-bit RGB image, clamped to `[0, 1]`.
pub fn to_rgb8<T: Scalar>(t: &Tensor<T>) -> Outcome<RgbImage> {
    let (h, w) = match *t.shape() {
        [3, h, w] | [1, 3, h, w] => (h, w),
        ref s => {
            return Err(Fail::Data(format!(
                "cannot save a tensor of shape {s:?} as an image"
            )))
        }
    };
    let plane = h * w;
    let d = t.data();
    let px = |v: T| (v.to_f64c().clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([px(d[i]), px(d[plane + i]), px(d[2 * plane + i])])
    }))
}

pub fn save_image<T: Scalar>(t: &Tensor<T>, path: &Path) -> Outcome<()> {
    to_rgb8(t)?
        .save(path)
        .map_err(|e| Fail::Data(format!("cannot write {}: {e}", path.display())))
}

/// Tile equally sized `[1, 3, H, W]` images into rows.
pub fn grid<T: Scalar>(rows: &[Vec<Tensor<T>>]) -> Outcome<Tensor<T>> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Fail::Data("empty sample grid".into()))?;
    let (h, w) = (first.shape()[2], first.shape()[3]);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (gh, gw) = (rows.len() * h, cols * w);
    let mut out = vec![T::one(); 3 * gh * gw];
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if img.shape() != first.shape() {
                return Err(Fail::Data("sample grid images differ in size".into()));
            }
            let d = img.data();
            for ch in 0..3 {
                for y in 0..h {
                    let src = ch * h * w + y * w;
                    let dst = ch * gh * gw + (r * h + y) * gw + c * w;
                    out[dst..dst + w].copy_from_slice(&d[src..src + w]);
                }
            }
        }
    }
    Ok(Tensor::new(&[1, 3, gh, gw], out)?)
}

/// Landmark file: `{ "<file name>": { "left_eye": [row, col], ... } }`.
pub fn load_landmarks(path: &Path) -> Outcome<HashMap<String, ComponentCenters>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Fail::Data(format!(
            "{LANDMARKS_REQUIRED}: cannot read {}: {e}",
            path.display()
        ))
    })?;
    let raw: HashMap<String, HashMap<String, [f64; 2]>> = serde_json::from_str(&text)
        .map_err(|e| Fail::Data(format!("landmark file {}: {e}", path.display())))?;
    raw.into_iter()
        .map(|(name, m)| {
            let c = ComponentCenters::from_map(&m)
                .map_err(|e| Fail::Data(format!("landmarks of {name}: {e}")))?;
            Ok((name, c))
        })
        .collect()
}

/// PNG files of `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Outcome<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| {
            Fail::Data(format!(
                "cannot read image directory {}: {e}",
                dir.display()
            ))
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Every PNG of `dir` with its landmarks; any unreadable image or missing
/// landmark entry fails the whole set.
pub fn load_dataset<T: Scalar>(
    dir: &Path,
    landmarks: &HashMap<String, ComponentCenters>,
    side: usize,
) -> Outcome<Vec<Sample<T>>> {
    let files = list_pngs(dir)?;
    if files.is_empty() {
        return Err(Fail::Data(format!("no PNG images in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| {
            let name = file_name(p);
            let centers = *landmarks
                .get(&name)
                .ok_or_else(|| Fail::Data(format!("{LANDMARKS_REQUIRED}: no entry for {name}")))?;
            Ok(Sample {
                image: load_image(p, side)?,
                name,
                centers,
            })
        })
        .collect()
}

/// Write `samples` as `<name>.png` plus a `landmarks.json` covering them.
pub fn write_dataset<T: Scalar>(dir: &Path, samples: &[Sample<T>]) -> Outcome<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut lm = serde_json::Map::new();
    for s in samples {
        let file = format!("{}.png", s.name);
        save_image(&s.image, &dir.join(&file))?;
        lm.insert(
            file,
            serde_json::to_value(s.centers).expect("centres serialize"),
        );
    }
    let path = dir.join("landmarks.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&lm).expect("map serializes") + "\n",
    )?;
    Ok(path)
}
