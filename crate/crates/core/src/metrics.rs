//! Image quality metrics on `[0, 1]` images and the evaluation report.

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{invalid, shape_err, Result};
use crate::mask::{composite_valid, Mask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(invalid(format!("{op}: empty images")));
    }
    Ok(())
}

/// `100 · mean|a − b|` over all pixels and channels.
pub fn l1_percent<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("l1_percent", a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64c() - y.to_f64c()).abs())
        .sum();
    Ok(100.0 * s / a.len() as f64)
}

/// `10 · log10(1 / MSE)`; identical images give `+∞`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64c() - y.to_f64c()).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Channel-mean luminance planes of a `[C, H, W]` or `[1, C, H, W]` image.
fn luminance<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = match img.shape() {
        &[c, h, w] => (c, h, w),
        &[1, c, h, w] => (c, h, w),
        s => {
            return Err(shape_err(
                "ssim",
                format!("expected one [C, H, W] image, got {s:?}"),
            ))
        }
    };
    let plane = h * w;
    let d = img.data();
    let lum = (0..plane)
        .map(|i| (0..c).map(|ch| d[ch * plane + i].to_f64c()).sum::<f64>() / c as f64)
        .collect();
    Ok((h, w, lum))
}

/// Separable valid-mode Gaussian filtering.
fn filter(h: usize, w: usize, x: &[f64], g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..k).map(|t| g[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| g[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Single-scale SSIM on channel-mean luminance, averaged over all valid
/// 11×11 window positions.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (h, w, x) = luminance(a)?;
    let (_, _, y) = luminance(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(format!(
            "ssim: {h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let g = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mx = filter(h, w, &x, &g);
    let my = filter(h, w, &y, &g);
    let sxx = filter(h, w, &xx, &g);
    let syy = filter(h, w, &yy, &g);
    let sxy = filter(h, w, &xy, &g);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad dB value `{t}`"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub name: String,
    pub l1_percent: f64,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ssim: f64,
    /// Reserved; never computed here.
    pub lpips: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub l1_percent: f64,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mask_mode: String,
    pub count: usize,
    pub images: Vec<ImageScores>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    /// Unweighted means over `images`.
    pub fn from_images(mask_mode: impl Into<String>, images: Vec<ImageScores>) -> Result<Self> {
        if images.is_empty() {
            return Err(invalid("evaluation set is empty"));
        }
        let n = images.len() as f64;
        let mean = |f: fn(&ImageScores) -> f64| images.iter().map(f).sum::<f64>() / n;
        let aggregate = Aggregate {
            l1_percent: mean(|s| s.l1_percent),
            psnr: mean(|s| s.psnr),
            ssim: mean(|s| s.ssim),
            lpips: None,
        };
        Ok(Self {
            mask_mode: mask_mode.into(),
            count: images.len(),
            images,
            aggregate,
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<32} {:>9} {:>10} {:>8} {:>7}\n",
            "image", "L1 (%)", "PSNR (dB)", "SSIM", "LPIPS"
        );
        let row = |name: &str, l1: f64, p: f64, ss: f64| {
            format!("{name:<32} {l1:>9.4} {p:>10.4} {ss:>8.4} {:>7}\n", "-")
        };
        for im in &self.images {
            s += &row(&im.name, im.l1_percent, im.psnr, im.ssim);
        }
        let a = &self.aggregate;
        s += &row(
            &format!("mean ({} images)", self.count),
            a.l1_percent,
            a.psnr,
            a.ssim,
        );
        s
    }
}

/// Score one completion: composite the valid pixels back, then compare.
pub fn score_image<T: Scalar>(
    name: &str,
    output: &Tensor<T>,
    gt: &Tensor<T>,
    mask: &Mask,
) -> Result<ImageScores> {
    let comp = composite_valid(output, gt, mask)?;
    Ok(ImageScores {
        name: name.to_string(),
        l1_percent: l1_percent(&comp, gt)?,
        psnr: psnr(&comp, gt)?,
        ssim: ssim(&comp, gt)?,
        lpips: None,
    })
}
