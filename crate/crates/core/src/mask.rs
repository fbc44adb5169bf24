//! Hole masks, facial component geometry, feature-level mask pyramids and
//! valid-pixel compositing.
//!
//! Masks follow the convention 1 = valid pixel, 0 = hole.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest hole side as a fraction of the image side (94 px on 256).
pub const MIN_HOLE_SIDE_FRACTION: f64 = 0.367;
/// Smallest admissible hole area as a fraction of the image area.
pub const MIN_HOLE_AREA_FRACTION: f64 = 0.135;
/// Largest admissible hole area as a fraction of the image area.
pub const MAX_HOLE_AREA_FRACTION: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub const fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.bottom() && col >= self.left && col < self.right()
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.top < other.bottom()
            && other.top < self.bottom()
            && self.left < other.right()
            && other.left < self.right()
    }

    /// Split into four equal quadrants in row-major order. Sides must be even.
    pub fn quadrants(&self) -> Result<[Rect; 4]> {
        if self.height < 2 || self.width < 2 || self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(invalid(format!(
                "cannot split {}x{} region into equal quadrants",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / 2, self.width / 2);
        Ok([
            Rect::new(self.top, self.left, h, w),
            Rect::new(self.top, self.left + w, h, w),
            Rect::new(self.top + h, self.left, h, w),
            Rect::new(self.top + h, self.left + w, h, w),
        ])
    }

    /// The central `side/2` square of a `side × side` canvas.
    pub fn central(side: usize) -> Rect {
        Rect::new(side / 4, side / 4, side / 2, side / 2)
    }
}

/// Binary validity map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn all_valid(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![1; height * width],
        }
    }

    pub fn all_hole(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(shape_err(
                "mask",
                format!("{} bits for {height}x{width}", bits.len()),
            ));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(invalid("mask values must be exactly 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    /// Valid everywhere except inside `hole`.
    pub fn with_hole(height: usize, width: usize, hole: Rect) -> Result<Self> {
        if hole.bottom() > height || hole.right() > width {
            return Err(invalid(format!("hole {hole:?} outside {height}x{width}")));
        }
        let mut m = Self::all_valid(height, width);
        for r in hole.top..hole.bottom() {
            m.bits[r * width + hole.left..r * width + hole.right()].fill(0);
        }
        Ok(m)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col] == 1
    }

    pub fn hole_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }

    pub fn hole_fraction(&self) -> f64 {
        self.hole_count() as f64 / self.bits.len() as f64
    }

    /// Bounding box of the hole pixels, `None` when there is no hole.
    pub fn hole_bbox(&self) -> Option<Rect> {
        let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.bits[r * self.width + c] == 0 {
                    top = top.min(r);
                    left = left.min(c);
                    bottom = bottom.max(r + 1);
                    right = right.max(c + 1);
                }
            }
        }
        (top != usize::MAX).then(|| Rect::new(top, left, bottom - top, right - left))
    }

    /// `[1, 1, H, W]` tensor of the mask values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, 1, self.height, self.width],
            self.bits
                .iter()
                .map(|&b| if b == 1 { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("mask dimensions are consistent")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Axis-aligned hole at a random position.
    RandomRect,
    /// The central `side/2` square.
    Center,
    /// Free-form hole read from an 8-bit grayscale image, or from a
    /// seed-selected image of a directory.
    Irregular(std::path::PathBuf),
}

impl MaskMode {
    pub fn is_irregular(&self) -> bool {
        matches!(self, MaskMode::Irregular(_))
    }
}

/// Even hole side range `[lo, hi]` for a square canvas.
pub fn hole_side_range(side: usize) -> Result<(usize, usize)> {
    let lo = (MIN_HOLE_SIDE_FRACTION * side as f64).ceil() as usize;
    let lo = lo + lo % 2;
    let hi = side / 2;
    let hi = hi - hi % 2;
    if lo < 2 || lo > hi || side < 2 * lo {
        return Err(invalid(format!(
            "image side {side} too small for random holes"
        )));
    }
    Ok((lo, hi))
}

/// Random rectangular hole drawn from `rng`.
///
/// Sides are even numbers in [`hole_side_range`]; pairs whose area falls below
/// [`MIN_HOLE_AREA_FRACTION`] of the canvas are redrawn.
pub fn random_rect_hole<R: Rng + ?Sized>(rng: &mut R, side: usize) -> Result<Rect> {
    let (lo, hi) = hole_side_range(side)?;
    let evens = (hi - lo) / 2 + 1;
    let min_area = MIN_HOLE_AREA_FRACTION * (side * side) as f64;
    loop {
        let h = lo + 2 * rng.random_range(0..evens);
        let w = lo + 2 * rng.random_range(0..evens);
        if ((h * w) as f64) < min_area {
            continue;
        }
        let top = rng.random_range(0..=side - h);
        let left = rng.random_range(0..=side - w);
        return Ok(Rect::new(top, left, h, w));
    }
}

/// Generate the training/evaluation hole mask for one image.
pub fn gen_hole_mask(seed: u64, side: usize, mode: &MaskMode) -> Result<Mask> {
    match mode {
        MaskMode::RandomRect => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hole = random_rect_hole(&mut rng, side)?;
            Mask::with_hole(side, side, hole)
        }
        MaskMode::Center => Mask::with_hole(side, side, Rect::central(side)),
        MaskMode::Irregular(path) if path.is_dir() => {
            let mut files: Vec<_> = std::fs::read_dir(path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            if files.is_empty() {
                return Err(invalid(format!("no PNG masks in {}", path.display())));
            }
            files.sort();
            load_irregular_mask(&files[(seed % files.len() as u64) as usize], side)
        }
        MaskMode::Irregular(path) => load_irregular_mask(path, side),
    }
}

/// Read an 8-bit grayscale mask image; pixels ≥ 128 are valid.
pub fn load_irregular_mask(path: &Path, side: usize) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| invalid(format!("unreadable mask file {}: {e}", path.display())))?;
    use image::DynamicImage as D;
    let gray = match img {
        D::ImageLuma8(g) => g,
        D::ImageRgb8(_) | D::ImageRgba8(_) | D::ImageLumaA8(_) => img.to_luma8(),
        other => {
            return Err(invalid(format!(
                "mask file {} is not 8-bit ({:?})",
                path.display(),
                other.color()
            )))
        }
    };
    if gray.width() as usize != side || gray.height() as usize != side {
        return Err(invalid(format!(
            "mask file {} is {}x{}, expected {side}x{side}",
            path.display(),
            gray.width(),
            gray.height()
        )));
    }
    let bits = gray.pixels().map(|p| u8::from(p.0[0] >= 128)).collect();
    Mask::from_bits(side, side, bits)
}

/// One feature resolution of a [`MaskPyramid`].
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub side: usize,
    pub mask: Mask,
    /// Hole positions (row-major feature indices).
    pub foreground: Arc<Vec<usize>>,
    /// Valid positions (row-major feature indices).
    pub background: Arc<Vec<usize>>,
}

impl PyramidLevel {
    pub fn n_foreground(&self) -> usize {
        self.foreground.len()
    }

    pub fn n_background(&self) -> usize {
        self.background.len()
    }
}

/// The hole mask resampled to each attention feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid {
    pub levels: Vec<PyramidLevel>,
}

impl MaskPyramid {
    pub fn level(&self, side: usize) -> Option<&PyramidLevel> {
        self.levels.iter().find(|l| l.side == side)
    }
}

/// Nearest-neighbour downsampling of `mask` to every side in `levels`.
///
/// Feature cell `(i, j)` at factor `f` samples image pixel `(i·f + f/2, j·f + f/2)`.
pub fn build_pyramid(mask: &Mask, levels: &[usize]) -> Result<MaskPyramid> {
    if mask.height != mask.width {
        return Err(invalid("mask pyramids need square masks"));
    }
    let side = mask.height;
    let mut out = Vec::with_capacity(levels.len());
    for &level in levels {
        if level == 0 || side % level != 0 {
            return Err(invalid(format!(
                "feature side {level} does not divide image side {side}"
            )));
        }
        let f = side / level;
        let mut bits = Vec::with_capacity(level * level);
        let (mut fg, mut bg) = (Vec::new(), Vec::new());
        for i in 0..level {
            for j in 0..level {
                let b = mask.bits[(i * f + f / 2) * side + j * f + f / 2];
                bits.push(b);
                if b == 0 {
                    fg.push(i * level + j);
                } else {
                    bg.push(i * level + j);
                }
            }
        }
        out.push(PyramidLevel {
            side: level,
            mask: Mask::from_bits(level, level, bits)?,
            foreground: Arc::new(fg),
            background: Arc::new(bg),
        });
    }
    Ok(MaskPyramid { levels: out })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    LeftEye,
    RightEye,
    Nose,
    Mouth,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::LeftEye,
        Component::RightEye,
        Component::Nose,
        Component::Mouth,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Component::LeftEye => "left_eye",
            Component::RightEye => "right_eye",
            Component::Nose => "nose",
            Component::Mouth => "mouth",
        }
    }
}

/// Per-image landmark centers `(row, col)` of the four components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentCenters {
    pub left_eye: [f64; 2],
    pub right_eye: [f64; 2],
    pub nose: [f64; 2],
    pub mouth: [f64; 2],
}

impl ComponentCenters {
    /// Build from a `component key → [row, col]` map, rejecting missing keys.
    pub fn from_map(map: &HashMap<String, [f64; 2]>) -> Result<Self> {
        let get = |c: Component| {
            map.get(c.key())
                .copied()
                .ok_or_else(|| invalid(format!("missing component `{}`", c.key())))
        };
        Ok(Self {
            left_eye: get(Component::LeftEye)?,
            right_eye: get(Component::RightEye)?,
            nose: get(Component::Nose)?,
            mouth: get(Component::Mouth)?,
        })
    }

    pub fn get(&self, c: Component) -> [f64; 2] {
        match c {
            Component::LeftEye => self.left_eye,
            Component::RightEye => self.right_eye,
            Component::Nose => self.nose,
            Component::Mouth => self.mouth,
        }
    }

    /// Rescale coordinates from a `from`-sided image to a `to`-sided one.
    pub fn rescaled(&self, from: usize, to: usize) -> Self {
        let s = to as f64 / from as f64;
        let f = |p: [f64; 2]| [p[0] * s, p[1] * s];
        Self {
            left_eye: f(self.left_eye),
            right_eye: f(self.right_eye),
            nose: f(self.nose),
            mouth: f(self.mouth),
        }
    }
}

/// Fixed crop sizes `(rows, cols)` per component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSizes {
    pub eye: (usize, usize),
    pub nose: (usize, usize),
    pub mouth: (usize, usize),
}

impl Default for ComponentSizes {
    fn default() -> Self {
        Self {
            eye: (48, 48),
            nose: (48, 48),
            mouth: (48, 64),
        }
    }
}

impl ComponentSizes {
    /// Defaults scaled from the 256 canvas, never below `min_side`.
    pub fn for_side(side: usize, min_side: usize) -> Self {
        let d = Self::default();
        let s = |(h, w): (usize, usize)| {
            let f = |v: usize| ((v * side) as f64 / 256.0).round().max(min_side as f64) as usize;
            (f(h).min(side), f(w).min(side))
        };
        Self {
            eye: s(d.eye),
            nose: s(d.nose),
            mouth: s(d.mouth),
        }
    }

    pub fn get(&self, c: Component) -> (usize, usize) {
        match c {
            Component::LeftEye | Component::RightEye => self.eye,
            Component::Nose => self.nose,
            Component::Mouth => self.mouth,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentGeometry {
    pub centers: ComponentCenters,
    /// Indexed in [`Component::ALL`] order.
    pub rects: [Rect; 4],
    /// `M₂…M₅`: 0 inside the matching rect, 1 elsewhere.
    pub masks: [Mask; 4],
}

impl ComponentGeometry {
    pub fn rect(&self, c: Component) -> Rect {
        self.rects[c as usize]
    }
}

fn centered_rect(center: [f64; 2], size: (usize, usize), side: usize) -> Result<Rect> {
    let (h, w) = size;
    if h == 0 || w == 0 || h > side || w > side {
        return Err(invalid(format!(
            "component size {h}x{w} does not fit a {side} image"
        )));
    }
    let place = |c: f64, len: usize| -> usize {
        let start = c.round() as i64 - (len / 2) as i64;
        start.clamp(0, (side - len) as i64) as usize
    };
    Ok(Rect::new(place(center[0], h), place(center[1], w), h, w))
}

/// Fixed-size rectangles centred on each landmark, shifted inward at borders.
pub fn component_geometry(
    centers: &ComponentCenters,
    side: usize,
    sizes: &ComponentSizes,
) -> Result<ComponentGeometry> {
    let mut rects = [Rect::new(0, 0, 1, 1); 4];
    for c in Component::ALL {
        let p = centers.get(c);
        if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] < side as f64 && p[1] < side as f64) {
            return Err(invalid(format!(
                "{} center {p:?} outside the {side} image",
                c.key()
            )));
        }
        rects[c as usize] = centered_rect(p, sizes.get(c), side)?;
    }
    let masks = [
        Mask::with_hole(side, side, rects[0])?,
        Mask::with_hole(side, side, rects[1])?,
        Mask::with_hole(side, side, rects[2])?,
        Mask::with_hole(side, side, rects[3])?,
    ];
    Ok(ComponentGeometry {
        centers: *centers,
        rects,
        masks,
    })
}

/// The four equal quadrants of the hole bounding box.
pub fn subdivide_hole(mask: &Mask) -> Result<[Rect; 4]> {
    let bbox = mask
        .hole_bbox()
        .ok_or_else(|| invalid("mask has no hole to subdivide"))?;
    bbox.quadrants()
}

/// Region judged by the local and subdivision critics: the hole bounding box,
/// or the fixed central square for free-form masks.
pub fn local_region(mask: &Mask, irregular: bool) -> Result<Rect> {
    if irregular {
        return Ok(Rect::central(mask.height));
    }
    mask.hole_bbox().ok_or_else(|| invalid("mask has no hole"))
}

/// `mask ⊙ input + (1 − mask) ⊙ output`, broadcasting the mask over every
/// leading plane of `[.., H, W]` tensors.
pub fn composite_valid<T: Scalar>(
    output: &Tensor<T>,
    input: &Tensor<T>,
    mask: &Mask,
) -> Result<Tensor<T>> {
    if output.shape() != input.shape() {
        return Err(shape_err(
            "composite_valid",
            format!("{:?} vs {:?}", output.shape(), input.shape()),
        ));
    }
    let s = output.shape();
    if s.len() < 2 || s[s.len() - 2] != mask.height || s[s.len() - 1] != mask.width {
        return Err(shape_err(
            "composite_valid",
            format!("{s:?} vs mask {}x{}", mask.height, mask.width),
        ));
    }
    let plane = mask.height * mask.width;
    let data = output
        .data()
        .iter()
        .zip(input.data())
        .enumerate()
        .map(|(i, (&o, &v))| if mask.bits[i % plane] == 1 { v } else { o })
        .collect();
    Tensor::new(s, data).map_err(|_| Error::Invalid("composite".into()))
}

/// Per-pixel weight `1 + Σᵢ (1 − Mᵢ)` of the weighted reconstruction loss.
pub fn recon_weight_map(masks: &[&Mask]) -> Result<Vec<u8>> {
    let first = masks.first().ok_or_else(|| invalid("no masks"))?;
    let mut w = vec![1u8; first.bits.len()];
    for m in masks {
        if m.height != first.height || m.width != first.width {
            return Err(shape_err("recon_weight_map", "mask sizes differ"));
        }
        for (wi, &b) in w.iter_mut().zip(&m.bits) {
            *wi += 1 - b;
        }
    }
    Ok(w)
}
