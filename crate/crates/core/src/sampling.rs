//! Object cropping and augmented view sampling.
//!
//! A view is cut from a frame by a random crop, optionally warped by a
//! random perspective transform and optionally stripped of its background.
//! Each of these is linear in the frame pixels, and the chain is recorded
//! in a [`ViewTransform`] so loss gradients can be pulled back to the frame.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::{FrameRole, FrameSet};
use crate::embedding::ViewImage;
use crate::error::{Error, Result};
use crate::imageops::{crop, crop_adjoint, crop_mask, Homography, PerspectiveWarp, Rect};

/// One linear stage applied after the crop.
#[derive(Clone, Debug, PartialEq)]
pub enum ViewStage {
    Perspective(PerspectiveWarp),
    /// Pixelwise multiplier (1 keeps a pixel, 0 blacks it out).
    Mask(Array2<f64>),
}

/// The linear map from a frame to one of its views.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewTransform {
    pub crop: Rect,
    pub stages: Vec<ViewStage>,
}

impl ViewTransform {
    pub fn crop(rect: Rect) -> Self {
        ViewTransform {
            crop: rect,
            stages: Vec::new(),
        }
    }

    pub fn apply(&self, frame: ArrayView3<f64>) -> Result<Array3<f64>> {
        let mut img = crop(frame, self.crop)?;
        for stage in &self.stages {
            img = match stage {
                ViewStage::Perspective(w) => w.apply(img.view()),
                ViewStage::Mask(m) => multiply_mask(img, m.view()),
            };
        }
        Ok(img)
    }

    /// Accumulates the frame gradient for a gradient on the view pixels.
    pub fn backward(&self, grad_view: ArrayView3<f64>, frame_grad: &mut Array3<f64>) {
        let mut g = grad_view.to_owned();
        for stage in self.stages.iter().rev() {
            g = match stage {
                ViewStage::Perspective(w) => w.adjoint(g.view()),
                ViewStage::Mask(m) => multiply_mask(g, m.view()),
            };
        }
        crop_adjoint(g.view(), self.crop, frame_grad.view_mut());
    }
}

fn multiply_mask(mut img: Array3<f64>, mask: ArrayView2<f64>) -> Array3<f64> {
    for ch in 0..img.dim().2 {
        let mut plane = img.index_axis_mut(ndarray::Axis(2), ch);
        plane *= &mask;
    }
    img
}

/// Axis-aligned box in source-frame pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BoundingBox {
    pub fn rect(&self) -> Rect {
        Rect::new(self.top, self.left, self.height, self.width)
    }
}

impl From<Rect> for BoundingBox {
    fn from(r: Rect) -> Self {
        BoundingBox {
            top: r.top,
            left: r.left,
            height: r.height,
            width: r.width,
        }
    }
}

/// Inclusive `(r0, c0, r1, c1)` extent of `{alpha > threshold}`.
fn support_extent(alpha: ArrayView2<f64>, threshold: f64) -> Option<(usize, usize, usize, usize)> {
    let mut ext: Option<(usize, usize, usize, usize)> = None;
    for ((r, c), &a) in alpha.indexed_iter() {
        if a > threshold {
            ext = Some(match ext {
                None => (r, c, r, c),
                Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
            });
        }
    }
    ext
}

/// Pixels of padding for a box side of length `len`.
pub fn margin_pixels(len: usize, margin_fraction: f64) -> usize {
    ((margin_fraction * len as f64) - 1e-9).ceil().max(0.0) as usize
}

fn padded_box(ext: (usize, usize, usize, usize), height: usize, width: usize, margin: f64) -> BoundingBox {
    let (r0, c0, r1, c1) = ext;
    let (bh, bw) = (r1 - r0 + 1, c1 - c0 + 1);
    let (ph, pw) = (margin_pixels(bh, margin), margin_pixels(bw, margin));
    let top = r0.saturating_sub(ph);
    let left = c0.saturating_sub(pw);
    let bottom = (r1 + 1 + ph).min(height);
    let right = (c1 + 1 + pw).min(width);
    BoundingBox {
        top,
        left,
        height: bottom - top,
        width: right - left,
    }
}

fn check_margin(margin_fraction: f64) -> Result<()> {
    if !(margin_fraction.is_finite() && margin_fraction >= 0.0) {
        return Err(Error::invalid("margin fraction must be finite and nonnegative"));
    }
    Ok(())
}

/// Tight box around `{alpha > threshold}`, padded on every side by
/// `ceil(margin_fraction * side)` pixels and clamped to the frame.
pub fn object_bounding_box(alpha: ArrayView2<f64>, threshold: f64, margin_fraction: f64) -> Result<BoundingBox> {
    check_margin(margin_fraction)?;
    let (h, w) = alpha.dim();
    let ext = support_extent(alpha, threshold)
        .ok_or_else(|| Error::NoObject(format!("no opacity above {threshold}")))?;
    Ok(padded_box(ext, h, w, margin_fraction))
}

/// One box shared by all frames: the padded union of the per-frame supports.
pub fn union_bounding_box(alpha_maps: &[Array2<f64>], threshold: f64, margin_fraction: f64) -> Result<BoundingBox> {
    check_margin(margin_fraction)?;
    let first = alpha_maps
        .first()
        .ok_or_else(|| Error::invalid("no alpha maps given"))?;
    let (h, w) = first.dim();
    let mut union: Option<(usize, usize, usize, usize)> = None;
    for a in alpha_maps {
        if a.dim() != (h, w) {
            return Err(Error::invalid("alpha maps differ in size"));
        }
        if let Some((r0, c0, r1, c1)) = support_extent(a.view(), threshold) {
            union = Some(match union {
                None => (r0, c0, r1, c1),
                Some((a0, b0, a1, b1)) => (a0.min(r0), b0.min(c0), a1.max(r1), b1.max(c1)),
            });
        }
    }
    let ext = union.ok_or_else(|| Error::NoObject(format!("no opacity above {threshold} in any frame")))?;
    Ok(padded_box(ext, h, w, margin_fraction))
}

pub fn crop_frames(raw: &FrameSet, bbox: BoundingBox) -> Result<FrameSet> {
    let rect = bbox.rect();
    let frames = raw
        .frames
        .iter()
        .map(|f| crop(f.view(), rect))
        .collect::<Result<Vec<_>>>()?;
    let alphas = raw
        .alpha_maps
        .iter()
        .map(|a| crop_mask(a.view(), rect))
        .collect::<Result<Vec<_>>>()?;
    FrameSet::with_indices(frames, alphas, FrameRole::Cropped, raw.indices.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Crop area as a fraction of the frame area.
    pub global_scale_range: [f64; 2],
    pub local_scale_range: [f64; 2],
    /// Crop aspect ratio relative to the frame's own aspect ratio.
    pub aspect_ratio_range: [f64; 2],
    pub perspective_prob: f64,
    pub distortion_range: [f64; 2],
    pub background_removal_prob: f64,
    pub min_object_fraction: f64,
    pub max_resample_attempts: usize,
    /// Opacity above which a pixel counts as object.
    pub object_threshold: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            global_scale_range: [0.9, 1.0],
            local_scale_range: [0.1, 0.5],
            aspect_ratio_range: [0.8, 1.2],
            perspective_prob: 0.5,
            distortion_range: [0.1, 0.5],
            background_removal_prob: 0.5,
            min_object_fraction: 1.0 / 3.0,
            max_resample_attempts: 50,
            object_threshold: 0.5,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi) {
        return Err(Error::Config(format!("{name} = {r:?} must be ordered within [{lo}, {hi}]")));
    }
    Ok(())
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("global_scale_range", self.global_scale_range, f64::MIN_POSITIVE, 1.0)?;
        check_range("local_scale_range", self.local_scale_range, f64::MIN_POSITIVE, 1.0)?;
        check_range("aspect_ratio_range", self.aspect_ratio_range, f64::MIN_POSITIVE, f64::MAX)?;
        check_range("distortion_range", self.distortion_range, 0.0, 1.0)?;
        check_prob("perspective_prob", self.perspective_prob)?;
        check_prob("background_removal_prob", self.background_removal_prob)?;
        check_prob("min_object_fraction", self.min_object_fraction)?;
        check_prob("object_threshold", self.object_threshold)?;
        if self.max_resample_attempts == 0 {
            return Err(Error::Config("max_resample_attempts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub n_global: usize,
    pub n_local: usize,
    pub margin_fraction: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub augmentation: AugmentationConfig,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            n_global: 2,
            n_local: 8,
            margin_fraction: 0.05,
            seed: 0,
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        check_margin(self.margin_fraction).map_err(|e| Error::Config(e.to_string()))?;
        self.augmentation.validate()
    }
}

/// Draws a crop whose area fraction lies in `scale_range`, with the crop's
/// aspect ratio (relative to the frame's) log-uniform within the part of
/// `aspect_range` that keeps it inside the frame.
pub fn sample_crop_rect<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    scale_range: [f64; 2],
    aspect_range: [f64; 2],
    rng: &mut R,
) -> Rect {
    let s = if scale_range[0] < scale_range[1] {
        rng.random_range(scale_range[0]..=scale_range[1])
    } else {
        scale_range[0]
    };
    let lo = aspect_range[0].max(s);
    let hi = aspect_range[1].min(1.0 / s);
    let (lo, hi) = if lo <= hi { (lo, hi) } else { (s.max(lo.min(1.0 / s)), s.max(lo.min(1.0 / s))) };
    let r = if lo < hi {
        rng.random_range(lo.ln()..=hi.ln()).exp()
    } else {
        lo
    };
    let (hf, wf) = (height as f64, width as f64);
    let mut h = ((hf * (s / r).sqrt()).round() as usize).clamp(1, height);
    let mut w = ((wf * (s * r).sqrt()).round() as usize).clamp(1, width);
    fit_area(&mut h, &mut w, height, width, scale_range);
    let top = rng.random_range(0..=height - h);
    let left = rng.random_range(0..=width - w);
    Rect::new(top, left, h, w)
}

/// Nudges rounded crop sides until the area fraction is inside the range.
fn fit_area(h: &mut usize, w: &mut usize, height: usize, width: usize, scale_range: [f64; 2]) {
    let total = (height * width) as f64;
    for _ in 0..(height + width) {
        let frac = (*h * *w) as f64 / total;
        if frac < scale_range[0] {
            // grow the side with more relative room
            if (*h as f64 / height as f64) <= (*w as f64 / width as f64) && *h < height {
                *h += 1;
            } else if *w < width {
                *w += 1;
            } else if *h < height {
                *h += 1;
            } else {
                break;
            }
        } else if frac > scale_range[1] {
            if (*h as f64 / height as f64) >= (*w as f64 / width as f64) && *h > 1 {
                *h -= 1;
            } else if *w > 1 {
                *w -= 1;
            } else if *h > 1 {
                *h -= 1;
            } else {
                break;
            }
        } else {
            break;
        }
    }
}

/// Fraction of `rect` covered by object pixels of `alpha`.
pub fn object_coverage(alpha: ArrayView2<f64>, rect: Rect, threshold: f64) -> f64 {
    let region = alpha.slice(ndarray::s![rect.top..rect.bottom(), rect.left..rect.right()]);
    region.iter().filter(|&&a| a > threshold).count() as f64 / rect.area() as f64
}

fn crop_view(frame: ArrayView3<f64>, alpha: ArrayView2<f64>, frame_index: usize, rect: Rect) -> Result<ViewImage> {
    ViewImage::new(crop(frame, rect)?, Some(crop_mask(alpha, rect)?), frame_index, rect)
}

fn check_frame(frame: ArrayView3<f64>, alpha: ArrayView2<f64>) -> Result<(usize, usize)> {
    let (h, w, c) = frame.dim();
    if h == 0 || w == 0 || c != 3 {
        return Err(Error::invalid(format!("cannot sample views from a {h}x{w}x{c} frame")));
    }
    if alpha.dim() != (h, w) {
        return Err(Error::invalid("alpha map does not match the frame"));
    }
    Ok((h, w))
}

pub fn sample_global_views<R: Rng + ?Sized>(
    frame: ArrayView3<f64>,
    alpha: ArrayView2<f64>,
    frame_index: usize,
    n_global: usize,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<Vec<ViewImage>> {
    let (h, w) = check_frame(frame, alpha)?;
    (0..n_global)
        .map(|_| {
            let rect = sample_crop_rect(h, w, cfg.global_scale_range, cfg.aspect_ratio_range, rng);
            crop_view(frame, alpha, frame_index, rect)
        })
        .collect()
}

/// Local views and the number of them that had to fall back to the
/// centroid crop.
pub fn sample_local_views<R: Rng + ?Sized>(
    frame: ArrayView3<f64>,
    alpha: ArrayView2<f64>,
    frame_index: usize,
    n_local: usize,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(Vec<ViewImage>, usize)> {
    let (h, w) = check_frame(frame, alpha)?;
    let object: Vec<(usize, usize)> = alpha
        .indexed_iter()
        .filter(|(_, &a)| a > cfg.object_threshold)
        .map(|(idx, _)| idx)
        .collect();
    if object.is_empty() {
        return Err(Error::NoObject(format!("frame {frame_index} has no object pixels")));
    }
    let mut views = Vec::with_capacity(n_local);
    let mut fallbacks = 0;
    for _ in 0..n_local {
        let mut accepted = None;
        for _ in 0..cfg.max_resample_attempts {
            let rect = sample_crop_rect(h, w, cfg.local_scale_range, cfg.aspect_ratio_range, rng);
            if object_coverage(alpha, rect, cfg.object_threshold) >= cfg.min_object_fraction {
                accepted = Some(rect);
                break;
            }
        }
        let rect = match accepted {
            Some(r) => r,
            None => {
                fallbacks += 1;
                log::warn!(
                    "frame {frame_index}: no local view with object coverage >= {:.3} after {} attempts, using centroid crop",
                    cfg.min_object_fraction,
                    cfg.max_resample_attempts
                );
                centroid_rect(&object, h, w, cfg.local_scale_range[0])
            }
        };
        views.push(crop_view(frame, alpha, frame_index, rect)?);
    }
    Ok((views, fallbacks))
}

fn centroid_rect(object: &[(usize, usize)], height: usize, width: usize, scale: f64) -> Rect {
    let n = object.len() as f64;
    let cy = object.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let cx = object.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let mut h = ((height as f64 * scale.sqrt()).round() as usize).clamp(1, height);
    let mut w = ((width as f64 * scale.sqrt()).round() as usize).clamp(1, width);
    fit_area(&mut h, &mut w, height, width, [scale, 1.0]);
    let top = ((cy + 0.5 - h as f64 / 2.0).round().max(0.0) as usize).min(height - h);
    let left = ((cx + 0.5 - w as f64 / 2.0).round().max(0.0) as usize).min(width - w);
    Rect::new(top, left, h, w)
}

/// Corner displacements follow the torchvision convention: each corner
/// moves inward by up to `d` times half the side length.
pub fn perspective_endpoints<R: Rng + ?Sized>(height: usize, width: usize, d: f64, rng: &mut R) -> [[f64; 2]; 4] {
    let (wm, hm) = ((width - 1) as f64, (height - 1) as f64);
    let dx = d * (width / 2) as f64;
    let dy = d * (height / 2) as f64;
    let mut draw = |m: f64| if m > 0.0 { rng.random_range(0.0..=m) } else { 0.0 };
    [
        [draw(dx), draw(dy)],
        [wm - draw(dx), draw(dy)],
        [wm - draw(dx), hm - draw(dy)],
        [draw(dx), hm - draw(dy)],
    ]
}

fn corners(height: usize, width: usize) -> [[f64; 2]; 4] {
    let (wm, hm) = ((width - 1) as f64, (height - 1) as f64);
    [[0.0, 0.0], [wm, 0.0], [wm, hm], [0.0, hm]]
}

/// Warps a view so its corners land on `endpoints`; the object mask is
/// warped with the same operator.
pub fn apply_perspective(view: &ViewImage, endpoints: [[f64; 2]; 4]) -> Result<ViewImage> {
    let (h, w) = (view.height(), view.width());
    let start = corners(h, w);
    if endpoints == start {
        return Ok(view.clone());
    }
    let output_to_input = Homography::from_points(endpoints, start)?;
    let warp = PerspectiveWarp::new(h, w, &output_to_input);
    let mut out = view.clone();
    out.pixels = warp.apply(view.pixels.view()).mapv(|v| v.clamp(0.0, 1.0));
    out.object_mask = view
        .object_mask
        .as_ref()
        .map(|m| warp.apply_mask(m.view()).mapv(|v| v.clamp(0.0, 1.0)));
    out.transform.stages.push(ViewStage::Perspective(warp));
    Ok(out)
}

pub fn random_perspective<R: Rng + ?Sized>(view: &ViewImage, cfg: &AugmentationConfig, rng: &mut R) -> Result<ViewImage> {
    if cfg.perspective_prob <= 0.0 || rng.random::<f64>() >= cfg.perspective_prob {
        return Ok(view.clone());
    }
    let [lo, hi] = cfg.distortion_range;
    let d = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    if view.height() < 2 || view.width() < 2 {
        return Ok(view.clone());
    }
    let ends = perspective_endpoints(view.height(), view.width(), d, rng);
    apply_perspective(view, ends)
}

/// Blacks out every pixel whose mask value is at most `threshold`.
pub fn remove_background(view: &ViewImage, threshold: f64) -> Result<ViewImage> {
    let mask = view
        .object_mask
        .as_ref()
        .ok_or_else(|| Error::invalid("background removal needs an object mask"))?;
    let keep = mask.mapv(|m| if m > threshold { 1.0 } else { 0.0 });
    let mut out = view.clone();
    out.pixels = multiply_mask(view.pixels.clone(), keep.view());
    out.transform.stages.push(ViewStage::Mask(keep));
    Ok(out)
}

pub fn random_background_removal<R: Rng + ?Sized>(
    view: &ViewImage,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<ViewImage> {
    if view.object_mask.is_none() {
        return Err(Error::invalid("background removal needs an object mask"));
    }
    if cfg.background_removal_prob <= 0.0 || rng.random::<f64>() >= cfg.background_removal_prob {
        return Ok(view.clone());
    }
    remove_background(view, cfg.object_threshold)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub global_views: Vec<ViewImage>,
    pub local_views: Vec<ViewImage>,
    pub frame_index: usize,
    /// Local views that used the centroid fallback crop.
    pub fallback_local_views: usize,
}

/// Random perspective followed by random background removal.
pub fn augment_view<R: Rng + ?Sized>(view: ViewImage, cfg: &AugmentationConfig, rng: &mut R) -> Result<ViewImage> {
    let warped = random_perspective(&view, cfg, rng)?;
    random_background_removal(&warped, cfg, rng)
}

/// Samples and augments the global and local views of one frame.
pub fn build_view_batch<R: Rng + ?Sized>(
    frame: ArrayView3<f64>,
    alpha: ArrayView2<f64>,
    frame_index: usize,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<ViewBatch> {
    if cfg.n_global == 0 || cfg.n_local == 0 {
        return Err(Error::invalid("a view batch needs at least one global and one local view"));
    }
    let aug = &cfg.augmentation;
    let globals = sample_global_views(frame, alpha, frame_index, cfg.n_global, aug, rng)?;
    let (locals, fallback_local_views) = sample_local_views(frame, alpha, frame_index, cfg.n_local, aug, rng)?;
    let global_views = globals
        .into_iter()
        .map(|v| augment_view(v, aug, rng))
        .collect::<Result<Vec<_>>>()?;
    let local_views = locals
        .into_iter()
        .map(|v| augment_view(v, aug, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewBatch {
        global_views,
        local_views,
        frame_index,
        fallback_local_views,
    })
}

/// Pixelwise check used by tests and diagnostics: all values in `[0, 1]`.
pub fn in_unit_range(img: &Array3<f64>) -> bool {
    let mut ok = true;
    Zip::from(img).for_each(|&v| ok &= (0.0..=1.0).contains(&v));
    ok
}
