//! Linear image operators with exact adjoints.
//!
//! Images are `H x W x C` arrays (channels last) and masks are `H x W`.
//! Every operator here is linear in the pixel values, so its adjoint is what
//! carries a loss gradient from a view back onto the frame it was cut from.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, ArrayViewMut3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Rect {
            top,
            left,
            height,
            width,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Rect::new(0, 0, height, width)
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

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.height > 0 && self.width > 0 && self.bottom() <= height && self.right() <= width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.bottom() && col >= self.left && col < self.right()
    }
}

pub fn crop(img: ArrayView3<f64>, rect: Rect) -> Result<Array3<f64>> {
    let (h, w, _) = img.dim();
    if !rect.fits_in(h, w) {
        return Err(Error::invalid(format!("crop {rect:?} outside {h}x{w} image")));
    }
    Ok(img
        .slice(s![rect.top..rect.bottom(), rect.left..rect.right(), ..])
        .to_owned())
}

pub fn crop_mask(mask: ArrayView2<f64>, rect: Rect) -> Result<Array2<f64>> {
    let (h, w) = mask.dim();
    if !rect.fits_in(h, w) {
        return Err(Error::invalid(format!("crop {rect:?} outside {h}x{w} mask")));
    }
    Ok(mask
        .slice(s![rect.top..rect.bottom(), rect.left..rect.right()])
        .to_owned())
}

/// Adjoint of [`crop`]: accumulates `grad` into the rectangle of `target`.
pub fn crop_adjoint(grad: ArrayView3<f64>, rect: Rect, mut target: ArrayViewMut3<f64>) {
    let mut region = target.slice_mut(s![rect.top..rect.bottom(), rect.left..rect.right(), ..]);
    region += &grad;
}

/// One-dimensional resampling weights (triangle filter widened by the
/// downscale factor, i.e. bilinear with antialiasing).
#[derive(Clone, Debug, PartialEq)]
struct AxisFilter {
    in_len: usize,
    taps: Vec<(usize, Vec<f64>)>,
}

impl AxisFilter {
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let support_scale = scale.max(1.0);
        let support = support_scale;
        let taps = (0..out_len)
            .map(|i| {
                let center = scale * (i as f64 + 0.5);
                let lo = ((center - support + 0.5).floor().max(0.0)) as usize;
                let hi = ((center + support + 0.5).floor() as usize).min(in_len);
                let mut weights: Vec<f64> = (lo..hi)
                    .map(|j| {
                        let x = (j as f64 - center + 0.5) / support_scale;
                        (1.0 - x.abs()).max(0.0)
                    })
                    .collect();
                let total: f64 = weights.iter().sum();
                if total > 0.0 {
                    weights.iter_mut().for_each(|w| *w /= total);
                }
                // trim exact zeros so the identity resize is a pure copy
                let first = weights.iter().position(|&w| w != 0.0).unwrap_or(0);
                let last = weights.iter().rposition(|&w| w != 0.0).map_or(0, |p| p + 1);
                (lo + first, weights[first..last].to_vec())
            })
            .collect();
        AxisFilter { in_len, taps }
    }

    fn out_len(&self) -> usize {
        self.taps.len()
    }
}

/// Separable antialiased bilinear resize to a fixed output size.
#[derive(Clone, Debug, PartialEq)]
pub struct Resize {
    rows: AxisFilter,
    cols: AxisFilter,
}

impl Resize {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize dimensions must be nonzero"));
        }
        Ok(Resize {
            rows: AxisFilter::new(in_h, out_h),
            cols: AxisFilter::new(in_w, out_w),
        })
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.rows.in_len, self.cols.in_len)
    }

    pub fn output_dims(&self) -> (usize, usize) {
        (self.rows.out_len(), self.cols.out_len())
    }

    pub fn apply(&self, img: ArrayView3<f64>) -> Array3<f64> {
        let (in_h, in_w, c) = img.dim();
        assert_eq!((in_h, in_w), self.input_dims());
        let (out_h, out_w) = self.output_dims();
        let mut horiz = Array3::<f64>::zeros((in_h, out_w, c));
        for r in 0..in_h {
            for (j, (start, weights)) in self.cols.taps.iter().enumerate() {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (k, w) in weights.iter().enumerate() {
                        acc += w * img[[r, start + k, ch]];
                    }
                    horiz[[r, j, ch]] = acc;
                }
            }
        }
        let mut out = Array3::<f64>::zeros((out_h, out_w, c));
        for (i, (start, weights)) in self.rows.taps.iter().enumerate() {
            for (k, w) in weights.iter().enumerate() {
                let src = horiz.slice(s![start + k, .., ..]);
                let mut dst = out.slice_mut(s![i, .., ..]);
                dst.scaled_add(*w, &src);
            }
        }
        out
    }

    pub fn adjoint(&self, grad: ArrayView3<f64>) -> Array3<f64> {
        let (out_h, out_w, c) = grad.dim();
        assert_eq!((out_h, out_w), self.output_dims());
        let (in_h, in_w) = self.input_dims();
        let mut horiz = Array3::<f64>::zeros((in_h, out_w, c));
        for (i, (start, weights)) in self.rows.taps.iter().enumerate() {
            for (k, w) in weights.iter().enumerate() {
                let src = grad.slice(s![i, .., ..]);
                let mut dst = horiz.slice_mut(s![start + k, .., ..]);
                dst.scaled_add(*w, &src);
            }
        }
        let mut out = Array3::<f64>::zeros((in_h, in_w, c));
        for r in 0..in_h {
            for (j, (start, weights)) in self.cols.taps.iter().enumerate() {
                for ch in 0..c {
                    let g = horiz[[r, j, ch]];
                    for (k, w) in weights.iter().enumerate() {
                        out[[r, start + k, ch]] += w * g;
                    }
                }
            }
        }
        out
    }
}

/// Projective map of the plane, acting on `(x, y) = (column, row)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Homography {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// The homography sending each `src[i]` to `dst[i]`.
    pub fn from_points(src: [[f64; 2]; 4], dst: [[f64; 2]; 4]) -> Result<Self> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for i in 0..4 {
            let [x, y] = src[i];
            let [u, v] = dst[i];
            let r = 2 * i;
            a[(r, 0)] = x;
            a[(r, 1)] = y;
            a[(r, 2)] = 1.0;
            a[(r, 6)] = -u * x;
            a[(r, 7)] = -u * y;
            b[r] = u;
            a[(r + 1, 3)] = x;
            a[(r + 1, 4)] = y;
            a[(r + 1, 5)] = 1.0;
            a[(r + 1, 6)] = -v * x;
            a[(r + 1, 7)] = -v * y;
            b[r + 1] = v;
        }
        let h = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::invalid("degenerate perspective quadrilateral"))?;
        Ok(Homography {
            m: [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]],
        })
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = Matrix3::from_fn(|r, c| self.m[r][c]);
        let p = m * Vector3::new(x, y, 1.0);
        (p[0] / p[2], p[1] / p[2])
    }
}

/// Bilinear perspective resampling with zero fill, stored as a sparse
/// `(output pixel) -> 4 taps` operator so it can be applied to images,
/// masks and gradients alike.
#[derive(Clone, Debug, PartialEq)]
pub struct PerspectiveWarp {
    height: usize,
    width: usize,
    /// For each output pixel, up to four `(input flat index, weight)` taps.
    taps: Vec<[(usize, f64); 4]>,
}

const NO_TAP: (usize, f64) = (usize::MAX, 0.0);

impl PerspectiveWarp {
    /// `output_to_input` maps output pixel coordinates to sampling positions in the input.
    pub fn new(height: usize, width: usize, output_to_input: &Homography) -> Self {
        let mut taps = Vec::with_capacity(height * width);
        for row in 0..height {
            for col in 0..width {
                let (x, y) = output_to_input.apply(col as f64, row as f64);
                let mut entry = [NO_TAP; 4];
                if x.is_finite() && y.is_finite() {
                    let x0 = x.floor();
                    let y0 = y.floor();
                    let fx = x - x0;
                    let fy = y - y0;
                    let corners = [
                        (y0, x0, (1.0 - fy) * (1.0 - fx)),
                        (y0, x0 + 1.0, (1.0 - fy) * fx),
                        (y0 + 1.0, x0, fy * (1.0 - fx)),
                        (y0 + 1.0, x0 + 1.0, fy * fx),
                    ];
                    for (slot, (yy, xx, w)) in entry.iter_mut().zip(corners) {
                        if w > 0.0 && yy >= 0.0 && xx >= 0.0 && (yy as usize) < height && (xx as usize) < width {
                            *slot = (yy as usize * width + xx as usize, w);
                        }
                    }
                }
                taps.push(entry);
            }
        }
        PerspectiveWarp {
            height,
            width,
            taps,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn apply(&self, img: ArrayView3<f64>) -> Array3<f64> {
        let (h, w, c) = img.dim();
        assert_eq!((h, w), self.dims());
        let mut out = Array3::<f64>::zeros((h, w, c));
        for (p, entry) in self.taps.iter().enumerate() {
            let (row, col) = (p / w, p % w);
            for &(idx, wt) in entry.iter().filter(|t| t.0 != usize::MAX) {
                let (sr, sc) = (idx / w, idx % w);
                for ch in 0..c {
                    out[[row, col, ch]] += wt * img[[sr, sc, ch]];
                }
            }
        }
        out
    }

    pub fn apply_mask(&self, mask: ArrayView2<f64>) -> Array2<f64> {
        let (h, w) = mask.dim();
        assert_eq!((h, w), self.dims());
        let mut out = Array2::<f64>::zeros((h, w));
        for (p, entry) in self.taps.iter().enumerate() {
            let v: f64 = entry
                .iter()
                .filter(|t| t.0 != usize::MAX)
                .map(|&(idx, wt)| wt * mask[[idx / w, idx % w]])
                .sum();
            out[[p / w, p % w]] = v;
        }
        out
    }

    pub fn adjoint(&self, grad: ArrayView3<f64>) -> Array3<f64> {
        let (h, w, c) = grad.dim();
        assert_eq!((h, w), self.dims());
        let mut out = Array3::<f64>::zeros((h, w, c));
        for (p, entry) in self.taps.iter().enumerate() {
            let (row, col) = (p / w, p % w);
            for &(idx, wt) in entry.iter().filter(|t| t.0 != usize::MAX) {
                let (sr, sc) = (idx / w, idx % w);
                for ch in 0..c {
                    out[[sr, sc, ch]] += wt * grad[[row, col, ch]];
                }
            }
        }
        out
    }
}
