//! Procedural test videos with exact object masks.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::atlas::{FrameRole, FrameSet};
use crate::error::{Error, Result};

/// A textured square sliding diagonally over a smooth color gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MovingSquare {
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub square_size: f64,
    /// Total horizontal and vertical travel of the square, in pixels.
    pub travel: (f64, f64),
}

impl Default for MovingSquare {
    fn default() -> Self {
        MovingSquare {
            num_frames: 20,
            height: 64,
            width: 96,
            square_size: 22.0,
            travel: (40.0, 12.0),
        }
    }
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

impl MovingSquare {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 || self.height < 4 || self.width < 4 {
            return Err(Error::invalid("synthetic video needs frames and at least 4x4 pixels"));
        }
        let (tx, ty) = self.travel;
        if !(self.square_size > 1.0)
            || self.square_size + tx.abs() + 2.0 > self.width as f64
            || self.square_size + ty.abs() + 2.0 > self.height as f64
        {
            return Err(Error::invalid("square and its travel must fit inside the frame"));
        }
        Ok(())
    }

    /// Top-left corner of the square in frame `t`, in pixels.
    pub fn position(&self, t: usize) -> (f64, f64) {
        let s = if self.num_frames > 1 {
            t as f64 / (self.num_frames - 1) as f64
        } else {
            0.0
        };
        let (tx, ty) = self.travel;
        let left0 = 0.5 * (self.width as f64 - self.square_size - tx.abs());
        let top0 = 0.5 * (self.height as f64 - self.square_size - ty.abs());
        (top0 + s * ty.abs(), left0 + s * tx.abs())
    }

    pub fn background(&self, row: f64, col: f64) -> [f64; 3] {
        let x = col / self.width as f64;
        let y = row / self.height as f64;
        [0.25 + 0.45 * x, 0.3 + 0.35 * y, 0.65 - 0.3 * x + 0.1 * y]
    }

    /// Object color at square-local coordinates in `[0, 1]^2`.
    pub fn texture(&self, u: f64, v: f64) -> [f64; 3] {
        [
            0.85 - 0.25 * v,
            0.3 + 0.2 * (std::f64::consts::PI * u).sin(),
            0.15 + 0.3 * u * v,
        ]
    }

    /// Frames with anti-aliased edges and the matching fractional coverage masks.
    pub fn generate(&self) -> Result<FrameSet> {
        self.validate()?;
        let (h, w) = (self.height, self.width);
        let mut frames = Vec::with_capacity(self.num_frames);
        let mut masks = Vec::with_capacity(self.num_frames);
        for t in 0..self.num_frames {
            let (top, left) = self.position(t);
            let size = self.square_size;
            let mut frame = Array3::<f64>::zeros((h, w, 3));
            let mut mask = Array2::<f64>::zeros((h, w));
            for r in 0..h {
                let cov_y = overlap(r as f64, r as f64 + 1.0, top, top + size);
                for c in 0..w {
                    let cov = cov_y * overlap(c as f64, c as f64 + 1.0, left, left + size);
                    let (rc, cc) = (r as f64 + 0.5, c as f64 + 0.5);
                    let bg = self.background(rc, cc);
                    let u = ((cc - left) / size).clamp(0.0, 1.0);
                    let v = ((rc - top) / size).clamp(0.0, 1.0);
                    let fg = self.texture(u, v);
                    for ch in 0..3 {
                        frame[[r, c, ch]] = cov * fg[ch] + (1.0 - cov) * bg[ch];
                    }
                    mask[[r, c]] = cov;
                }
            }
            frames.push(frame);
            masks.push(mask);
        }
        FrameSet::new(frames, masks, FrameRole::Raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_cover_the_square_area() {
        let cfg = MovingSquare::default();
        let video = cfg.generate().unwrap();
        assert_eq!(video.len(), 20);
        assert_eq!(video.dims(), Some((64, 96)));
        for m in &video.alpha_maps {
            let area: f64 = m.sum();
            assert!((area - cfg.square_size * cfg.square_size).abs() < 1e-9);
        }
        assert!(video.frames.iter().all(|f| f.iter().all(|v| (0.0..=1.0).contains(v))));
        let (t0, l0) = cfg.position(0);
        let (t1, l1) = cfg.position(19);
        assert!((l1 - l0 - 40.0).abs() < 1e-12 && (t1 - t0 - 12.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_squares_that_leave_the_frame() {
        let cfg = MovingSquare {
            square_size: 60.0,
            ..MovingSquare::default()
        };
        assert!(cfg.generate().is_err());
    }
}
