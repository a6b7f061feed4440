use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a frame sequence sits in the stylization pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameRole {
    /// Input frames as ingested.
    Raw,
    /// Input frames cropped to the object bounding box.
    Cropped,
    /// The frames drawn for one training batch.
    Sample,
    /// Frames rendered through the (edited) atlas.
    Style,
}

/// Ordered frames (`H x W x 3`, values in `[0, 1]`) with aligned opacity maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSet {
    pub frames: Vec<Array3<f64>>,
    pub alpha_maps: Vec<Array2<f64>>,
    pub role: FrameRole,
    /// Source-video index of every entry.
    pub indices: Vec<usize>,
}

impl FrameSet {
    pub fn new(frames: Vec<Array3<f64>>, alpha_maps: Vec<Array2<f64>>, role: FrameRole) -> Result<Self> {
        let indices = (0..frames.len()).collect();
        Self::with_indices(frames, alpha_maps, role, indices)
    }

    pub fn with_indices(
        frames: Vec<Array3<f64>>,
        alpha_maps: Vec<Array2<f64>>,
        role: FrameRole,
        indices: Vec<usize>,
    ) -> Result<Self> {
        if frames.len() != alpha_maps.len() || frames.len() != indices.len() {
            return Err(Error::invalid(format!(
                "{} frames, {} alpha maps and {} indices",
                frames.len(),
                alpha_maps.len(),
                indices.len()
            )));
        }
        if let Some(first) = frames.first() {
            let (h, w, c) = first.dim();
            if c != 3 {
                return Err(Error::invalid("frames must have 3 channels"));
            }
            for (i, (f, a)) in frames.iter().zip(&alpha_maps).enumerate() {
                if f.dim() != (h, w, 3) {
                    return Err(Error::invalid(format!("frame {i} is {:?}, expected {:?}", f.dim(), (h, w, 3))));
                }
                if a.dim() != (h, w) {
                    return Err(Error::invalid(format!("alpha map {i} does not match its frame")));
                }
            }
        }
        Ok(FrameSet {
            frames,
            alpha_maps,
            role,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width)` shared by every frame.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.dim().0, f.dim().1))
    }
}
