//! PNG frame sequences: `frame_00000.png` plus `mask_00000.png` alpha maps.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::atlas::{FrameRole, FrameSet};
use crate::error::{Error, Result};

pub const FRAME_PREFIX: &str = "frame_";
pub const MASK_PREFIX: &str = "mask_";

pub fn frame_file_name(index: usize) -> String {
    format!("{FRAME_PREFIX}{index:05}.png")
}

pub fn mask_file_name(index: usize) -> String {
    format!("{MASK_PREFIX}{index:05}.png")
}

fn ingestion(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Numbered `<prefix>NNNNN.png` files of a directory, ordered by number.
/// Numbering must start at zero and have no gaps.
pub fn list_numbered(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut numbered = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(digits) = name.strip_prefix(prefix).and_then(|s| s.strip_suffix(".png")) else {
            continue;
        };
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        let n: usize = digits
            .parse()
            .map_err(|_| ingestion(&entry.path(), "frame number does not fit in usize"))?;
        numbered.push((n, entry.path()));
    }
    numbered.sort();
    for (expected, (n, path)) in numbered.iter().enumerate() {
        if *n != expected {
            let missing = dir.join(format!("{prefix}{expected:05}.png"));
            return Err(ingestion(
                &missing,
                format!("missing from the sequence (next file is {})", path.display()),
            ));
        }
    }
    Ok(numbered.into_iter().map(|(_, p)| p).collect())
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    if !matches!(img, image::DynamicImage::ImageRgb8(_)) {
        log::warn!("{} is {:?}; converting to 8-bit RGB", path.display(), img.color());
    }
    Ok(img.into_rgb8())
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.into_luma8())
}

pub fn rgb_to_array(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, ch)| {
        img.get_pixel(c as u32, r as u32)[ch] as f64 / 255.0
    })
}

pub fn gray_to_array(img: &GrayImage) -> Array2<f64> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(r, c)| img.get_pixel(c as u32, r as u32)[0] as f64 / 255.0)
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn array_to_rgb(frame: &Array3<f64>) -> RgbImage {
    let (h, w, _) = frame.dim();
    RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let (r, c) = (r as usize, c as usize);
        image::Rgb([
            quantize(frame[[r, c, 0]]),
            quantize(frame[[r, c, 1]]),
            quantize(frame[[r, c, 2]]),
        ])
    })
}

pub fn array_to_gray(mask: &Array2<f64>) -> GrayImage {
    let (h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |c, r| image::Luma([quantize(mask[[r as usize, c as usize]])]))
}

fn save(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    img(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a frame sequence and its masks, keeping at most `max_frames`.
pub fn ingest_video(frames_dir: &Path, masks_dir: &Path, max_frames: usize) -> Result<FrameSet> {
    if max_frames == 0 {
        return Err(Error::invalid("max_frames must be positive"));
    }
    let frame_paths = list_numbered(frames_dir, FRAME_PREFIX)?;
    if frame_paths.is_empty() {
        return Err(ingestion(frames_dir, format!("no {FRAME_PREFIX}NNNNN.png files")));
    }
    let mask_paths = list_numbered(masks_dir, MASK_PREFIX)?;
    if mask_paths.len() != frame_paths.len() {
        let offending = if mask_paths.len() > frame_paths.len() {
            mask_paths[frame_paths.len()].clone()
        } else {
            masks_dir.join(mask_file_name(mask_paths.len()))
        };
        return Err(ingestion(
            &offending,
            format!("{} frames but {} masks", frame_paths.len(), mask_paths.len()),
        ));
    }
    let keep = if frame_paths.len() > max_frames {
        log::warn!(
            "{} has {} frames; using the first {max_frames}",
            frames_dir.display(),
            frame_paths.len()
        );
        max_frames
    } else {
        frame_paths.len()
    };

    let mut frames = Vec::with_capacity(keep);
    let mut masks = Vec::with_capacity(keep);
    let mut dims = None;
    for (fp, mp) in frame_paths.iter().zip(&mask_paths).take(keep) {
        let frame = read_rgb(fp)?;
        let mask = read_gray(mp)?;
        let d = frame.dimensions();
        match dims {
            None => dims = Some(d),
            Some(first) if first != d => {
                return Err(ingestion(fp, format!("frame is {}x{}, expected {}x{}", d.0, d.1, first.0, first.1)));
            }
            _ => {}
        }
        if mask.dimensions() != d {
            let m = mask.dimensions();
            return Err(ingestion(mp, format!("mask is {}x{} but its frame is {}x{}", m.0, m.1, d.0, d.1)));
        }
        frames.push(rgb_to_array(&frame));
        masks.push(gray_to_array(&mask));
    }
    FrameSet::new(frames, masks, FrameRole::Raw)
}

/// Reads only the frames of a sequence (no masks).
pub fn read_frames(dir: &Path, max_frames: usize) -> Result<Vec<Array3<f64>>> {
    let paths = list_numbered(dir, FRAME_PREFIX)?;
    paths.iter().take(max_frames).map(|p| Ok(rgb_to_array(&read_rgb(p)?))).collect()
}

/// Writes `frame_*.png` and, when `with_masks`, `mask_*.png` into `dir`.
pub fn write_video(dir: &Path, video: &FrameSet, with_masks: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in video.frames.iter().enumerate() {
        let path = dir.join(frame_file_name(i));
        save(|p| array_to_rgb(frame).save(p), &path)?;
        if with_masks {
            let path = dir.join(mask_file_name(i));
            save(|p| array_to_gray(&video.alpha_maps[i]).save(p), &path)?;
        }
    }
    Ok(())
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    save(|p| img.save(p), path)
}
