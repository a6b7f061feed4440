//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `STYATLS\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, and then the
//! raw little-endian `f32` blobs listed in the header, in order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AtlasDecomposition, CoordNetwork, ParamState, Stage, VideoMeta};
use crate::error::{Error, Result};
use crate::imageops::Rect;
use crate::nn::{AdamConfig, Mlp, MlpSpec};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"STYATLS\0";
const NETWORK_NAMES: [&str; 5] = ["mapping_fg", "mapping_bg", "alpha_net", "editing_atlas", "background_atlas"];

/// Adam state of the editing atlas at some fine-tuning iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    /// Number of completed fine-tuning iterations.
    pub iteration: usize,
    pub step: u64,
    pub config: AdamConfig,
    pub first: Vec<f32>,
    pub second: Vec<f32>,
}

/// Everything a checkpoint file holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub decomposition: AtlasDecomposition,
    /// Bounding box the editing run was cropped to, in source-frame pixels.
    pub crop_box: Option<Rect>,
    pub optimizer: Option<OptimizerSnapshot>,
}

#[derive(Serialize, Deserialize)]
struct NetworkEntry {
    name: String,
    spec: MlpSpec,
    state: ParamState,
    params: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    iteration: usize,
    step: u64,
    config: AdamConfig,
    params: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    video_meta: VideoMeta,
    stage: Stage,
    networks: Vec<NetworkEntry>,
    crop_box: Option<Rect>,
    optimizer: Option<OptimizerEntry>,
}

fn corrupt(message: impl Into<String>, found: Option<u32>) -> Error {
    Error::Checkpoint {
        message: message.into(),
        found_version: found,
        expected_version: FORMAT_VERSION,
    }
}

fn push_f32(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(decomp: &AtlasDecomposition, path: &Path) -> Result<()> {
    write_checkpoint(
        &Checkpoint {
            decomposition: decomp.clone(),
            crop_box: None,
            optimizer: None,
        },
        path,
    )
}

pub fn load_checkpoint(path: &Path) -> Result<AtlasDecomposition> {
    Ok(read_checkpoint(path)?.decomposition)
}

/// Writes atomically: the file is assembled next to `path` and renamed.
pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let d = &ckpt.decomposition;
    let networks = d
        .networks()
        .iter()
        .map(|(name, n)| NetworkEntry {
            name: name.to_string(),
            spec: n.net.spec().clone(),
            state: n.state,
            params: n.net.spec().param_count(),
        })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        video_meta: d.video,
        stage: d.stage,
        networks,
        crop_box: ckpt.crop_box,
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerEntry {
            iteration: o.iteration,
            step: o.step,
            config: o.config,
            params: o.first.len(),
        }),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, n) in d.networks() {
        push_f32(&mut bytes, &n.net.flat_params());
    }
    if let Some(o) = &ckpt.optimizer {
        if o.first.len() != o.second.len() {
            return Err(Error::invalid("optimizer moments differ in length"));
        }
        push_f32(&mut bytes, &o.first);
        push_f32(&mut bytes, &o.second);
    }

    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&bytes)
        .and_then(|_| file.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    version: Option<u32>,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.at < n {
            return Err(corrupt("file is truncated", self.version));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| corrupt("blob too large", self.version))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        version: None,
    };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(corrupt(format!("{} is not a checkpoint file", path.display()), None));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    r.version = Some(version);
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version in {}", path.display()), Some(version)));
    }
    let header_len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| corrupt(format!("bad header: {e}"), Some(version)))?;
    if header.format_version != version {
        return Err(corrupt("header and preamble versions disagree", Some(header.format_version)));
    }
    let names: Vec<&str> = header.networks.iter().map(|n| n.name.as_str()).collect();
    if names != NETWORK_NAMES {
        return Err(corrupt(format!("unexpected network list {names:?}"), Some(version)));
    }

    let mut nets = Vec::with_capacity(5);
    for entry in &header.networks {
        if entry.params != entry.spec.param_count() {
            return Err(corrupt(format!("{} parameter count disagrees with its spec", entry.name), Some(version)));
        }
        let flat = r.f32s(entry.params)?;
        let net = Mlp::from_flat(entry.spec.clone(), &flat).map_err(|e| corrupt(e.to_string(), Some(version)))?;
        if !net.all_finite() {
            return Err(corrupt(format!("{} has non-finite weights", entry.name), Some(version)));
        }
        nets.push(CoordNetwork { net, state: entry.state });
    }
    let optimizer = match &header.optimizer {
        Some(o) => Some(OptimizerSnapshot {
            iteration: o.iteration,
            step: o.step,
            config: o.config,
            first: r.f32s(o.params)?,
            second: r.f32s(o.params)?,
        }),
        None => None,
    };
    if r.at != bytes.len() {
        return Err(corrupt("trailing bytes after the last blob", Some(version)));
    }
    let mut nets = nets.into_iter();
    let mut next = || nets.next().expect("five networks");
    let decomposition = AtlasDecomposition {
        mapping_fg: next(),
        mapping_bg: next(),
        alpha_net: next(),
        editing_atlas: next(),
        background_atlas: next(),
        video: header.video_meta,
        stage: header.stage,
    };
    Ok(Checkpoint {
        decomposition,
        crop_box: header.crop_box,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{AtlasArchitecture, Layer, PixelTimeCoord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn decomp() -> AtlasDecomposition {
        let video = VideoMeta {
            num_frames: 5,
            height: 7,
            width: 9,
        };
        let arch = AtlasArchitecture {
            hidden_width: 12,
            hidden_layers: 2,
            frequency_bands: 2,
        };
        AtlasDecomposition::new(video, arch, 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let d = decomp().clone_editing_atlas();
        let ckpt = Checkpoint {
            decomposition: d.clone(),
            crop_box: Some(Rect::new(1, 2, 3, 4)),
            optimizer: Some(OptimizerSnapshot {
                iteration: 7,
                step: 7,
                config: AdamConfig::default(),
                first: vec![0.5; d.editing_atlas.net.spec().param_count()],
                second: vec![0.25; d.editing_atlas.net.spec().param_count()],
            }),
        };
        write_checkpoint(&ckpt, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let p = PixelTimeCoord::new(
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
            )
            .unwrap();
            assert_eq!(
                d.reconstruct_pixel(p).unwrap(),
                back.decomposition.reconstruct_pixel(p).unwrap()
            );
            assert_eq!(
                d.map_point(p, Layer::Background).unwrap(),
                back.decomposition.map_point(p, Layer::Background).unwrap()
            );
        }
    }

    #[test]
    fn header_records_video_and_frozen_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        save_checkpoint(&decomp().clone_editing_atlas(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + len]).unwrap();
        assert_eq!(header["format_version"], 1);
        assert_eq!(header["video_meta"]["num_frames"], 5);
        assert_eq!(header["video_meta"]["height"], 7);
        assert_eq!(header["networks"][0]["state"], "Frozen");
        assert_eq!(header["networks"][3]["state"], "Trainable");
        assert_eq!(header["networks"][4]["state"], "Frozen");
    }

    #[test]
    fn missing_and_corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_checkpoint(&dir.path().join("missing.ckpt")).is_err());

        let path = dir.path().join("c.ckpt");
        save_checkpoint(&decomp(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint {
                found_version,
                expected_version,
                ..
            }) => {
                assert_eq!(found_version, Some(99));
                assert_eq!(expected_version, FORMAT_VERSION);
            }
            other => panic!("expected a version error, got {other:?}"),
        }

        save_checkpoint(&decomp(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
    }
}
