//! Layered-atlas video representation.
//!
//! Five coordinate networks describe a video with one foreground object:
//! two mapping networks send a pixel-time point to a UV location in the
//! foreground and background atlas, an opacity network gives the foreground
//! coverage, and two atlas networks give the color at a UV location. A pixel
//! is reconstructed as `c = (1 - alpha) * c_b + alpha * c_f`.
//!
//! Before editing there is a single atlas network shared by both layers; the
//! layers live in disjoint halves of its input domain. Cloning for editing
//! copies that network into an editing atlas (foreground) and a frozen
//! background atlas.

pub mod checkpoint;
mod frames;
pub mod pretrain;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, OptimizerSnapshot};
pub use frames::{FrameRole, FrameSet};
pub use pretrain::{pretrain_reconstruction, psnr, PretrainConfig, PretrainOutcome, PretrainWeights};

use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageops::Rect;
use crate::nn::{Mlp, MlpSpec, OutputRange};

/// Rows per network evaluation when rendering whole frames.
const RENDER_CHUNK: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layer {
    Foreground,
    Background,
}

/// Normalized pixel-time location; every component lies in `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelTimeCoord {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

impl PixelTimeCoord {
    pub fn new(x: f64, y: f64, t: f64) -> Result<Self> {
        let p = PixelTimeCoord { x, y, t };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x, self.y, self.t]
            .iter()
            .all(|v| v.is_finite() && (-1.0..=1.0).contains(v));
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("pixel-time coordinate {self:?} outside [-1, 1]")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UvCoord {
    pub u: f64,
    pub v: f64,
}

impl UvCoord {
    pub fn new(u: f64, v: f64) -> Result<Self> {
        if !(u.is_finite() && v.is_finite() && (-1.0..=1.0).contains(&u) && (-1.0..=1.0).contains(&v)) {
            return Err(Error::invalid(format!("uv ({u}, {v}) outside [-1, 1]")));
        }
        Ok(UvCoord { u, v })
    }
}

/// Frame count and frame size of the represented video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
}

fn normalize_index(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

impl VideoMeta {
    /// Affine map of `(frame, row, col)` into `[-1, 1]^3`.
    pub fn coord(&self, frame: usize, row: usize, col: usize) -> PixelTimeCoord {
        PixelTimeCoord {
            x: normalize_index(col, self.width),
            y: normalize_index(row, self.height),
            t: normalize_index(frame, self.num_frames),
        }
    }

    fn region_coords(&self, frame: usize, region: Rect) -> Array2<f32> {
        let mut out = Array2::<f32>::zeros((region.area(), 3));
        for (i, mut row) in out.outer_iter_mut().enumerate() {
            let p = self.coord(frame, region.top + i / region.width, region.left + i % region.width);
            row[0] = p.x as f32;
            row[1] = p.y as f32;
            row[2] = p.t as f32;
        }
        out
    }
}

/// Widths shared by all five coordinate networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtlasArchitecture {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub frequency_bands: usize,
}

impl Default for AtlasArchitecture {
    fn default() -> Self {
        AtlasArchitecture {
            hidden_width: 256,
            hidden_layers: 4,
            frequency_bands: 10,
        }
    }
}

impl AtlasArchitecture {
    fn spec(&self, input_dim: usize, output_dim: usize, range: OutputRange) -> MlpSpec {
        MlpSpec {
            input_dim,
            output_dim,
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            frequency_bands: self.frequency_bands,
            output_range: range,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamState {
    Trainable,
    Frozen,
}

/// One coordinate network together with its trainable/frozen state.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordNetwork {
    pub net: Mlp<f32>,
    pub state: ParamState,
}

impl CoordNetwork {
    pub fn new(net: Mlp<f32>) -> Self {
        CoordNetwork {
            net,
            state: ParamState::Trainable,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.state == ParamState::Frozen
    }

    /// SHA-256 over the little-endian `f32` parameters, hex encoded.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.net.flat_params() {
            hasher.update(v.to_le_bytes());
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Single shared atlas; all networks trainable.
    Pretrained,
    /// Editing atlas cloned; everything except it frozen.
    Editing,
}

/// Parameter hashes of the five networks, for freezing checks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamHashes {
    pub mapping_fg: String,
    pub mapping_bg: String,
    pub alpha_net: String,
    pub editing_atlas: String,
    pub background_atlas: String,
}

/// Per-pixel quantities for a batch of points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointEval {
    pub uv_fg: Array2<f32>,
    pub uv_bg: Array2<f32>,
    pub alpha: Array1<f32>,
    pub color_fg: Array2<f32>,
    pub color_bg: Array2<f32>,
    pub color: Array2<f32>,
}

/// Frozen per-pixel layers of one frame region: everything rendering needs
/// except the editing atlas output.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLayers {
    pub frame: usize,
    pub region: Rect,
    /// Editing-atlas inputs (foreground UV placed in its atlas half), `N x 2`.
    pub atlas_input_fg: Array2<f32>,
    pub alpha: Array1<f32>,
    pub color_bg: Array2<f32>,
}

/// Input of the shared atlas network for a UV location of a given layer.
pub fn atlas_input(u: f32, v: f32, layer: Layer) -> [f32; 2] {
    match layer {
        Layer::Foreground => [0.5 * u - 0.5, v],
        Layer::Background => [0.5 * u + 0.5, v],
    }
}

fn atlas_inputs(uv: &Array2<f32>, layer: Layer) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros(uv.raw_dim());
    for (src, mut dst) in uv.outer_iter().zip(out.outer_iter_mut()) {
        let [a, b] = atlas_input(src[0], src[1], layer);
        dst[0] = a;
        dst[1] = b;
    }
    out
}

/// `(1 - alpha) * c_b + alpha * c_f`, row-wise.
pub fn blend(alpha: &Array1<f32>, color_fg: &Array2<f32>, color_bg: &Array2<f32>) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros(color_fg.raw_dim());
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let a = alpha[i];
        for ch in 0..row.len() {
            row[ch] = (1.0 - a) * color_bg[[i, ch]] + a * color_fg[[i, ch]];
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AtlasDecomposition {
    /// `M_f`: pixel-time -> foreground UV.
    pub mapping_fg: CoordNetwork,
    /// `M_b`: pixel-time -> background UV.
    pub mapping_bg: CoordNetwork,
    /// `M_alpha`: pixel-time -> foreground opacity.
    pub alpha_net: CoordNetwork,
    /// `A`: the atlas used for the foreground layer.
    pub editing_atlas: CoordNetwork,
    /// `A_b`: the atlas used for the background layer.
    pub background_atlas: CoordNetwork,
    pub video: VideoMeta,
    pub stage: Stage,
}

impl AtlasDecomposition {
    /// Freshly initialized decomposition with a single shared atlas.
    pub fn new(video: VideoMeta, arch: AtlasArchitecture, seed: u64) -> Result<Self> {
        if video.num_frames == 0 || video.height == 0 || video.width == 0 {
            return Err(Error::invalid("video must have frames and nonzero size"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mapping_fg = Mlp::new(arch.spec(3, 2, OutputRange::SIGNED_UNIT), &mut rng)?;
        let mapping_bg = Mlp::new(arch.spec(3, 2, OutputRange::SIGNED_UNIT), &mut rng)?;
        let alpha_net = Mlp::new(arch.spec(3, 1, OutputRange::UNIT), &mut rng)?;
        let atlas = Mlp::new(arch.spec(2, 3, OutputRange::UNIT), &mut rng)?;
        Ok(AtlasDecomposition {
            mapping_fg: CoordNetwork::new(mapping_fg),
            mapping_bg: CoordNetwork::new(mapping_bg),
            alpha_net: CoordNetwork::new(alpha_net),
            editing_atlas: CoordNetwork::new(atlas.clone()),
            background_atlas: CoordNetwork::new(atlas),
            video,
            stage: Stage::Pretrained,
        })
    }

    pub fn networks(&self) -> [(&'static str, &CoordNetwork); 5] {
        [
            ("mapping_fg", &self.mapping_fg),
            ("mapping_bg", &self.mapping_bg),
            ("alpha_net", &self.alpha_net),
            ("editing_atlas", &self.editing_atlas),
            ("background_atlas", &self.background_atlas),
        ]
    }

    pub fn param_hashes(&self) -> ParamHashes {
        ParamHashes {
            mapping_fg: self.mapping_fg.param_hash(),
            mapping_bg: self.mapping_bg.param_hash(),
            alpha_net: self.alpha_net.param_hash(),
            editing_atlas: self.editing_atlas.param_hash(),
            background_atlas: self.background_atlas.param_hash(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.networks().iter().all(|(_, n)| n.net.all_finite())
    }

    /// Splits the single pretrained atlas into an editing atlas and a frozen
    /// background atlas, and freezes the mapping and opacity networks.
    pub fn clone_editing_atlas(&self) -> AtlasDecomposition {
        let pretrained_atlas = self.background_atlas.net.clone();
        AtlasDecomposition {
            mapping_fg: frozen(&self.mapping_fg),
            mapping_bg: frozen(&self.mapping_bg),
            alpha_net: frozen(&self.alpha_net),
            editing_atlas: CoordNetwork {
                net: pretrained_atlas.clone(),
                state: ParamState::Trainable,
            },
            background_atlas: CoordNetwork {
                net: pretrained_atlas,
                state: ParamState::Frozen,
            },
            video: self.video,
            stage: Stage::Editing,
        }
    }

    fn atlas_for(&self, layer: Layer) -> &Mlp<f32> {
        match layer {
            Layer::Foreground => &self.editing_atlas.net,
            Layer::Background => &self.background_atlas.net,
        }
    }

    fn mapping_for(&self, layer: Layer) -> &Mlp<f32> {
        match layer {
            Layer::Foreground => &self.mapping_fg.net,
            Layer::Background => &self.mapping_bg.net,
        }
    }

    pub fn map_point(&self, p: PixelTimeCoord, layer: Layer) -> Result<UvCoord> {
        p.validate()?;
        let x = Array2::from_shape_vec((1, 3), vec![p.x as f32, p.y as f32, p.t as f32]).expect("1x3");
        let uv = self.mapping_for(layer).infer(x.view());
        Ok(UvCoord {
            u: uv[[0, 0]] as f64,
            v: uv[[0, 1]] as f64,
        })
    }

    /// `d(u, v) / d(x, y, t)` of a mapping network at `p`, as rows `[du, dv]`.
    pub fn map_point_jacobian(&self, p: PixelTimeCoord, layer: Layer) -> Result<[[f64; 3]; 2]> {
        p.validate()?;
        let net = self.mapping_for(layer);
        let x = Array2::from_shape_vec((1, 3), vec![p.x as f32, p.y as f32, p.t as f32]).expect("1x3");
        let (_, cache) = net.forward(x.view());
        let mut jac = [[0.0; 3]; 2];
        for (out, row) in jac.iter_mut().enumerate() {
            let mut up = Array2::<f32>::zeros((1, 2));
            up[[0, out]] = 1.0;
            let (_, g) = net.backward(&cache, up.view(), true);
            let g = g.expect("input gradient requested");
            for k in 0..3 {
                row[k] = g[[0, k]] as f64;
            }
        }
        Ok(jac)
    }

    pub fn atlas_color(&self, uv: UvCoord, layer: Layer) -> Result<[f64; 3]> {
        let uv = UvCoord::new(uv.u, uv.v)?;
        let input = atlas_input(uv.u as f32, uv.v as f32, layer);
        let x = Array2::from_shape_vec((1, 2), input.to_vec()).expect("1x2");
        let c = self.atlas_for(layer).infer(x.view());
        Ok([c[[0, 0]] as f64, c[[0, 1]] as f64, c[[0, 2]] as f64])
    }

    pub fn alpha(&self, p: PixelTimeCoord) -> Result<f64> {
        p.validate()?;
        let x = Array2::from_shape_vec((1, 3), vec![p.x as f32, p.y as f32, p.t as f32]).expect("1x3");
        Ok(self.alpha_net.net.infer(x.view())[[0, 0]] as f64)
    }

    /// Evaluates every network on a batch of `N x 3` pixel-time points.
    pub fn evaluate_points(&self, coords: &Array2<f32>) -> PointEval {
        let uv_fg = self.mapping_fg.net.infer(coords.view());
        let uv_bg = self.mapping_bg.net.infer(coords.view());
        let alpha = self.alpha_net.net.infer(coords.view()).index_axis_move(Axis(1), 0);
        let color_fg = self
            .editing_atlas
            .net
            .infer(atlas_inputs(&uv_fg, Layer::Foreground).view());
        let color_bg = self
            .background_atlas
            .net
            .infer(atlas_inputs(&uv_bg, Layer::Background).view());
        let color = blend(&alpha, &color_fg, &color_bg);
        PointEval {
            uv_fg,
            uv_bg,
            alpha,
            color_fg,
            color_bg,
            color,
        }
    }

    pub fn reconstruct_pixel(&self, p: PixelTimeCoord) -> Result<[f64; 3]> {
        p.validate()?;
        let x = Array2::from_shape_vec((1, 3), vec![p.x as f32, p.y as f32, p.t as f32]).expect("1x3");
        let c = self.evaluate_points(&x).color;
        Ok([c[[0, 0]] as f64, c[[0, 1]] as f64, c[[0, 2]] as f64])
    }

    fn check_frame(&self, frame: usize) -> Result<()> {
        if frame >= self.video.num_frames {
            return Err(Error::invalid(format!(
                "frame {frame} out of range for a {}-frame video",
                self.video.num_frames
            )));
        }
        Ok(())
    }

    fn check_region(&self, region: Rect) -> Result<()> {
        if !region.fits_in(self.video.height, self.video.width) {
            return Err(Error::invalid(format!(
                "region {region:?} outside {}x{} frames",
                self.video.height, self.video.width
            )));
        }
        Ok(())
    }

    /// Renders `region` of each requested frame. The alpha maps of the
    /// result are the predicted opacities.
    pub fn render_frames(&self, frame_indices: &[usize], region: Rect) -> Result<FrameSet> {
        self.check_region(region)?;
        let mut frames = Vec::with_capacity(frame_indices.len());
        let mut alphas = Vec::with_capacity(frame_indices.len());
        for &f in frame_indices {
            self.check_frame(f)?;
            let coords = self.video.region_coords(f, region);
            let mut color = Array2::<f32>::zeros((region.area(), 3));
            let mut alpha = Array1::<f32>::zeros(region.area());
            for start in (0..region.area()).step_by(RENDER_CHUNK) {
                let end = (start + RENDER_CHUNK).min(region.area());
                let eval = self.evaluate_points(&coords.slice(ndarray::s![start..end, ..]).to_owned());
                color.slice_mut(ndarray::s![start..end, ..]).assign(&eval.color);
                alpha.slice_mut(ndarray::s![start..end]).assign(&eval.alpha);
            }
            frames.push(
                color
                    .mapv(|v| v as f64)
                    .into_shape_with_order((region.height, region.width, 3))
                    .expect("region sized"),
            );
            alphas.push(
                alpha
                    .mapv(|v| v as f64)
                    .into_shape_with_order((region.height, region.width))
                    .expect("region sized"),
            );
        }
        FrameSet::with_indices(frames, alphas, FrameRole::Style, frame_indices.to_vec())
    }

    pub fn render_full(&self, frame_indices: &[usize]) -> Result<FrameSet> {
        self.render_frames(frame_indices, Rect::full(self.video.height, self.video.width))
    }

    /// Evaluates the frozen networks over a frame region once, so that
    /// repeated renders only need the editing atlas.
    pub fn frozen_layers(&self, frame: usize, region: Rect) -> Result<FrozenLayers> {
        self.check_frame(frame)?;
        self.check_region(region)?;
        let coords = self.video.region_coords(frame, region);
        let uv_fg = self.mapping_fg.net.infer(coords.view());
        let uv_bg = self.mapping_bg.net.infer(coords.view());
        let alpha = self.alpha_net.net.infer(coords.view()).index_axis_move(Axis(1), 0);
        let color_bg = self
            .background_atlas
            .net
            .infer(atlas_inputs(&uv_bg, Layer::Background).view());
        Ok(FrozenLayers {
            frame,
            region,
            atlas_input_fg: atlas_inputs(&uv_fg, Layer::Foreground),
            alpha,
            color_bg,
        })
    }
}

impl FrozenLayers {
    /// Blends an editing-atlas output (`N x 3`) into an `H x W x 3` image.
    pub fn compose(&self, color_fg: &Array2<f32>) -> Array3<f64> {
        blend(&self.alpha, color_fg, &self.color_bg)
            .mapv(|v| v as f64)
            .into_shape_with_order((self.region.height, self.region.width, 3))
            .expect("region sized")
    }

    pub fn alpha_map(&self) -> Array2<f64> {
        self.alpha
            .mapv(|v| v as f64)
            .into_shape_with_order((self.region.height, self.region.width))
            .expect("region sized")
    }
}

fn frozen(n: &CoordNetwork) -> CoordNetwork {
    CoordNetwork {
        net: n.net.clone(),
        state: ParamState::Frozen,
    }
}
