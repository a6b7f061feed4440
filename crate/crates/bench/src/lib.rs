//! Fixtures shared by the benchmarks.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylize_atlas::atlas::{AtlasArchitecture, VideoMeta};
use stylize_atlas::nn::{Mlp, MlpSpec, OutputRange};
use stylize_atlas::synthetic::MovingSquare;
use stylize_atlas::textaug::default_prefix_bank;
use stylize_atlas::{AtlasDecomposition, FrameSet, Rect, TargetTexts, TrainConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A coordinate network of the size used for desk-scale atlases.
pub fn atlas_sized_mlp(seed: u64) -> Mlp<f32> {
    let spec = MlpSpec {
        hidden_width: 64,
        hidden_layers: 3,
        frequency_bands: 8,
        ..MlpSpec::coordinate(2, 3, OutputRange::UNIT)
    };
    Mlp::new(spec, &mut rng(seed)).unwrap()
}

pub fn random_points(n: usize, seed: u64) -> Array2<f32> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((n, 2), || r.random_range(-1.0f32..1.0))
}

pub fn synthetic_video() -> FrameSet {
    MovingSquare::default().generate().unwrap()
}

pub fn random_image(height: usize, width: usize, seed: u64) -> Array3<f64> {
    let mut r = rng(seed);
    Array3::from_shape_simple_fn((height, width, 3), || r.random_range(0.0..1.0))
}

/// An untrained decomposition split for editing, with its crop box and a
/// fine-tuning config, sized like the synthetic video.
pub fn editing_setup() -> (AtlasDecomposition, Rect, TrainConfig) {
    let video = VideoMeta {
        num_frames: 20,
        height: 64,
        width: 96,
    };
    let arch = AtlasArchitecture {
        hidden_width: 64,
        hidden_layers: 3,
        frequency_bands: 8,
    };
    let decomp = AtlasDecomposition::new(video, arch, 0).unwrap().clone_editing_atlas();
    let texts = TargetTexts::new("a swan made of cactus", "cactus").unwrap();
    let mut cfg = TrainConfig::new(texts, default_prefix_bank());
    // an untrained opacity sits near one half everywhere
    cfg.sampling.augmentation.object_threshold = 0.3;
    (decomp, Rect::new(12, 13, 38, 72), cfg)
}
