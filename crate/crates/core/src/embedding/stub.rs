use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{EmbeddingBackend, EmbeddingVector, PreprocessedView, EMBEDDING_DIM, MODEL_INPUT_SIZE};
use crate::error::{Error, Result};

/// Side of the pooling grid the stub projects from.
pub const STUB_GRID: usize = 16;
const POOL: usize = MODEL_INPUT_SIZE / STUB_GRID;
const FEATURES: usize = 3 * STUB_GRID * STUB_GRID;

/// Deterministic, network-free embedding model.
///
/// Images: the normalized input is average-pooled over `14 x 14` blocks into
/// a `3 x 16 x 16` grid (flattened channel-major) and multiplied by a fixed
/// `512 x 768` Gaussian matrix scaled by `1/sqrt(768)`, drawn row-major from
/// `ChaCha8Rng::seed_from_u64(seed)`.
///
/// Text: lowercase whitespace tokens, each mapped to a standard normal
/// 512-vector drawn from a ChaCha8 stream seeded by the first eight bytes
/// (little endian) of `SHA-256(seed_le || token)`, summed over tokens.
#[derive(Clone, Debug)]
pub struct StubBackend {
    seed: u64,
    projection: Array2<f64>,
}

impl StubBackend {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (FEATURES as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((EMBEDDING_DIM, FEATURES), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        StubBackend { seed, projection }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    fn pool(pixels: &Array3<f64>) -> Vec<f64> {
        let mut out = vec![0.0; FEATURES];
        let norm = 1.0 / (POOL * POOL) as f64;
        for ch in 0..3 {
            for by in 0..STUB_GRID {
                for bx in 0..STUB_GRID {
                    let mut acc = 0.0;
                    for r in by * POOL..(by + 1) * POOL {
                        for c in bx * POOL..(bx + 1) * POOL {
                            acc += pixels[[ch, r, c]];
                        }
                    }
                    out[(ch * STUB_GRID + by) * STUB_GRID + bx] = acc * norm;
                }
            }
        }
        out
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut seed_bytes = [0u8; 8];
        seed_bytes.copy_from_slice(&digest[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(seed_bytes));
        (0..EMBEDDING_DIM).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl EmbeddingBackend for StubBackend {
    fn name(&self) -> String {
        format!("stub(seed={})", self.seed)
    }

    fn dim(&self) -> usize {
        EMBEDDING_DIM
    }

    fn embed_image(&self, view: &PreprocessedView) -> Result<EmbeddingVector> {
        let pooled = Self::pool(view.pixels());
        let values = self
            .projection
            .outer_iter()
            .map(|row| row.iter().zip(&pooled).map(|(w, x)| w * x).sum())
            .collect();
        EmbeddingVector::new(values)
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        let lowered = text.to_lowercase();
        let tokens: Vec<&str> = lowered.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::invalid("text must be nonempty"));
        }
        let mut acc = vec![0.0; EMBEDDING_DIM];
        for token in tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(token)) {
                *a += v;
            }
        }
        EmbeddingVector::new(acc)
    }

    fn image_vjp(&self, _view: &PreprocessedView, upstream: &[f64]) -> Result<Array3<f64>> {
        if upstream.len() != EMBEDDING_DIM {
            return Err(Error::invalid("upstream gradient has the wrong dimension"));
        }
        let upstream = ndarray::ArrayView1::from(upstream);
        let pooled_grad = self.projection.t().dot(&upstream);
        let norm = 1.0 / (POOL * POOL) as f64;
        Ok(Array3::from_shape_fn(
            (3, MODEL_INPUT_SIZE, MODEL_INPUT_SIZE),
            |(ch, r, c)| pooled_grad[(ch * STUB_GRID + r / POOL) * STUB_GRID + c / POOL] * norm,
        ))
    }
}
