//! Joint text/image embedding behind a backend abstraction.
//!
//! Views are resized to the model resolution with an antialiased bilinear
//! filter and normalized with the CLIP channel statistics. Backends expose a
//! vector-Jacobian product so that similarity losses can be differentiated
//! with respect to view pixels.

mod bridge;
mod stub;

pub use bridge::{ProcessBackend, ProcessBackendConfig};
pub use stub::StubBackend;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{Rect, Resize};
use crate::sampling::ViewTransform;

/// Embedding width of the stub backend and of the reference model family.
pub const EMBEDDING_DIM: usize = 512;
/// Spatial resolution expected by the image encoder.
pub const MODEL_INPUT_SIZE: usize = 224;
pub const CHANNEL_MEAN: [f64; 3] = [0.48145466, 0.4578275, 0.40821073];
pub const CHANNEL_STD: [f64; 3] = [0.26862954, 0.26130258, 0.27577711];

/// A sampled view of a frame, in `[0, 1]` RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewImage {
    /// `H x W x 3`.
    pub pixels: Array3<f64>,
    /// Opacity map aligned with `pixels`, when the view carries one.
    pub object_mask: Option<Array2<f64>>,
    pub source_frame: usize,
    /// Crop rectangle in source-frame pixels.
    pub crop_rect: Rect,
    /// How the view was produced from its frame; used to route gradients back.
    pub transform: ViewTransform,
}

impl ViewImage {
    /// A view that is a plain crop of its frame.
    pub fn new(
        pixels: Array3<f64>,
        object_mask: Option<Array2<f64>>,
        source_frame: usize,
        crop_rect: Rect,
    ) -> Result<Self> {
        let view = ViewImage {
            pixels,
            object_mask,
            source_frame,
            crop_rect,
            transform: ViewTransform::crop(crop_rect),
        };
        view.validate()?;
        Ok(view)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::invalid("view is empty"));
        }
        if c != 3 {
            return Err(Error::invalid(format!("view has {c} channels, expected 3")));
        }
        if !self.pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("view pixels must be finite and in [0, 1]"));
        }
        if let Some(mask) = &self.object_mask {
            if mask.dim() != (h, w) {
                return Err(Error::invalid("object mask does not match view size"));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }
}

/// Model-ready view: `3 x 224 x 224`, channel-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedView {
    pixels: Array3<f64>,
}

impl PreprocessedView {
    pub fn from_normalized(pixels: Array3<f64>) -> Result<Self> {
        if pixels.dim() != (3, MODEL_INPUT_SIZE, MODEL_INPUT_SIZE) {
            return Err(Error::invalid(format!(
                "preprocessed view must be 3x{MODEL_INPUT_SIZE}x{MODEL_INPUT_SIZE}, got {:?}",
                pixels.dim()
            )));
        }
        if !pixels.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("preprocessed view has non-finite values"));
        }
        Ok(PreprocessedView { pixels })
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("embedding must be nonempty"));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("embedding has non-finite values"));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, s: f64) -> EmbeddingVector {
        EmbeddingVector(self.0.iter().map(|v| v * s).collect())
    }
}

/// A joint text/image encoder.
///
/// `image_vjp` returns the gradient of `<upstream, E(view)>` with respect to
/// the preprocessed pixels, which is all the training loop needs from the
/// model to differentiate similarity losses.
pub trait EmbeddingBackend: Send + Sync {
    fn name(&self) -> String;

    fn dim(&self) -> usize;

    fn embed_image(&self, view: &PreprocessedView) -> Result<EmbeddingVector>;

    fn embed_images(&self, views: &[PreprocessedView]) -> Result<Vec<EmbeddingVector>> {
        views.iter().map(|v| self.embed_image(v)).collect()
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;

    fn image_vjp(&self, view: &PreprocessedView, upstream: &[f64]) -> Result<Array3<f64>>;

    fn image_vjps(&self, views: &[PreprocessedView], upstream: &[Vec<f64>]) -> Result<Vec<Array3<f64>>> {
        views
            .iter()
            .zip(upstream)
            .map(|(v, g)| self.image_vjp(v, g))
            .collect()
    }
}

/// Which backend to construct; mirrors the `embedding.*` config keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub backend: BackendKind,
    pub model_id: String,
    pub seed: u64,
    /// Command line of the embedding server used by the `real` backend.
    pub command: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Real,
    Stub,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            backend: BackendKind::Stub,
            model_id: "ViT-L/14".to_string(),
            seed: 0,
            command: vec!["python3".into(), "scripts/clip_server.py".into()],
        }
    }
}

pub fn build_backend(config: &EmbeddingConfig) -> Result<Box<dyn EmbeddingBackend>> {
    match config.backend {
        BackendKind::Stub => Ok(Box::new(StubBackend::new(config.seed))),
        BackendKind::Real => Ok(Box::new(ProcessBackend::spawn(&ProcessBackendConfig {
            command: config.command.clone(),
            model_id: config.model_id.clone(),
        })?)),
    }
}

/// Resizes to `224 x 224` and normalizes each channel.
pub fn preprocess_view(view: &ViewImage) -> Result<PreprocessedView> {
    let (h, w, c) = view.pixels.dim();
    if h == 0 || w == 0 || c != 3 {
        return Err(Error::invalid(format!("cannot preprocess a {h}x{w}x{c} view")));
    }
    let resize = Resize::new(h, w, MODEL_INPUT_SIZE, MODEL_INPUT_SIZE)?;
    let resized = resize.apply(view.pixels.view());
    let mut out = resized.permuted_axes([2, 0, 1]).as_standard_layout().to_owned();
    for (ch, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (m, s) = (CHANNEL_MEAN[ch], CHANNEL_STD[ch]);
        plane.mapv_inplace(|v| (v - m) / s);
    }
    PreprocessedView::from_normalized(out)
}

/// Adjoint of [`preprocess_view`]: maps a gradient on the model input back to
/// the `H x W x 3` view pixels.
pub fn preprocess_adjoint(view_height: usize, view_width: usize, grad: &Array3<f64>) -> Result<Array3<f64>> {
    let resize = Resize::new(view_height, view_width, MODEL_INPUT_SIZE, MODEL_INPUT_SIZE)?;
    let mut g = grad.clone();
    for (ch, mut plane) in g.axis_iter_mut(Axis(0)).enumerate() {
        plane.mapv_inplace(|v| v / CHANNEL_STD[ch]);
    }
    let channels_last = g.permuted_axes([1, 2, 0]).as_standard_layout().to_owned();
    Ok(resize.adjoint(channels_last.view()))
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    Ok(cosine_similarity_with_grad(a, b)?.0)
}

/// Cosine similarity and its gradients with respect to both arguments.
pub fn cosine_similarity_with_grad(
    a: &EmbeddingVector,
    b: &EmbeddingVector,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "embedding dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero-norm vector"));
    }
    let sim = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0);
    let ga = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| y / (na * nb) - sim * x / (na * na))
        .collect();
    let gb = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x / (na * nb) - sim * y / (nb * nb))
        .collect();
    Ok((sim, ga, gb))
}

pub fn mean_embedding(embeddings: &[EmbeddingVector]) -> Result<EmbeddingVector> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::invalid("cannot average zero embeddings"))?;
    let mut acc = vec![0.0; first.len()];
    for e in embeddings {
        if e.len() != acc.len() {
            return Err(Error::invalid("embeddings have different dimensions"));
        }
        for (a, v) in acc.iter_mut().zip(e.values()) {
            *a += v;
        }
    }
    let n = embeddings.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    EmbeddingVector::new(acc)
}

/// Mean image embedding over a set of views.
pub fn average_view_embedding(backend: &dyn EmbeddingBackend, views: &[ViewImage]) -> Result<EmbeddingVector> {
    if views.is_empty() {
        return Err(Error::invalid("at least one view is required"));
    }
    let prepared = views.iter().map(preprocess_view).collect::<Result<Vec<_>>>()?;
    mean_embedding(&backend.embed_images(&prepared)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn view(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> ViewImage {
        ViewImage::new(Array3::from_shape_fn((h, w, 3), |(r, c, ch)| f(r, c, ch)), None, 0, Rect::full(h, w)).unwrap()
    }

    fn vector(seed: u64) -> EmbeddingVector {
        let vals = (0..EMBEDDING_DIM)
            .map(|i| (((i as u64 + 1) * (seed * 2654435761 + 97)) % 1009) as f64 / 504.5 - 1.0)
            .collect();
        EmbeddingVector::new(vals).unwrap()
    }

    #[test]
    fn channel_means_normalize_to_zero() {
        let v = view(10, 10, |_, _, ch| CHANNEL_MEAN[ch]);
        let p = preprocess_view(&v).unwrap();
        assert_eq!(p.pixels().dim(), (3, 224, 224));
        assert!(p.pixels().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn white_maps_to_normalized_one() {
        let p = preprocess_view(&view(31, 17, |_, _, _| 1.0)).unwrap();
        let expected: f64 = (1.0 - 0.48145466) / 0.26862954;
        assert!((expected - 1.930336).abs() < 1e-6);
        assert!(p.pixels().index_axis(Axis(0), 0).iter().all(|x| (x - expected).abs() < 1e-9));
    }

    #[test]
    fn model_sized_view_is_normalization_only() {
        let v = view(224, 224, |r, c, ch| ((r * 3 + c * 5 + ch) % 11) as f64 / 10.0);
        let p = preprocess_view(&v).unwrap();
        for ch in 0..3 {
            for (r, c) in [(0, 0), (17, 200), (223, 223)] {
                let expected = (v.pixels[[r, c, ch]] - CHANNEL_MEAN[ch]) / CHANNEL_STD[ch];
                assert_eq!(p.pixels()[[ch, r, c]], expected);
            }
        }
    }

    #[test]
    fn empty_view_is_rejected() {
        let v = ViewImage {
            pixels: Array3::zeros((0, 4, 3)),
            object_mask: None,
            source_frame: 0,
            crop_rect: Rect::full(1, 4),
            transform: ViewTransform::crop(Rect::full(1, 4)),
        };
        assert!(matches!(preprocess_view(&v), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn preprocess_adjoint_matches_dot_product() {
        let v = view(9, 13, |r, c, ch| ((r + 2 * c + 3 * ch) % 7) as f64 / 6.0);
        let g = Array3::from_shape_fn((3, 224, 224), |(ch, r, c)| ((ch + r * 7 + c * 3) % 13) as f64 - 6.0);
        // preprocess is affine: subtract the constant part to compare the linear maps
        let zero = view(9, 13, |_, _, _| 0.0);
        let lin = preprocess_view(&v).unwrap().pixels - preprocess_view(&zero).unwrap().pixels();
        let lhs = (&lin * &g).sum();
        let rhs = (&v.pixels * &preprocess_adjoint(9, 13, &g).unwrap()).sum();
        assert!((lhs - rhs).abs() < 1e-8 * lhs.abs().max(1.0));
    }

    #[test]
    fn cosine_identities() {
        let a = vector(1);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&a, &a.scaled(-1.0)).unwrap() + 1.0).abs() < 1e-12);
        let mut e0 = vec![0.0; EMBEDDING_DIM];
        e0[0] = 1.0;
        let mut e1 = vec![0.0; EMBEDDING_DIM];
        e1[1] = 1.0;
        let (x, y) = (EmbeddingVector::new(e0).unwrap(), EmbeddingVector::new(e1).unwrap());
        assert_eq!(cosine_similarity(&x, &y).unwrap(), 0.0);
        let zero = EmbeddingVector::new(vec![0.0; EMBEDDING_DIM]).unwrap();
        assert!(matches!(cosine_similarity(&zero, &a), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn cancelling_embeddings_average_to_zero() {
        let a = vector(4);
        let mean = mean_embedding(&[a.clone(), a.scaled(-1.0)]).unwrap();
        assert_eq!(mean.norm(), 0.0);
        assert!(cosine_similarity(&mean, &a).is_err());
        assert_eq!(mean_embedding(std::slice::from_ref(&a)).unwrap(), a);
        assert!(mean_embedding(&[]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_invariant_to_positive_scaling(seed_a in 1u64..500, seed_b in 1u64..500, s in 1e-3f64..1e3) {
            let (a, b) = (vector(seed_a), vector(seed_b));
            let base = cosine_similarity(&a, &b).unwrap();
            prop_assert!((cosine_similarity(&a.scaled(s), &b).unwrap() - base).abs() <= 1e-6);
            prop_assert!((-1.0..=1.0).contains(&base));
        }
    }
}
