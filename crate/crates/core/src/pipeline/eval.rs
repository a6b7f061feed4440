use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{io, load_stylized, write_json, ProjectConfig};
use crate::embedding::{cosine_similarity, preprocess_view, EmbeddingBackend, EmbeddingVector, ViewImage};
use crate::error::{Error, Result};
use crate::imageops::{crop, crop_mask, Rect};
use crate::sampling::{build_view_batch, sample_global_views, SamplingConfig};
use crate::textaug::TargetTexts;

/// Frame gap used for `distant_similarity`.
pub const DISTANT_GAP: usize = 10;

/// Opacity below which a pixel counts as background for leakage.
const BACKGROUND_ALPHA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean cosine similarity of embeddings of consecutive stylized crops.
    pub adjacent_similarity: f64,
    /// Same, for crops `distant_gap` frames apart.
    pub distant_similarity: f64,
    /// `DISTANT_GAP`, shortened for videos with fewer frames.
    pub distant_gap: usize,
    pub text_alignment_global: f64,
    pub text_alignment_local: f64,
    /// Mean absolute RGB change on pixels with predicted opacity below 0.1.
    pub background_leakage: f64,
    pub num_frames: usize,
    pub backend: String,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Scores stylized frames against the input frames.
///
/// `alpha_maps` are full-frame predicted opacities and `region` the crop box
/// that was stylized. Views for text alignment are drawn with `sampling`
/// from a generator seeded by `sampling.seed`, so repeated calls agree.
pub fn evaluate(
    input: &[Array3<f64>],
    stylized: &[Array3<f64>],
    alpha_maps: &[Array2<f64>],
    region: Rect,
    texts: &TargetTexts,
    sampling: &SamplingConfig,
    backend: &dyn EmbeddingBackend,
) -> Result<EvalReport> {
    let n = stylized.len();
    if n < 2 {
        return Err(Error::invalid("evaluation needs at least two frames"));
    }
    if input.len() != n || alpha_maps.len() != n {
        return Err(Error::invalid(format!(
            "{} input frames, {n} stylized frames and {} alpha maps",
            input.len(),
            alpha_maps.len()
        )));
    }

    let mut leak_sum = 0.0;
    let mut leak_count = 0usize;
    for ((a, b), alpha) in input.iter().zip(stylized).zip(alpha_maps) {
        if a.dim() != b.dim() || alpha.dim() != (a.dim().0, a.dim().1) {
            return Err(Error::invalid("input, stylized and alpha sizes differ"));
        }
        for ((r, c), &al) in alpha.indexed_iter() {
            if al < BACKGROUND_ALPHA {
                for ch in 0..3 {
                    leak_sum += (a[[r, c, ch]] - b[[r, c, ch]]).abs();
                }
                leak_count += 3;
            }
        }
    }
    let background_leakage = if leak_count == 0 { 0.0 } else { leak_sum / leak_count as f64 };

    let crops: Vec<Array3<f64>> = stylized.iter().map(|f| crop(f.view(), region)).collect::<Result<_>>()?;
    let alpha_crops: Vec<Array2<f64>> = alpha_maps
        .iter()
        .map(|a| crop_mask(a.view(), region))
        .collect::<Result<_>>()?;
    let prepared = crops
        .iter()
        .enumerate()
        .map(|(i, c)| preprocess_view(&ViewImage::new(c.clone(), None, i, region)?))
        .collect::<Result<Vec<_>>>()?;
    let frame_embs = backend.embed_images(&prepared)?;
    let pair_mean = |gap: usize| -> Result<f64> {
        let sims = (0..n - gap)
            .map(|i| cosine_similarity(&frame_embs[i], &frame_embs[i + gap]))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean(&sims))
    };
    let distant_gap = DISTANT_GAP.min(n - 1);
    let adjacent_similarity = pair_mean(1)?;
    let distant_similarity = pair_mean(distant_gap)?;

    let global_text = backend.embed_text(&texts.global_text)?;
    let local_text = backend.embed_text(&texts.local_text)?;
    let mut global_sims = Vec::new();
    let mut local_sims = Vec::new();
    let score = |views: &[ViewImage], text: &EmbeddingVector, out: &mut Vec<f64>| -> Result<()> {
        let prepared = views.iter().map(preprocess_view).collect::<Result<Vec<_>>>()?;
        for e in backend.embed_images(&prepared)? {
            out.push(cosine_similarity(&e, text)?);
        }
        Ok(())
    };
    for (f, (c, a)) in crops.iter().zip(&alpha_crops).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        rng.set_stream(f as u64);
        match build_view_batch(c.view(), a.view(), f, sampling, &mut rng) {
            Ok(batch) => {
                score(&batch.global_views, &global_text, &mut global_sims)?;
                score(&batch.local_views, &local_text, &mut local_sims)?;
            }
            Err(Error::NoObject(_)) => {
                let views = sample_global_views(c.view(), a.view(), f, sampling.n_global, &sampling.augmentation, &mut rng)?;
                score(&views, &global_text, &mut global_sims)?;
            }
            Err(e) => return Err(e),
        }
    }
    if local_sims.is_empty() {
        return Err(Error::NoObject("no frame has object pixels to draw local views from".into()));
    }

    Ok(EvalReport {
        adjacent_similarity,
        distant_similarity,
        distant_gap,
        text_alignment_global: mean(&global_sims),
        text_alignment_local: mean(&local_sims),
        background_leakage,
        num_frames: n,
        backend: backend.name(),
    })
}

/// Evaluates the rendered frames and writes the report as JSON.
pub fn cmd_eval(cfg: &ProjectConfig, backend: &dyn EmbeddingBackend) -> Result<EvalReport> {
    cfg.validate()?;
    let (decomp, region) = load_stylized(cfg)?;
    let n = decomp.video.num_frames;
    let render_dir = cfg.render_dir();
    let stylized = io::read_frames(&render_dir, n)?;
    if stylized.len() != n {
        return Err(Error::Missing {
            path: render_dir,
            hint: format!("expected {n} rendered frames; run `stylize-atlas render` first"),
        });
    }
    let input = io::read_frames(cfg.frames_dir()?, n)?;
    let frames: Vec<usize> = (0..n).collect();
    let alphas = decomp.render_full(&frames)?.alpha_maps;
    let report = evaluate(
        &input,
        &stylized,
        &alphas,
        region,
        &cfg.text.targets()?,
        &cfg.sampling,
        backend,
    )?;
    write_json(&cfg.eval_report(), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::StubBackend;
    use crate::synthetic::MovingSquare;
    use ndarray::s;

    fn texts() -> TargetTexts {
        TargetTexts::new("a red square", "red").unwrap()
    }

    #[test]
    fn repeated_frames_are_perfectly_consistent() {
        let video = MovingSquare {
            travel: (0.0, 0.0),
            num_frames: 4,
            ..MovingSquare::default()
        }
        .generate()
        .unwrap();
        let backend = StubBackend::new(1);
        let region = Rect::new(10, 20, 40, 50);
        let r = evaluate(
            &video.frames,
            &video.frames,
            &video.alpha_maps,
            region,
            &texts(),
            &SamplingConfig::default(),
            &backend,
        )
        .unwrap();
        assert!((r.adjacent_similarity - 1.0).abs() < 1e-12);
        assert!((r.distant_similarity - 1.0).abs() < 1e-12);
        assert_eq!(r.distant_gap, 3);
        assert_eq!(r.background_leakage, 0.0);
        let again = evaluate(
            &video.frames,
            &video.frames,
            &video.alpha_maps,
            region,
            &texts(),
            &SamplingConfig::default(),
            &backend,
        )
        .unwrap();
        assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn leakage_counts_only_background_pixels() {
        let video = MovingSquare {
            num_frames: 2,
            ..MovingSquare::default()
        }
        .generate()
        .unwrap();
        let mut styled = video.frames.clone();
        let mut expected_sum = 0.0;
        let mut count = 0;
        for (f, a) in styled.iter_mut().zip(&video.alpha_maps) {
            for ((r, c), &al) in a.indexed_iter() {
                if al >= 0.1 {
                    f.slice_mut(s![r, c, ..]).fill(0.0);
                } else if (r + c) % 7 == 0 {
                    let v = f[[r, c, 1]];
                    f[[r, c, 1]] = 1.0;
                    expected_sum += 1.0 - v;
                }
                if al < 0.1 {
                    count += 3;
                }
            }
        }
        let r = evaluate(
            &video.frames,
            &styled,
            &video.alpha_maps,
            Rect::full(64, 96),
            &texts(),
            &SamplingConfig::default(),
            &StubBackend::new(1),
        )
        .unwrap();
        assert!((r.background_leakage - expected_sum / count as f64).abs() < 1e-12);
        assert!(r.adjacent_similarity.abs() <= 1.0 && r.text_alignment_local.abs() <= 1.0);
    }
}
