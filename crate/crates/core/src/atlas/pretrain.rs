//! Reconstruction pretraining of a decomposition from frames and masks.
//!
//! This is a small stand-in for full layered-atlas training: all networks
//! are fit jointly to reproduce the video (squared error), to match the
//! supplied object masks with the opacity network (squared error) and to
//! keep foreground color low where the opacity is low (mean absolute
//! value). For the first iterations the mapping networks are additionally
//! pulled toward a scaled identity so both layers start from a sensible
//! parameterization.

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{atlas_input, AtlasArchitecture, AtlasDecomposition, FrameSet, Layer, VideoMeta};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};

/// Scale of the identity prior used during mapping warm-up.
const WARMUP_SCALE: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainWeights {
    pub reconstruction: f64,
    pub mask: f64,
    pub sparsity: f64,
    /// Weight of the identity prior on the mapping networks during warm-up.
    pub mapping_warmup: f64,
}

impl Default for PretrainWeights {
    fn default() -> Self {
        PretrainWeights {
            reconstruction: 1.0,
            mask: 1.0,
            // larger values saturate the foreground colors before the
            // mapping has learned the object motion
            sparsity: 0.01,
            mapping_warmup: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_pixels: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub warmup_iterations: usize,
    pub weights: PretrainWeights,
    pub architecture: AtlasArchitecture,
    pub seed: u64,
    /// Full-video PSNR is measured every this many iterations (0 = only at the end).
    pub eval_every: usize,
    pub target_psnr: f64,
    /// Stop as soon as an evaluation reaches `target_psnr`.
    pub stop_at_target: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            iterations: 3000,
            batch_pixels: 2048,
            learning_rate: 2e-3,
            lr_decay: 0.5,
            lr_decay_every: 1000,
            warmup_iterations: 200,
            weights: PretrainWeights::default(),
            architecture: AtlasArchitecture::default(),
            seed: 0,
            eval_every: 500,
            target_psnr: 30.0,
            stop_at_target: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_pixels == 0 {
            return Err(Error::Config("pretrain.batch_pixels must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_decay_every == 0 {
            return Err(Error::Config("pretrain learning-rate schedule is invalid".into()));
        }
        let w = &self.weights;
        if [w.reconstruction, w.mask, w.sparsity, w.mapping_warmup]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Config("pretrain loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }

    fn learning_rate_at(&self, iteration: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((iteration / self.lr_decay_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    pub decomposition: AtlasDecomposition,
    /// PSNR of the final decomposition over the whole video, in dB.
    pub psnr: f64,
    pub iterations: usize,
    /// `(iteration, psnr)` at every evaluation.
    pub psnr_history: Vec<(usize, f64)>,
    /// Per-iteration batch loss.
    pub loss_history: Vec<f64>,
    pub target_psnr: f64,
}

impl PretrainOutcome {
    pub fn converged(&self) -> bool {
        self.psnr >= self.target_psnr
    }

    pub fn require_converged(self) -> Result<AtlasDecomposition> {
        if self.converged() {
            Ok(self.decomposition)
        } else {
            Err(Error::NotConverged {
                psnr: self.psnr,
                target: self.target_psnr,
                iterations: self.iterations,
            })
        }
    }
}

/// Peak signal-to-noise ratio for `[0, 1]` images, over all frames and channels.
pub fn psnr(reference: &FrameSet, test: &FrameSet) -> Result<f64> {
    if reference.len() != test.len() || reference.dims() != test.dims() {
        return Err(Error::invalid("PSNR needs frame sets of equal length and size"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in reference.frames.iter().zip(&test.frames) {
        Zip::from(a).and(b).for_each(|x, y| sum += (x - y) * (x - y));
        count += a.len();
    }
    if count == 0 {
        return Err(Error::invalid("PSNR of empty frame sets"));
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

struct Optimizers {
    mapping_fg: Adam<f32>,
    mapping_bg: Adam<f32>,
    alpha_net: Adam<f32>,
    atlas: Adam<f32>,
}

struct Batch {
    coords: Array2<f32>,
    colors: Array2<f32>,
    masks: Array1<f32>,
}

fn sample_batch(video: &FrameSet, meta: &VideoMeta, n: usize, rng: &mut ChaCha8Rng) -> Batch {
    let mut coords = Array2::<f32>::zeros((n, 3));
    let mut colors = Array2::<f32>::zeros((n, 3));
    let mut masks = Array1::<f32>::zeros(n);
    for i in 0..n {
        let f = rng.random_range(0..meta.num_frames);
        let r = rng.random_range(0..meta.height);
        let c = rng.random_range(0..meta.width);
        let p = meta.coord(f, r, c);
        coords[[i, 0]] = p.x as f32;
        coords[[i, 1]] = p.y as f32;
        coords[[i, 2]] = p.t as f32;
        for ch in 0..3 {
            colors[[i, ch]] = video.frames[f][[r, c, ch]] as f32;
        }
        masks[i] = video.alpha_maps[f][[r, c]] as f32;
    }
    Batch { coords, colors, masks }
}

fn check_video(video: &FrameSet) -> Result<VideoMeta> {
    let (height, width) = video
        .dims()
        .ok_or_else(|| Error::invalid("cannot pretrain on an empty video"))?;
    for (i, (f, a)) in video.frames.iter().zip(&video.alpha_maps).enumerate() {
        if !f.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("frame {i} has values outside [0, 1]")));
        }
        if !a.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("mask {i} has values outside [0, 1]")));
        }
    }
    Ok(VideoMeta {
        num_frames: video.len(),
        height,
        width,
    })
}

/// One optimization step; returns the batch loss.
fn train_step(
    d: &mut AtlasDecomposition,
    opt: &mut Optimizers,
    batch: &Batch,
    weights: &PretrainWeights,
    warmup: bool,
    lr: f64,
) -> f64 {
    let n = batch.coords.nrows();
    let nf = n as f32;
    let x = batch.coords.view();
    let (uv_f, cache_mf) = d.mapping_fg.net.forward(x);
    let (uv_b, cache_mb) = d.mapping_bg.net.forward(x);
    let (alpha, cache_a) = d.alpha_net.net.forward(x);
    let alpha = alpha.index_axis_move(Axis(1), 0);

    let atlas = &d.background_atlas.net;
    let mut atlas_in = Array2::<f32>::zeros((2 * n, 2));
    for i in 0..n {
        let a = atlas_input(uv_f[[i, 0]], uv_f[[i, 1]], Layer::Foreground);
        let b = atlas_input(uv_b[[i, 0]], uv_b[[i, 1]], Layer::Background);
        atlas_in[[i, 0]] = a[0];
        atlas_in[[i, 1]] = a[1];
        atlas_in[[n + i, 0]] = b[0];
        atlas_in[[n + i, 1]] = b[1];
    }
    let (colors, cache_atlas) = atlas.forward(atlas_in.view());
    let c_f = colors.slice(s![..n, ..]);
    let c_b = colors.slice(s![n.., ..]);

    let (w_rec, w_mask, w_sp) = (
        weights.reconstruction as f32,
        weights.mask as f32,
        weights.sparsity as f32,
    );
    let mut loss = 0.0f64;
    let mut d_colors = Array2::<f32>::zeros((2 * n, 3));
    let mut d_alpha = Array1::<f32>::zeros(n);
    let rec_scale = 2.0 * w_rec / (3.0 * nf);
    let sp_scale = w_sp / (3.0 * nf);
    for i in 0..n {
        let a = alpha[i];
        let mut da = 0.0f32;
        for ch in 0..3 {
            let (cf, cb) = (c_f[[i, ch]], c_b[[i, ch]]);
            let c = (1.0 - a) * cb + a * cf;
            let err = c - batch.colors[[i, ch]];
            loss += (w_rec * err * err / (3.0 * nf)) as f64;
            let dc = rec_scale * err;
            let sparse = (1.0 - a) * cf;
            loss += (w_sp * sparse.abs() / (3.0 * nf)) as f64;
            let sign = if sparse > 0.0 {
                1.0
            } else if sparse < 0.0 {
                -1.0
            } else {
                0.0
            };
            d_colors[[i, ch]] = a * dc + sp_scale * sign * (1.0 - a);
            d_colors[[n + i, ch]] = (1.0 - a) * dc;
            da += dc * (cf - cb) - sp_scale * sign * cf;
        }
        let m_err = a - batch.masks[i];
        loss += (w_mask * m_err * m_err / nf) as f64;
        da += 2.0 * w_mask * m_err / nf;
        d_alpha[i] = da;
    }

    let (g_atlas, g_in) = atlas.backward(&cache_atlas, d_colors.view(), true);
    let g_in = g_in.expect("input gradient requested");
    let mut d_uv_f = Array2::<f32>::zeros((n, 2));
    let mut d_uv_b = Array2::<f32>::zeros((n, 2));
    for i in 0..n {
        d_uv_f[[i, 0]] = 0.5 * g_in[[i, 0]];
        d_uv_f[[i, 1]] = g_in[[i, 1]];
        d_uv_b[[i, 0]] = 0.5 * g_in[[n + i, 0]];
        d_uv_b[[i, 1]] = g_in[[n + i, 1]];
    }
    if warmup {
        let w = weights.mapping_warmup as f32;
        let scale = 2.0 * w / (2.0 * nf);
        for i in 0..n {
            for k in 0..2 {
                let prior = WARMUP_SCALE * batch.coords[[i, k]];
                let (ef, eb) = (uv_f[[i, k]] - prior, uv_b[[i, k]] - prior);
                loss += (w * (ef * ef + eb * eb) / (2.0 * nf)) as f64;
                d_uv_f[[i, k]] += scale * ef;
                d_uv_b[[i, k]] += scale * eb;
            }
        }
    }
    let (g_mf, _) = d.mapping_fg.net.backward(&cache_mf, d_uv_f.view(), false);
    let (g_mb, _) = d.mapping_bg.net.backward(&cache_mb, d_uv_b.view(), false);
    let d_alpha = d_alpha.insert_axis(Axis(1));
    let (g_a, _) = d.alpha_net.net.backward(&cache_a, d_alpha.view(), false);

    opt.mapping_fg.update(&mut d.mapping_fg.net, &g_mf, lr);
    opt.mapping_bg.update(&mut d.mapping_bg.net, &g_mb, lr);
    opt.alpha_net.update(&mut d.alpha_net.net, &g_a, lr);
    opt.atlas.update(&mut d.background_atlas.net, &g_atlas, lr);
    loss
}

/// Fits a fresh decomposition to `video`, using its alpha maps as mask
/// supervision. The result has a single shared atlas (stage `Pretrained`).
pub fn pretrain_reconstruction(video: &FrameSet, config: &PretrainConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    let meta = check_video(video)?;
    let mut d = AtlasDecomposition::new(meta, config.architecture, config.seed)?;
    let adam = AdamConfig::default();
    let mut opt = Optimizers {
        mapping_fg: Adam::new(adam, &d.mapping_fg.net),
        mapping_bg: Adam::new(adam, &d.mapping_bg.net),
        alpha_net: Adam::new(adam, &d.alpha_net.net),
        atlas: Adam::new(adam, &d.background_atlas.net),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x05ee_d0fa_71a5);
    let all_frames: Vec<usize> = (0..meta.num_frames).collect();
    let evaluate = |d: &AtlasDecomposition| -> Result<f64> {
        let rendered = d.render_full(&all_frames)?;
        psnr(video, &rendered)
    };

    let mut loss_history = Vec::with_capacity(config.iterations);
    let mut psnr_history = Vec::new();
    let mut done = 0;
    for it in 0..config.iterations {
        let batch = sample_batch(video, &meta, config.batch_pixels, &mut rng);
        let warm = it < config.warmup_iterations;
        let loss = train_step(&mut d, &mut opt, &batch, &config.weights, warm, config.learning_rate_at(it));
        if !loss.is_finite() || !d.all_finite() {
            return Err(Error::Divergence {
                iteration: it,
                message: "pretraining loss became non-finite".into(),
            });
        }
        loss_history.push(loss);
        done = it + 1;
        if config.eval_every > 0 && done % config.eval_every == 0 && done < config.iterations {
            d.editing_atlas.net = d.background_atlas.net.clone();
            let p = evaluate(&d)?;
            log::info!("pretrain iteration {done}: loss {loss:.5}, PSNR {p:.2} dB");
            psnr_history.push((done, p));
            if config.stop_at_target && p >= config.target_psnr {
                break;
            }
        }
    }
    d.editing_atlas.net = d.background_atlas.net.clone();
    let final_psnr = match psnr_history.last() {
        Some(&(it, p)) if it == done => p,
        _ => {
            let p = evaluate(&d)?;
            psnr_history.push((done, p));
            p
        }
    };
    log::info!("pretraining finished after {done} iterations: PSNR {final_psnr:.2} dB");
    Ok(PretrainOutcome {
        decomposition: d,
        psnr: final_psnr,
        iterations: done,
        psnr_history,
        loss_history,
        target_psnr: config.target_psnr,
    })
}
