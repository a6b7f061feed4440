//! Fine-tuning of the editing atlas under the stylization objective.
//!
//! Each iteration draws a sorted batch of frames, renders the cropped frame
//! region through the editing atlas (all other networks are frozen and
//! precomputed), samples augmented views from the render, and differentiates
//! the objective back through the embedding backend, the view transforms
//! and the alpha blend into the editing atlas weights.
//!
//! Randomness for iteration `i` comes from stream `i` of a ChaCha8 generator
//! seeded with the run seed, so a resumed run needs no saved RNG state.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::{AtlasDecomposition, Checkpoint, FrozenLayers, OptimizerSnapshot, Stage};
use crate::embedding::{mean_embedding, preprocess_adjoint, preprocess_view, EmbeddingBackend, EmbeddingVector, ViewImage};
use crate::error::{Error, Result};
use crate::imageops::Rect;
use crate::losses::{
    similarity_loss_with_grad, sparsity_loss_with_grad, temporal_loss_with_grad, total_loss, Ablation, LossRecord,
    LossTerm, LossTerms, LossWeights,
};
use crate::nn::{Adam, AdamConfig, MlpGradients};
use crate::sampling::{augment_view, build_view_batch, sample_global_views, SamplingConfig, ViewBatch};
use crate::textaug::{augment_texts, PrefixBank, TargetTexts};

/// The `train.*` config section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub iterations: usize,
    pub batch_frames: usize,
    pub lr_initial: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub max_video_frames: usize,
    pub checkpoint_every: usize,
    /// Frozen-network hashes are re-verified this often (0 = never).
    pub frozen_check_every: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            iterations: 2000,
            batch_frames: 3,
            lr_initial: 1e-4,
            lr_decay: 0.9,
            lr_decay_every: 200,
            max_video_frames: 70,
            checkpoint_every: 200,
            frozen_check_every: 50,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub settings: TrainSettings,
    pub loss_weights: LossWeights,
    pub ablation: Ablation,
    pub sampling: SamplingConfig,
    pub texts: TargetTexts,
    pub prefixes: PrefixBank,
}

impl TrainConfig {
    pub fn new(texts: TargetTexts, prefixes: PrefixBank) -> Self {
        TrainConfig {
            settings: TrainSettings::default(),
            loss_weights: LossWeights::default(),
            ablation: Ablation::none(),
            sampling: SamplingConfig::default(),
            texts,
            prefixes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.settings;
        if s.batch_frames == 0 {
            return Err(Error::Config("train.batch_frames must be positive".into()));
        }
        if !(s.lr_initial > 0.0 && s.lr_initial.is_finite()) || !(s.lr_decay > 0.0 && s.lr_decay <= 1.0) {
            return Err(Error::Config("train learning-rate schedule is invalid".into()));
        }
        if s.lr_decay_every == 0 {
            return Err(Error::Config("train.lr_decay_every must be positive".into()));
        }
        if s.batch_frames < 3 && self.ablation.is_enabled(LossTerm::Temporal) {
            log::warn!("batch of {} frames cannot form a temporal triplet; the temporal term will be zero", s.batch_frames);
        }
        self.loss_weights.validate()?;
        self.sampling.validate()?;
        self.texts.validate()
    }
}

/// `lr_initial * lr_decay^floor(iteration / lr_decay_every)`.
pub fn learning_rate(iteration: usize, settings: &TrainSettings) -> f64 {
    settings.lr_initial * settings.lr_decay.powi((iteration / settings.lr_decay_every) as i32)
}

/// Distinct frame indices drawn uniformly without replacement, ascending.
pub fn sample_frame_batch<R: Rng + ?Sized>(num_frames: usize, batch_frames: usize, rng: &mut R) -> Result<Vec<usize>> {
    if batch_frames == 0 || batch_frames > num_frames {
        return Err(Error::invalid(format!(
            "cannot draw {batch_frames} distinct frames from a {num_frames}-frame video"
        )));
    }
    let mut picked = index::sample(rng, num_frames, batch_frames).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// The three smallest indices of a sorted batch, if there are three.
pub fn select_triplet(batch: &[usize]) -> Option<(usize, usize, usize)> {
    let mut sorted = batch.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    match sorted.as_slice() {
        [a, b, c, ..] => Some((*a, *b, *c)),
        _ => None,
    }
}

/// Progress of a fine-tuning run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed iterations.
    pub iteration: usize,
    pub learning_rate: f64,
    pub history: Vec<LossRecord>,
    pub seed: u64,
}

fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Fine-tuning driver owning the decomposition and optimizer state.
pub struct Stylizer<'a> {
    decomp: AtlasDecomposition,
    region: Rect,
    config: TrainConfig,
    backend: &'a dyn EmbeddingBackend,
    optimizer: Adam<f32>,
    state: TrainState,
    frozen: Vec<Option<FrozenLayers>>,
    frozen_hashes: [String; 4],
    text_cache: HashMap<String, EmbeddingVector>,
}

/// Views of one batch frame with the data needed to route gradients.
struct FrameWork {
    layers_index: usize,
    views: ViewBatch,
}

impl<'a> Stylizer<'a> {
    /// `decomp` must already be split for editing; `region` is the frame
    /// rectangle (the object bounding box) that is rendered and sampled.
    pub fn new(decomp: AtlasDecomposition, region: Rect, config: TrainConfig, backend: &'a dyn EmbeddingBackend) -> Result<Self> {
        let optimizer = Adam::new(config.settings.adam, &decomp.editing_atlas.net);
        Self::build(decomp, region, config, backend, optimizer, 0)
    }

    /// Continues from a checkpoint written by [`Stylizer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, config: TrainConfig, backend: &'a dyn EmbeddingBackend) -> Result<Self> {
        let region = ckpt
            .crop_box
            .ok_or_else(|| Error::invalid("checkpoint has no crop box to resume from"))?;
        let (optimizer, iteration) = match ckpt.optimizer {
            Some(o) => {
                if o.first.len() != ckpt.decomposition.editing_atlas.net.spec().param_count() {
                    return Err(Error::invalid("optimizer state does not match the editing atlas"));
                }
                (Adam::from_state(o.config, o.step, o.first, o.second), o.iteration)
            }
            None => (Adam::new(config.settings.adam, &ckpt.decomposition.editing_atlas.net), 0),
        };
        Self::build(ckpt.decomposition, region, config, backend, optimizer, iteration)
    }

    fn build(
        decomp: AtlasDecomposition,
        region: Rect,
        config: TrainConfig,
        backend: &'a dyn EmbeddingBackend,
        optimizer: Adam<f32>,
        iteration: usize,
    ) -> Result<Self> {
        config.validate()?;
        if decomp.stage != Stage::Editing || decomp.editing_atlas.is_frozen() {
            return Err(Error::invalid("fine-tuning needs a decomposition split for editing"));
        }
        for (name, net) in decomp.networks() {
            if name != "editing_atlas" && !net.is_frozen() {
                return Err(Error::invalid(format!("{name} must be frozen during fine-tuning")));
            }
        }
        if !region.fits_in(decomp.video.height, decomp.video.width) {
            return Err(Error::invalid(format!("region {region:?} outside the video frames")));
        }
        if config.settings.batch_frames > decomp.video.num_frames {
            return Err(Error::invalid(format!(
                "batch of {} frames from a {}-frame video",
                config.settings.batch_frames, decomp.video.num_frames
            )));
        }
        let hashes = decomp.param_hashes();
        let state = TrainState {
            iteration,
            learning_rate: learning_rate(iteration, &config.settings),
            history: Vec::new(),
            seed: config.settings.seed,
        };
        Ok(Stylizer {
            frozen: vec![None; decomp.video.num_frames],
            frozen_hashes: [hashes.mapping_fg, hashes.mapping_bg, hashes.alpha_net, hashes.background_atlas],
            decomp,
            region,
            config,
            backend,
            optimizer,
            state,
            text_cache: HashMap::new(),
        })
    }

    pub fn decomposition(&self) -> &AtlasDecomposition {
        &self.decomp
    }

    pub fn into_decomposition(self) -> AtlasDecomposition {
        self.decomp
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn region(&self) -> Rect {
        self.region
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (step, first, second) = self.optimizer.state();
        Checkpoint {
            decomposition: self.decomp.clone(),
            crop_box: Some(self.region),
            optimizer: Some(OptimizerSnapshot {
                iteration: self.state.iteration,
                step,
                config: self.config.settings.adam,
                first: first.to_vec(),
                second: second.to_vec(),
            }),
        }
    }

    fn layers(&mut self, frame: usize) -> Result<&FrozenLayers> {
        if self.frozen[frame].is_none() {
            self.frozen[frame] = Some(self.decomp.frozen_layers(frame, self.region)?);
        }
        Ok(self.frozen[frame].as_ref().expect("filled above"))
    }

    fn text_embedding(&mut self, text: &str) -> Result<EmbeddingVector> {
        if let Some(e) = self.text_cache.get(text) {
            return Ok(e.clone());
        }
        let e = self.backend.embed_text(text)?;
        self.text_cache.insert(text.to_string(), e.clone());
        Ok(e)
    }

    /// Re-hashes the frozen networks and fails if any of them changed.
    pub fn verify_frozen(&self) -> Result<()> {
        let h = self.decomp.param_hashes();
        let now = [h.mapping_fg, h.mapping_bg, h.alpha_net, h.background_atlas];
        if now != self.frozen_hashes {
            return Err(Error::Divergence {
                iteration: self.state.iteration,
                message: "a frozen network changed during fine-tuning".into(),
            });
        }
        Ok(())
    }

    /// One optimization step of the editing atlas.
    pub fn step(&mut self) -> Result<LossRecord> {
        let iteration = self.state.iteration;
        let settings = self.config.settings.clone();
        let (record, grads) = self.loss_and_gradient()?;
        let lr = learning_rate(iteration, &settings);
        self.optimizer.update(&mut self.decomp.editing_atlas.net, &grads, lr);
        if !self.decomp.editing_atlas.net.all_finite() {
            return Err(Error::Divergence {
                iteration,
                message: "editing atlas weights became non-finite".into(),
            });
        }

        self.state.iteration += 1;
        self.state.learning_rate = learning_rate(self.state.iteration, &settings);
        if settings.frozen_check_every > 0 && self.state.iteration.is_multiple_of(settings.frozen_check_every) {
            self.verify_frozen()?;
        }
        self.state.history.push(record.clone());
        Ok(record)
    }

    /// Objective of the current iteration and its gradient with respect to
    /// the editing atlas parameters, without updating anything.
    pub fn loss_and_gradient(&mut self) -> Result<(LossRecord, MlpGradients<f32>)> {
        let iteration = self.state.iteration;
        let settings = self.config.settings.clone();
        let weights = self.config.loss_weights;
        let ablation = self.config.ablation.clone();
        let mut rng = iteration_rng(settings.seed, iteration);

        let batch = sample_frame_batch(self.decomp.video.num_frames, settings.batch_frames, &mut rng)?;
        let texts = augment_texts(&self.config.texts, &self.config.prefixes, &mut rng);
        let global_text = self.text_embedding(&texts.global_text)?;
        let local_text = self.text_embedding(&texts.local_text)?;

        // render the batch through the editing atlas
        let (h, w) = (self.region.height, self.region.width);
        let mut renders = Vec::with_capacity(batch.len());
        for &f in &batch {
            let layers = self.layers(f)?.clone();
            let (c_f, cache) = self.decomp.editing_atlas.net.forward(layers.atlas_input_fg.view());
            let image = layers.compose(&c_f);
            renders.push((layers, c_f, cache, image));
        }

        // sample views from each render
        let mut work = Vec::with_capacity(batch.len());
        for (i, &f) in batch.iter().enumerate() {
            let (layers, _, _, image) = &renders[i];
            let alpha = layers.alpha_map();
            let views = match build_view_batch(image.view(), alpha.view(), f, &self.config.sampling, &mut rng) {
                Ok(v) => v,
                Err(Error::NoObject(_)) => {
                    log::warn!("frame {f} has no object pixels; sampling global views only");
                    let aug = &self.config.sampling.augmentation;
                    let globals = sample_global_views(image.view(), alpha.view(), f, self.config.sampling.n_global, aug, &mut rng)?
                        .into_iter()
                        .map(|v| augment_view(v, aug, &mut rng))
                        .collect::<Result<Vec<_>>>()?;
                    ViewBatch {
                        global_views: globals,
                        local_views: Vec::new(),
                        frame_index: f,
                        fallback_local_views: 0,
                    }
                }
                Err(e) => return Err(e),
            };
            work.push(FrameWork {
                layers_index: i,
                views,
            });
        }

        // embed every view in one backend call
        let all_views: Vec<&ViewImage> = work
            .iter()
            .flat_map(|fw| fw.views.global_views.iter().chain(&fw.views.local_views))
            .collect();
        let prepared = all_views.iter().map(|v| preprocess_view(v)).collect::<Result<Vec<_>>>()?;
        let embeddings = self.backend.embed_images(&prepared)?;

        let mut terms = LossTerms::default();
        let mut view_upstream: Vec<Vec<f64>> = vec![vec![0.0; self.backend.dim()]; all_views.len()];
        let mut global_means = Vec::with_capacity(work.len());
        let n_frames = work.len() as f64;
        let frames_with_locals = work.iter().filter(|fw| !fw.views.local_views.is_empty()).count();
        let mut at = 0;
        for fw in &work {
            let ng = fw.views.global_views.len();
            let nl = fw.views.local_views.len();
            let g_mean = mean_embedding(&embeddings[at..at + ng])?;
            let (lg, dg) = similarity_loss_with_grad(&g_mean, &global_text)?;
            terms.global += lg / n_frames;
            if ablation.is_enabled(LossTerm::Global) {
                let scale = weights.lambda_global / (n_frames * ng as f64);
                for up in &mut view_upstream[at..at + ng] {
                    up.iter_mut().zip(&dg).for_each(|(u, d)| *u += scale * d);
                }
            }
            if nl > 0 {
                let l_mean = mean_embedding(&embeddings[at + ng..at + ng + nl])?;
                let (ll, dl) = similarity_loss_with_grad(&l_mean, &local_text)?;
                let nfl = frames_with_locals as f64;
                terms.local += ll / nfl;
                if ablation.is_enabled(LossTerm::Local) {
                    let scale = weights.lambda_local / (nfl * nl as f64);
                    for up in &mut view_upstream[at + ng..at + ng + nl] {
                        up.iter_mut().zip(&dl).for_each(|(u, d)| *u += scale * d);
                    }
                }
            }
            global_means.push((at, ng, g_mean));
            at += ng + nl;
        }

        match select_triplet(&batch) {
            Some((t1, t2, t3)) => {
                let pos = |t: usize| batch.iter().position(|&b| b == t).expect("triplet comes from the batch");
                let idx = [pos(t1), pos(t2), pos(t3)];
                let embs = [&global_means[idx[0]].2, &global_means[idx[1]].2, &global_means[idx[2]].2];
                let (lt, grads) = temporal_loss_with_grad(embs, [t1, t2, t3], &weights)?;
                terms.temporal = lt;
                if ablation.is_enabled(LossTerm::Temporal) && lt > 0.0 {
                    for (k, g) in idx.iter().zip(&grads) {
                        let (start, ng, _) = global_means[*k];
                        let scale = weights.lambda_temp_scale / ng as f64;
                        for up in &mut view_upstream[start..start + ng] {
                            up.iter_mut().zip(g).for_each(|(u, d)| *u += scale * d);
                        }
                    }
                }
            }
            None => {
                if ablation.is_enabled(LossTerm::Temporal) {
                    log::warn!("iteration {iteration}: batch {batch:?} has no triplet; temporal term is zero");
                }
            }
        }

        // sparsity over all rendered pixels of the batch
        let n_px = h * w;
        let mut alpha_all = ndarray::Array1::<f64>::zeros(n_px * renders.len());
        let mut fg_all = Array2::<f64>::zeros((n_px * renders.len(), 3));
        for (i, (layers, c_f, _, _)) in renders.iter().enumerate() {
            alpha_all
                .slice_mut(ndarray::s![i * n_px..(i + 1) * n_px])
                .assign(&layers.alpha.mapv(|v| v as f64));
            fg_all
                .slice_mut(ndarray::s![i * n_px..(i + 1) * n_px, ..])
                .assign(&c_f.mapv(|v| v as f64));
        }
        let (ls, _, d_fg_sparse) = sparsity_loss_with_grad(alpha_all.view(), fg_all.view())?;
        terms.sparsity = ls;

        let record = total_loss(&terms, &weights, &ablation, iteration);
        if !record.total.is_finite() {
            return Err(Error::Divergence {
                iteration,
                message: format!("non-finite loss {:?}", record),
            });
        }

        // backward: embeddings -> views -> frames -> editing atlas
        let mut frame_grads: Vec<Array3<f64>> = vec![Array3::zeros((h, w, 3)); renders.len()];
        let active: Vec<usize> = (0..all_views.len())
            .filter(|&i| view_upstream[i].iter().any(|&u| u != 0.0))
            .collect();
        if !active.is_empty() {
            let prepared_active: Vec<_> = active.iter().map(|&i| prepared[i].clone()).collect();
            let upstream_active: Vec<Vec<f64>> = active.iter().map(|&i| view_upstream[i].clone()).collect();
            let input_grads = self.backend.image_vjps(&prepared_active, &upstream_active)?;
            let owner: Vec<usize> = work
                .iter()
                .flat_map(|fw| std::iter::repeat_n(fw.layers_index, fw.views.global_views.len() + fw.views.local_views.len()))
                .collect();
            for (&i, g) in active.iter().zip(&input_grads) {
                let view = all_views[i];
                let pixel_grad = preprocess_adjoint(view.height(), view.width(), g)?;
                view.transform.backward(pixel_grad.view(), &mut frame_grads[owner[i]]);
            }
        }

        let sparse_on = ablation.is_enabled(LossTerm::Sparsity) && weights.lambda_sparsity != 0.0;
        let mut grads = MlpGradients::zeros_like(&self.decomp.editing_atlas.net);
        for (i, (layers, _, cache, _)) in renders.iter().enumerate() {
            let fg = &frame_grads[i];
            let mut d_cf = Array2::<f32>::zeros((n_px, 3));
            for p in 0..n_px {
                let a = layers.alpha[p] as f64;
                let (r, c) = (p / w, p % w);
                for ch in 0..3 {
                    let mut v = a * fg[[r, c, ch]];
                    if sparse_on {
                        v += weights.lambda_sparsity * d_fg_sparse[[i * n_px + p, ch]];
                    }
                    d_cf[[p, ch]] = v as f32;
                }
            }
            let (g, _) = self.decomp.editing_atlas.net.backward(cache, d_cf.view(), false);
            grads.add_assign(&g);
        }
        if !grads.all_finite() {
            return Err(Error::Divergence {
                iteration,
                message: "non-finite gradient".into(),
            });
        }
        Ok((record, grads))
    }

    /// Runs until `settings.iterations` iterations are complete.
    pub fn run(&mut self, hooks: &mut RunHooks<'_>) -> Result<()> {
        let total = self.config.settings.iterations;
        let every = self.config.settings.checkpoint_every;
        let mut log = match &hooks.log_path {
            Some(p) => Some(TrainLog::open(p, self.state.iteration)?),
            None => None,
        };
        while self.state.iteration < total {
            let lr = learning_rate(self.state.iteration, &self.config.settings);
            let record = self.step()?;
            if let Some(l) = log.as_mut() {
                l.append(&record, lr)?;
            }
            if let Some(cb) = hooks.on_record.as_mut() {
                cb(&record);
            }
            let done = self.state.iteration;
            if let Some(path) = &hooks.checkpoint_path {
                if (every > 0 && done.is_multiple_of(every)) || done == total {
                    crate::atlas::write_checkpoint(&self.checkpoint(), path)?;
                }
            }
            if hooks.stop_after.is_some_and(|s| done >= s) {
                break;
            }
        }
        Ok(())
    }
}

pub type RecordCallback<'a> = Box<dyn FnMut(&LossRecord) + 'a>;

/// Optional side effects of [`Stylizer::run`].
#[derive(Default)]
pub struct RunHooks<'a> {
    pub log_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub on_record: Option<RecordCallback<'a>>,
    /// Stop early once this many iterations are complete (for interruption tests).
    pub stop_after: Option<usize>,
}

/// One fine-tuning step of `decomp` at the given iteration index.
pub fn finetune_step(
    decomp: &mut AtlasDecomposition,
    region: Rect,
    iteration: usize,
    config: &TrainConfig,
    backend: &dyn EmbeddingBackend,
) -> Result<LossRecord> {
    let mut s = Stylizer::build(
        decomp.clone(),
        region,
        config.clone(),
        backend,
        Adam::new(config.settings.adam, &decomp.editing_atlas.net),
        iteration,
    )?;
    let record = s.step()?;
    *decomp = s.into_decomposition();
    Ok(record)
}

/// Runs all configured iterations from scratch.
pub fn run_finetune(
    decomp: AtlasDecomposition,
    region: Rect,
    config: &TrainConfig,
    backend: &dyn EmbeddingBackend,
    hooks: &mut RunHooks<'_>,
) -> Result<(AtlasDecomposition, Vec<LossRecord>)> {
    let mut s = Stylizer::new(decomp, region, config.clone(), backend)?;
    s.run(hooks)?;
    let history = s.state.history.clone();
    Ok((s.into_decomposition(), history))
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    lr: f64,
    #[serde(flatten)]
    record: LossRecord,
}

/// Append-only JSON-lines training log.
pub struct TrainLog {
    path: PathBuf,
    file: File,
}

impl TrainLog {
    /// Opens `path`, keeping only records of iterations before `start`.
    pub fn open(path: &Path, start: usize) -> Result<Self> {
        let mut kept = Vec::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: LogLine = serde_json::from_str(&line)?;
                if parsed.record.iteration < start {
                    kept.push(line);
                }
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut body = kept.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(TrainLog {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, record: &LossRecord, lr: f64) -> Result<()> {
        let line = serde_json::to_string(&LogLine {
            lr,
            record: record.clone(),
        })?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a training log back.
pub fn read_train_log(path: &Path) -> Result<Vec<(f64, LossRecord)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let parsed: LogLine = serde_json::from_str(l)?;
            Ok((parsed.lr, parsed.record))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let s = TrainSettings::default();
        assert_eq!(learning_rate(0, &s), 1e-4);
        assert_eq!(learning_rate(199, &s), 1e-4);
        assert_eq!(learning_rate(200, &s), 9e-5);
        assert_eq!(learning_rate(400, &s), 8.1e-5);
        let mut prev = f64::INFINITY;
        for it in 0..2000 {
            let lr = learning_rate(it, &s);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn frame_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_frame_batch(3, 3, &mut rng).unwrap(), vec![0, 1, 2]);
        assert!(sample_frame_batch(2, 3, &mut rng).is_err());
        let mut counts = [0usize; 70];
        let draws = 10_000;
        for _ in 0..draws {
            let b = sample_frame_batch(70, 3, &mut rng).unwrap();
            assert!(b.windows(2).all(|p| p[0] < p[1]));
            b.iter().for_each(|&i| counts[i] += 1);
        }
        let expected = draws as f64 * 3.0 / 70.0;
        for c in counts {
            assert!((c as f64 - expected).abs() <= 0.15 * expected, "{c} vs {expected}");
        }
    }

    #[test]
    fn triplets() {
        assert_eq!(select_triplet(&[4, 17, 30]), Some((4, 17, 30)));
        assert_eq!(select_triplet(&[30, 4, 17, 50]), Some((4, 17, 30)));
        assert_eq!(select_triplet(&[1, 2]), None);
    }

    #[test]
    fn iteration_streams_are_independent_of_history() {
        let a: u64 = iteration_rng(3, 17).random();
        let mut r = iteration_rng(3, 16);
        let _: u64 = r.random();
        let b: u64 = iteration_rng(3, 17).random();
        assert_eq!(a, b);
        assert_ne!(a, iteration_rng(3, 16).random::<u64>());
    }

    fn tiny_setup() -> (AtlasDecomposition, Rect, TrainConfig) {
        let video = crate::atlas::VideoMeta {
            num_frames: 5,
            height: 18,
            width: 22,
        };
        let arch = crate::atlas::AtlasArchitecture {
            hidden_width: 16,
            hidden_layers: 2,
            frequency_bands: 3,
        };
        let decomp = AtlasDecomposition::new(video, arch, 11).unwrap().clone_editing_atlas();
        let texts = TargetTexts::new("a swan made of cactus", "cactus").unwrap();
        let mut config = TrainConfig::new(texts, crate::textaug::default_prefix_bank());
        config.settings.batch_frames = 3;
        config.settings.seed = 5;
        config.sampling.n_global = 2;
        config.sampling.n_local = 3;
        // an untrained opacity network hovers around one half
        config.sampling.augmentation.object_threshold = 0.45;
        config.loss_weights.sigma_temporal = 1.0;
        (decomp, Rect::new(2, 3, 14, 16), config)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let backend = crate::embedding::StubBackend::new(2);
        let (decomp, region, config) = tiny_setup();
        let mut s = Stylizer::new(decomp.clone(), region, config.clone(), &backend).unwrap();
        let (record, grads) = s.loss_and_gradient().unwrap();
        let (record2, _) = s.loss_and_gradient().unwrap();
        assert_eq!(record, record2);
        assert!(record.local > 0.0 && record.global > 0.0 && record.temporal > 0.0 && record.sparsity > 0.0);

        let analytic = grads.flat();
        let base = decomp.editing_atlas.net.flat_params();
        let mut order: Vec<usize> = (0..analytic.len()).collect();
        order.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
        let spec = decomp.editing_atlas.net.spec().clone();
        let eps = 2e-3f32;
        let loss_at = |k: usize, delta: f32| {
            let mut p = base.clone();
            p[k] += delta;
            let mut d = decomp.clone();
            d.editing_atlas.net = crate::nn::Mlp::from_flat(spec.clone(), &p).unwrap();
            let mut probe = Stylizer::new(d, region, config.clone(), &backend).unwrap();
            probe.loss_and_gradient().unwrap().0.total
        };
        for &k in order.iter().take(8) {
            let numeric = (loss_at(k, eps) - loss_at(k, -eps)) / (2.0 * eps as f64);
            let a = analytic[k] as f64;
            assert!(
                (numeric - a).abs() <= 0.01 * a.abs() + 1e-6,
                "param {k}: analytic {a}, numeric {numeric}"
            );
        }
    }

    #[test]
    fn frozen_networks_stay_fixed_and_editing_atlas_moves() {
        let backend = crate::embedding::StubBackend::new(2);
        let (decomp, region, mut config) = tiny_setup();
        config.settings.iterations = 3;
        config.settings.frozen_check_every = 1;
        let before = decomp.param_hashes();
        let (after, history) = run_finetune(decomp, region, &config, &backend, &mut RunHooks::default()).unwrap();
        let h = after.param_hashes();
        assert_eq!(history.len(), 3);
        assert_eq!(h.mapping_fg, before.mapping_fg);
        assert_eq!(h.alpha_net, before.alpha_net);
        assert_eq!(h.background_atlas, before.background_atlas);
        assert_ne!(h.editing_atlas, before.editing_atlas);
    }

    #[test]
    fn needs_an_editing_split() {
        let backend = crate::embedding::StubBackend::new(2);
        let (decomp, region, config) = tiny_setup();
        let mut raw = decomp.clone();
        raw.stage = Stage::Pretrained;
        assert!(Stylizer::new(raw, region, config.clone(), &backend).is_err());
        assert!(Stylizer::new(decomp, Rect::new(10, 10, 30, 30), config, &backend).is_err());
    }
}
