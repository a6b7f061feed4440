//! End-to-end commands: decompose, stylize, render and evaluate.
//!
//! All artifacts live under `paths.output_dir` unless their paths are set
//! explicitly. Every command either skips existing outputs or replaces them
//! when `mode.overwrite` is set.

mod eval;
pub mod io;

pub use eval::{cmd_eval, evaluate, EvalReport, DISTANT_GAP};
pub use io::{ingest_video, write_video};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::atlas::{
    load_checkpoint, pretrain_reconstruction, read_checkpoint, write_checkpoint, AtlasDecomposition, Checkpoint,
    FrameSet, PretrainConfig, Stage,
};
use crate::embedding::{EmbeddingBackend, EmbeddingConfig};
use crate::error::{Error, Result};
use crate::imageops::Rect;
use crate::losses::{Ablation, LossRecord, LossTerm, LossWeights};
use crate::sampling::{union_bounding_box, SamplingConfig};
use crate::textaug::TextConfig;
use crate::trainer::{RunHooks, Stylizer, TrainConfig, TrainSettings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub frames_dir: Option<PathBuf>,
    /// Defaults to `frames_dir`.
    pub masks_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub pretrained_checkpoint: Option<PathBuf>,
    pub stylized_checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            frames_dir: None,
            masks_dir: None,
            output_dir: PathBuf::from("out"),
            pretrained_checkpoint: None,
            stylized_checkpoint: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeConfig {
    /// Replace existing outputs instead of skipping.
    pub overwrite: bool,
    /// Continue an interrupted stylization from its checkpoint.
    pub resume: bool,
}

impl Default for ModeConfig {
    fn default() -> Self {
        ModeConfig {
            overwrite: false,
            resume: true,
        }
    }
}

/// The whole project configuration, one TOML table per section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub paths: PathsConfig,
    pub embedding: EmbeddingConfig,
    pub sampling: SamplingConfig,
    pub text: TextConfig,
    pub loss: LossWeights,
    pub ablation: Ablation,
    pub train: TrainSettings,
    pub pretrain: PretrainConfig,
    pub mode: ModeConfig,
}

/// Command line overrides; each replaces the matching config key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub disable: Option<Vec<LossTerm>>,
    pub n_prefixes_global: Option<usize>,
    pub n_prefixes_local: Option<usize>,
    pub seed: Option<u64>,
    pub frames_dir: Option<PathBuf>,
    pub masks_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub overwrite: Option<bool>,
}

impl ProjectConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_relative(base);
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        paths.frames_dir.as_mut().map(fix);
        paths.masks_dir.as_mut().map(fix);
        fix(&mut paths.output_dir);
        paths.pretrained_checkpoint.as_mut().map(fix);
        paths.stylized_checkpoint.as_mut().map(fix);
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(terms) = &o.disable {
            self.ablation = Ablation::disabling(terms);
        }
        if let Some(n) = o.n_prefixes_global {
            self.text.n_prefixes_global = n;
        }
        if let Some(n) = o.n_prefixes_local {
            self.text.n_prefixes_local = n;
        }
        if let Some(seed) = o.seed {
            self.train.seed = seed;
            self.pretrain.seed = seed;
            self.sampling.seed = seed;
        }
        if let Some(p) = &o.frames_dir {
            self.paths.frames_dir = Some(p.clone());
        }
        if let Some(p) = &o.masks_dir {
            self.paths.masks_dir = Some(p.clone());
        }
        if let Some(p) = &o.output_dir {
            self.paths.output_dir = p.clone();
        }
        if let Some(v) = o.overwrite {
            self.mode.overwrite = v;
        }
    }

    /// Range checks and existence of the input directories.
    pub fn validate(&self) -> Result<()> {
        for dir in [&self.paths.frames_dir, &self.paths.masks_dir].into_iter().flatten() {
            if !dir.is_dir() {
                return Err(Error::Config(format!("directory {} does not exist", dir.display())));
            }
        }
        if self.paths.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("paths.output_dir must be set".into()));
        }
        if self.train.max_video_frames == 0 {
            return Err(Error::Config("train.max_video_frames must be positive".into()));
        }
        self.pretrain.validate()?;
        self.sampling.validate()?;
        self.loss.validate()?;
        self.text.bank()?;
        Ok(())
    }

    pub fn frames_dir(&self) -> Result<&Path> {
        self.paths
            .frames_dir
            .as_deref()
            .ok_or_else(|| Error::Config("paths.frames_dir is not set (use --frames)".into()))
    }

    pub fn masks_dir(&self) -> Result<&Path> {
        match &self.paths.masks_dir {
            Some(p) => Ok(p),
            None => self.frames_dir(),
        }
    }

    pub fn pretrained_checkpoint(&self) -> PathBuf {
        self.paths
            .pretrained_checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.output_dir.join("pretrained.atlas"))
    }

    pub fn stylized_checkpoint(&self) -> PathBuf {
        self.paths
            .stylized_checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.output_dir.join("stylized.atlas"))
    }

    pub fn train_log(&self) -> PathBuf {
        self.paths.output_dir.join("train_log.jsonl")
    }

    pub fn decompose_report(&self) -> PathBuf {
        self.paths.output_dir.join("decompose_report.json")
    }

    pub fn render_dir(&self) -> PathBuf {
        self.paths.output_dir.join("render")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.paths.output_dir.join("eval_report.json")
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            settings: self.train.clone(),
            loss_weights: self.loss,
            ablation: self.ablation.clone(),
            sampling: self.sampling.clone(),
            texts: self.text.targets()?,
            prefixes: self.text.bank()?,
        })
    }

    pub fn ingest(&self) -> Result<FrameSet> {
        ingest_video(self.frames_dir()?, self.masks_dir()?, self.train.max_video_frames)
    }

    fn ensure_output_dir(&self) -> Result<()> {
        let dir = &self.paths.output_dir;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }
}

/// Result of a command that may have found its output already present.
#[derive(Clone, Debug, PartialEq)]
pub enum Outcome<T> {
    Done(T),
    Skipped(PathBuf),
}

impl<T> Outcome<T> {
    pub fn done(self) -> Option<T> {
        match self {
            Outcome::Done(t) => Some(t),
            Outcome::Skipped(_) => None,
        }
    }
}

fn skip_existing(path: &Path, overwrite: bool) -> bool {
    if path.exists() && !overwrite {
        log::info!("{} exists; skipping (pass --overwrite to replace it)", path.display());
        return true;
    }
    false
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposeReport {
    pub psnr: f64,
    pub target_psnr: f64,
    pub iterations: usize,
    pub converged: bool,
    pub num_frames: usize,
    pub psnr_history: Vec<(usize, f64)>,
}

/// Fits the layered decomposition to the input video and saves it.
///
/// The report is written either way; the checkpoint only when the target
/// PSNR was reached.
pub fn cmd_decompose(cfg: &ProjectConfig) -> Result<Outcome<DecomposeReport>> {
    cfg.validate()?;
    let ckpt = cfg.pretrained_checkpoint();
    if skip_existing(&ckpt, cfg.mode.overwrite) {
        return Ok(Outcome::Skipped(ckpt));
    }
    let video = cfg.ingest()?;
    cfg.ensure_output_dir()?;
    let outcome = pretrain_reconstruction(&video, &cfg.pretrain)?;
    let report = DecomposeReport {
        psnr: outcome.psnr,
        target_psnr: outcome.target_psnr,
        iterations: outcome.iterations,
        converged: outcome.converged(),
        num_frames: video.len(),
        psnr_history: outcome.psnr_history.clone(),
    };
    write_json(&cfg.decompose_report(), &report)?;
    log::info!("reconstruction PSNR {:.2} dB after {} iterations", report.psnr, report.iterations);
    let decomp = outcome.require_converged()?;
    write_checkpoint(
        &Checkpoint {
            decomposition: decomp,
            crop_box: None,
            optimizer: None,
        },
        &ckpt,
    )?;
    Ok(Outcome::Done(report))
}

/// Box around every pixel whose predicted opacity exceeds `threshold`, over all frames.
pub fn object_crop_box(decomp: &AtlasDecomposition, threshold: f64, margin: f64) -> Result<Rect> {
    let frames: Vec<usize> = (0..decomp.video.num_frames).collect();
    let alphas = decomp.render_full(&frames)?.alpha_maps;
    Ok(union_bounding_box(&alphas, threshold, margin)?.rect())
}

/// Splits a pretrained decomposition for editing and computes its crop box.
pub fn prepare_for_stylization(pretrained: &AtlasDecomposition, sampling: &SamplingConfig) -> Result<(AtlasDecomposition, Rect)> {
    if pretrained.stage != Stage::Pretrained {
        return Err(Error::invalid("expected a pretrained decomposition, found one already split for editing"));
    }
    let decomp = pretrained.clone_editing_atlas();
    let region = object_crop_box(&decomp, sampling.augmentation.object_threshold, sampling.margin_fraction)?;
    log::info!("object crop box {region:?}");
    Ok((decomp, region))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StylizeSummary {
    pub start_iteration: usize,
    pub iterations: usize,
    pub crop_box: Rect,
    pub last_record: Option<LossRecord>,
}

/// Fine-tunes the editing atlas, resuming from an interrupted run if one exists.
pub fn cmd_stylize(cfg: &ProjectConfig, backend: &dyn EmbeddingBackend) -> Result<Outcome<StylizeSummary>> {
    stylize_with_hooks(cfg, backend, RunHooks::default())
}

/// [`cmd_stylize`] with extra run hooks; log and checkpoint paths are always
/// taken from the config.
pub fn stylize_with_hooks(cfg: &ProjectConfig, backend: &dyn EmbeddingBackend, mut hooks: RunHooks<'_>) -> Result<Outcome<StylizeSummary>> {
    cfg.validate()?;
    let pretrained = cfg.pretrained_checkpoint();
    if !pretrained.exists() {
        return Err(Error::Missing {
            path: pretrained,
            hint: "run `stylize-atlas decompose` first to create the pretrained checkpoint".into(),
        });
    }
    let train = cfg.train_config()?;
    let out = cfg.stylized_checkpoint();
    let existing = if out.exists() && !cfg.mode.overwrite {
        Some(read_checkpoint(&out)?)
    } else {
        None
    };
    let mut stylizer = match existing {
        Some(ckpt) => {
            let done = ckpt.optimizer.as_ref().map_or(0, |o| o.iteration);
            if done >= train.settings.iterations {
                log::info!("{} already has {done} iterations; skipping", out.display());
                return Ok(Outcome::Skipped(out));
            }
            if !cfg.mode.resume {
                return Err(Error::Config(format!(
                    "{} holds an unfinished run; enable mode.resume or pass --overwrite",
                    out.display()
                )));
            }
            log::info!("resuming stylization at iteration {done}");
            Stylizer::resume(ckpt, train, backend)?
        }
        None => {
            let (decomp, region) = prepare_for_stylization(&load_checkpoint(&pretrained)?, &cfg.sampling)?;
            Stylizer::new(decomp, region, train, backend)?
        }
    };
    cfg.ensure_output_dir()?;
    let start = stylizer.state().iteration;
    hooks.log_path = Some(cfg.train_log());
    hooks.checkpoint_path = Some(out.clone());
    stylizer.run(&mut hooks)?;
    write_checkpoint(&stylizer.checkpoint(), &out)?;
    Ok(Outcome::Done(StylizeSummary {
        start_iteration: start,
        iterations: stylizer.state().iteration,
        crop_box: stylizer.region(),
        last_record: stylizer.state().history.last().cloned(),
    }))
}

/// Loads the stylized checkpoint and its crop box.
pub fn load_stylized(cfg: &ProjectConfig) -> Result<(AtlasDecomposition, Rect)> {
    let path = cfg.stylized_checkpoint();
    if !path.exists() {
        return Err(Error::Missing {
            path,
            hint: "run `stylize-atlas stylize` first".into(),
        });
    }
    let ckpt = read_checkpoint(&path)?;
    let region = ckpt
        .crop_box
        .ok_or_else(|| Error::invalid(format!("{} has no crop box", path.display())))?;
    Ok((ckpt.decomposition, region))
}

/// Renders the crop box of every frame from `decomp` and pastes it into the
/// input frame; everything outside the box is copied from the input file.
pub fn render_composited(decomp: &AtlasDecomposition, region: Rect, frames_dir: &Path, out_dir: &Path) -> Result<usize> {
    let inputs = io::list_numbered(frames_dir, io::FRAME_PREFIX)?;
    let n = decomp.video.num_frames;
    if inputs.len() < n {
        return Err(Error::Ingestion {
            path: frames_dir.to_path_buf(),
            message: format!("{} frames on disk but the checkpoint has {n}", inputs.len()),
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (f, input) in inputs.iter().take(n).enumerate() {
        let mut img = io::read_rgb(input)?;
        let (w, h) = img.dimensions();
        if (h as usize, w as usize) != (decomp.video.height, decomp.video.width) {
            return Err(Error::Ingestion {
                path: input.clone(),
                message: "frame size differs from the checkpoint".into(),
            });
        }
        let styled = decomp.render_frames(&[f], region)?;
        let crop = &styled.frames[0];
        for r in 0..region.height {
            for c in 0..region.width {
                let px = img.get_pixel_mut((region.left + c) as u32, (region.top + r) as u32);
                for ch in 0..3 {
                    px[ch] = io::quantize(crop[[r, c, ch]]);
                }
            }
        }
        io::write_rgb(&out_dir.join(io::frame_file_name(f)), &img)?;
    }
    Ok(n)
}

/// Writes the stylized frames at full resolution.
pub fn cmd_render(cfg: &ProjectConfig) -> Result<Outcome<usize>> {
    cfg.validate()?;
    let out = cfg.render_dir();
    if skip_existing(&out.join(io::frame_file_name(0)), cfg.mode.overwrite) {
        return Ok(Outcome::Skipped(out));
    }
    let (decomp, region) = load_stylized(cfg)?;
    let n = render_composited(&decomp, region, cfg.frames_dir()?, &out)?;
    log::info!("wrote {n} frames to {}", out.display());
    Ok(Outcome::Done(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = ProjectConfig::default();
        cfg.text.global = "a swan made of cactus".into();
        cfg.text.local = "cactus".into();
        cfg.ablation = Ablation::disabling(&[LossTerm::Temporal]);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ProjectConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = ProjectConfig::from_toml_str(
            "[text]\nglobal = \"swan\"\nlocal = \"feathers\"\n[ablation]\ndisable = [\"sparsity\"]\n[train]\niterations = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.train.iterations, 5);
        assert_eq!(cfg.train.lr_initial, 1e-4);
        assert_eq!(cfg.text.n_prefixes_global, 8);
        assert!(!cfg.ablation.is_enabled(LossTerm::Sparsity));
        assert!(ProjectConfig::from_toml_str("[train]\nlearning_rate = 1\n").is_err());
    }

    #[test]
    fn overrides_replace_config_keys() {
        let mut cfg = ProjectConfig::default();
        cfg.apply(&Overrides {
            disable: Some(vec![LossTerm::Local, LossTerm::Global]),
            n_prefixes_global: Some(4),
            n_prefixes_local: Some(4),
            seed: Some(9),
            output_dir: Some("elsewhere".into()),
            overwrite: Some(true),
            ..Overrides::default()
        });
        assert_eq!(cfg.ablation.disable.len(), 2);
        assert_eq!((cfg.text.n_prefixes_global, cfg.text.n_prefixes_local), (4, 4));
        assert_eq!((cfg.train.seed, cfg.pretrain.seed), (9, 9));
        assert_eq!(cfg.paths.output_dir, PathBuf::from("elsewhere"));
        assert!(cfg.mode.overwrite);
        assert_eq!(cfg.pretrained_checkpoint(), PathBuf::from("elsewhere/pretrained.atlas"));
    }

    #[test]
    fn missing_input_directory_is_a_config_error() {
        let mut cfg = ProjectConfig::default();
        cfg.paths.output_dir = "out".into();
        cfg.paths.frames_dir = Some("/definitely/not/here".into());
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
