//! Interrupted fine-tuning resumed from its checkpoint matches an uninterrupted run.

use stylize_atlas::atlas::{read_checkpoint, AtlasArchitecture, VideoMeta};
use stylize_atlas::trainer::{read_train_log, RunHooks, Stylizer, TrainConfig};
use stylize_atlas::{AtlasDecomposition, Rect, StubBackend, TargetTexts};

fn setup(iterations: usize) -> (AtlasDecomposition, Rect, TrainConfig) {
    let video = VideoMeta {
        num_frames: 6,
        height: 20,
        width: 24,
    };
    let arch = AtlasArchitecture {
        hidden_width: 16,
        hidden_layers: 2,
        frequency_bands: 3,
    };
    let decomp = AtlasDecomposition::new(video, arch, 3).unwrap().clone_editing_atlas();
    let texts = TargetTexts::new("a swan made of cactus", "cactus").unwrap();
    let mut cfg = TrainConfig::new(texts, stylize_atlas::textaug::default_prefix_bank());
    cfg.settings.iterations = iterations;
    cfg.settings.checkpoint_every = 2;
    cfg.settings.seed = 17;
    cfg.settings.lr_decay_every = 3;
    cfg.sampling.n_local = 3;
    cfg.sampling.augmentation.object_threshold = 0.3;
    (decomp, Rect::new(2, 2, 16, 20), cfg)
}

#[test]
fn resume_matches_uninterrupted_run() {
    let backend = StubBackend::new(4);
    let (decomp, region, cfg) = setup(7);

    let mut full = Stylizer::new(decomp.clone(), region, cfg.clone(), &backend).unwrap();
    full.run(&mut RunHooks::default()).unwrap();
    let expected_params = full.decomposition().editing_atlas.net.flat_params();
    let expected_history = full.state().history.clone();
    assert!(expected_history.iter().any(|r| r.local > 0.0));

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("run.atlas");
    let log = dir.path().join("log.jsonl");
    let mut first = Stylizer::new(decomp, region, cfg.clone(), &backend).unwrap();
    first
        .run(&mut RunHooks {
            log_path: Some(log.clone()),
            checkpoint_path: Some(ckpt.clone()),
            stop_after: Some(5),
            ..RunHooks::default()
        })
        .unwrap();
    assert_eq!(first.state().iteration, 5);
    drop(first);

    // the last periodic checkpoint is at iteration 4; iteration 5 is lost with the "crash"
    let saved = read_checkpoint(&ckpt).unwrap();
    assert_eq!(saved.optimizer.as_ref().unwrap().iteration, 4);
    assert_eq!(read_train_log(&log).unwrap().len(), 5);

    let mut resumed = Stylizer::resume(saved, cfg, &backend).unwrap();
    assert_eq!(resumed.state().iteration, 4);
    assert_eq!(resumed.state().learning_rate, 1e-4 * 0.9);
    resumed
        .run(&mut RunHooks {
            log_path: Some(log.clone()),
            checkpoint_path: Some(ckpt.clone()),
            ..RunHooks::default()
        })
        .unwrap();
    assert_eq!(resumed.decomposition().editing_atlas.net.flat_params(), expected_params);
    assert_eq!(resumed.state().history[..], expected_history[4..]);

    let logged: Vec<_> = read_train_log(&log).unwrap().into_iter().map(|(_, r)| r).collect();
    assert_eq!(logged, expected_history);
    let final_ckpt = read_checkpoint(&ckpt).unwrap();
    assert_eq!(final_ckpt.optimizer.unwrap().iteration, 7);
    assert_eq!(final_ckpt.decomposition.editing_atlas.net.flat_params(), expected_params);
}

#[test]
fn same_seed_same_records() {
    let backend = StubBackend::new(4);
    let (decomp, region, cfg) = setup(3);
    let run = || {
        let mut s = Stylizer::new(decomp.clone(), region, cfg.clone(), &backend).unwrap();
        s.run(&mut RunHooks::default()).unwrap();
        (s.state().history.clone(), s.decomposition().param_hashes())
    };
    assert_eq!(run(), run());

    let mut other = cfg.clone();
    other.settings.seed += 1;
    let mut s = Stylizer::new(decomp.clone(), region, other, &backend).unwrap();
    s.run(&mut RunHooks::default()).unwrap();
    assert_ne!(s.state().history, run().0);
}
