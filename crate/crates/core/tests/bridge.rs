//! Talks to `scripts/clip_server.py --mock` through the process backend.

use std::path::PathBuf;
use std::process::Command;

use ndarray::Array3;
use stylize_atlas::embedding::{preprocess_view, EmbeddingBackend, ProcessBackend, ProcessBackendConfig, PreprocessedView};
use stylize_atlas::{Rect, ViewImage};

fn server_script() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scripts/clip_server.py")
}

fn python_with_numpy() -> bool {
    Command::new("python3")
        .args(["-c", "import numpy"])
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn mock_backend() -> Option<ProcessBackend> {
    if !python_with_numpy() {
        eprintln!("python3 with numpy not available; skipping bridge test");
        return None;
    }
    let cfg = ProcessBackendConfig {
        command: vec![
            "python3".into(),
            server_script().to_string_lossy().into_owned(),
            "--mock".into(),
        ],
        model_id: "ViT-L/14".into(),
    };
    Some(ProcessBackend::spawn(&cfg).expect("mock server starts"))
}

fn view(seed: usize) -> PreprocessedView {
    let px = Array3::from_shape_fn((20, 30, 3), |(r, c, ch)| ((r * 7 + c * 3 + ch * 11 + seed) % 17) as f64 / 16.0);
    preprocess_view(&ViewImage::new(px, None, 0, Rect::new(0, 0, 20, 30)).unwrap()).unwrap()
}

#[test]
fn mock_server_round_trip() {
    let Some(backend) = mock_backend() else { return };
    assert_eq!(backend.dim(), 32);
    assert!(backend.name().contains("mock"));

    let views = [view(0), view(5)];
    let a = backend.embed_images(&views).unwrap();
    let b = backend.embed_images(&views).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].len(), 32);
    assert_ne!(a[0], a[1]);
    assert_eq!(backend.embed_text("a swan").unwrap(), backend.embed_text("a swan").unwrap());

    // The mock model is linear, so <upstream, E(x + h d) - E(x)> / h equals <vjp, d>.
    let upstream: Vec<f64> = (0..32).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
    let grad = backend.image_vjps(&views[..1], std::slice::from_ref(&upstream)).unwrap().remove(0);
    let dir = Array3::from_shape_fn((3, 224, 224), |(ch, r, c)| (((ch + r * 3 + c * 5) % 11) as f64 - 5.0) / 5.0);
    let h = 0.5;
    let shifted = PreprocessedView::from_normalized(views[0].pixels() + &(&dir * h)).unwrap();
    let e1 = backend.embed_image(&shifted).unwrap();
    let numeric: f64 = e1
        .values()
        .iter()
        .zip(a[0].values())
        .zip(&upstream)
        .map(|((x, y), u)| u * (x - y) / h)
        .sum();
    let analytic: f64 = grad.iter().zip(dir.iter()).map(|(g, d)| g * d).sum();
    assert!((numeric - analytic).abs() <= 1e-3 * analytic.abs().max(1.0), "{numeric} vs {analytic}");
}

#[test]
fn missing_server_reports_backend_unavailable() {
    let cfg = ProcessBackendConfig {
        command: vec!["/nonexistent/embedding-server".into()],
        model_id: "ViT-L/14".into(),
    };
    let err = ProcessBackend::spawn(&cfg).err().expect("spawn fails").to_string();
    assert!(err.contains("backend unavailable"), "{err}");
}

#[test]
fn load_failures_are_reported_to_the_client() {
    if !python_with_numpy() {
        return;
    }
    let cfg = ProcessBackendConfig {
        command: vec!["python3".into(), server_script().to_string_lossy().into_owned()],
        model_id: "/nonexistent/model/dir".into(),
    };
    let err = ProcessBackend::spawn(&cfg).err().expect("loading fails").to_string();
    assert!(err.contains("cannot load model"), "{err}");
}
