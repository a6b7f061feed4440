//! Out-of-process embedding backend.
//!
//! The pretrained model runs in a separate server process (see
//! `scripts/clip_server.py`) that speaks newline-delimited JSON on its
//! standard streams. Image tensors travel as base64 little-endian `f32`
//! blobs in `3 x 224 x 224` channel-major order.
//!
//! Requests and responses:
//!
//! ```text
//! {"op":"info"}                                 -> {"model_id":"ViT-L/14","dim":768}
//! {"op":"embed_text","texts":["..."]}           -> {"embeddings":[[...], ...]}
//! {"op":"embed_image","images":["<b64>"]}       -> {"embeddings":[[...], ...]}
//! {"op":"image_vjp","images":[..],"upstream":[[..]]} -> {"gradients":["<b64>", ...]}
//! any failure                                   -> {"error":"message"}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{EmbeddingBackend, EmbeddingVector, PreprocessedView, MODEL_INPUT_SIZE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessBackendConfig {
    pub command: Vec<String>,
    pub model_id: String,
}

struct Channel {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Embedding backend that forwards every call to a model server process.
/// Calls are serialized through one handle.
pub struct ProcessBackend {
    model_id: String,
    dim: usize,
    channel: Mutex<Channel>,
}

fn encode_tensor(pixels: &Array3<f64>) -> String {
    let mut bytes = Vec::with_capacity(pixels.len() * 4);
    for v in pixels.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode_tensor(encoded: &str) -> Result<Array3<f64>> {
    let bytes = STANDARD
        .decode(encoded)
        .map_err(|e| Error::Backend(format!("bad tensor encoding: {e}")))?;
    let n = 3 * MODEL_INPUT_SIZE * MODEL_INPUT_SIZE;
    if bytes.len() != 4 * n {
        return Err(Error::Backend(format!("tensor has {} bytes, expected {}", bytes.len(), 4 * n)));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Array3::from_shape_vec((3, MODEL_INPUT_SIZE, MODEL_INPUT_SIZE), values).expect("length checked"))
}

impl ProcessBackend {
    pub fn spawn(config: &ProcessBackendConfig) -> Result<Self> {
        let (program, args) = config
            .command
            .split_first()
            .ok_or_else(|| Error::Backend("embedding server command is empty".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .arg("--model")
            .arg(&config.model_id)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("backend unavailable: cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = BufReader::new(child.stdout.take().expect("stdout is piped"));
        let mut backend = ProcessBackend {
            model_id: config.model_id.clone(),
            dim: 0,
            channel: Mutex::new(Channel { child, stdin, stdout }),
        };
        let info = backend.call(json!({"op": "info"}))?;
        backend.dim = info["dim"]
            .as_u64()
            .ok_or_else(|| Error::Backend("server did not report an embedding dimension".into()))?
            as usize;
        if let Some(id) = info["model_id"].as_str() {
            backend.model_id = id.to_string();
        }
        Ok(backend)
    }

    fn call(&self, request: Value) -> Result<Value> {
        let mut ch = self
            .channel
            .lock()
            .map_err(|_| Error::Backend("backend handle poisoned".into()))?;
        let mut line = serde_json::to_string(&request)?;
        line.push('\n');
        ch.stdin
            .write_all(line.as_bytes())
            .and_then(|_| ch.stdin.flush())
            .map_err(|e| Error::Backend(format!("backend unavailable: {e}")))?;
        let mut reply = String::new();
        let n = ch
            .stdout
            .read_line(&mut reply)
            .map_err(|e| Error::Backend(format!("backend unavailable: {e}")))?;
        if n == 0 {
            return Err(Error::Backend("backend unavailable: server closed its output".into()));
        }
        let value: Value = serde_json::from_str(&reply)?;
        if let Some(err) = value.get("error") {
            return Err(Error::Backend(err.as_str().unwrap_or("unknown server error").to_string()));
        }
        Ok(value)
    }

    fn parse_embeddings(&self, value: &Value, expected: usize) -> Result<Vec<EmbeddingVector>> {
        let rows = value["embeddings"]
            .as_array()
            .ok_or_else(|| Error::Backend("reply lacks embeddings".into()))?;
        if rows.len() != expected {
            return Err(Error::Backend(format!("expected {expected} embeddings, got {}", rows.len())));
        }
        rows.iter()
            .map(|row| {
                let vals: Vec<f64> = serde_json::from_value(row.clone())?;
                if vals.len() != self.dim {
                    return Err(Error::Backend(format!("embedding has {} values, expected {}", vals.len(), self.dim)));
                }
                EmbeddingVector::new(vals).map_err(|e| Error::Backend(e.to_string()))
            })
            .collect()
    }
}

impl Drop for ProcessBackend {
    fn drop(&mut self) {
        if let Ok(ch) = self.channel.get_mut() {
            let _ = ch.child.kill();
            let _ = ch.child.wait();
        }
    }
}

impl EmbeddingBackend for ProcessBackend {
    fn name(&self) -> String {
        format!("real({})", self.model_id)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, view: &PreprocessedView) -> Result<EmbeddingVector> {
        Ok(self.embed_images(std::slice::from_ref(view))?.remove(0))
    }

    fn embed_images(&self, views: &[PreprocessedView]) -> Result<Vec<EmbeddingVector>> {
        if views.is_empty() {
            return Ok(Vec::new());
        }
        let images: Vec<String> = views.iter().map(|v| encode_tensor(v.pixels())).collect();
        let reply = self.call(json!({"op": "embed_image", "images": images}))?;
        self.parse_embeddings(&reply, views.len())
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::invalid("text must be nonempty"));
        }
        let reply = self.call(json!({"op": "embed_text", "texts": [text]}))?;
        Ok(self.parse_embeddings(&reply, 1)?.remove(0))
    }

    fn image_vjp(&self, view: &PreprocessedView, upstream: &[f64]) -> Result<Array3<f64>> {
        Ok(self
            .image_vjps(std::slice::from_ref(view), &[upstream.to_vec()])?
            .remove(0))
    }

    fn image_vjps(&self, views: &[PreprocessedView], upstream: &[Vec<f64>]) -> Result<Vec<Array3<f64>>> {
        if views.len() != upstream.len() {
            return Err(Error::invalid("one upstream gradient per view is required"));
        }
        if views.is_empty() {
            return Ok(Vec::new());
        }
        let images: Vec<String> = views.iter().map(|v| encode_tensor(v.pixels())).collect();
        let reply = self.call(json!({"op": "image_vjp", "images": images, "upstream": upstream}))?;
        let grads = reply["gradients"]
            .as_array()
            .ok_or_else(|| Error::Backend("reply lacks gradients".into()))?;
        if grads.len() != views.len() {
            return Err(Error::Backend("gradient count mismatch".into()));
        }
        grads
            .iter()
            .map(|g| decode_tensor(g.as_str().ok_or_else(|| Error::Backend("gradient is not a string".into()))?))
            .collect()
    }
}
