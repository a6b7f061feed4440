#!/usr/bin/env python3
"""Embedding server for the `real` backend.

Reads one JSON request per line on stdin and writes one JSON reply per line
on stdout. Images arrive already resized and normalized, as base64 encoded
little-endian float32 tensors of shape 3 x 224 x 224.

    python3 scripts/clip_server.py --model ViT-L/14
    python3 scripts/clip_server.py --mock     # tiny random linear model, no weights
"""

import argparse
import base64
import json
import sys

import numpy as np

SIZE = 224
MODEL_IDS = {
    "ViT-B/32": "openai/clip-vit-base-patch32",
    "ViT-B/16": "openai/clip-vit-base-patch16",
    "ViT-L/14": "openai/clip-vit-large-patch14",
}


def decode(b64):
    arr = np.frombuffer(base64.b64decode(b64), dtype="<f4")
    if arr.size != 3 * SIZE * SIZE:
        raise ValueError(f"tensor has {arr.size} values, expected {3 * SIZE * SIZE}")
    return arr.reshape(3, SIZE, SIZE)


def encode(arr):
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


class MockModel:
    """Linear map of 8x8 average-pooled pixels; text from a hashed seed."""

    dim = 32

    def __init__(self, model_id):
        self.model_id = f"mock:{model_id}"
        rng = np.random.default_rng(7)
        self.proj = rng.standard_normal((self.dim, 3 * 28 * 28)) / np.sqrt(3 * 28 * 28)

    def _pool(self, x):
        return x.reshape(3, 28, 8, 28, 8).mean(axis=(2, 4)).reshape(-1)

    def embed_images(self, images):
        return [self.proj @ self._pool(x.astype(np.float64)) for x in images]

    def embed_texts(self, texts):
        out = []
        for t in texts:
            seed = int.from_bytes(t.encode("utf-8")[:8].ljust(8, b"\0"), "little")
            out.append(np.random.default_rng(seed).standard_normal(self.dim))
        return out

    def image_vjps(self, images, upstream):
        grads = []
        for u in upstream:
            g = (self.proj.T @ np.asarray(u)).reshape(3, 28, 1, 28, 1) / 64.0
            grads.append(np.broadcast_to(g, (3, 28, 8, 28, 8)).reshape(3, SIZE, SIZE))
        return grads


class ClipModel:
    def __init__(self, model_id):
        import torch
        from transformers import CLIPModel, CLIPTokenizer

        name = MODEL_IDS.get(model_id, model_id)
        self.torch = torch
        self.model_id = model_id
        self.model = CLIPModel.from_pretrained(name).eval()
        self.tokenizer = CLIPTokenizer.from_pretrained(name)
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.dim = self.model.config.projection_dim

    def _batch(self, images):
        return self.torch.from_numpy(np.stack(images).astype(np.float32))

    def embed_images(self, images):
        with self.torch.no_grad():
            out = self.model.get_image_features(pixel_values=self._batch(images))
        return list(out.double().numpy())

    def embed_texts(self, texts):
        tokens = self.tokenizer(texts, padding=True, return_tensors="pt")
        with self.torch.no_grad():
            out = self.model.get_text_features(**tokens)
        return list(out.double().numpy())

    def image_vjps(self, images, upstream):
        x = self._batch(images).requires_grad_(True)
        out = self.model.get_image_features(pixel_values=x)
        u = self.torch.tensor(np.asarray(upstream), dtype=out.dtype)
        (out * u).sum().backward()
        return list(x.grad.double().numpy())


def handle(model, req):
    op = req.get("op")
    if op == "info":
        return {"model_id": model.model_id, "dim": int(model.dim)}
    if op == "embed_text":
        return {"embeddings": [e.tolist() for e in model.embed_texts(req["texts"])]}
    if op == "embed_image":
        images = [decode(b) for b in req["images"]]
        return {"embeddings": [e.tolist() for e in model.embed_images(images)]}
    if op == "image_vjp":
        images = [decode(b) for b in req["images"]]
        if len(images) != len(req["upstream"]):
            raise ValueError("one upstream vector per image is required")
        return {"gradients": [encode(g) for g in model.image_vjps(images, req["upstream"])]}
    raise ValueError(f"unknown op {op!r}")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--model", default="ViT-L/14")
    parser.add_argument("--mock", action="store_true")
    args = parser.parse_args()

    try:
        model = MockModel(args.model) if args.mock else ClipModel(args.model)
        load_error = None
    except Exception as exc:  # reported on every request so the client sees it
        model, load_error = None, f"cannot load model {args.model}: {exc}"
        print(load_error, file=sys.stderr)

    for line in sys.stdin:
        if not line.strip():
            continue
        try:
            if load_error:
                raise RuntimeError(load_error)
            reply = handle(model, json.loads(line))
        except Exception as exc:
            reply = {"error": str(exc)}
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
