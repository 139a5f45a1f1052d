"""Shared fixtures: on-disk toy corpora and ready-made synthesis inputs."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from mmsynth.images import load_embeddings, load_manifest, save_embeddings


def build_corpus(root: Path, n: int = 60, dim: int = 16, seed: int = 7):
    """Write a manifest + embedding files under root; returns their paths."""
    rng = np.random.default_rng(seed)
    ids = [f"img{i:04d}" for i in range(n)]
    vecs = rng.normal(size=(n, dim)).astype(np.float32)
    emb_dir = root / "emb"
    save_embeddings(emb_dir, ids, vecs)
    manifest = root / "manifest.jsonl"
    with manifest.open("w", encoding="utf-8") as f:
        for image_id in ids:
            f.write(json.dumps({"id": image_id, "locator": f"/images/{image_id}.jpg"}) + "\n")
    return manifest, emb_dir


@pytest.fixture
def corpus_paths(tmp_path):
    return build_corpus(tmp_path)


@pytest.fixture
def corpus(corpus_paths):
    manifest, _ = corpus_paths
    return load_manifest(manifest)


@pytest.fixture
def embeddings(corpus_paths):
    _, emb_dir = corpus_paths
    return load_embeddings(emb_dir)
