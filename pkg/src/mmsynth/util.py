"""Seed derivation helpers.

Every random draw in the pipeline flows through a seed derived here, so a
sample's content depends only on (master_seed, sample_index, stage tag) and
never on execution order or thread scheduling.
"""

from __future__ import annotations

import hashlib
import random


def derive_seed(*parts: object) -> int:
    """Mix arbitrary parts into a stable 64-bit seed via SHA-256."""
    key = ":".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "little")


def stage_rng(seed: int, stage: str) -> random.Random:
    """Independent RNG stream for one pipeline stage of one sample."""
    return random.Random(derive_seed(seed, stage))


def text_digest(text: str) -> str:
    """Short stable digest used for provenance and mock seeding."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
