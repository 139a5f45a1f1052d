"""Image corpus manifest, exact cosine kNN, and per-sample image assignment.

Embeddings are produced by an external embedder; this module only loads the
binary matrix, answers exact nearest-neighbor queries over it, and picks the
(anchor, positive, negative) images a sample's modality combination needs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorpusError
from .sampling import SynthesisConfig
from .util import stage_rng

# Neighbor-rank window the hard-negative image is drawn from (clamped to the
# corpus and kept >= 2 so it can never collide with the rank-1 positive).
DEFAULT_NEGATIVE_RANK_WINDOW = (20, 100)


@dataclass(frozen=True)
class ImageRecord:
    id: str
    locator: str
    caption: str | None = None
    status: str = "ok"


@dataclass
class ImageCorpus:
    """All `ok` records from a manifest, in file order."""

    records: list[ImageRecord]
    excluded_count: int

    def __post_init__(self):
        self._by_id = {r.id: r for r in self.records}

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._by_id

    def locator_for(self, image_id: str) -> str:
        try:
            return self._by_id[image_id].locator
        except KeyError:
            raise CorpusError(f"unknown image id: {image_id!r}") from None


def load_manifest(path: str | Path) -> ImageCorpus:
    """Load a one-record-per-line JSON manifest, dropping excluded records."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"manifest not found: {path}")
    records: list[ImageRecord] = []
    seen: set[str] = set()
    excluded = 0
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: malformed record: {e}") from e
            if not isinstance(obj, dict) or "id" not in obj or "locator" not in obj:
                raise CorpusError(f"{path}:{lineno}: record must carry 'id' and 'locator'")
            image_id = obj["id"]
            if image_id in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate image id {image_id!r}")
            seen.add(image_id)
            status = obj.get("status", "ok")
            if status not in ("ok", "excluded"):
                raise CorpusError(f"{path}:{lineno}: unknown status {status!r}")
            if status == "excluded":
                excluded += 1
                continue
            records.append(
                ImageRecord(id=image_id, locator=obj["locator"], caption=obj.get("caption"))
            )
    if not records:
        raise CorpusError(f"{path}: no usable records")
    return ImageCorpus(records=records, excluded_count=excluded)


@dataclass
class EmbeddingMatrix:
    """Unit-normalized embedding rows keyed by image id.

    Rows are stored float64 after L2 normalization so that neighbor ranking
    is insensitive to float32 rounding; the on-disk format stays float32.
    """

    ids: list[str]
    dim: int
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (len(self.ids), self.dim):
            raise CorpusError(
                f"embedding shape {self.values.shape} does not match "
                f"{len(self.ids)} ids x dim {self.dim}"
            )
        if len(set(self.ids)) != len(self.ids):
            raise CorpusError("embedding ids are not unique")
        self._index = {image_id: i for i, image_id in enumerate(self.ids)}

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._index

    def row(self, image_id: str) -> np.ndarray:
        try:
            return self.values[self._index[image_id]]
        except KeyError:
            raise CorpusError(f"unknown image id: {image_id!r}") from None

    @classmethod
    def from_raw(cls, ids: list[str], raw: np.ndarray) -> "EmbeddingMatrix":
        """Validate and unit-normalize raw (n, dim) vectors."""
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2:
            raise CorpusError(f"embeddings must be 2-D, got shape {raw.shape}")
        if not np.isfinite(raw).all():
            raise CorpusError("embeddings contain NaN or Inf")
        norms = np.linalg.norm(raw, axis=1)
        zero_rows = np.flatnonzero(norms == 0.0)
        if zero_rows.size:
            raise CorpusError(f"zero-norm embedding row for id {ids[int(zero_rows[0])]!r}")
        return cls(ids=list(ids), dim=raw.shape[1], values=raw / norms[:, None])


def load_embeddings(directory: str | Path) -> EmbeddingMatrix:
    """Load the ids.txt / vecs.f32 / meta triplet from a directory."""
    directory = Path(directory)
    meta_path = directory / "meta"
    ids_path = directory / "ids.txt"
    vecs_path = directory / "vecs.f32"
    for p in (meta_path, ids_path, vecs_path):
        if not p.exists():
            raise CorpusError(f"missing embedding file: {p}")
    try:
        meta = json.loads(meta_path.read_text("utf-8"))
        dim, count = int(meta["dim"]), int(meta["count"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CorpusError(f"{meta_path}: expected JSON with 'dim' and 'count': {e}") from e
    ids = ids_path.read_text("utf-8").splitlines()
    if len(ids) != count:
        raise CorpusError(f"{ids_path}: {len(ids)} ids but meta declares count={count}")
    blob = vecs_path.read_bytes()
    expected = 4 * dim * count
    if len(blob) != expected:
        raise CorpusError(f"{vecs_path}: {len(blob)} bytes, expected {expected} (4*dim*count)")
    raw = np.frombuffer(blob, dtype="<f4").reshape(count, dim)
    return EmbeddingMatrix.from_raw(ids, raw)


def load_embeddings_jsonl(path: str | Path) -> EmbeddingMatrix:
    """Load per-line `{"id": ..., "vec": [...]}` records as an EmbeddingMatrix."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"embedding file not found: {path}")
    ids: list[str] = []
    rows: list[list[float]] = []
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                ids.append(obj["id"])
                rows.append(obj["vec"])
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise CorpusError(f"{path}:{lineno}: expected {{id, vec}} record: {e}") from e
    if not rows:
        raise CorpusError(f"{path}: no embedding records")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise CorpusError(f"{path}: inconsistent vector lengths {sorted(widths)}")
    return EmbeddingMatrix.from_raw(ids, np.asarray(rows, dtype=np.float64))


def load_embeddings_any(path: str | Path) -> EmbeddingMatrix:
    """Accept either a binary embedding directory or a per-line record file."""
    path = Path(path)
    return load_embeddings(path) if path.is_dir() else load_embeddings_jsonl(path)


def save_embeddings(directory: str | Path, ids: list[str], vectors: np.ndarray) -> None:
    """Write the ids.txt / vecs.f32 / meta triplet (little-endian float32)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vectors = np.asarray(vectors)
    (directory / "ids.txt").write_text("\n".join(ids) + "\n", encoding="utf-8")
    (directory / "vecs.f32").write_bytes(np.ascontiguousarray(vectors, dtype="<f4").tobytes())
    (directory / "meta").write_text(
        json.dumps({"dim": int(vectors.shape[1]), "count": int(vectors.shape[0])}) + "\n",
        encoding="utf-8",
    )


def knn(
    embeddings: EmbeddingMatrix,
    query_id: str,
    k: int,
    exclude_self: bool = True,
) -> list[tuple[str, float]]:
    """Exact full-scan cosine neighbors, best first; ties break by id ascending."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = embeddings.row(query_id)
    scores = embeddings.values @ q
    pairs = [
        (image_id, float(scores[i]))
        for i, image_id in enumerate(embeddings.ids)
        if not (exclude_self and image_id == query_id)
    ]
    pairs.sort(key=lambda p: (-p[1], p[0]))
    return pairs[:k]


@dataclass(frozen=True)
class ImageTriple:
    """Anchor plus, for doc-side-image modalities, its positive/negative images."""

    anchor: str
    positive: str | None = None
    negative: str | None = None

    def __post_init__(self):
        present = [x for x in (self.anchor, self.positive, self.negative) if x is not None]
        if len(set(present)) != len(present):
            raise CorpusError(f"image triple members must be pairwise distinct: {present}")
        if (self.positive is None) != (self.negative is None):
            raise CorpusError("positive and negative images must be present together")


def select_images(
    config: SynthesisConfig,
    embeddings: EmbeddingMatrix,
    corpus: ImageCorpus,
    negative_rank_window: tuple[int, int] = DEFAULT_NEGATIVE_RANK_WINDOW,
) -> ImageTriple:
    """Draw the anchor image and, when the doc side has images, the positive
    (rank-1 neighbor) and hard-negative (seeded draw from a rank window).

    An anchor is sampled for every modality combination; whether it lands in
    the final sample is decided at finalization.
    """
    if len(corpus) == 0:
        raise CorpusError("empty corpus")
    needs_doc_images = config.modality.doc_has_image

    candidates = corpus.ids
    if needs_doc_images:
        candidates = [i for i in candidates if i in embeddings]
        if len(candidates) < 3:
            raise CorpusError(
                f"modality {config.modality.value} needs >= 3 embedded images, "
                f"have {len(candidates)}"
            )

    rng = stage_rng(config.seed, "images")
    anchor = candidates[rng.randrange(len(candidates))]
    if not needs_doc_images:
        return ImageTriple(anchor=anchor)

    candidate_set = set(candidates)
    neighbors = knn(embeddings, anchor, k=len(embeddings.ids), exclude_self=True)
    neighbors = [(i, s) for i, s in neighbors if i in candidate_set]
    positive = neighbors[0][0]
    lo, hi = negative_rank_window
    lo = max(2, min(lo, len(neighbors)))
    hi = max(2, min(hi, len(neighbors)))
    rank = rng.randint(lo, hi)
    negative = neighbors[rank - 1][0]
    return ImageTriple(anchor=anchor, positive=positive, negative=negative)
