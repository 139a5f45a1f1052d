"""Deterministic sharded dataset output, corpus statistics, and train-time
text rendering.

Shards are written whole (temp file then rename) so an interrupted run never
leaves a partial shard on disk; rerunning over identical input reproduces
byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .errors import WriterError
from .validation import DataSample

SHARD_NAME_FORMAT = "shard-%05d"
MANIFEST_NAME = "_manifest"
STATS_NAME = "stats"
LOCK_NAME = ".writer-lock"


@dataclass
class DatasetStats:
    by_task: dict[str, int] = field(default_factory=dict)
    by_modality: dict[str, int] = field(default_factory=dict)
    by_language: dict[str, int] = field(default_factory=dict)
    rejected_by_rule: dict[str, int] = field(default_factory=dict)
    shards: list[dict] = field(default_factory=list)

    @property
    def total_accepted(self) -> int:
        return sum(self.by_task.values())

    def count(self, sample: DataSample) -> None:
        self.by_task[sample.task.value] = self.by_task.get(sample.task.value, 0) + 1
        key = f"{sample.task.value}/{sample.modality.value}"
        self.by_modality[key] = self.by_modality.get(key, 0) + 1
        self.by_language[sample.language] = self.by_language.get(sample.language, 0) + 1

    def count_reject(self, rule: str) -> None:
        self.rejected_by_rule[rule] = self.rejected_by_rule.get(rule, 0) + 1

    def to_dict(self) -> dict:
        return {
            "total_accepted": self.total_accepted,
            "by_task": dict(sorted(self.by_task.items())),
            "by_modality": dict(sorted(self.by_modality.items())),
            "by_language": dict(sorted(self.by_language.items())),
            "rejected_by_rule": dict(sorted(self.rejected_by_rule.items())),
            "shards": self.shards,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetStats":
        return cls(
            by_task=dict(data.get("by_task", {})),
            by_modality=dict(data.get("by_modality", {})),
            by_language=dict(data.get("by_language", {})),
            rejected_by_rule=dict(data.get("rejected_by_rule", {})),
            shards=list(data.get("shards", [])),
        )


def serialize_sample(sample: DataSample) -> str:
    return json.dumps(sample.to_record(), ensure_ascii=False, separators=(",", ":"))


def parse_sample_line(line: str) -> DataSample:
    return DataSample.from_record(json.loads(line))


class ShardWriter:
    """Buffers ordered samples and flushes complete shards to out_dir.

    Holds an advisory lock for the lifetime of the writer; a lock left by a
    dead process is reclaimed.
    """

    def __init__(self, out_dir: str | Path, shard_size: int, start_shard: int = 0):
        if shard_size < 1:
            raise WriterError(f"shard_size must be >= 1, got {shard_size}")
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.shard_size = shard_size
        self.shard_index = start_shard
        self.stats = DatasetStats()
        self._buffer: list[DataSample] = []
        self._seen_ids: set[str] = set()
        self._lock_path = self.out_dir / LOCK_NAME
        self._acquire_lock()

    def _acquire_lock(self) -> None:
        try:
            fd = os.open(self._lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            holder = self._lock_path.read_text().strip()
            if holder.isdigit() and _pid_alive(int(holder)):
                raise WriterError(
                    f"{self.out_dir} is locked by live writer pid {holder}"
                ) from None
            self._lock_path.unlink()
            fd = os.open(self._lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))

    def add(self, sample: DataSample) -> None:
        if sample.id in self._seen_ids:
            raise WriterError(f"duplicate sample id: {sample.id!r}")
        self._seen_ids.add(sample.id)
        self.stats.count(sample)
        self._buffer.append(sample)
        if len(self._buffer) >= self.shard_size:
            self.flush_shard()

    def flush_shard(self) -> Path | None:
        """Write the buffered samples as the next shard; no-op when empty."""
        if not self._buffer:
            return None
        name = SHARD_NAME_FORMAT % self.shard_index
        path = self.out_dir / name
        tmp = self.out_dir / (name + ".tmp")
        try:
            with tmp.open("w", encoding="utf-8") as f:
                for sample in self._buffer:
                    f.write(serialize_sample(sample) + "\n")
            os.replace(tmp, path)
        except OSError as e:
            tmp.unlink(missing_ok=True)
            raise WriterError(f"failed writing {path}: {e}") from e
        self._buffer.clear()
        self.shard_index += 1
        return path

    def finalize(self) -> DatasetStats:
        """Flush the tail shard, then write the manifest and stats files."""
        self.flush_shard()
        shards = []
        for i in range(self.shard_index):
            path = self.out_dir / (SHARD_NAME_FORMAT % i)
            data = path.read_bytes()
            shards.append(
                {
                    "name": path.name,
                    "lines": data.count(b"\n"),
                    "sha256": hashlib.sha256(data).hexdigest(),
                }
            )
        self.stats.shards = shards
        (self.out_dir / MANIFEST_NAME).write_text(
            json.dumps({"shards": shards}, indent=2) + "\n", encoding="utf-8"
        )
        (self.out_dir / STATS_NAME).write_text(
            json.dumps(self.stats.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
        return self.stats

    def close(self) -> None:
        self._lock_path.unlink(missing_ok=True)

    def __enter__(self) -> "ShardWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except OSError:
        return False
    return True


def write_shards(
    samples: Iterable[DataSample], out_dir: str | Path, shard_size: int
) -> DatasetStats:
    """Write an ordered sample stream into `shard-%05d` files plus manifest/stats."""
    cleanup: list[Path] = []
    with ShardWriter(out_dir, shard_size) as writer:
        try:
            for sample in samples:
                before = writer.shard_index
                writer.add(sample)
                if writer.shard_index != before:
                    cleanup.append(writer.out_dir / (SHARD_NAME_FORMAT % before))
            return writer.finalize()
        except WriterError:
            for path in cleanup:
                path.unlink(missing_ok=True)
            raise


def iter_shard_samples(directory: str | Path) -> Iterator[DataSample]:
    """Yield samples from every shard file in a directory, in shard order."""
    directory = Path(directory)
    shard_paths = sorted(directory.glob("shard-*"))
    shard_paths = [p for p in shard_paths if not p.name.endswith(".tmp")]
    if not shard_paths:
        raise WriterError(f"no shard files in {directory}")
    for path in shard_paths:
        with path.open(encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    yield parse_sample_line(line)


@dataclass(frozen=True)
class TrainingText:
    query_render: str
    pos_render: str
    neg_render: str


def render_training_text(sample: DataSample, image_token: str, eos_token: str) -> TrainingText:
    """Render train-time strings: query as `<image> <instruction>\\n<query>` and
    documents as `<image>\\n<text>`, each closed with the eos token; the image
    token appears only when that element actually has an image."""
    if not image_token or not eos_token:
        raise ValueError("image_token and eos_token must be non-empty")

    prefix = f"{image_token} " if sample.query_image is not None else ""
    query = f"{prefix}{sample.instruction}\n{sample.query_text}{eos_token}"

    def doc(text: str, image: str | None) -> str:
        head = f"{image_token}\n" if image is not None else ""
        return f"{head}{text}{eos_token}"

    return TrainingText(
        query_render=query,
        pos_render=doc(sample.pos_text, sample.pos_image),
        neg_render=doc(sample.neg_text, sample.neg_image),
    )


def compute_stats(samples: Iterable[DataSample]) -> DatasetStats:
    """Tally task/modality/language totals over an arbitrary sample stream."""
    stats = DatasetStats()
    for sample in samples:
        stats.count(sample)
    return stats


def stats_partition_ok(stats: DatasetStats) -> bool:
    """Totals by task and by modality must both partition the accepted count."""
    return (
        sum(stats.by_task.values())
        == sum(stats.by_modality.values())
        == stats.total_accepted
    )
