"""End-to-end synthesis: config draw, image assignment, prompt build, one
generation call, validation, and ordered sharded output.

Workers run stages per sample index in parallel; results re-enter index
order through a reorder buffer before the writer sees them, so output bytes
never depend on scheduling. A checkpoint after each completed shard records
the first index not yet covered, making interrupted runs resumable.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .client import EndpointConfig, MllmClient, mock_generate
from .errors import ContractError, GenerationParseError, SchemaError, TransportError
from .images import (
    DEFAULT_NEGATIVE_RANK_WINDOW,
    EmbeddingMatrix,
    ImageCorpus,
    load_embeddings,
    load_manifest,
    select_images,
)
from .prompts import build_prompt, default_example_pool
from .sampling import DistributionSpec, default_distribution, sample_config
from .util import text_digest
from .validation import DataSample, finalize, parse_generation, validate
from .writer import DatasetStats, ShardWriter

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.json"

REJECT_PARSE = "parse"
REJECT_SCHEMA = "schema"


@dataclass
class RunSpec:
    master_seed: int
    n_samples: int
    corpus_manifest: str
    embeddings_dir: str
    out_dir: str
    shard_size: int = 1000
    distribution: DistributionSpec = field(default_factory=default_distribution)
    use_mock: bool = True
    endpoint: EndpointConfig | None = None
    max_concurrency: int = 8
    regenerate_on_reject: bool = False
    negative_rank_window: tuple[int, int] = DEFAULT_NEGATIVE_RANK_WINDOW

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if not self.use_mock and self.endpoint is None:
            raise ValueError("an endpoint config is required unless use_mock is set")

    def fingerprint(self) -> str:
        """Identity of everything that determines output bytes."""
        key = json.dumps(
            {
                "master_seed": self.master_seed,
                "n_samples": self.n_samples,
                "corpus_manifest": self.corpus_manifest,
                "embeddings_dir": self.embeddings_dir,
                "shard_size": self.shard_size,
                "use_mock": self.use_mock,
                "regenerate_on_reject": self.regenerate_on_reject,
                "negative_rank_window": list(self.negative_rank_window),
                "task_weights": {t.value: w for t, w in self.distribution.task_weights.items()},
                "language_weights": self.distribution.language_weights,
                "modality_weights": {
                    t.value: {m.value: w for m, w in mw.items()}
                    for t, mw in self.distribution.modality_weights.items()
                },
            },
            sort_keys=True,
        )
        return text_digest(key)


@dataclass
class RunReport:
    accepted: int = 0
    rejected_by_rule: dict[str, int] = field(default_factory=dict)
    transport_failures: int = 0
    wall_time: float = 0.0
    stats: DatasetStats | None = None

    @property
    def rejected(self) -> int:
        return sum(self.rejected_by_rule.values())

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "rejected": self.rejected,
            "rejected_by_rule": dict(sorted(self.rejected_by_rule.items())),
            "transport_failures": self.transport_failures,
            "wall_time": self.wall_time,
            "stats": self.stats.to_dict() if self.stats else None,
        }


@dataclass
class _Checkpoint:
    fingerprint: str
    next_index: int = 0
    shard_count: int = 0
    accepted: int = 0
    rejected_by_rule: dict[str, int] = field(default_factory=dict)
    transport_failures: int = 0
    stats: dict = field(default_factory=dict)

    def save(self, out_dir: Path) -> None:
        tmp = out_dir / (CHECKPOINT_NAME + ".tmp")
        tmp.write_text(json.dumps(self.__dict__, sort_keys=True), encoding="utf-8")
        os.replace(tmp, out_dir / CHECKPOINT_NAME)

    @classmethod
    def load(cls, out_dir: Path) -> "_Checkpoint | None":
        path = out_dir / CHECKPOINT_NAME
        if not path.exists():
            return None
        return cls(**json.loads(path.read_text("utf-8")))


@dataclass
class _Outcome:
    """Disposition of one sample index."""

    index: int
    sample: DataSample | None = None
    reject_rules: list[str] = field(default_factory=list)
    transport_failed: bool = False


def _synthesize_one(
    index: int,
    spec: RunSpec,
    corpus: ImageCorpus,
    embeddings: EmbeddingMatrix,
    example_pool,
    client: MllmClient | None,
) -> _Outcome:
    config = sample_config(spec.master_seed, index, spec.distribution)
    triple = select_images(config, embeddings, corpus, spec.negative_rank_window)
    bundle = build_prompt(config, triple, example_pool)

    attempts = 2 if spec.regenerate_on_reject else 1
    outcome = _Outcome(index=index)
    for attempt in range(attempts):
        try:
            if spec.use_mock:
                result = mock_generate(bundle, config)
            else:
                result = client.generate(bundle)
        except TransportError as e:
            logger.warning("sample %d: transport failure: %s", index, e)
            outcome.transport_failed = True
            return outcome
        try:
            gen = parse_generation(result.raw_text, config.task)
        except SchemaError as e:
            logger.info("sample %d: schema reject: %s", index, e)
            outcome.reject_rules = [REJECT_SCHEMA]
            continue
        except GenerationParseError as e:
            logger.info("sample %d: parse reject: %s", index, e)
            outcome.reject_rules = [REJECT_PARSE]
            continue
        report = validate(gen, config)
        if report.verdict != "accept":
            logger.info("sample %d: rejected by %s", index, report.rule_ids)
            outcome.reject_rules = sorted(set(report.rule_ids))
            continue
        sample = finalize(gen, config, triple)
        sample.provenance.update(
            {
                "model_name": "mock" if spec.use_mock else spec.endpoint.model_name,
                "prompt_digest": text_digest(bundle.text),
                "attempt": attempt + 1,
            }
        )
        outcome.sample = sample
        outcome.reject_rules = []
        return outcome
    return outcome


def run(spec: RunSpec, on_sample: Callable[[_Outcome], None] | None = None) -> RunReport:
    """Execute the full synthesis run described by `spec`.

    Per-sample rejects and transport failures are counted, never fatal;
    setup problems (unloadable corpus, bad distribution) raise. `on_sample`
    is called in index order after each sample is disposed.
    """
    start = time.monotonic()
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    corpus = load_manifest(spec.corpus_manifest)
    embeddings = load_embeddings(spec.embeddings_dir)
    example_pool = default_example_pool()
    client = None
    if not spec.use_mock:
        client = MllmClient(spec.endpoint, locate=corpus.locator_for)

    fingerprint = spec.fingerprint()
    ckpt = _Checkpoint.load(out_dir)
    if ckpt is not None:
        if ckpt.fingerprint != fingerprint:
            raise ContractError(
                f"{out_dir} holds a checkpoint for a different run spec; "
                "use a fresh output directory"
            )
        logger.info("resuming at index %d (%d shards done)", ckpt.next_index, ckpt.shard_count)
    else:
        ckpt = _Checkpoint(fingerprint=fingerprint)

    writer = ShardWriter(out_dir, spec.shard_size, start_shard=ckpt.shard_count)
    writer.stats = DatasetStats.from_dict(ckpt.stats) if ckpt.stats else DatasetStats()
    report = RunReport(
        accepted=ckpt.accepted,
        rejected_by_rule=dict(ckpt.rejected_by_rule),
        transport_failures=ckpt.transport_failures,
    )

    def dispose(outcome: _Outcome) -> None:
        before = writer.shard_index
        if outcome.sample is not None:
            writer.add(outcome.sample)
            report.accepted += 1
        elif outcome.transport_failed:
            report.transport_failures += 1
        else:
            for rule in outcome.reject_rules:
                report.rejected_by_rule[rule] = report.rejected_by_rule.get(rule, 0) + 1
                writer.stats.count_reject(rule)
        if writer.shard_index != before:
            _persist_checkpoint(ckpt, outcome.index + 1, writer, report, out_dir)
        if on_sample is not None:
            on_sample(outcome)

    try:
        _run_indices(spec, corpus, embeddings, example_pool, client, ckpt.next_index, dispose)
        stats = writer.finalize()
        stats.rejected_by_rule = dict(report.rejected_by_rule)
        report.stats = stats
        _persist_checkpoint(ckpt, spec.n_samples, writer, report, out_dir)
    finally:
        writer.close()

    report.wall_time = time.monotonic() - start
    return report


def _persist_checkpoint(
    ckpt: _Checkpoint, next_index: int, writer: ShardWriter, report: RunReport, out_dir: Path
) -> None:
    ckpt.next_index = next_index
    ckpt.shard_count = writer.shard_index
    ckpt.accepted = report.accepted
    ckpt.rejected_by_rule = dict(report.rejected_by_rule)
    ckpt.transport_failures = report.transport_failures
    ckpt.stats = writer.stats.to_dict()
    ckpt.save(out_dir)


def _run_indices(
    spec: RunSpec,
    corpus: ImageCorpus,
    embeddings: EmbeddingMatrix,
    example_pool,
    client: MllmClient | None,
    first_index: int,
    dispose: Callable[[_Outcome], None],
) -> None:
    """Fan indices out to workers, feed dispositions back in index order."""
    indices = iter(range(first_index, spec.n_samples))
    window = max(1, spec.max_concurrency) * 4
    completed: dict[int, _Outcome] = {}
    next_emit = first_index

    def submit_next(pool):
        index = next(indices, None)
        if index is None:
            return None
        return pool.submit(
            _synthesize_one, index, spec, corpus, embeddings, example_pool, client
        )

    with ThreadPoolExecutor(max_workers=spec.max_concurrency) as pool:
        pending = set()
        for _ in range(window):
            f = submit_next(pool)
            if f is None:
                break
            pending.add(f)
        while pending:
            done, pending = wait(pending, return_when=FIRST_COMPLETED)
            for future in done:
                outcome = future.result()
                completed[outcome.index] = outcome
                f = submit_next(pool)
                if f is not None:
                    pending.add(f)
            while next_emit in completed:
                dispose(completed.pop(next_emit))
                next_emit += 1
