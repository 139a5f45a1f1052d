"""Tests for shard writing, stats, serialization round-trips, and rendering."""

from __future__ import annotations

import hashlib
import json
from dataclasses import replace

import pytest

from mmsynth.client import mock_generate
from mmsynth.errors import WriterError
from mmsynth.prompts import build_prompt
from mmsynth.sampling import ALL_TASK_MODALITY_ROWS, ModalityCombination, TaskKind
from mmsynth.validation import DataSample, finalize, parse_generation
from mmsynth.writer import (
    ShardWriter,
    compute_stats,
    iter_shard_samples,
    parse_sample_line,
    render_training_text,
    serialize_sample,
    stats_partition_ok,
    write_shards,
)

from test_images import make_config
from test_prompts import triple_for

M = ModalityCombination


def make_sample(i, task=TaskKind.VQA, modality=M.IT_TO_T) -> DataSample:
    return DataSample(
        id=f"s{i:08d}", task=task, modality=modality, language="en",
        instruction="Represent the given image with the following question:",
        query_text=f"What stands at site {i}?", query_image="imgA",
        pos_text="A lighthouse.", pos_image="imgB" if modality.doc_has_image else None,
        neg_text="A windmill.", neg_image="imgC" if modality.doc_has_image else None,
        provenance={"index": i},
    )


def mock_sample(task, modality, seed=0, index=0) -> DataSample:
    config = make_config(task, modality, seed=seed, index=index)
    triple = triple_for(modality)
    bundle = build_prompt(config, triple)
    gen = parse_generation(mock_generate(bundle, config).raw_text, task)
    return finalize(gen, config, triple)


def shard_digests(directory):
    return {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(directory.glob("shard-*"))
    }


class TestWriteShards:
    def test_shard_arithmetic(self, tmp_path):
        samples = [make_sample(i) for i in range(10)]
        stats = write_shards(samples, tmp_path / "out", shard_size=4)
        assert [s["name"] for s in stats.shards] == ["shard-00000", "shard-00001", "shard-00002"]
        assert [s["lines"] for s in stats.shards] == [4, 4, 2]

    def test_rerun_identical_digests(self, tmp_path):
        samples = [make_sample(i) for i in range(9)]
        write_shards(samples, tmp_path / "a", shard_size=4)
        write_shards(samples, tmp_path / "b", shard_size=4)
        assert shard_digests(tmp_path / "a") == shard_digests(tmp_path / "b")

    def test_stats_partition(self, tmp_path):
        samples = [
            make_sample(0, TaskKind.VQA, M.IT_TO_T),
            make_sample(1, TaskKind.VQA, M.IT_TO_T),
            mock_sample(TaskKind.CLASSIFICATION, M.I_TO_T, index=2),
            mock_sample(TaskKind.RETRIEVAL, M.IT_TO_IT, index=3),
        ]
        stats = write_shards(samples, tmp_path / "out", shard_size=10)
        assert stats_partition_ok(stats)
        total = sum(stats.by_task.get(t.value, 0) for t in TaskKind)
        assert total == stats.total_accepted == 4

    def test_duplicate_id_rejected(self, tmp_path):
        samples = [make_sample(1), make_sample(1)]
        with pytest.raises(WriterError, match="duplicate sample id"):
            write_shards(samples, tmp_path / "out", shard_size=10)

    def test_duplicate_cleanup_removes_written_shards(self, tmp_path):
        samples = [make_sample(i) for i in (0, 1, 2, 0)]
        with pytest.raises(WriterError):
            write_shards(samples, tmp_path / "out", shard_size=2)
        assert list((tmp_path / "out").glob("shard-*")) == []

    def test_manifest_and_stats_files(self, tmp_path):
        write_shards([make_sample(i) for i in range(5)], tmp_path / "out", shard_size=2)
        manifest = json.loads((tmp_path / "out" / "_manifest").read_text())
        assert [s["lines"] for s in manifest["shards"]] == [2, 2, 1]
        assert all(len(s["sha256"]) == 64 for s in manifest["shards"])
        stats = json.loads((tmp_path / "out" / "stats").read_text())
        assert stats["total_accepted"] == 5

    def test_iter_shard_samples_order(self, tmp_path):
        samples = [make_sample(i) for i in range(7)]
        write_shards(samples, tmp_path / "out", shard_size=3)
        assert list(iter_shard_samples(tmp_path / "out")) == samples

    def test_modality_serialized_in_arrow_form(self, tmp_path):
        write_shards([mock_sample(TaskKind.RETRIEVAL, M.IT_TO_I)], tmp_path / "out", 10)
        text = (tmp_path / "out" / "shard-00000").read_text()
        assert '"modality":"IT->I"' in text


class TestLocking:
    def test_second_writer_blocked(self, tmp_path):
        first = ShardWriter(tmp_path / "out", shard_size=4)
        try:
            with pytest.raises(WriterError, match="locked by live writer"):
                ShardWriter(tmp_path / "out", shard_size=4)
        finally:
            first.close()
        second = ShardWriter(tmp_path / "out", shard_size=4)
        second.close()

    def test_stale_lock_reclaimed(self, tmp_path):
        out = tmp_path / "out"
        out.mkdir()
        (out / ".writer-lock").write_text("999999999")  # no such pid
        writer = ShardWriter(out, shard_size=4)
        writer.close()
        assert not (out / ".writer-lock").exists()


class TestSerializationRoundTrip:
    def test_all_ten_rows(self):
        for task, modality in ALL_TASK_MODALITY_ROWS:
            sample = mock_sample(task, modality, seed=3)
            assert parse_sample_line(serialize_sample(sample)) == sample

    def test_record_field_order(self):
        line = serialize_sample(make_sample(0))
        keys = list(json.loads(line).keys())
        assert keys == [
            "id", "task", "modality", "language", "instruction", "query_text",
            "query_image", "pos_text", "pos_image", "neg_text", "neg_image", "provenance",
        ]

    def test_absent_image_is_null_empty_text_is_string(self):
        sample = mock_sample(TaskKind.CLASSIFICATION, M.I_TO_T)
        record = json.loads(serialize_sample(sample))
        assert record["pos_image"] is None
        assert record["query_text"] == ""


class TestRenderTrainingText:
    def test_query_with_image_and_empty_text(self):
        sample = replace(make_sample(0), instruction="Find the matching caption.", query_text="")
        rendered = render_training_text(sample, "[IMAGE]", "[EOS]")
        assert rendered.query_render == "[IMAGE] Find the matching caption.\n[EOS]"

    def test_query_without_image(self):
        sample = mock_sample(TaskKind.RETRIEVAL, M.T_TO_I)
        rendered = render_training_text(sample, "[IMAGE]", "[EOS]")
        assert "[IMAGE]" not in rendered.query_render
        assert rendered.query_render.startswith(sample.instruction)

    def test_document_with_image_and_no_text(self):
        sample = mock_sample(TaskKind.RETRIEVAL, M.IT_TO_I)
        rendered = render_training_text(sample, "[IMAGE]", "[EOS]")
        assert rendered.pos_render == "[IMAGE]\n[EOS]"
        assert rendered.neg_render == "[IMAGE]\n[EOS]"

    def test_eos_terminates_every_render(self):
        for task, modality in ALL_TASK_MODALITY_ROWS:
            rendered = render_training_text(mock_sample(task, modality), "<img>", "</s>")
            for text in (rendered.query_render, rendered.pos_render, rendered.neg_render):
                assert text.endswith("</s>")

    def test_render_structure_all_rows(self):
        for task, modality in ALL_TASK_MODALITY_ROWS:
            sample = mock_sample(task, modality, seed=8)
            rendered = render_training_text(sample, "[IMAGE]", "[EOS]")
            expected_query = (
                ("[IMAGE] " if modality.query_has_image else "")
                + sample.instruction + "\n" + sample.query_text + "[EOS]"
            )
            assert rendered.query_render == expected_query
            expected_pos = (
                ("[IMAGE]\n" if modality.doc_has_image else "") + sample.pos_text + "[EOS]"
            )
            assert rendered.pos_render == expected_pos

    def test_empty_tokens_rejected(self):
        with pytest.raises(ValueError):
            render_training_text(make_sample(0), "", "[EOS]")


class TestComputeStats:
    def test_matches_write_stats(self, tmp_path):
        samples = [mock_sample(t, m, index=i)
                   for i, (t, m) in enumerate(ALL_TASK_MODALITY_ROWS)]
        written = write_shards(samples, tmp_path / "out", shard_size=4)
        recomputed = compute_stats(iter_shard_samples(tmp_path / "out"))
        assert recomputed.by_task == written.by_task
        assert recomputed.by_modality == written.by_modality
        assert recomputed.by_language == written.by_language

    def test_large_run_converges_to_default_weights(self):
        # 100k sampled configs turned into skeleton samples: every stats cell
        # lands within 0.01 of its configured weight.
        from mmsynth.sampling import default_distribution, sample_config

        spec = default_distribution()
        stats = compute_stats(
            skeleton_sample(sample_config(31337, i, spec)) for i in range(100_000)
        )
        assert stats_partition_ok(stats)
        n = stats.total_accepted
        assert n == 100_000
        for task, weight in spec.task_weights.items():
            assert abs(stats.by_task[task.value] / n - weight) < 0.01
        for task in TaskKind:
            task_total = stats.by_task[task.value]
            for m, weight in spec.modality_weights[task].items():
                cell = stats.by_modality.get(f"{task.value}/{m.value}", 0)
                assert abs(cell / task_total - weight) < 0.01, (task, m)


def skeleton_sample(config) -> DataSample:
    """Minimal invariant-satisfying sample for a config (no generation step)."""
    m = config.modality
    return DataSample(
        id=f"s{config.sample_index:08d}", task=config.task, modality=m,
        language=config.language,
        instruction="Represent the given image with the following question:"
        if config.task is TaskKind.VQA else "Match the scene.",
        query_text="q" if m.query_has_text else "",
        query_image="a" if m.query_has_image else None,
        pos_text="p" if m.doc_has_text else "",
        pos_image="b" if m.doc_has_image else None,
        neg_text="n" if m.doc_has_text else "",
        neg_image="c" if m.doc_has_image else None,
    )
