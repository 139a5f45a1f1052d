"""Parsing, rule checking, and finalization of raw generations.

A generation is accepted only if it passes five named rules; accepted
generations are finalized into the seven-element sample (instruction, query
text/image, positive text/image, negative text/image) using the model's
revised fields exclusively.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .errors import ContractError, GenerationParseError, SchemaError
from .images import ImageTriple
from .sampling import ModalityCombination, SynthesisConfig, TaskKind

FIXED_VQA_INSTRUCTION = "Represent the given image with the following question:"

CLASSIFICATION_KEYS = (
    "description", "task_instruction", "input_text", "label", "misleading_label",
    "evaluation", "possible_improvements", "revised_task_instruction",
    "revised_input_text", "revised_label", "revised_misleading_label",
)
VQA_KEYS = (
    "description", "question", "positive_answer", "hard_negative_answer",
    "evaluation", "possible_improvements", "revised_question",
    "revised_positive_answer", "revised_hard_negative_answer",
)
RETRIEVAL_KEYS = (
    "description", "task_instruction", "query", "positive_document",
    "hard_negative_document", "evaluation", "possible_improvements",
    "revised_task_instruction", "revised_query", "revised_positive_document",
    "revised_hard_negative_document",
)

REQUIRED_KEYS: dict[TaskKind, tuple[str, ...]] = {
    TaskKind.CLASSIFICATION: CLASSIFICATION_KEYS,
    TaskKind.VQA: VQA_KEYS,
    TaskKind.RETRIEVAL: RETRIEVAL_KEYS,
}

RULE_IDS = ("R1", "R2", "R3", "R4", "R5")

_BANNED_DOC_WORDS_RE = re.compile(r"\b(query|document)\b", re.IGNORECASE)
_ASCII_LETTER_MIN_FRACTION = 0.9


@dataclass(frozen=True)
class RawGeneration:
    task: TaskKind
    fields: dict[str, str]

    def __getitem__(self, key: str) -> str:
        return self.fields[key]


@dataclass
class ValidationReport:
    violations: list[tuple[str, str]] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return "accept" if not self.violations else "reject"

    @property
    def rule_ids(self) -> list[str]:
        return [rule for rule, _ in self.violations]

    def add(self, rule: str, message: str) -> None:
        self.violations.append((rule, message))


def parse_generation(raw: str, task: TaskKind) -> RawGeneration:
    """Extract the first balanced JSON object from raw model output.

    Surrounding prose and code fences are ignored; only the object itself is
    decoded. Missing keys or non-string values raise SchemaError.
    """
    obj = _first_json_object(raw)
    if obj is None:
        raise GenerationParseError("no parsable JSON object in model output")
    fields: dict[str, str] = {}
    for key in REQUIRED_KEYS[task]:
        if key not in obj:
            raise SchemaError(f"missing required key: {key}")
        value = obj[key]
        if not isinstance(value, str):
            raise SchemaError(f"value for {key!r} must be a string, got {type(value).__name__}")
        fields[key] = value
    return RawGeneration(task=task, fields=fields)


def _first_json_object(raw: str) -> dict | None:
    decoder = json.JSONDecoder()
    pos = raw.find("{")
    while pos != -1:
        try:
            obj, _ = decoder.raw_decode(raw, pos)
        except json.JSONDecodeError:
            pos = raw.find("{", pos + 1)
            continue
        if isinstance(obj, dict):
            return obj
        pos = raw.find("{", pos + 1)
    return None


def _forced_empty_fields(task: TaskKind, modality: ModalityCombination) -> tuple[str, ...]:
    """Fields the modality combination requires to be empty strings."""
    empty: list[str] = []
    if task is TaskKind.CLASSIFICATION and not modality.query_has_text:
        empty += ["input_text", "revised_input_text"]
    elif task is TaskKind.RETRIEVAL:
        if not modality.query_has_text:
            empty += ["query", "revised_query"]
        if not modality.doc_has_text:
            empty += [
                "positive_document", "hard_negative_document",
                "revised_positive_document", "revised_hard_negative_document",
            ]
    return tuple(empty)


def _distinct_pair(task: TaskKind) -> tuple[str, str]:
    if task is TaskKind.CLASSIFICATION:
        return "revised_label", "revised_misleading_label"
    if task is TaskKind.VQA:
        return "revised_positive_answer", "revised_hard_negative_answer"
    return "revised_positive_document", "revised_hard_negative_document"


def validate(gen: RawGeneration, config: SynthesisConfig) -> ValidationReport:
    """Run rules R1-R5; the report's verdict is accept iff no rule fired."""
    if gen.task is not config.task:
        raise ContractError(f"generation task {gen.task} does not match config {config.task}")
    report = ValidationReport()
    modality = config.modality
    forced_empty = set(_forced_empty_fields(gen.task, modality))

    # R1: emptiness must match the modality combination.
    for key in forced_empty:
        if gen[key] != "":
            report.add("R1", f"{key} must be empty for modality {modality.value}")

    # R2: the positive and the hard negative must differ (text compare on
    # revised fields; skipped when the modality forces both empty).
    pos_key, neg_key = _distinct_pair(gen.task)
    if pos_key not in forced_empty and gen[pos_key] == gen[neg_key]:
        report.add("R2", f"{pos_key} equals {neg_key}")

    # R3: mandatory fields are non-empty unless R1 forces them empty.
    always_required = ["description", "evaluation", "possible_improvements"]
    revised = [k for k in REQUIRED_KEYS[gen.task] if k.startswith("revised_")]
    for key in always_required + revised:
        if key not in forced_empty and gen[key].strip() == "":
            report.add("R3", f"{key} must be non-empty")

    # R4: retrieval documents must not use the banned meta-words.
    if gen.task is TaskKind.RETRIEVAL:
        for key in ("revised_positive_document", "revised_hard_negative_document"):
            if _BANNED_DOC_WORDS_RE.search(gen[key]):
                report.add("R4", f"{key} contains a banned word ('query'/'document')")

    # R5: the instruction must be ASCII-dominant (written in English).
    if gen.task is not TaskKind.VQA:
        instruction = gen["revised_task_instruction"]
        if not _ascii_dominant(instruction):
            report.add("R5", "revised_task_instruction is not ASCII-dominant")

    return report


def _ascii_dominant(text: str) -> bool:
    letters = [c for c in text if c.isalpha()]
    if not letters:
        return True
    latin = sum(1 for c in letters if ord(c) < 128)
    return latin / len(letters) >= _ASCII_LETTER_MIN_FRACTION


@dataclass(frozen=True)
class DataSample:
    """One finalized training sample: instruction, query, positive, negative."""

    id: str
    task: TaskKind
    modality: ModalityCombination
    language: str
    instruction: str
    query_text: str
    query_image: str | None
    pos_text: str
    pos_image: str | None
    neg_text: str
    neg_image: str | None
    provenance: dict = field(default_factory=dict, compare=False)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "task": self.task.value,
            "modality": self.modality.value,
            "language": self.language,
            "instruction": self.instruction,
            "query_text": self.query_text,
            "query_image": self.query_image,
            "pos_text": self.pos_text,
            "pos_image": self.pos_image,
            "neg_text": self.neg_text,
            "neg_image": self.neg_image,
            "provenance": self.provenance,
        }

    @classmethod
    def from_record(cls, record: dict) -> "DataSample":
        return cls(
            id=record["id"],
            task=TaskKind(record["task"]),
            modality=ModalityCombination(record["modality"]),
            language=record["language"],
            instruction=record["instruction"],
            query_text=record["query_text"],
            query_image=record["query_image"],
            pos_text=record["pos_text"],
            pos_image=record["pos_image"],
            neg_text=record["neg_text"],
            neg_image=record["neg_image"],
            provenance=record.get("provenance", {}),
        )


def finalize(gen: RawGeneration, config: SynthesisConfig, triple: ImageTriple) -> DataSample:
    """Build the DataSample from an accepted generation's revised fields."""
    report = validate(gen, config)
    if report.verdict != "accept":
        raise ContractError(f"cannot finalize a rejected generation: {report.violations}")
    modality = config.modality
    task = config.task

    if task is TaskKind.CLASSIFICATION:
        instruction = gen["revised_task_instruction"]
        query_text = gen["revised_input_text"]
        pos_text = gen["revised_label"]
        neg_text = gen["revised_misleading_label"]
    elif task is TaskKind.VQA:
        instruction = FIXED_VQA_INSTRUCTION
        query_text = gen["revised_question"]
        pos_text = gen["revised_positive_answer"]
        neg_text = gen["revised_hard_negative_answer"]
    else:
        instruction = gen["revised_task_instruction"]
        query_text = gen["revised_query"]
        pos_text = gen["revised_positive_document"]
        neg_text = gen["revised_hard_negative_document"]

    sample = DataSample(
        id=f"s{config.sample_index:08d}",
        task=task,
        modality=modality,
        language=config.language,
        instruction=instruction,
        query_text=query_text,
        query_image=triple.anchor if modality.query_has_image else None,
        pos_text=pos_text,
        pos_image=triple.positive if modality.doc_has_image else None,
        neg_text=neg_text,
        neg_image=triple.negative if modality.doc_has_image else None,
        provenance={
            "seed": config.seed,
            "index": config.sample_index,
        },
    )
    problems = check_sample(sample)
    if problems:
        raise ContractError(f"finalized sample violates invariants: {problems}")
    return sample


def check_sample(sample: DataSample) -> list[tuple[str, str]]:
    """Re-check the seven-element invariants on a finalized sample.

    Mirrors R1-R5 at the sample level so existing shards can be audited
    without their original raw generations.
    """
    problems: list[tuple[str, str]] = []
    m = sample.modality
    if (sample.query_image is not None) != m.query_has_image:
        problems.append(("R1", "query_image presence does not match modality"))
    if (sample.pos_image is not None) != m.doc_has_image:
        problems.append(("R1", "pos_image presence does not match modality"))
    if (sample.neg_image is not None) != m.doc_has_image:
        problems.append(("R1", "neg_image presence does not match modality"))
    if (sample.query_text != "") != m.query_has_text:
        problems.append(("R1", "query_text emptiness does not match modality"))
    if (sample.pos_text != "") != m.doc_has_text:
        problems.append(("R1", "pos_text emptiness does not match modality"))
    if (sample.neg_text != "") != m.doc_has_text:
        problems.append(("R1", "neg_text emptiness does not match modality"))

    if (sample.pos_text, sample.pos_image) == (sample.neg_text, sample.neg_image):
        problems.append(("R2", "positive and negative documents are identical"))

    if sample.instruction.strip() == "":
        problems.append(("R3", "instruction is empty"))
    if sample.task is TaskKind.VQA and sample.instruction != FIXED_VQA_INSTRUCTION:
        problems.append(("R3", "VQA instruction is not the fixed string"))

    if sample.task is TaskKind.RETRIEVAL:
        for label, text in (("pos_text", sample.pos_text), ("neg_text", sample.neg_text)):
            if _BANNED_DOC_WORDS_RE.search(text):
                problems.append(("R4", f"{label} contains a banned word"))

    if not _ascii_dominant(sample.instruction):
        problems.append(("R5", "instruction is not ASCII-dominant"))
    return problems
