"""Prompt rendering for one-pass generation.

The four instruction templates live as text assets with `{slot}` markers; a
manifest pins the slot set per file and is checked when the assets load.
Rendering fills every slot from the sample's configuration and returns the
prompt text together with the ordered image attachments.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

from .errors import PromptError
from .images import ImageTriple
from .sampling import LANGUAGE_NAMES, ModalityCombination, SynthesisConfig, TaskKind
from .util import stage_rng

GENERATION_TEMPERATURE = 1.0
GENERATION_TOP_P = 1.0

EXAMPLES_PER_PROMPT = 3

_SLOT_RE = re.compile(r"\{([a-z_]+)\}")

MODALITY_PHRASES: dict[ModalityCombination, str] = {
    ModalityCombination.I_TO_T: "image-to-text",
    ModalityCombination.IT_TO_T: "(image,text)-to-text",
    ModalityCombination.IT_TO_I: "(image,text)-to-image",
    ModalityCombination.I_TO_I: "image-to-image",
    ModalityCombination.IT_TO_IT: "(image,text)-to-(image,text)",
    ModalityCombination.T_TO_I: "text-to-image",
    ModalityCombination.T_TO_IT: "text-to-(image,text)",
}

EMPTY_BRANCH = "an empty string"
_CLS_INPUT_TEXT = "a string the input text specified by the classification task"
_RET_QUERY = "a random user search query specified by the retrieval task and the query image."
_RET_POS_DOC = "a string, the relevant document for the query based on the query text and image content"
_RET_NEG_DOC = "a string, a hard negative document that only appears relevant to the query and the query image content."


class PromptTemplateKind(Enum):
    CLASSIFICATION = "classification.txt"
    VQA = "vqa.txt"
    RETRIEVAL_QUERY_IMAGE_ONLY = "retrieval_query_image.txt"
    RETRIEVAL_WITH_DOC_IMAGES = "retrieval_doc_images.txt"


def template_kind_for(task: TaskKind, modality: ModalityCombination) -> PromptTemplateKind:
    """Pick the template for a (task, modality) row."""
    if task is TaskKind.CLASSIFICATION:
        return PromptTemplateKind.CLASSIFICATION
    if task is TaskKind.VQA:
        return PromptTemplateKind.VQA
    if modality.doc_has_image:
        return PromptTemplateKind.RETRIEVAL_WITH_DOC_IMAGES
    return PromptTemplateKind.RETRIEVAL_QUERY_IMAGE_ONLY


def _load_assets() -> tuple[dict[PromptTemplateKind, str], dict[str, list[str]]]:
    root = resources.files("mmsynth.templates")
    manifest = json.loads(root.joinpath("slots.json").read_text("utf-8"))
    templates = {}
    for kind in PromptTemplateKind:
        text = root.joinpath(kind.value).read_text("utf-8")
        declared = set(manifest.get(kind.value, ()))
        found = set(_SLOT_RE.findall(text))
        if found != declared:
            raise PromptError(
                f"{kind.value}: slots in file {sorted(found)} do not match "
                f"manifest {sorted(declared)}"
            )
        templates[kind] = text
    return templates, manifest


_TEMPLATES, SLOT_MANIFEST = _load_assets()

_EXAMPLE_POOLS: dict[TaskKind, list[str]] = {}
_raw_pools = json.loads(
    resources.files("mmsynth.templates").joinpath("example_tasks.json").read_text("utf-8")
)
_EXAMPLE_POOLS[TaskKind.CLASSIFICATION] = _raw_pools["classification"]
_EXAMPLE_POOLS[TaskKind.RETRIEVAL] = _raw_pools["retrieval"]


def default_example_pool() -> dict[TaskKind, list[str]]:
    """Bundled example-task lists for the `example_tasks` slot."""
    return {task: list(pool) for task, pool in _EXAMPLE_POOLS.items()}


@dataclass(frozen=True)
class PromptBundle:
    text: str
    attachments: tuple[str, ...]
    generation_params: dict = field(
        default_factory=lambda: {"temperature": GENERATION_TEMPERATURE, "top_p": GENERATION_TOP_P}
    )


def build_prompt(
    config: SynthesisConfig,
    triple: ImageTriple,
    example_pool: dict[TaskKind, list[str]] | None = None,
) -> PromptBundle:
    """Render the task's template with every slot filled for this config."""
    if example_pool is None:
        example_pool = _EXAMPLE_POOLS
    modality = config.modality
    if (triple.positive is not None) != modality.doc_has_image:
        raise PromptError(
            f"triple {triple} inconsistent with modality {modality.value}: "
            f"doc-side images {'required' if modality.doc_has_image else 'not allowed'}"
        )

    kind = template_kind_for(config.task, modality)
    values = _slot_values(config, example_pool)

    text = _TEMPLATES[kind]
    for slot in SLOT_MANIFEST[kind.value]:
        text = text.replace("{%s}" % slot, values[slot])
    leftover = _SLOT_RE.search(text)
    if leftover:
        raise PromptError(f"{kind.value}: unresolved slot {leftover.group(0)}")

    if kind is PromptTemplateKind.RETRIEVAL_WITH_DOC_IMAGES:
        attachments = (triple.anchor, triple.positive, triple.negative)
    else:
        attachments = (triple.anchor,)
    return PromptBundle(text=text, attachments=attachments)


def _slot_values(config: SynthesisConfig, example_pool: dict[TaskKind, list[str]]) -> dict[str, str]:
    modality, knobs = config.modality, config.knobs
    values = {
        "modality_phrase": MODALITY_PHRASES[modality],
        "language": LANGUAGE_NAMES.get(config.language, config.language),
        "clarity": knobs.clarity,
        "education": knobs.education,
    }
    if config.task is TaskKind.CLASSIFICATION:
        values["text_length"] = knobs.text_length
        values["input_text_branch"] = _CLS_INPUT_TEXT if modality.query_has_text else EMPTY_BRANCH
        values["example_tasks"] = _pick_examples(config, example_pool)
    elif config.task is TaskKind.VQA:
        values["text_length"] = knobs.text_length
    else:
        values["query_frequency"] = knobs.query_frequency
        values["query_length"] = knobs.query_length
        values["doc_length"] = knobs.doc_length
        values["query_branch"] = _RET_QUERY if modality.query_has_text else EMPTY_BRANCH
        values["positive_document_branch"] = (
            _RET_POS_DOC if modality.doc_has_text else EMPTY_BRANCH
        )
        values["hard_negative_document_branch"] = (
            _RET_NEG_DOC if modality.doc_has_text else EMPTY_BRANCH
        )
        values["example_tasks"] = _pick_examples(config, example_pool)
    return values


def _pick_examples(config: SynthesisConfig, example_pool: dict[TaskKind, list[str]]) -> str:
    pool = example_pool.get(config.task) or []
    if not pool:
        raise PromptError(f"no example tasks available for {config.task.value}")
    rng = stage_rng(config.seed, "examples")
    chosen = rng.sample(pool, k=min(EXAMPLES_PER_PROMPT, len(pool)))
    return "\n".join(f"- {task}" for task in chosen)
