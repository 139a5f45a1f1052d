"""Per-sample synthesis configuration sampling.

Draws (task, modality combination, language, style knobs) for each sample
index from a weighted distribution spec. Sampling is a pure function of
(master_seed, index, spec): the same arguments always produce the same
config, so any stage downstream can be re-run independently.
"""

from __future__ import annotations

import json
import random
from bisect import bisect_right
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from itertools import accumulate
from pathlib import Path

from .errors import ConfigError
from .util import derive_seed


class TaskKind(Enum):
    CLASSIFICATION = "classification"
    VQA = "vqa"
    RETRIEVAL = "retrieval"


class ModalityCombination(Enum):
    """Query-side/doc-side pairing, arrow form: I=image, T=text."""

    I_TO_T = "I->T"
    IT_TO_T = "IT->T"
    IT_TO_I = "IT->I"
    I_TO_I = "I->I"
    IT_TO_IT = "IT->IT"
    T_TO_I = "T->I"
    T_TO_IT = "T->IT"

    @property
    def query_side(self) -> str:
        return self.value.split("->")[0]

    @property
    def doc_side(self) -> str:
        return self.value.split("->")[1]

    @property
    def query_has_image(self) -> bool:
        return "I" in self.query_side

    @property
    def query_has_text(self) -> bool:
        return "T" in self.query_side

    @property
    def doc_has_image(self) -> bool:
        return "I" in self.doc_side

    @property
    def doc_has_text(self) -> bool:
        return "T" in self.doc_side


# The ten admissible (task, modality) rows.
ADMISSIBLE_MODALITIES: dict[TaskKind, tuple[ModalityCombination, ...]] = {
    TaskKind.CLASSIFICATION: (
        ModalityCombination.I_TO_T,
        ModalityCombination.IT_TO_T,
    ),
    TaskKind.VQA: (ModalityCombination.IT_TO_T,),
    TaskKind.RETRIEVAL: (
        ModalityCombination.I_TO_T,
        ModalityCombination.IT_TO_T,
        ModalityCombination.IT_TO_I,
        ModalityCombination.I_TO_I,
        ModalityCombination.IT_TO_IT,
        ModalityCombination.T_TO_I,
        ModalityCombination.T_TO_IT,
    ),
}

ALL_TASK_MODALITY_ROWS: tuple[tuple[TaskKind, ModalityCombination], ...] = tuple(
    (task, m) for task in TaskKind for m in ADMISSIBLE_MODALITIES[task]
)

# Default per-modality sample counts within each task; normalizing within a
# task gives the default modality weights, and the grand totals are
# 140,000 / 140,000 / 280,000 with tasks weighted 1:1:2.
DEFAULT_MODALITY_COUNTS: dict[TaskKind, dict[ModalityCombination, int]] = {
    TaskKind.CLASSIFICATION: {
        ModalityCombination.I_TO_T: 126_177,
        ModalityCombination.IT_TO_T: 13_823,
    },
    TaskKind.VQA: {
        ModalityCombination.IT_TO_T: 140_000,
    },
    TaskKind.RETRIEVAL: {
        ModalityCombination.I_TO_T: 98_040,
        ModalityCombination.IT_TO_T: 41_960,
        ModalityCombination.IT_TO_I: 56_185,
        ModalityCombination.I_TO_I: 27_988,
        ModalityCombination.IT_TO_IT: 27_656,
        ModalityCombination.T_TO_I: 14_090,
        ModalityCombination.T_TO_IT: 14_081,
    },
}

DEFAULT_TASK_WEIGHTS: dict[TaskKind, float] = {
    TaskKind.CLASSIFICATION: 0.25,
    TaskKind.VQA: 0.25,
    TaskKind.RETRIEVAL: 0.50,
}

# Style-knob vocabularies (drawn uniformly).
TEXT_LENGTH_BUCKETS = ("less than 10", "at least 10", "at least 50", "at least 100", "at least 200")
QUERY_LENGTH_BUCKETS = ("less than 5 words", "5 to 15 words", "at least 10 words")
DOC_LENGTH_BUCKETS = ("10", "30", "200", "300")
CLARITY_BUCKETS = ("clear", "understandable with some effort", "ambiguous")
EDUCATION_BUCKETS = ("high school", "college", "PhD")
QUERY_FREQUENCY_BUCKETS = ("extremely long-tail", "long-tail", "common")

_WEIGHT_SUM_TOL = 1e-9


def load_language_table() -> list[dict[str, str]]:
    """Bundled 93-language table: [{code, name, group}] with group in {english, high, low}."""
    raw = resources.files("mmsynth.data").joinpath("languages.json").read_text("utf-8")
    return json.loads(raw)


_LANGUAGE_TABLE = load_language_table()
LANGUAGE_CODES: tuple[str, ...] = tuple(row["code"] for row in _LANGUAGE_TABLE)
LANGUAGE_NAMES: dict[str, str] = {row["code"]: row["name"] for row in _LANGUAGE_TABLE}

# Default language weights: English 0.50, the 17 other high-resource
# languages share 0.25 uniformly, the 75 low-resource share 0.25 uniformly.
_N_HIGH = sum(1 for row in _LANGUAGE_TABLE if row["group"] == "high")
_N_LOW = sum(1 for row in _LANGUAGE_TABLE if row["group"] == "low")
DEFAULT_LANGUAGE_WEIGHTS: dict[str, float] = {
    row["code"]: (
        0.50 if row["group"] == "english"
        else 0.25 / _N_HIGH if row["group"] == "high"
        else 0.25 / _N_LOW
    )
    for row in _LANGUAGE_TABLE
}


@dataclass(frozen=True)
class StyleKnobs:
    """Per-sample prompt diversity knobs; unused fields are None for the task."""

    clarity: str
    education: str
    text_length: str | None = None  # classification input_text / VQA question bucket
    query_length: str | None = None  # retrieval only
    doc_length: str | None = None  # retrieval only
    query_frequency: str | None = None  # retrieval only


@dataclass
class DistributionSpec:
    """Weights over tasks, per-task modality combinations, and languages."""

    task_weights: dict[TaskKind, float]
    modality_weights: dict[TaskKind, dict[ModalityCombination, float]]
    language_weights: dict[str, float]

    # Cumulative tables, built once in validate() for fast repeated draws.
    _task_cum: list[tuple[TaskKind, float]] = field(default_factory=list, repr=False)
    _modality_cum: dict[TaskKind, list[tuple[ModalityCombination, float]]] = field(
        default_factory=dict, repr=False
    )
    _language_codes: list[str] = field(default_factory=list, repr=False)
    _language_cum: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """Check invariants and rebuild cumulative draw tables."""
        _check_weight_map("task_weights", self.task_weights, set(TaskKind))
        for task in TaskKind:
            if task not in self.modality_weights:
                raise ConfigError(f"modality_weights.{task.value}: missing")
            allowed = set(ADMISSIBLE_MODALITIES[task])
            _check_weight_map(
                f"modality_weights.{task.value}", self.modality_weights[task], allowed
            )
        if len(self.language_weights) != 93:
            raise ConfigError(
                f"language_weights: expected exactly 93 entries, got {len(self.language_weights)}"
            )
        _check_weight_map("language_weights", self.language_weights, None)

        self._task_cum = _cumulative(self.task_weights)
        self._modality_cum = {
            task: _cumulative(self.modality_weights[task]) for task in TaskKind
        }
        self._language_codes = list(self.language_weights)
        self._language_cum = list(accumulate(self.language_weights.values()))


def _check_weight_map(path: str, weights: dict, expected_keys: set | None) -> None:
    if expected_keys is not None and set(weights) != expected_keys:
        missing = {k.value if isinstance(k, Enum) else k for k in expected_keys - set(weights)}
        extra = {k.value if isinstance(k, Enum) else k for k in set(weights) - expected_keys}
        raise ConfigError(f"{path}: key mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
    for key, w in weights.items():
        name = key.value if isinstance(key, Enum) else key
        if not isinstance(w, (int, float)) or w < 0:
            raise ConfigError(f"{path}.{name}: weight must be a nonnegative number, got {w!r}")
    total = sum(weights.values())
    if abs(total - 1.0) > _WEIGHT_SUM_TOL:
        raise ConfigError(f"{path}: weights sum to {total!r}, expected 1.0")


def _cumulative(weights: dict) -> list[tuple[object, float]]:
    cum, total = [], 0.0
    for key, w in weights.items():
        total += w
        cum.append((key, total))
    return cum


def _draw(rng: random.Random, cum: list[tuple[object, float]]):
    u = rng.random() * cum[-1][1]
    for key, edge in cum:
        if u < edge:
            return key
    return cum[-1][0]


@dataclass(frozen=True)
class SynthesisConfig:
    """Fully-drawn configuration for one synthetic sample."""

    sample_index: int
    task: TaskKind
    modality: ModalityCombination
    language: str
    knobs: StyleKnobs
    seed: int


def default_distribution() -> DistributionSpec:
    """Default weights: tasks 1:1:2, modalities from the bundled per-task counts,
    languages English-dominant over the 93-language table."""
    modality_weights = {}
    for task, counts in DEFAULT_MODALITY_COUNTS.items():
        total = sum(counts.values())
        modality_weights[task] = {m: c / total for m, c in counts.items()}
    return DistributionSpec(
        task_weights=dict(DEFAULT_TASK_WEIGHTS),
        modality_weights=modality_weights,
        language_weights=dict(DEFAULT_LANGUAGE_WEIGHTS),
    )


def sample_config(master_seed: int, index: int, spec: DistributionSpec) -> SynthesisConfig:
    """Draw one sample's full configuration; pure in (master_seed, index, spec)."""
    if index < 0:
        raise ConfigError(f"sample index must be nonnegative, got {index}")
    seed = derive_seed(master_seed, index)
    rng = random.Random(seed)

    task = _draw(rng, spec._task_cum)
    modality = _draw(rng, spec._modality_cum[task])

    u = rng.random() * spec._language_cum[-1]
    pos = bisect_right(spec._language_cum, u)
    language = spec._language_codes[min(pos, len(spec._language_codes) - 1)]

    clarity = rng.choice(CLARITY_BUCKETS)
    education = rng.choice(EDUCATION_BUCKETS)
    if task is TaskKind.RETRIEVAL:
        knobs = StyleKnobs(
            clarity=clarity,
            education=education,
            query_length=rng.choice(QUERY_LENGTH_BUCKETS),
            doc_length=rng.choice(DOC_LENGTH_BUCKETS),
            query_frequency=rng.choice(QUERY_FREQUENCY_BUCKETS),
        )
    else:
        knobs = StyleKnobs(
            clarity=clarity,
            education=education,
            text_length=rng.choice(TEXT_LENGTH_BUCKETS),
        )

    return SynthesisConfig(
        sample_index=index,
        task=task,
        modality=modality,
        language=language,
        knobs=knobs,
        seed=seed,
    )


def load_distribution(path: str | Path) -> DistributionSpec:
    """Load a DistributionSpec from a JSON or YAML key/value tree.

    Any omitted section falls back to the defaults. Language weights may be
    given partially; unlisted known codes get weight 0 so the 93-entry
    invariant holds. Unknown task, modality, or language keys are rejected
    with a path-qualified error.
    """
    tree = _load_tree(path)
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    default = default_distribution()

    task_weights = default.task_weights
    if "task_weights" in tree:
        task_weights = _parse_enum_map("task_weights", tree["task_weights"], _task_from_str)

    modality_weights = default.modality_weights
    if "modality_weights" in tree:
        section = tree["modality_weights"]
        if not isinstance(section, dict):
            raise ConfigError("modality_weights: must be a mapping of task -> weights")
        modality_weights = dict(default.modality_weights)
        for task_name, weights in section.items():
            task = _task_from_str(f"modality_weights.{task_name}", task_name)
            modality_weights[task] = _parse_enum_map(
                f"modality_weights.{task_name}", weights, _modality_from_str
            )

    language_weights = default.language_weights
    if "language_weights" in tree:
        section = tree["language_weights"]
        if not isinstance(section, dict):
            raise ConfigError("language_weights: must be a mapping of code -> weight")
        language_weights = {code: 0.0 for code in LANGUAGE_CODES}
        for code, w in section.items():
            if code not in language_weights:
                raise ConfigError(f"language_weights.{code}: unknown language code")
            language_weights[code] = w

    return DistributionSpec(
        task_weights=task_weights,
        modality_weights=modality_weights,
        language_weights=language_weights,
    )


def _load_tree(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: file not found")
    text = path.read_text("utf-8")
    if path.suffix in (".yaml", ".yml"):
        import yaml

        try:
            return yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e


def _task_from_str(path: str, name: object) -> TaskKind:
    for task in TaskKind:
        if task.value == name:
            return task
    raise ConfigError(f"{path}: unknown task {name!r}")


def _modality_from_str(path: str, name: object) -> ModalityCombination:
    for m in ModalityCombination:
        if m.value == name:
            return m
    raise ConfigError(f"{path}: unknown modality combination {name!r}")


def _parse_enum_map(path: str, raw: object, parse_key) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: must be a mapping")
    return {parse_key(f"{path}.{k}", k): v for k, v in raw.items()}
