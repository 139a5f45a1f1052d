"""Multimodal embedding-data synthesis pipeline and retrieval evaluation kit."""

from .client import EndpointConfig, GenerationResult, MllmClient, mock_generate
from .evalkit import (
    EvalInputs,
    LossParams,
    cosine,
    fit_linear_log,
    info_nce,
    mine_hard_negative,
    precision_at_1,
    recall_at_k,
)
from .images import (
    EmbeddingMatrix,
    ImageCorpus,
    ImageRecord,
    ImageTriple,
    knn,
    load_embeddings,
    load_embeddings_any,
    load_embeddings_jsonl,
    load_manifest,
    save_embeddings,
    select_images,
)
from .pipeline import RunReport, RunSpec, run
from .prompts import PromptBundle, PromptTemplateKind, build_prompt, template_kind_for
from .sampling import (
    DistributionSpec,
    ModalityCombination,
    StyleKnobs,
    SynthesisConfig,
    TaskKind,
    default_distribution,
    load_distribution,
    sample_config,
)
from .validation import (
    FIXED_VQA_INSTRUCTION,
    DataSample,
    RawGeneration,
    ValidationReport,
    check_sample,
    finalize,
    parse_generation,
    validate,
)
from .writer import (
    DatasetStats,
    ShardWriter,
    compute_stats,
    iter_shard_samples,
    parse_sample_line,
    render_training_text,
    serialize_sample,
    write_shards,
)

__version__ = "0.1.0"
