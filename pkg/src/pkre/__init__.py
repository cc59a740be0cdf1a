"""Relation classification by nearest-neighbour search over lexico-syntactic
patterns rendered from shortest dependency paths.

The pipeline: load a corpus with externally produced dependency parses and
NER tags (`corpus`), render each instance as one of several pattern flavours
(`patterns`), embed patterns as unit vectors (`embeddings`), file them into
per-class indices (`index`), classify by averaged top-K cosine similarity
(`classifier`), score and run experiments (`evaluation`), and annotate more
data against the live indices (`service`).  The `cli` module ties it all to
one command with a YAML config.
"""

from .classifier import (
    BucketScore,
    CompatibilityMap,
    KnnClassificationEngine,
    PatternKnnClassifier,
    Prediction,
    read_predictions,
    write_predictions,
)
from .corpus import (
    NO_RELATION,
    SPLITS,
    CorpusError,
    DependencyParse,
    EntityPairType,
    Instance,
    LoadReport,
    ParsedInstance,
    assemble,
    attach_parse,
    convert_refind_file,
    entity_pair_inventory,
    entity_pair_type,
    instance_to_record,
    load_dataset,
    read_conllu,
    read_ner_sidecar,
    refind_record_to_canonical,
    relation_labels,
)
from .embeddings import (
    EmbeddingError,
    EmbeddingProvider,
    ProviderConfig,
    cosine,
    normalize,
    read_vector_store,
    write_vector_store,
)
from .evaluation import (
    BudgetResult,
    EvalReport,
    SweepResult,
    f1_report,
    format_report,
    most_frequent_patterns,
    random_pattern_subset,
    run_budget,
    split_fraction,
    sweep_k,
)
from .index import (
    BuildManifest,
    ClassIndex,
    ClassIndexKey,
    DuplicateEntry,
    IndexFormatError,
    IndexStore,
    build_store,
    bucket_key_for,
    load_store,
    persist_store,
    top_k,
)
from .patterns import (
    Pattern,
    PathFailure,
    PatternVariant,
    SDP_VARIANTS,
    entity_head,
    generate_patterns,
    render_pattern,
    shortest_dep_path,
)
from .service import AnnotationState, create_app, restore_state

__version__ = "0.1.0"

__all__ = [
    "AnnotationState",
    "BucketScore",
    "BudgetResult",
    "BuildManifest",
    "ClassIndex",
    "ClassIndexKey",
    "CompatibilityMap",
    "CorpusError",
    "DependencyParse",
    "DuplicateEntry",
    "EmbeddingError",
    "EmbeddingProvider",
    "EntityPairType",
    "EvalReport",
    "IndexFormatError",
    "IndexStore",
    "Instance",
    "KnnClassificationEngine",
    "LoadReport",
    "NO_RELATION",
    "ParsedInstance",
    "Pattern",
    "PathFailure",
    "PatternKnnClassifier",
    "PatternVariant",
    "Prediction",
    "ProviderConfig",
    "SDP_VARIANTS",
    "SPLITS",
    "SweepResult",
    "assemble",
    "attach_parse",
    "bucket_key_for",
    "build_store",
    "convert_refind_file",
    "cosine",
    "create_app",
    "entity_head",
    "entity_pair_inventory",
    "entity_pair_type",
    "f1_report",
    "format_report",
    "generate_patterns",
    "instance_to_record",
    "load_dataset",
    "load_store",
    "most_frequent_patterns",
    "normalize",
    "persist_store",
    "random_pattern_subset",
    "read_conllu",
    "read_ner_sidecar",
    "read_predictions",
    "read_vector_store",
    "refind_record_to_canonical",
    "relation_labels",
    "render_pattern",
    "restore_state",
    "run_budget",
    "shortest_dep_path",
    "split_fraction",
    "sweep_k",
    "top_k",
    "write_predictions",
    "write_vector_store",
    "__version__",
]
