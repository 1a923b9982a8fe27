"""Instance search over precomputed convolutional feature maps.

The pipeline: pool feature tensors into descriptors (whole-image or
per-region, sum or max), normalize and optionally whiten them, rank a
database by cosine similarity to a query image, spatially rerank the top
of the ranking using region proposals, optionally expand the query from
its best matches, and score everything with the good/ok/junk average
precision protocol.

A deterministic synthetic-dataset generator (:mod:`ifsearch.synth`)
plants recoverable instances directly in feature space so the whole
pipeline can be exercised end to end without a network or image data.
"""

from .descriptors import (
    Descriptor,
    DescriptorState,
    WhiteningModel,
    apply_whitening,
    finalize,
    l2_normalize,
    learn_whitening,
    read_whitening_model,
    write_whitening_model,
)
from .errors import (
    BadMagic,
    DegenerateInput,
    DimensionMismatch,
    DisjointBox,
    FormatError,
    IfsearchError,
    InvariantError,
    MissingClassIndex,
    MissingClassScores,
    MissingModel,
    NonFiniteData,
    SchemaError,
    TruncatedFile,
    UnsupportedVersion,
)
from .evaluation import (
    EvalReport,
    LocalizationStats,
    QueryEval,
    average_precision,
    evaluate_ranking,
    iou,
    localization_stats,
    mean_ap,
    precision_recall_curve,
)
from .pooling import (
    GridRegion,
    Pooling,
    RawDescriptor,
    Scope,
    pool_all_proposals,
    pool_image,
    pool_region,
    warp_box,
)
from .rerank import (
    QeConfig,
    RegionDescriptorCache,
    RerankConfig,
    expand_query,
    query_expansion,
    query_region_descriptor,
    rerank,
    rerank_class_agnostic,
    rerank_class_specific,
)
from .search import (
    BuildConfig,
    Index,
    RankEntry,
    Ranking,
    Stage,
    build_index,
    cosine,
    filter_search,
    query_descriptor,
    read_index,
    read_rankings,
    write_index,
    write_rankings,
)
from .synth import SynthSpec, generate, load_localizations, load_synth_spec
from .report import write_report
from .tensor_store import (
    BoundingBox,
    DatasetManifest,
    FeatureMap,
    GroundTruth,
    MapHeader,
    QueryDef,
    RegionProposal,
    load_ground_truth,
    load_manifest,
    read_feature_map,
    read_feature_map_header,
    read_proposals,
    validate_manifest_files,
    write_feature_map,
    write_ground_truth,
    write_manifest,
    write_proposals,
)

__version__ = "0.1.0"
