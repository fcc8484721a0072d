"""Black-box generator calibration toolkit.

Diagnoses intra-mode collapse in a generative model through nothing but
samples: a Monte Carlo collapse score per anchor, population statistics
over an anchor collection, and worst-case dense-mode search in an
identity-embedding space.  Two calibration methods then reshape the
latent distribution without touching the model: a reweighted Gaussian
mixture fit to clustered latents, and convex-hull importance sampling
with per-mode acceptance probabilities.
"""

from .diagnosis import (
    ConsistencyResult,
    ConvergenceCurve,
    DenseModeResult,
    MccsValue,
    PopulationStats,
    build_report,
    convergence_curve,
    find_worst_mode,
    mccs,
    mode_consistency_check,
    population_stats,
    top_k_modes,
)
from .embedding import cosine_distance, mccs as mccs_of_mean, similarity
from .errors import (
    AcceptanceStallError,
    BadMagicError,
    BbgcError,
    CalibrationError,
    DegenerateDataError,
    DiagnosisError,
    DimensionMismatchError,
    EmptyClusterError,
    EmptyCollectionError,
    EmptyModeListError,
    EmptyStoreError,
    InvalidConfigError,
    KTooLargeError,
    MalformedResponseError,
    NonFiniteError,
    OverlappingCollectionsError,
    SizesOutOfRangeError,
    SourceError,
    SourceTimeoutError,
    SourceUnavailableError,
    StoreFormatError,
    TooFewAnchorsError,
    TruncatedStoreError,
    VersionMismatchError,
    ZeroDenseCountError,
    ZeroVectorError,
)
from .gmm import (
    MixtureModel,
    calibrate_gmm,
    kmeans_fit,
    load_mixture,
    sample_calibrated,
    save_mixture,
)
from .importance import (
    AcceptanceStats,
    HullMembership,
    ImportanceSamplingPlan,
    PlanEntry,
    build_plan,
    hull_membership,
    load_plan,
    sample_calibrated_is,
    save_plan,
)
from .source import (
    RemoteSource,
    SourceSpec,
    SubprocessSource,
    SyntheticSource,
    build_synthetic_model,
    generate,
    load_source_spec,
    open_source,
    run_worker,
    sample_latents,
)
from .store import (
    SampleStore,
    StoreWriter,
    export_table,
    latents_disjoint,
    read_header,
    read_store,
    write_store,
)

__version__ = "1.0.0"

__all__ = [
    "AcceptanceStallError",
    "AcceptanceStats",
    "BadMagicError",
    "BbgcError",
    "CalibrationError",
    "ConsistencyResult",
    "ConvergenceCurve",
    "DegenerateDataError",
    "DenseModeResult",
    "DiagnosisError",
    "DimensionMismatchError",
    "EmptyClusterError",
    "EmptyCollectionError",
    "EmptyModeListError",
    "EmptyStoreError",
    "HullMembership",
    "ImportanceSamplingPlan",
    "InvalidConfigError",
    "KTooLargeError",
    "MalformedResponseError",
    "MccsValue",
    "MixtureModel",
    "NonFiniteError",
    "OverlappingCollectionsError",
    "PlanEntry",
    "PopulationStats",
    "RemoteSource",
    "SampleStore",
    "SizesOutOfRangeError",
    "SourceError",
    "SourceSpec",
    "SourceTimeoutError",
    "SourceUnavailableError",
    "StoreFormatError",
    "StoreWriter",
    "SubprocessSource",
    "SyntheticSource",
    "TooFewAnchorsError",
    "TruncatedStoreError",
    "VersionMismatchError",
    "ZeroDenseCountError",
    "ZeroVectorError",
    "build_plan",
    "build_report",
    "build_synthetic_model",
    "calibrate_gmm",
    "convergence_curve",
    "cosine_distance",
    "export_table",
    "find_worst_mode",
    "generate",
    "hull_membership",
    "kmeans_fit",
    "latents_disjoint",
    "load_mixture",
    "load_plan",
    "load_source_spec",
    "mccs",
    "mccs_of_mean",
    "mode_consistency_check",
    "open_source",
    "population_stats",
    "read_header",
    "read_store",
    "run_worker",
    "sample_calibrated",
    "sample_calibrated_is",
    "sample_latents",
    "save_mixture",
    "save_plan",
    "similarity",
    "top_k_modes",
    "write_store",
]
