"""latentlab: hierarchical latent-variable DAGs, masked-reconstruction
analysis, invertible simulators, and block-identifiability checks."""

from latentlab.fixtures import fixture_path
from latentlab.graph import (
    LatentGraph,
    Mask,
    NodeKind,
    UnknownNodeError,
    ValidationReport,
    d_separated,
    derive_dims,
    graph_from_dict,
    graph_to_dict,
    load_graph,
    save_graph,
    validate_graph,
)
from latentlab.ident import (
    IdentReport,
    RegressorConfig,
    block_identifiability,
    fit_regressor,
    r2,
)
from latentlab.locate import (
    ConditionReport,
    OracleResult,
    SharedInfo,
    brute_force_minimal_c,
    information_closure,
    level_stats,
    locate_c,
    locate_shared_info,
    locate_smc,
    verify_conditions,
)
from latentlab.mae import (
    MaeModel,
    MaskSampler,
    TrainConfig,
    TrainingDiverged,
    decode,
    encode,
    grad_check,
    load_model,
    loss,
    reconstruction_metrics,
    sample_mask,
    save_model,
    train,
)
from latentlab.scm import (
    Dataset,
    MixingFunction,
    ScmSpec,
    build_scm,
    extract_blocks,
    invert_node,
    invert_observables,
    jacobian_min_singular_value,
    load_dataset,
    sample,
    save_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "ConditionReport",
    "Dataset",
    "IdentReport",
    "LatentGraph",
    "MaeModel",
    "Mask",
    "MaskSampler",
    "MixingFunction",
    "NodeKind",
    "OracleResult",
    "RegressorConfig",
    "ScmSpec",
    "SharedInfo",
    "TrainConfig",
    "TrainingDiverged",
    "UnknownNodeError",
    "ValidationReport",
    "block_identifiability",
    "brute_force_minimal_c",
    "build_scm",
    "d_separated",
    "decode",
    "derive_dims",
    "encode",
    "extract_blocks",
    "fit_regressor",
    "fixture_path",
    "grad_check",
    "graph_from_dict",
    "graph_to_dict",
    "information_closure",
    "invert_node",
    "invert_observables",
    "jacobian_min_singular_value",
    "level_stats",
    "load_dataset",
    "load_graph",
    "load_model",
    "locate_c",
    "locate_shared_info",
    "locate_smc",
    "loss",
    "r2",
    "reconstruction_metrics",
    "sample",
    "sample_mask",
    "save_dataset",
    "save_graph",
    "save_model",
    "train",
    "validate_graph",
    "verify_conditions",
]
