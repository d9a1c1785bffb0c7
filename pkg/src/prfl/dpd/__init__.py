"""Dynamic parameter decomposition: low-rank update compression and its wire format."""
from .compress import (
    MODES,
    CompressedMatrix,
    CompressedUpdate,
    DpdConfig,
    LikelihoodEvaluator,
    aic,
    compress_update,
    decompress_update,
    factor_split,
    lowrank_floats,
    reconstruct_matrix,
    reshape_to_matrix,
    select_k,
    split_rank,
    variance_k,
)
from .wire import decode, encode

__all__ = [
    "MODES", "CompressedMatrix", "CompressedUpdate", "DpdConfig", "LikelihoodEvaluator", "aic",
    "compress_update", "decode", "decompress_update", "encode", "factor_split", "lowrank_floats",
    "reconstruct_matrix", "reshape_to_matrix", "select_k", "split_rank", "variance_k",
]
