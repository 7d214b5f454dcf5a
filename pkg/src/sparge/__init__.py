"""Block-sparse attention with predicted block masks, softmax-aware PV skipping
and per-block INT8 quantization."""

from sparge.errors import FormatError, InvariantError, TensorIOError, ValidationError
from sparge.tensor_io import GridDims, gen_synthetic, peaked_qkv, tensor_load, tensor_store
from sparge.blocks import BlockLayout, QuantizedBlocks, dequant_score, make_layout, quantize_blocks
from sparge.mask import build_global_mask, predict_mask, top_cdf
from sparge.engine import (
    AttnOutput,
    EngineConfig,
    SkipCounters,
    dense_reference,
    sparse_attention,
    sparsity_of,
)
from sparge.permutation import Permutation, apply_permutation, block_self_similarity, build_permutation
from sparge.metrics import relative_l1
from sparge.tuner import TunedParams, TuneSpec, tune_layer

__version__ = "0.1.0"

__all__ = [
    "AttnOutput",
    "BlockLayout",
    "EngineConfig",
    "FormatError",
    "GridDims",
    "InvariantError",
    "Permutation",
    "QuantizedBlocks",
    "SkipCounters",
    "TensorIOError",
    "TuneSpec",
    "TunedParams",
    "ValidationError",
    "apply_permutation",
    "block_self_similarity",
    "build_global_mask",
    "build_permutation",
    "dense_reference",
    "dequant_score",
    "gen_synthetic",
    "make_layout",
    "peaked_qkv",
    "predict_mask",
    "quantize_blocks",
    "relative_l1",
    "sparse_attention",
    "sparsity_of",
    "tensor_load",
    "tensor_store",
    "top_cdf",
    "tune_layer",
]
