"""Token-axis tiling and symmetric per-block INT8 quantization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sparge.errors import ValidationError

DEFAULT_BQ = 128
DEFAULT_BK = 64
QMAX = 127


@dataclass(frozen=True)
class BlockLayout:
    n: int
    b_q: int
    b_k: int

    def __post_init__(self):
        if self.n < 1 or self.b_q < 1 or self.b_k < 1:
            raise ValidationError(f"n, b_q, b_k must be >= 1, got {(self.n, self.b_q, self.b_k)}")

    @property
    def t_m(self) -> int:
        return -(-self.n // self.b_q)

    @property
    def t_n(self) -> int:
        return -(-self.n // self.b_k)

    def q_rows(self, i: int) -> range:
        return range(i * self.b_q, min((i + 1) * self.b_q, self.n))

    def k_rows(self, j: int) -> range:
        return range(j * self.b_k, min((j + 1) * self.b_k, self.n))


def make_layout(n: int, b_q: int = DEFAULT_BQ, b_k: int = DEFAULT_BK) -> BlockLayout:
    return BlockLayout(n, b_q, b_k)


@dataclass(frozen=True)
class QuantizedBlocks:
    """INT8 values with the source shape and one float32 scale per block."""

    values: np.ndarray  # int8, [n, d]
    scales: np.ndarray  # float32, [num_blocks]
    block: int

    def dequantize(self) -> np.ndarray:
        rows = np.repeat(self.scales, self.block)[: self.values.shape[0]]
        return self.values.astype(np.float32) * rows[:, None]


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_blocks(x: np.ndarray, block: int) -> QuantizedBlocks:
    """Quantize ``x`` ([n, d]) with scale ``max|x| / 127`` per block of rows.

    An all-zero block gets scale 1.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ValidationError(f"expected [n, d], got shape {x.shape}")
    if block < 1:
        raise ValidationError("block size must be >= 1")
    n = x.shape[0]
    nb = -(-n // block)
    absmax = np.zeros(nb, dtype=np.float32)
    # reduceat over block starts handles the partial last block
    starts = np.arange(nb) * block
    if n:
        absmax = np.maximum.reduceat(np.abs(x).max(axis=1), starts).astype(np.float32)
    scales = np.where(absmax > 0, absmax / np.float32(QMAX), np.float32(1.0)).astype(np.float32)
    # subnormal blocks would otherwise underflow to a zero scale
    scales = np.maximum(scales, np.finfo(np.float32).tiny)
    row_scale = np.repeat(scales, block)[:n]
    q = round_half_away(x / row_scale[:, None])
    q = np.clip(q, -QMAX, QMAX).astype(np.int8)
    return QuantizedBlocks(q, scales, block)


def dequant_score(s_int: np.ndarray, delta_q, delta_k) -> np.ndarray:
    """Scale an exact integer score tile back to float.

    The 1/sqrt(d) factor is already folded into Q before quantization.
    ``delta_q`` / ``delta_k`` may be scalars or arrays broadcasting against
    ``s_int`` (e.g. ``[..., 1, 1]`` for a batch of tiles).
    """
    scale = np.asarray(delta_q, dtype=np.float32) * np.asarray(delta_k, dtype=np.float32)
    return np.asarray(s_int, dtype=np.float32) * scale
