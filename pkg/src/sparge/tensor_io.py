"""Dense tensor helpers, the STZ file format and synthetic input generators.

Tensors are plain ``numpy.ndarray`` objects of dtype float32, C-contiguous.
Attention inputs are laid out as ``[heads, n, d]``.

STZ layout (all integers little-endian)::

    b"SPRG" | u32 version=1 | u32 ndim | ndim x u64 extents | u32 dtype (0=f32) | payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from sparge.errors import FormatError, TensorIOError, ValidationError

MAGIC = b"SPRG"
VERSION = 1
DTYPE_F32 = 0

_SMOOTH_WAVES = 8
_SMOOTH_MAX_FREQ = 1.0 / 16


@dataclass(frozen=True)
class GridDims:
    """Extents of a T x H x W token grid."""

    t: int
    h: int
    w: int

    def __post_init__(self):
        if min(self.t, self.h, self.w) < 1:
            raise ValidationError(f"grid extents must be >= 1, got {self.as_tuple()}")

    @property
    def n(self) -> int:
        return self.t * self.h * self.w

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.t, self.h, self.w)

    @classmethod
    def parse(cls, text: str) -> "GridDims":
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 3:
            raise ValidationError(f"expected T,H,W, got {text!r}")
        try:
            t, h, w = (int(p) for p in parts)
        except ValueError as exc:
            raise ValidationError(f"expected integer extents, got {text!r}") from exc
        return cls(t, h, w)


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a contiguous float32 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim == 0:
        raise ValidationError(f"{name} must have at least one dimension")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def tensor_store(t: np.ndarray, path: Union[str, Path]) -> None:
    arr = as_tensor(t)
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    header += struct.pack("<I", DTYPE_F32)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))
    except OSError as exc:
        raise TensorIOError(f"cannot write {path}: {exc}") from exc


def _read_exact(fh, size: int, what: str) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        raise TensorIOError(f"truncated file while reading {what}")
    return buf


def tensor_load(path: Union[str, Path]) -> np.ndarray:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise TensorIOError(f"cannot open {path}: {exc}") from exc
    with fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        version, ndim = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if ndim == 0:
            raise FormatError(f"{path}: ndim must be >= 1")
        shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, "extents"))
        (dtype,) = struct.unpack("<I", _read_exact(fh, 4, "dtype code"))
        if dtype != DTYPE_F32:
            raise FormatError(f"{path}: unsupported dtype code {dtype}")
        count = int(np.prod(shape, dtype=np.int64))
        payload = _read_exact(fh, 4 * count, "payload")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if not np.isfinite(arr).all():
        raise ValidationError(f"{path}: payload contains non-finite values")
    return arr


def _grid_coords(dims: GridDims) -> np.ndarray:
    """Integer (t, h, w) coordinates for tokens in row-major order."""
    t, h, w = np.meshgrid(np.arange(dims.t), np.arange(dims.h), np.arange(dims.w), indexing="ij")
    return np.stack([t.ravel(), h.ravel(), w.ravel()], axis=1)


def gen_synthetic(kind: str, dims, d: int, heads: int, seed: int) -> np.ndarray:
    """Deterministic synthetic ``[heads, N, d]`` input.

    ``gaussian`` draws i.i.d. standard normals. ``smooth3d`` sums eight random
    low-frequency cosine waves over the grid, so grid-adjacent tokens have
    similar feature vectors. ``dims`` is a :class:`GridDims` or a token count
    (an int is treated as a 1 x 1 x N grid).
    """
    if isinstance(dims, (int, np.integer)):
        if dims < 1:
            raise ValidationError("sequence length must be >= 1")
        dims = GridDims(1, 1, int(dims))
    if d < 1 or heads < 1:
        raise ValidationError("d and heads must be >= 1")
    rng = np.random.default_rng(seed)
    n = dims.n
    if kind == "gaussian":
        return rng.standard_normal((heads, n, d), dtype=np.float32)
    if kind == "smooth3d":
        coords = _grid_coords(dims)
        out = np.zeros((heads, n, d), dtype=np.float64)
        for hd in range(heads):
            # cycles per token, capped at one cycle per 16 tokens on every axis
            freqs = rng.uniform(0.0, _SMOOTH_MAX_FREQ, size=(_SMOOTH_WAVES, 3))
            phases = rng.uniform(0.0, 2 * np.pi, size=_SMOOTH_WAVES)
            amps = rng.standard_normal((_SMOOTH_WAVES, d))
            waves = np.cos(2 * np.pi * coords @ freqs.T + phases)
            out[hd] = waves @ amps / np.sqrt(_SMOOTH_WAVES)
        return out.astype(np.float32)
    raise ValidationError(f"unknown synthetic kind {kind!r}")


def peaked_qkv(
    n: int,
    d: int,
    heads: int,
    seed: int,
    segment: int = 256,
    sharpness: float = 10.0,
    noise: float = 0.3,
    value_noise: float = 0.5,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Q, K, V whose attention concentrates inside contiguous token segments.

    Tokens of one segment share a random unit "topic" direction, scaled so that
    same-topic query/key logits sit about ``sharpness`` above cross-topic ones,
    and a shared value vector perturbed by ``value_noise``. The attention map
    is block-diagonal up to noise and values are locally coherent, the regime
    where block skipping pays off.
    """
    if n < 1 or d < 1 or heads < 1 or segment < 1:
        raise ValidationError("n, d, heads and segment must be >= 1")
    rng = np.random.default_rng(seed)
    n_seg = -(-n // segment)
    seg_of = np.arange(n) // segment
    scale = np.sqrt(sharpness * np.sqrt(d))
    q = np.empty((heads, n, d), dtype=np.float32)
    k = np.empty_like(q)
    v = np.empty_like(q)
    for hd in range(heads):
        topics = rng.standard_normal((n_seg, d))
        topics /= np.linalg.norm(topics, axis=1, keepdims=True)
        base = scale * topics[seg_of]
        q[hd] = base + noise * rng.standard_normal((n, d))
        k[hd] = base + noise * rng.standard_normal((n, d))
        v[hd] = rng.standard_normal((n_seg, d))[seg_of] + value_noise * rng.standard_normal((n, d))
    return q, k, v
