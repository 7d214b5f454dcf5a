"""Token reorderings over a T x H x W grid and block self-similarity.

Attention is invariant to a shared permutation of its tokens once the output
is permuted back. Orderings that keep grid neighbours adjacent in the flattened
sequence raise block self-similarity, and with it the number of blocks the
mask predictor can safely drop.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from sparge.errors import ValidationError
from sparge.mask import block_cos_sims
from sparge.tensor_io import GridDims

KINDS = ("random", "rowmajor", "colmajor", "timemajor", "hilbert")


def _sgn(x: int) -> int:
    return (x > 0) - (x < 0)


def gilbert3d(width: int, height: int, depth: int) -> Iterator[tuple[int, int, int]]:
    """Generalized Hilbert curve over an arbitrary ``width x height x depth`` box.

    Yields ``(x, y, z)`` cells; consecutive cells are unit steps except for
    rare diagonal moves on odd-sized boxes.
    """
    if width >= height and width >= depth:
        yield from _gilbert3d(0, 0, 0, width, 0, 0, 0, height, 0, 0, 0, depth)
    elif height >= width and height >= depth:
        yield from _gilbert3d(0, 0, 0, 0, height, 0, width, 0, 0, 0, 0, depth)
    else:
        yield from _gilbert3d(0, 0, 0, 0, 0, depth, width, 0, 0, 0, height, 0)


def _gilbert3d(x, y, z, ax, ay, az, bx, by, bz, cx, cy, cz):
    w = abs(ax + ay + az)
    h = abs(bx + by + bz)
    d = abs(cx + cy + cz)
    dax, day, daz = _sgn(ax), _sgn(ay), _sgn(az)
    dbx, dby, dbz = _sgn(bx), _sgn(by), _sgn(bz)
    dcx, dcy, dcz = _sgn(cx), _sgn(cy), _sgn(cz)

    # straight runs
    if h == 1 and d == 1:
        for _ in range(w):
            yield (x, y, z)
            x, y, z = x + dax, y + day, z + daz
        return
    if w == 1 and d == 1:
        for _ in range(h):
            yield (x, y, z)
            x, y, z = x + dbx, y + dby, z + dbz
        return
    if w == 1 and h == 1:
        for _ in range(d):
            yield (x, y, z)
            x, y, z = x + dcx, y + dcy, z + dcz
        return

    ax2, ay2, az2 = ax // 2, ay // 2, az // 2
    bx2, by2, bz2 = bx // 2, by // 2, bz // 2
    cx2, cy2, cz2 = cx // 2, cy // 2, cz // 2
    w2 = abs(ax2 + ay2 + az2)
    h2 = abs(bx2 + by2 + bz2)
    d2 = abs(cx2 + cy2 + cz2)

    # prefer even steps
    if w2 % 2 and w > 2:
        ax2, ay2, az2 = ax2 + dax, ay2 + day, az2 + daz
    if h2 % 2 and h > 2:
        bx2, by2, bz2 = bx2 + dbx, by2 + dby, bz2 + dbz
    if d2 % 2 and d > 2:
        cx2, cy2, cz2 = cx2 + dcx, cy2 + dcy, cz2 + dcz

    if 2 * w > 3 * h and 2 * w > 3 * d:
        # wide: split along w only
        yield from _gilbert3d(x, y, z, ax2, ay2, az2, bx, by, bz, cx, cy, cz)
        yield from _gilbert3d(x + ax2, y + ay2, z + az2, ax - ax2, ay - ay2, az - az2, bx, by, bz, cx, cy, cz)
    elif 3 * h > 4 * d:
        # do not split d
        yield from _gilbert3d(x, y, z, bx2, by2, bz2, cx, cy, cz, ax2, ay2, az2)
        yield from _gilbert3d(x + bx2, y + by2, z + bz2, ax, ay, az, bx - bx2, by - by2, bz - bz2, cx, cy, cz)
        yield from _gilbert3d(
            x + (ax - dax) + (bx2 - dbx),
            y + (ay - day) + (by2 - dby),
            z + (az - daz) + (bz2 - dbz),
            -bx2, -by2, -bz2,
            cx, cy, cz,
            -(ax - ax2), -(ay - ay2), -(az - az2),
        )
    elif 3 * d > 4 * h:
        # do not split h
        yield from _gilbert3d(x, y, z, cx2, cy2, cz2, ax2, ay2, az2, bx, by, bz)
        yield from _gilbert3d(x + cx2, y + cy2, z + cz2, ax, ay, az, bx, by, bz, cx - cx2, cy - cy2, cz - cz2)
        yield from _gilbert3d(
            x + (ax - dax) + (cx2 - dcx),
            y + (ay - day) + (cy2 - dcy),
            z + (az - daz) + (cz2 - dcz),
            -cx2, -cy2, -cz2,
            -(ax - ax2), -(ay - ay2), -(az - az2),
            bx, by, bz,
        )
    else:
        # regular: split all three axes
        yield from _gilbert3d(x, y, z, bx2, by2, bz2, cx2, cy2, cz2, ax2, ay2, az2)
        yield from _gilbert3d(x + bx2, y + by2, z + bz2, cx, cy, cz, ax2, ay2, az2, bx - bx2, by - by2, bz - bz2)
        yield from _gilbert3d(
            x + (bx2 - dbx) + (cx - dcx),
            y + (by2 - dby) + (cy - dcy),
            z + (bz2 - dbz) + (cz - dcz),
            ax, ay, az,
            -bx2, -by2, -bz2,
            -(cx - cx2), -(cy - cy2), -(cz - cz2),
        )
        yield from _gilbert3d(
            x + (ax - dax) + bx2 + (cx - dcx),
            y + (ay - day) + by2 + (cy - dcy),
            z + (az - daz) + bz2 + (cz - dcz),
            -cx, -cy, -cz,
            -(ax - ax2), -(ay - ay2), -(az - az2),
            bx - bx2, by - by2, bz - bz2,
        )
        yield from _gilbert3d(
            x + (ax - dax) + (bx2 - dbx),
            y + (ay - day) + (by2 - dby),
            z + (az - daz) + (bz2 - dbz),
            -bx2, -by2, -bz2,
            cx2, cy2, cz2,
            -(ax - ax2), -(ay - ay2), -(az - az2),
        )


@dataclass(frozen=True)
class Permutation:
    """``forward[r]`` is the source token placed at position ``r``."""

    forward: np.ndarray
    inverse: np.ndarray
    dims: GridDims
    kind: str

    @property
    def n(self) -> int:
        return self.forward.size

    def inverted(self) -> "Permutation":
        return Permutation(self.inverse, self.forward, self.dims, self.kind)

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "dims": list(self.dims.as_tuple()), "forward": self.forward.tolist()})


def grid_order(kind: str, dims: GridDims, seed: int = 0) -> np.ndarray:
    """Row-major token indices (``t*H*W + h*W + w``) in visiting order."""
    t, h, w = dims.as_tuple()
    idx = np.arange(dims.n).reshape(t, h, w)
    if kind == "rowmajor":
        return idx.ravel()
    if kind == "colmajor":
        return idx.transpose(0, 2, 1).ravel()
    if kind == "timemajor":
        return idx.transpose(1, 2, 0).ravel()
    if kind == "random":
        return np.random.default_rng(seed).permutation(dims.n)
    if kind == "hilbert":
        cells = np.fromiter(
            (c for xyz in gilbert3d(w, h, t) for c in xyz), dtype=np.int64, count=3 * dims.n
        ).reshape(-1, 3)
        return idx[cells[:, 2], cells[:, 1], cells[:, 0]]
    raise ValidationError(f"unknown permutation kind {kind!r}; expected one of {KINDS}")


def build_permutation(
    kind: str, dims: GridDims, seed: int = 0, offset: int = 0, total: Optional[int] = None
) -> Permutation:
    """Permutation of a grid of tokens.

    With ``total`` set, the grid occupies tokens ``[offset, offset + dims.n)``
    of a longer sequence and the remaining tokens (e.g. text) keep their place.
    """
    order = grid_order(kind, dims, seed)
    total = dims.n if total is None else total
    if offset < 0 or offset + dims.n > total:
        raise ValidationError(f"grid of {dims.n} tokens at offset {offset} does not fit in {total}")
    forward = np.arange(total)
    forward[offset : offset + dims.n] = order + offset
    inverse = np.empty_like(forward)
    inverse[forward] = np.arange(total)
    return Permutation(forward, inverse, dims, kind)


def apply_permutation(x: np.ndarray, p: Permutation) -> np.ndarray:
    """Reorder tokens (axis -2): ``out[..., r, :] = x[..., p.forward[r], :]``."""
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-2] != p.n:
        raise ValidationError(f"tensor with shape {x.shape} does not match permutation of {p.n} tokens")
    return x[..., p.forward, :]


def invert_permutation(x: np.ndarray, p: Permutation) -> np.ndarray:
    return apply_permutation(x, p.inverted())


def block_self_similarity(x: np.ndarray, block: int) -> float:
    """Mean block self-similarity of ``x`` ([n, d] or [heads, n, d])."""
    x = np.asarray(x, dtype=np.float32)
    if block < 1:
        raise ValidationError("block size must be >= 1")
    if x.ndim == 2:
        x = x[None]
    return float(np.mean([block_cos_sims(xh, block).mean() for xh in x]))
