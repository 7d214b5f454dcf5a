"""First-stage filter: compressed attention map and global block mask.

Each query/key block is pooled to its mean token. Blocks whose self-similarity
falls below ``theta`` are poor representatives of their mean, so their key
columns are removed from the compressed map and their rows/columns of the
mask are forced on. The remaining rows are sparsified with TopCdf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from sparge.blocks import BlockLayout

CDF_EPS = 1e-9


def block_mean_pool(x: np.ndarray, block: int) -> np.ndarray:
    """Mean over the rows of each block of ``x`` ([n, d] -> [ceil(n/block), d])."""
    x = np.asarray(x)
    n = x.shape[0]
    starts = np.arange(0, n, block)
    sums = np.add.reduceat(x.astype(np.float64), starts, axis=0)
    counts = np.minimum(starts + block, n) - starts
    return (sums / counts[:, None]).astype(np.float32)


def block_cos_sim(x: np.ndarray) -> float:
    """``mean(G / |max(G)|)`` with ``G = X X^T``; 1.0 for an all-zero block."""
    x = np.asarray(x, dtype=np.float64)
    g = x @ x.T
    peak = abs(g.max())
    if peak == 0:
        return 1.0
    return float((g / peak).mean())


def block_cos_sims(x: np.ndarray, block: int) -> np.ndarray:
    """:func:`block_cos_sim` for every block of ``x``; the last block may be partial."""
    x = np.asarray(x, dtype=np.float32)
    n, d = x.shape
    full = n // block
    out = np.empty(-(-n // block), dtype=np.float64)
    if full:
        xb = x[: full * block].reshape(full, block, d)
        g = np.matmul(xb, xb.transpose(0, 2, 1), dtype=np.float32).astype(np.float64)
        peak = np.abs(g.max(axis=(1, 2)))
        mean = g.mean(axis=(1, 2))
        out[:full] = np.where(peak > 0, mean / np.where(peak > 0, peak, 1.0), 1.0)
    if full * block < n:
        out[full] = block_cos_sim(x[full * block :])
    return out


def compressed_scores(
    pooled_q: np.ndarray,
    pooled_k: np.ndarray,
    s_k: np.ndarray,
    theta: float,
    scale: float = 1.0,
    valid: Optional[np.ndarray] = None,
) -> np.ndarray:
    """``S_hat = scale * q k^T``; columns with ``s_k < theta`` and invalid tiles get -inf."""
    s_hat = (pooled_q.astype(np.float64) @ pooled_k.astype(np.float64).T) * scale
    s_hat[:, np.asarray(s_k) < theta] = -np.inf
    if valid is not None:
        s_hat[~valid] = -np.inf
    return s_hat


def compressed_softmax(s_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row softmax of ``s_hat``.

    Returns ``(p_hat, empty)`` where ``empty[i]`` flags rows that were entirely
    -inf; those rows come back as zeros.
    """
    s_hat = np.asarray(s_hat, dtype=np.float64)
    row_max = s_hat.max(axis=1, keepdims=True)
    empty = ~np.isfinite(row_max[:, 0])
    shifted = np.where(empty[:, None], -np.inf, s_hat - np.where(empty[:, None], 0.0, row_max))
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True)
    p_hat = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    return p_hat, empty


def top_cdf(p: np.ndarray, tau: float) -> np.ndarray:
    """Select the largest entries whose cumulative sum stays within ``tau * sum``.

    Works on one row or on a 2-D batch of rows. Ties in the descending sort go
    to the lower index. The largest entry is always selected, so even
    ``tau = 0`` keeps one block per row.
    """
    p = np.asarray(p, dtype=np.float64)
    squeeze = p.ndim == 1
    p2 = np.atleast_2d(p)
    order = np.argsort(-p2, axis=1, kind="stable")
    cdf = np.cumsum(np.take_along_axis(p2, order, axis=1), axis=1)
    keep = cdf <= tau * p2.sum(axis=1, keepdims=True) + CDF_EPS
    keep[:, 0] = True
    mask = np.zeros(p2.shape, dtype=bool)
    np.put_along_axis(mask, order, keep, axis=1)
    return mask[0] if squeeze else mask


def build_global_mask(
    p_hat: np.ndarray,
    s_q: np.ndarray,
    s_k: np.ndarray,
    tau: float,
    theta: float,
    empty: Optional[np.ndarray] = None,
    judge: bool = True,
    valid: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Assemble the ``[t_m, t_n]`` boolean mask M_g.

    ``empty`` marks rows of ``p_hat`` whose scores were all -inf; they become
    all-ones. With ``judge=False`` the self-similarity forcing is skipped.
    ``valid`` (causal tiles) is applied last.
    """
    p_hat = np.asarray(p_hat)
    mask = top_cdf(p_hat, tau)
    if empty is None:
        empty = ~(p_hat > 0).any(axis=1)
    mask[empty] = True
    if judge:
        mask[np.asarray(s_q) < theta, :] = True
        mask[:, np.asarray(s_k) < theta] = True
    if valid is not None:
        mask &= valid
    return mask


def causal_tiles(layout: BlockLayout) -> tuple[np.ndarray, np.ndarray]:
    """``(valid, diagonal)`` tile masks for causal attention.

    A tile is valid when its first key is not after the last query of the
    query block; it is diagonal when its key range overlaps the query range.
    """
    i = np.arange(layout.t_m)[:, None]
    j = np.arange(layout.t_n)[None, :]
    q_first = i * layout.b_q
    q_last = np.minimum((i + 1) * layout.b_q, layout.n) - 1
    k_first = j * layout.b_k
    k_last = np.minimum((j + 1) * layout.b_k, layout.n) - 1
    valid = k_first <= q_last
    diagonal = valid & (k_last >= q_first)
    return valid, diagonal


@dataclass
class MaskPrediction:
    mask: np.ndarray  # bool [t_m, t_n]
    p_hat: np.ndarray
    s_q: np.ndarray
    s_k: np.ndarray
    empty_rows: np.ndarray


def predict_mask(
    q: np.ndarray,
    k: np.ndarray,
    layout: BlockLayout,
    tau: float,
    theta: float,
    causal: bool = False,
    judge: bool = True,
) -> MaskPrediction:
    """Run the full first-stage prediction for one head (``q``, ``k``: [n, d])."""
    d = q.shape[1]
    s_q = block_cos_sims(q, layout.b_q)
    s_k = block_cos_sims(k, layout.b_k)
    pq = block_mean_pool(q, layout.b_q)
    pk = block_mean_pool(k, layout.b_k)
    valid = diagonal = None
    if causal:
        valid, diagonal = causal_tiles(layout)
    col_theta = theta if judge else -math.inf
    s_hat = compressed_scores(pq, pk, s_k, col_theta, scale=1.0 / math.sqrt(d), valid=valid)
    p_hat, empty = compressed_softmax(s_hat)
    mask = build_global_mask(p_hat, s_q, s_k, tau, theta, empty=empty, judge=judge, valid=valid)
    if causal:
        # every query row must see at least its own key
        mask |= diagonal
    return MaskPrediction(mask, p_hat, s_q, s_k, empty)
