"""Sparse FlashAttention with two-stage skipping and optional INT8 scores.

The block loop follows the usual FlashAttention recurrence over key blocks.
A key block is skipped outright where the predicted mask is zero. Inside a
computed tile, each of ``c_w`` contiguous row groups skips its ``P V`` product
when its local row maxima all sit more than ``|lambda|`` below the running
maxima. The running denominator ``l`` is still updated for such groups.

Query blocks are independent, so for each key block the engine processes all
active query blocks of a head in one batched matmul. Per element, the
arithmetic is the same as a tile-by-tile loop.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from sparge.blocks import DEFAULT_BK, DEFAULT_BQ, dequant_score, make_layout, quantize_blocks
from sparge.errors import InvariantError, ValidationError
from sparge.mask import causal_tiles, predict_mask
from sparge.tensor_io import as_tensor

NEG_INF = -math.inf


def _parse_sentinel(value, name: str, words: tuple[str, ...]) -> float:
    if isinstance(value, str):
        if value.strip().lower() in words:
            return NEG_INF
        try:
            return float(value)
        except ValueError as exc:
            raise ValidationError(f"{name}: expected a number or {words[0]!r}, got {value!r}") from exc
    if value is None:
        return NEG_INF
    return float(value)


def _dump_sentinel(value: float, word: str):
    return word if value == NEG_INF else value


@dataclass
class EngineConfig:
    """Engine settings.

    ``theta = -inf`` disables the self-similarity gate, ``lam = -inf`` disables
    the PV gate. ``judge=False`` turns off the non-self-similar block forcing
    (ablation only). The defaults select every block, i.e. dense attention.
    """

    b_q: int = DEFAULT_BQ
    b_k: int = DEFAULT_BK
    c_w: int = 4
    tau: float = 1.0
    theta: float = NEG_INF
    lam: float = NEG_INF
    quantize: bool = False
    causal: bool = False
    judge: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.b_q < 1 or self.b_k < 1 or self.c_w < 1:
            raise ValidationError("b_q, b_k and c_w must be >= 1")
        if self.b_q % self.c_w:
            raise ValidationError(f"b_q={self.b_q} is not divisible by c_w={self.c_w}")
        if not 0.0 < self.tau <= 1.0:
            raise ValidationError(f"tau must be in (0, 1], got {self.tau}")
        if self.theta != NEG_INF and not -1.0 <= self.theta <= 1.0:
            raise ValidationError(f"theta must be in [-1, 1] or disabled, got {self.theta}")
        if not (self.lam < 0 or self.lam == NEG_INF):
            raise ValidationError(f"lambda must be negative or -inf, got {self.lam}")
        if math.isnan(self.tau) or math.isnan(self.theta) or math.isnan(self.lam):
            raise ValidationError("hyperparameters must not be NaN")

    @classmethod
    def from_dict(cls, data: dict) -> "EngineConfig":
        known = {"b_q", "b_k", "c_w", "tau", "theta", "lambda", "quantize", "causal", "judge", "seed"}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: data[k] for k in ("b_q", "b_k", "c_w", "seed") if k in data}
        for k in kw:
            if isinstance(kw[k], bool) or not isinstance(kw[k], int):
                raise ValidationError(f"{k} must be an integer")
        for k in ("quantize", "causal", "judge"):
            if k in data:
                if not isinstance(data[k], bool):
                    raise ValidationError(f"{k} must be a boolean")
                kw[k] = data[k]
        if "tau" in data:
            kw["tau"] = float(data["tau"])
        if "theta" in data:
            kw["theta"] = _parse_sentinel(data["theta"], "theta", ("disabled", "-inf"))
        if "lambda" in data:
            kw["lam"] = _parse_sentinel(data["lambda"], "lambda", ("-inf", "disabled"))
        return cls(**kw)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["theta"] = _dump_sentinel(out["theta"], "disabled")
        out["lambda"] = _dump_sentinel(out.pop("lam"), "-inf")
        return out


@dataclass
class SkipCounters:
    """Tile-product accounting for one head.

    A PV skip by one warp group counts as ``1 / c_w`` of a tile.
    """

    qk_skipped: int = 0
    pv_skipped: float = 0.0
    qk_total: int = 0
    pv_total: int = 0

    def __add__(self, other: "SkipCounters") -> "SkipCounters":
        return SkipCounters(
            self.qk_skipped + other.qk_skipped,
            self.pv_skipped + other.pv_skipped,
            self.qk_total + other.qk_total,
            self.pv_total + other.pv_total,
        )


def sparsity_of(counters: SkipCounters) -> float:
    total = counters.qk_total + counters.pv_total
    if total <= 0:
        raise ValidationError("sparsity undefined for zero tile totals")
    return (counters.qk_skipped + counters.pv_skipped) / total


@dataclass
class AttnOutput:
    o: np.ndarray  # [heads, n, d] float32
    counters: list[SkipCounters]
    masks: Optional[np.ndarray] = None  # [heads, t_m, t_n]
    predict_s: float = 0.0
    attn_s: float = 0.0
    stats: dict = field(default_factory=dict)

    @property
    def sparsity(self) -> float:
        total = SkipCounters()
        for c in self.counters:
            total = total + c
        return sparsity_of(total)

    @property
    def per_head_sparsity(self) -> list[float]:
        return [sparsity_of(c) for c in self.counters]


def _check_qkv(q, k, v) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    q, k, v = (as_tensor(x, name) for x, name in ((q, "q"), (k, "k"), (v, "v")))
    if q.ndim == 2:
        q, k, v = q[None], k[None], v[None]
    if q.ndim != 3 or q.shape != k.shape or k.shape[:2] != v.shape[:2] or v.ndim != 3:
        raise ValidationError(f"q/k/v shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] < 1 or q.shape[2] < 1:
        raise ValidationError("sequence length and head dim must be >= 1")
    return q, k, v


def dense_reference(q, k, v, causal: bool = False) -> AttnOutput:
    """Exact softmax attention accumulated in float64 (the accuracy oracle)."""
    q, k, v = _check_qkv(q, k, v)
    h, n, d = q.shape
    out = np.empty((h, n, v.shape[2]), dtype=np.float64)
    chunk = max(1, (1 << 22) // n)
    scale = 1.0 / math.sqrt(d)
    for hd in range(h):
        kh = k[hd].astype(np.float64)
        vh = v[hd].astype(np.float64)
        for r0 in range(0, n, chunk):
            r1 = min(r0 + chunk, n)
            s = (q[hd, r0:r1].astype(np.float64) @ kh.T) * scale
            if causal:
                s[np.arange(r0, r1)[:, None] < np.arange(n)[None, :]] = -np.inf
            s -= s.max(axis=1, keepdims=True)
            p = np.exp(s)
            p /= p.sum(axis=1, keepdims=True)
            out[hd, r0:r1] = p @ vh
    lay = make_layout(n)
    tiles = lay.t_m * lay.t_n
    dense = [SkipCounters(qk_total=tiles, pv_total=tiles) for _ in range(h)]
    return AttnOutput(out.astype(np.float32), dense, stats={"o64": out})


def warp_gate(m_local: np.ndarray, m_new: np.ndarray, c_w: int, lam: float) -> np.ndarray:
    """Per-group compute decision: ``max(m_local - m_new) > lam`` over each row group.

    Works on ``[..., b_q]`` inputs and returns ``[..., c_w]`` booleans. Rows
    with no visible key (``m_local = -inf``) never force a compute.
    """
    m_local = np.asarray(m_local, dtype=np.float32)
    m_new = np.asarray(m_new, dtype=np.float32)
    b_q = m_local.shape[-1]
    if b_q % c_w:
        raise ValidationError(f"b_q={b_q} is not divisible by c_w={c_w}")
    if lam == NEG_INF:
        return np.ones(m_local.shape[:-1] + (c_w,), dtype=bool)
    with np.errstate(invalid="ignore"):
        diff = m_local - m_new
    diff = np.where(np.isnan(diff), -np.inf, diff)
    grouped = diff.reshape(m_local.shape[:-1] + (c_w, b_q // c_w))
    return grouped.max(axis=-1) > lam


def _pad_rows(x: np.ndarray, rows: int) -> np.ndarray:
    if x.shape[0] == rows:
        return x
    pad = np.zeros((rows - x.shape[0],) + x.shape[1:], dtype=x.dtype)
    return np.concatenate([x, pad], axis=0)


def _attend_head(q, k, v, mask, cfg: EngineConfig, valid=None):
    """Block loop for one head. Returns (o [n, dv], SkipCounters, stats)."""
    n, d = q.shape
    dv = v.shape[1]
    lay = make_layout(n, cfg.b_q, cfg.b_k)
    t_m, t_n, b_q, b_k, c_w = lay.t_m, lay.t_n, cfg.b_q, cfg.b_k, cfg.c_w
    gs = b_q // c_w

    qs = q * np.float32(1.0 / math.sqrt(d))
    if cfg.quantize:
        qq = quantize_blocks(qs, b_q)
        kq = quantize_blocks(k, b_k)
        # Integer-valued float32 matmul is exact while 127*127*d < 2**24 (d <= 1024).
        q_tiles = _pad_rows(qq.values.astype(np.float32), t_m * b_q).reshape(t_m, b_q, d)
        k_tiles = _pad_rows(kq.values.astype(np.float32), t_n * b_k).reshape(t_n, b_k, d)
        dq = qq.scales[:, None, None]
        dk = kq.scales
    else:
        q_tiles = _pad_rows(qs, t_m * b_q).reshape(t_m, b_q, d)
        k_tiles = _pad_rows(k, t_n * b_k).reshape(t_n, b_k, d)
    v_tiles = _pad_rows(v, t_n * b_k).reshape(t_n, b_k, dv)

    q_idx = np.arange(t_m * b_q).reshape(t_m, b_q)
    real_row = q_idx < n

    m = np.full((t_m, b_q), -np.inf, dtype=np.float32)
    l = np.zeros((t_m, b_q), dtype=np.float32)
    o = np.zeros((t_m, b_q, dv), dtype=np.float32)
    o_groups = o.reshape(t_m, c_w, gs, dv)

    if valid is None:
        valid = np.ones((t_m, t_n), dtype=bool)
    tiles_total = int(valid.sum())
    counters = SkipCounters(qk_total=tiles_total, pv_total=tiles_total)
    counters.qk_skipped = int((valid & ~mask).sum())
    counters.pv_skipped = float(counters.qk_skipped)
    group_skips = 0
    m_monotone = mass_monotone = True

    for j in range(t_n):
        act = np.flatnonzero(mask[:, j] & valid[:, j])
        if act.size == 0:
            continue
        k_first = j * b_k
        k_idx = np.arange(k_first, k_first + b_k)
        s = np.matmul(q_tiles[act], k_tiles[j].T)
        if cfg.quantize:
            s = dequant_score(s, dq[act], dk[j])
        if k_first + b_k > n:
            s[:, :, k_idx >= n] = -np.inf
        if cfg.causal:
            s = np.where(k_idx[None, None, :] > q_idx[act][:, :, None], np.float32(-np.inf), s)

        m_prev = m[act]
        m_local = s.max(axis=2)
        m_new = np.maximum(m_prev, m_local)
        m_safe = np.where(np.isfinite(m_new), m_new, np.float32(0.0))
        p = np.exp(s - m_safe[:, :, None])
        alpha = np.exp(m_prev - m_safe)
        l_prev = l[act]
        l_new = alpha * l_prev + p.sum(axis=2)
        l[act] = l_new
        # l is relative to the running max; the mass l * exp(m) only grows
        m_monotone &= bool((m_new >= m_prev).all())
        mass_monotone &= bool((l_new >= alpha * l_prev * np.float32(1 - 1e-6)).all())

        gate_local = np.where(real_row[act], m_local, -np.inf)
        compute = warp_gate(gate_local, m_new, c_w, cfg.lam)
        if compute.all():
            o[act] = alpha[:, :, None] * o[act] + np.matmul(p, v_tiles[j])
        else:
            bi, gi = np.nonzero(compute)
            blocks = act[bi]
            p_g = p.reshape(act.size, c_w, gs, b_k)[bi, gi]
            a_g = alpha.reshape(act.size, c_w, gs)[bi, gi]
            o_groups[blocks, gi] = a_g[:, :, None] * o_groups[blocks, gi] + np.matmul(p_g, v_tiles[j])
            group_skips += compute.size - int(compute.sum())
        m[act] = m_new

    counters.pv_skipped += group_skips / c_w
    l_real = l[real_row]
    if not (l_real > 0).all():
        raise InvariantError("a query row has zero softmax denominator")
    out = (o / np.where(real_row, l, 1.0)[:, :, None]).reshape(t_m * b_q, dv)[:n]
    stats = {"group_skips": group_skips, "m_monotone": m_monotone, "mass_monotone": mass_monotone}
    return out, counters, stats


def sparse_attention(q, k, v, cfg: Optional[EngineConfig] = None, masks: Optional[np.ndarray] = None) -> AttnOutput:
    """Sparse attention over ``[heads, n, d]`` inputs.

    ``masks`` ([heads, t_m, t_n] booleans) bypasses mask prediction; it is
    meant for tests and ablations.
    """
    cfg = cfg or EngineConfig()
    q, k, v = _check_qkv(q, k, v)
    h, n, _ = q.shape
    lay = make_layout(n, cfg.b_q, cfg.b_k)
    valid = None
    if cfg.causal:
        valid, _ = causal_tiles(lay)

    t0 = time.perf_counter()
    if masks is None:
        head_masks = np.stack(
            [
                predict_mask(q[hd], k[hd], lay, cfg.tau, cfg.theta, causal=cfg.causal, judge=cfg.judge).mask
                for hd in range(h)
            ]
        )
    else:
        head_masks = np.asarray(masks, dtype=bool)
        if head_masks.shape != (h, lay.t_m, lay.t_n):
            raise ValidationError(f"mask shape {head_masks.shape} != {(h, lay.t_m, lay.t_n)}")
    t1 = time.perf_counter()

    outs, counters, stats = [], [], []
    for hd in range(h):
        o, c, st = _attend_head(q[hd], k[hd], v[hd], head_masks[hd], cfg, valid)
        outs.append(o)
        counters.append(c)
        stats.append(st)
    t2 = time.perf_counter()
    o = np.stack(outs).astype(np.float32)
    if not np.isfinite(o).all():
        raise InvariantError("non-finite attention output")
    return AttnOutput(o, counters, head_masks, predict_s=t1 - t0, attn_s=t2 - t1, stats={"heads": stats})
