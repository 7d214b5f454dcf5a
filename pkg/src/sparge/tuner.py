"""Per-layer hyperparameter search under relative-L1 bounds.

Stage 1 scans (tau, theta) with the PV gate off and keeps the sparsest pair
whose worst-case L1 over the calibration set stays below ``l1``. Stage 2 fixes
that pair and scans lambda under the looser bound ``l2``. Ties go to the safer
setting: larger tau, larger theta, more negative lambda.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from sparge.engine import NEG_INF, EngineConfig, _dump_sentinel, _parse_sentinel, dense_reference, sparse_attention
from sparge.errors import ValidationError
from sparge.metrics import relative_l1
from sparge.tensor_io import tensor_load

log = logging.getLogger(__name__)

DEFAULT_TAU_GRID = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.98, 1.0)
DEFAULT_THETA_GRID = (NEG_INF, 0.0, 0.2, 0.4, 0.6, 0.8)
DEFAULT_LAMBDA_GRID = (NEG_INF, -20.0, -15.0, -10.0, -8.0, -6.0, -5.0, -4.0)

Triple = tuple[np.ndarray, np.ndarray, np.ndarray]


@dataclass
class TuneSpec:
    l1: float
    l2: float
    calibration: list[Triple]
    tau_grid: Sequence[float] = DEFAULT_TAU_GRID
    theta_grid: Sequence[float] = DEFAULT_THETA_GRID
    lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID
    base: EngineConfig = field(default_factory=EngineConfig)

    def __post_init__(self):
        if not self.l1 < self.l2:
            raise ValidationError(f"need l1 < l2, got {self.l1}, {self.l2}")
        if not self.calibration:
            raise ValidationError("calibration set is empty")
        if not (self.tau_grid and self.theta_grid and self.lambda_grid):
            raise ValidationError("search grids must be non-empty")
        if any(not 0 < t <= 1 for t in self.tau_grid):
            raise ValidationError("tau grid values must lie in (0, 1]")
        if any(not lam < 0 for lam in self.lambda_grid):
            raise ValidationError("lambda grid values must be negative")


@dataclass
class TunedParams:
    tau: float
    theta: float
    lam: float
    l1: float
    l2: float
    achieved_l1_stage1: float
    achieved_l1_stage2: float
    achieved_sparsity: float
    fallback: bool = False

    def engine_config(self, base: Optional[EngineConfig] = None) -> EngineConfig:
        return replace(base or EngineConfig(), tau=self.tau, theta=self.theta, lam=self.lam)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "theta": _dump_sentinel(self.theta, "disabled"),
            "lambda": _dump_sentinel(self.lam, "-inf"),
            "l1": self.l1,
            "l2": self.l2,
            "achieved_l1_stage1": self.achieved_l1_stage1,
            "achieved_l1_stage2": self.achieved_l1_stage2,
            "achieved_sparsity": self.achieved_sparsity,
            "fallback": self.fallback,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TunedParams":
        return cls(
            tau=float(data["tau"]),
            theta=_parse_sentinel(data["theta"], "theta", ("disabled", "-inf")),
            lam=_parse_sentinel(data["lambda"], "lambda", ("-inf", "disabled")),
            l1=float(data["l1"]),
            l2=float(data["l2"]),
            achieved_l1_stage1=float(data["achieved_l1_stage1"]),
            achieved_l1_stage2=float(data["achieved_l1_stage2"]),
            achieved_sparsity=float(data["achieved_sparsity"]),
            fallback=bool(data.get("fallback", False)),
        )


def evaluate(cfg: EngineConfig, calibration: Sequence[Triple], refs: Sequence) -> tuple[float, float]:
    """Worst-case relative L1 and mean sparsity of ``cfg`` over the calibration set."""
    errs, sparsities = [], []
    for (q, k, v), ref in zip(calibration, refs):
        out = sparse_attention(q, k, v, cfg)
        errs.append(relative_l1(out, ref))
        sparsities.append(out.sparsity)
    return max(errs), float(np.mean(sparsities))


def tune_layer(spec: TuneSpec) -> TunedParams:
    refs = [dense_reference(q, k, v, causal=spec.base.causal) for q, k, v in spec.calibration]
    base = replace(spec.base, lam=NEG_INF)

    best = None  # (key, tau, theta, err, sparsity)
    for tau in spec.tau_grid:
        for theta in spec.theta_grid:
            err, sp = evaluate(replace(base, tau=tau, theta=theta), spec.calibration, refs)
            log.debug("stage1 tau=%s theta=%s L1=%.4g sparsity=%.4f", tau, theta, err, sp)
            if not err < spec.l1:
                continue
            key = (sp, tau, theta)
            if best is None or key > best[0]:
                best = (key, tau, theta, err, sp)

    if best is None:
        log.warning("no (tau, theta) meets L1 < %s; falling back to dense attention", spec.l1)
        err, sp = evaluate(replace(base, tau=1.0, theta=NEG_INF), spec.calibration, refs)
        return TunedParams(1.0, NEG_INF, NEG_INF, spec.l1, spec.l2, err, err, sp, fallback=True)

    _, tau, theta, err1, sp1 = best
    chosen = (sp1, math.inf, NEG_INF, err1)  # the stage-1 point with the gate off
    stage1 = replace(base, tau=tau, theta=theta)
    for lam in spec.lambda_grid:
        if lam == NEG_INF:
            continue
        err, sp = evaluate(replace(stage1, lam=lam), spec.calibration, refs)
        log.debug("stage2 lambda=%s L1=%.4g sparsity=%.4f", lam, err, sp)
        if err < spec.l2 and (sp, -lam) > chosen[:2]:
            chosen = (sp, -lam, lam, err)
    sp2, _, lam, err2 = chosen
    return TunedParams(tau, theta, lam, spec.l1, spec.l2, err1, err2, sp2)


def load_calibration(directory: Union[str, Path]) -> list[Triple]:
    """Read every ``<stem>.q.stz`` / ``.k.stz`` / ``.v.stz`` triple in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"calibration directory {directory} does not exist")
    triples = []
    for qpath in sorted(directory.glob("*.q.stz")):
        stem = qpath.name[: -len(".q.stz")]
        kpath, vpath = directory / f"{stem}.k.stz", directory / f"{stem}.v.stz"
        if not (kpath.exists() and vpath.exists()):
            raise ValidationError(f"incomplete calibration set {stem!r} in {directory}")
        triples.append((tensor_load(qpath), tensor_load(kpath), tensor_load(vpath)))
    if not triples:
        raise ValidationError(f"no *.q.stz files in {directory}")
    return triples
