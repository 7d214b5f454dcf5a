from __future__ import annotations

import numpy as np

from sparge.errors import ValidationError


def _array(x) -> np.ndarray:
    # AttnOutput or a bare array; prefer the float64 oracle output when present
    if hasattr(x, "o"):
        return np.asarray(x.stats.get("o64", x.o), dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def relative_l1(o, o_ref) -> float:
    """``sum|o - o_ref| / sum|o_ref|`` with the reference in the denominator."""
    a, b = _array(o), _array(o_ref)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    denom = np.abs(b).sum()
    if denom == 0:
        raise ValidationError("reference output has zero L1 norm")
    return float(np.abs(a - b).sum() / denom)
