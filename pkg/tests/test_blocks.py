import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparge.blocks import dequant_score, make_layout, quantize_blocks, round_half_away
from sparge.errors import ValidationError


@pytest.mark.parametrize(
    "n,bq,bk,tm,tn",
    [(256, 128, 64, 2, 4), (130, 128, 64, 2, 3), (1, 128, 64, 1, 1), (64, 64, 64, 1, 1)],
)
def test_layout_counts(n, bq, bk, tm, tn):
    lay = make_layout(n, bq, bk)
    assert (lay.t_m, lay.t_n) == (tm, tn)


def test_layout_partial_blocks():
    lay = make_layout(130, 128, 64)
    assert len(lay.q_rows(1)) == 2
    assert len(lay.k_rows(2)) == 2
    assert lay.q_rows(0) == range(0, 128)


def test_layout_defaults():
    lay = make_layout(1000)
    assert (lay.b_q, lay.b_k) == (128, 64)


@pytest.mark.parametrize("args", [(0, 128, 64), (10, 0, 64), (10, 128, -1)])
def test_layout_rejects_bad_sizes(args):
    with pytest.raises(ValidationError):
        make_layout(*args)


def test_zero_block():
    qb = quantize_blocks(np.zeros((4, 8), np.float32), 4)
    assert qb.scales.tolist() == [1.0]
    assert not qb.values.any()


def test_constant_block():
    qb = quantize_blocks(np.full((4, 8), 2.54, np.float32), 4)
    assert qb.scales[0] == pytest.approx(0.02, rel=1e-6)
    assert (qb.values == 127).all()


def test_round_half_away_from_zero():
    x = np.array([0.5, 1.5, 2.5, -0.5, -1.5, 0.49, -2.51])
    assert round_half_away(x).tolist() == [1, 2, 3, -1, -2, 0, -3]


def test_partial_block_scales():
    x = np.arange(10 * 3, dtype=np.float32).reshape(10, 3)
    qb = quantize_blocks(x, 4)
    assert qb.scales.shape == (3,)
    # last block holds rows 8..9 only
    assert qb.scales[2] == pytest.approx(29 / 127)


@settings(max_examples=60, deadline=None)
@given(
    x=arrays(np.float32, st.tuples(st.integers(1, 40), st.integers(1, 16)),
             elements=st.floats(-1e3, 1e3, width=32)),
    block=st.integers(1, 16),
)
def test_rounding_bound(x, block):
    qb = quantize_blocks(x, block)
    assert (qb.scales > 0).all()
    assert np.abs(qb.values.astype(int)).max() <= 127
    row_scale = np.repeat(qb.scales, block)[: x.shape[0]].astype(np.float64)[:, None]
    err = np.abs(x - qb.values * row_scale)
    assert (err <= row_scale / 2 + 1e-7 + 1e-6 * np.abs(x)).all()


def test_dequant_examples():
    assert not dequant_score(np.zeros((2, 3), np.int32), 0.5, 0.25).any()
    s = dequant_score(np.array([[127 * 127]], np.int32), 1 / 127, 1 / 127)
    assert s[0, 0] == pytest.approx(1.0, rel=1e-6)


def test_dequant_matches_float_scores(rng):
    d = 64
    q = rng.standard_normal((128, d)).astype(np.float32) / np.float32(math.sqrt(d))
    k = rng.standard_normal((64, d)).astype(np.float32)
    qq, kq = quantize_blocks(q, 128), quantize_blocks(k, 64)
    s_int = qq.values.astype(np.int64) @ kq.values.astype(np.int64).T
    s = dequant_score(s_int.astype(np.int32), qq.scales[0], kq.scales[0])
    exact = q.astype(np.float64) @ k.astype(np.float64).T
    # |q k - q' k'| <= sum |q| dk/2 + |k| dq/2 + dq dk / 4 per element
    dq, dk = float(qq.scales[0]), float(kq.scales[0])
    bound = (np.abs(q).sum(1)[:, None] * dk / 2 + np.abs(k).sum(1)[None, :] * dq / 2 + d * dq * dk / 4)
    assert (np.abs(s - exact) <= bound + 1e-6).all()


def test_integer_product_exact_in_float32():
    d = 1024
    assert 127 * 127 * d < 2**31
    a = np.full((2, d), 127, np.int8)
    b = np.full((3, d), -127, np.int8)
    b[1, ::2] = 127
    exact = a.astype(np.int64) @ b.astype(np.int64).T
    via_f32 = a.astype(np.float32) @ b.astype(np.float32).T
    assert (via_f32.astype(np.int64) == exact).all()


def test_constant_rows_have_exact_scores():
    q = np.full((4, 8), 0.3, np.float32)
    k = np.full((4, 8), -1.7, np.float32)
    qq, kq = quantize_blocks(q, 4), quantize_blocks(k, 4)
    s = dequant_score(qq.values.astype(np.float32) @ kq.values.astype(np.float32).T, qq.scales[0], kq.scales[0])
    np.testing.assert_allclose(s, q @ k.T, rtol=1e-6)
