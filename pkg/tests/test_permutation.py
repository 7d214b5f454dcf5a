import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparge.engine import dense_reference
from sparge.errors import ValidationError
from sparge.metrics import relative_l1
from sparge.permutation import (
    KINDS,
    apply_permutation,
    block_self_similarity,
    build_permutation,
    gilbert3d,
    grid_order,
    invert_permutation,
)
from sparge.tensor_io import GridDims, gen_synthetic


def unit_step_fraction(dims: GridDims, order: np.ndarray) -> float:
    t, h, w = np.unravel_index(order, dims.as_tuple())
    steps = np.abs(np.diff(t)) + np.abs(np.diff(h)) + np.abs(np.diff(w))
    return float((steps == 1).mean()) if steps.size else 1.0


@pytest.mark.parametrize("kind", ["rowmajor", "colmajor", "timemajor", "hilbert"])
def test_one_dimensional_grid_is_identity(kind):
    assert build_permutation(kind, GridDims(1, 1, 4)).forward.tolist() == [0, 1, 2, 3]


def test_hilbert_two_by_two():
    order = grid_order("hilbert", GridDims(1, 2, 2))
    assert sorted(order.tolist()) == [0, 1, 2, 3]
    assert unit_step_fraction(GridDims(1, 2, 2), order) == 1.0


def test_named_orders():
    dims = GridDims(2, 2, 3)
    idx = np.arange(12).reshape(2, 2, 3)
    assert grid_order("colmajor", dims).tolist() == [idx[t, h, w] for t in range(2) for w in range(3) for h in range(2)]
    assert grid_order("timemajor", dims).tolist() == [idx[t, h, w] for h in range(2) for w in range(3) for t in range(2)]


@pytest.mark.parametrize("shape", [(8, 8, 8), (4, 4, 4), (1, 16, 16), (2, 4, 8), (16, 16, 16)])
def test_hilbert_power_of_two_fully_adjacent(shape):
    dims = GridDims(*shape)
    assert unit_step_fraction(dims, grid_order("hilbert", dims)) == 1.0


@pytest.mark.parametrize("shape", [(1, 6, 6), (3, 5, 7), (2, 6, 10), (5, 12, 20)])
def test_hilbert_general_grid_mostly_adjacent(shape):
    dims = GridDims(*shape)
    assert unit_step_fraction(dims, grid_order("hilbert", dims)) >= 0.95


@settings(max_examples=60, deadline=None)
@given(t=st.integers(1, 7), h=st.integers(1, 9), w=st.integers(1, 9), kind=st.sampled_from(KINDS))
def test_every_kind_is_bijection(t, h, w, kind):
    p = build_permutation(kind, GridDims(t, h, w), seed=t * h * w)
    n = t * h * w
    assert sorted(p.forward.tolist()) == list(range(n))
    assert (p.forward[p.inverse] == np.arange(n)).all()
    assert (p.inverse[p.forward] == np.arange(n)).all()


def test_gilbert_covers_box():
    cells = list(gilbert3d(5, 3, 4))
    assert len(cells) == len(set(cells)) == 60
    assert all(0 <= x < 5 and 0 <= y < 3 and 0 <= z < 4 for x, y, z in cells)


def test_random_is_seeded():
    dims = GridDims(2, 5, 5)
    a, b = build_permutation("random", dims, 3), build_permutation("random", dims, 3)
    assert (a.forward == b.forward).all()
    assert not (a.forward == build_permutation("random", dims, 4).forward).all()


def test_unknown_kind():
    with pytest.raises(ValidationError):
        build_permutation("zigzag", GridDims(1, 2, 2))


def test_apply_and_invert(rng):
    dims = GridDims(2, 3, 4)
    x = rng.standard_normal((2, 24, 5)).astype(np.float32)
    p = build_permutation("hilbert", dims)
    y = apply_permutation(x, p)
    assert (y[:, 3] == x[:, p.forward[3]]).all()
    assert np.array_equal(invert_permutation(y, p), x)
    assert np.array_equal(apply_permutation(x, build_permutation("rowmajor", dims)), x)


def test_apply_length_mismatch():
    with pytest.raises(ValidationError):
        apply_permutation(np.zeros((10, 3)), build_permutation("rowmajor", GridDims(1, 3, 3)))


def test_token_range_restriction():
    dims = GridDims(1, 4, 4)
    p = build_permutation("hilbert", dims, offset=5, total=30)
    assert p.n == 30
    assert (p.forward[:5] == np.arange(5)).all()
    assert (p.forward[21:] == np.arange(21, 30)).all()
    assert sorted(p.forward[5:21].tolist()) == list(range(5, 21))
    with pytest.raises(ValidationError):
        build_permutation("hilbert", dims, offset=20, total=30)


def test_json_export():
    p = build_permutation("colmajor", GridDims(1, 2, 3))
    data = json.loads(p.to_json())
    assert data["forward"] == p.forward.tolist()
    assert data["kind"] == "colmajor" and data["dims"] == [1, 2, 3]


@pytest.mark.parametrize("kind", KINDS)
def test_attention_invariance(kind):
    dims = GridDims(2, 8, 12)
    q, k, v = gen_synthetic("smooth3d", dims, 32, 3, seed=5)[:, None]
    p = build_permutation(kind, dims, seed=1)
    ref = dense_reference(q, k, v)
    out = dense_reference(*(apply_permutation(x, p) for x in (q, k, v)))
    back = invert_permutation(out.stats["o64"], p)
    assert relative_l1(back, ref) <= 1e-6


def test_self_similarity_identical_tokens():
    x = np.tile(np.arange(1.0, 9.0), (256, 1))
    assert block_self_similarity(x, 64) == pytest.approx(1.0)


def test_self_similarity_gaussian_near_zero():
    x = gen_synthetic("gaussian", 4096, 128, 1, seed=0)
    assert abs(block_self_similarity(x, 64)) < 0.1


def test_self_similarity_hilbert_beats_rowmajor():
    dims = GridDims(4, 16, 16)
    k = gen_synthetic("smooth3d", dims, 64, 1, seed=3)
    sims = {kind: block_self_similarity(apply_permutation(k, build_permutation(kind, dims)), 64) for kind in KINDS}
    assert sims["hilbert"] >= sims["rowmajor"]
    assert sims["random"] == min(sims.values())


def test_self_similarity_bad_block():
    with pytest.raises(ValidationError):
        block_self_similarity(np.zeros((4, 2)), 0)
