"""Schedule generation tests.

The Hilbert construction is checked against an adjacency oracle rather than
literal matrices beyond the first two orders: a correct curve visits every
cell exactly once and every consecutive pair of cells must be 4-neighbors.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmad.scans import (
    MAX_HILBERT_ORDER,
    NonSquareRotation,
    ScanDirection,
    ScanMethod,
    ScanSchedule,
    UnsupportedGeometry,
    apply_direction,
    base_schedule,
    gather_sequence,
    hilbert_matrix,
    invert,
    make_schedule,
    scatter_sequence,
)
from ssmad.tensor import Tensor

METHODS = list(ScanMethod)
DIRECTIONS = list(ScanDirection)


def _assert_curve_valid(ranks):
    """Oracle: ranks form a bijection onto 1..n*n and consecutive ranks
    sit on 4-adjacent cells."""
    side = ranks.shape[0]
    flat_sorted = np.sort(ranks.reshape(-1))
    np.testing.assert_array_equal(flat_sorted, np.arange(1, side * side + 1))
    pos = {int(ranks[r, c]): (r, c) for r in range(side) for c in range(side)}
    for k in range(1, side * side):
        r0, c0 = pos[k]
        r1, c1 = pos[k + 1]
        assert abs(r0 - r1) + abs(c0 - c1) == 1, f"rank {k}->{k + 1} not adjacent"


def _geometry_ok(method, h, w):
    if method is ScanMethod.HILBERT:
        return h == w and h >= 2 and (h & (h - 1)) == 0
    if method is ScanMethod.ZORDER:
        return (h & (h - 1)) == 0 and (w & (w - 1)) == 0
    return True


# ---------------------------------------------------------------- hilbert


def test_hilbert_base_case():
    grid = hilbert_matrix(1)
    np.testing.assert_array_equal(grid.ranks, [[1, 2], [4, 3]])


def test_hilbert_order_two():
    grid = hilbert_matrix(2)
    want = [
        [1, 2, 15, 16],
        [4, 3, 14, 13],
        [5, 8, 9, 12],
        [6, 7, 10, 11],
    ]
    np.testing.assert_array_equal(grid.ranks, want)


@pytest.mark.parametrize("n", range(1, 7))
def test_hilbert_validity(n):
    grid = hilbert_matrix(n)
    assert grid.ranks.shape == (2**n, 2**n)
    _assert_curve_valid(grid.ranks)


def test_hilbert_order_bounds():
    with pytest.raises(ValueError):
        hilbert_matrix(0)
    with pytest.raises(ValueError):
        hilbert_matrix(MAX_HILBERT_ORDER + 1)


# --------------------------------------------------------- base schedules


def test_sweep_is_raster():
    s = base_schedule(ScanMethod.SWEEP, 2, 3)
    assert list(s.order) == [0, 1, 2, 3, 4, 5]


def test_scan_is_boustrophedon():
    s = base_schedule(ScanMethod.SCAN, 2, 3)
    assert list(s.order) == [0, 1, 2, 5, 4, 3]


def test_hilbert_two_by_two():
    s = base_schedule(ScanMethod.HILBERT, 2, 2)
    assert list(s.order) == [0, 1, 3, 2]


def test_zigzag_two_by_two():
    s = base_schedule(ScanMethod.ZIGZAG, 2, 2)
    assert list(s.order) == [0, 1, 2, 3]


def test_zigzag_three_by_three():
    # anti-diagonals, alternating direction, starting toward the top right
    s = base_schedule(ScanMethod.ZIGZAG, 3, 3)
    assert list(s.order) == [0, 1, 3, 6, 4, 2, 5, 7, 8]


def test_zorder_two_by_two():
    s = base_schedule(ScanMethod.ZORDER, 2, 2)
    assert list(s.order) == [0, 1, 2, 3]


def test_zorder_four_by_four_prefix():
    # Morton order with the row bit above the column bit: the first quad
    # is the 2x2 block at the origin
    s = base_schedule(ScanMethod.ZORDER, 4, 4)
    assert list(s.order[:4]) == [0, 1, 4, 5]


def test_hilbert_rejects_non_square():
    with pytest.raises(UnsupportedGeometry):
        base_schedule(ScanMethod.HILBERT, 2, 4)


def test_hilbert_rejects_non_power_of_two():
    with pytest.raises(UnsupportedGeometry):
        base_schedule(ScanMethod.HILBERT, 3, 3)


def test_zorder_rejects_non_power_of_two():
    with pytest.raises(UnsupportedGeometry):
        base_schedule(ScanMethod.ZORDER, 3, 2)


def test_schedule_validates_permutation():
    with pytest.raises(ValueError):
        ScanSchedule(2, 2, np.array([0, 1, 1, 3], dtype=np.int64))


# -------------------------------------------------------------- directions


def test_forward_is_identity():
    base = base_schedule(ScanMethod.SWEEP, 3, 5)
    out = apply_direction(base, ScanDirection.FORWARD)
    np.testing.assert_array_equal(out.order, base.order)


def test_reverse_two_by_two():
    s = make_schedule(ScanMethod.SWEEP, ScanDirection.REVERSE, 2, 2)
    assert list(s.order) == [3, 2, 1, 0]


def test_wh_is_column_major():
    s = make_schedule(ScanMethod.SWEEP, ScanDirection.WH_FORWARD, 2, 2)
    assert list(s.order) == [0, 2, 1, 3]


def test_rot90_two_by_two():
    # raster visits (0,0),(0,1),(1,0),(1,1); clockwise rotation maps
    # (r,c) -> (c, h-1-r), so the visit list becomes [1,3,0,2]
    s = make_schedule(ScanMethod.SWEEP, ScanDirection.ROT90_FORWARD, 2, 2)
    assert list(s.order) == [1, 3, 0, 2]


def test_sweep_reverse_row():
    s = make_schedule(ScanMethod.SWEEP, ScanDirection.REVERSE, 1, 4)
    assert list(s.order) == [3, 2, 1, 0]


def test_rot90_rejects_non_square():
    base = base_schedule(ScanMethod.SWEEP, 2, 3)
    with pytest.raises(NonSquareRotation):
        apply_direction(base, ScanDirection.ROT90_FORWARD)


def test_wh_on_non_square_keeps_extents():
    # the directed schedule always addresses the requested grid; the wh
    # traversal of a 2x3 raster is plain column-major
    s = make_schedule(ScanMethod.SWEEP, ScanDirection.WH_FORWARD, 2, 3)
    assert (s.height, s.width) == (2, 3)
    assert list(s.order) == [0, 3, 1, 4, 2, 5]


def test_apply_direction_transpose_swaps_extents():
    # the raw coordinate op, by contrast, re-addresses the transposed grid
    out = apply_direction(base_schedule(ScanMethod.SWEEP, 2, 3), ScanDirection.WH_FORWARD)
    assert (out.height, out.width) == (3, 2)
    assert sorted(out.order) == list(range(6))


@pytest.mark.parametrize("method", METHODS)
@pytest.mark.parametrize("direction", DIRECTIONS)
@pytest.mark.parametrize("size", [2, 4, 8])
def test_schedule_is_permutation_with_inverse(method, direction, size):
    s = make_schedule(method, direction, size, size)
    assert sorted(s.order) == list(range(size * size))
    np.testing.assert_array_equal(s.inverse[s.order], np.arange(size * size))


@pytest.mark.parametrize("method", METHODS)
@pytest.mark.parametrize("size", [2, 4, 8])
def test_reverse_is_elementwise_reversal(method, size):
    fwd = make_schedule(method, ScanDirection.FORWARD, size, size)
    rev = make_schedule(method, ScanDirection.REVERSE, size, size)
    np.testing.assert_array_equal(rev.order, fwd.order[::-1])


@pytest.mark.parametrize("method", METHODS)
@pytest.mark.parametrize("size", [2, 4, 8])
def test_wh_twice_returns_base(method, size):
    base = base_schedule(method, size, size)
    once = apply_direction(base, ScanDirection.WH_FORWARD)
    twice = apply_direction(once, ScanDirection.WH_FORWARD)
    np.testing.assert_array_equal(twice.order, base.order)


@pytest.mark.parametrize("method", METHODS)
@pytest.mark.parametrize("size", [2, 4, 8])
def test_rot90_four_times_returns_base(method, size):
    s = base_schedule(method, size, size)
    out = s
    for _ in range(4):
        out = apply_direction(out, ScanDirection.ROT90_FORWARD)
    np.testing.assert_array_equal(out.order, s.order)


def test_non_square_geometry_where_permitted():
    for method in (ScanMethod.SWEEP, ScanMethod.SCAN, ScanMethod.ZIGZAG):
        for h, w in ((2, 5), (5, 2), (3, 4)):
            s = make_schedule(method, ScanDirection.WH_REVERSE, h, w)
            assert sorted(s.order) == list(range(h * w))
    s = make_schedule(ScanMethod.ZORDER, ScanDirection.REVERSE, 2, 8)
    assert sorted(s.order) == list(range(16))


# ------------------------------------------------------------------ invert


def test_invert_identity():
    s = base_schedule(ScanMethod.SWEEP, 2, 2)
    np.testing.assert_array_equal(invert(s).order, s.order)


def test_invert_known_self_inverses():
    s = base_schedule(ScanMethod.HILBERT, 2, 2)
    assert list(invert(s).order) == [0, 1, 3, 2]
    r = make_schedule(ScanMethod.SWEEP, ScanDirection.REVERSE, 2, 2)
    assert list(invert(r).order) == [3, 2, 1, 0]


@pytest.mark.parametrize("method", METHODS)
@pytest.mark.parametrize("direction", DIRECTIONS)
def test_invert_is_involution(method, direction):
    s = make_schedule(method, direction, 4, 4)
    np.testing.assert_array_equal(invert(invert(s)).order, s.order)


# --------------------------------------------------------- gather/scatter


def test_gather_identity_schedule_flattens():
    t = Tensor(np.arange(8, dtype=np.float32).reshape(2, 2, 2))
    s = base_schedule(ScanMethod.SWEEP, 2, 2)
    seq = gather_sequence(t, s)
    np.testing.assert_array_equal(seq.array, t.array.reshape(2, 4))


def test_gather_reverse_on_vector():
    t = Tensor(np.array([[[1.0, 2.0, 3.0, 4.0]]], dtype=np.float32))
    s = make_schedule(ScanMethod.SWEEP, ScanDirection.REVERSE, 1, 4)
    seq = gather_sequence(t, s)
    np.testing.assert_array_equal(seq.array, [[4.0, 3.0, 2.0, 1.0]])


def test_scatter_of_zeros_is_zeros():
    s = make_schedule(ScanMethod.SCAN, ScanDirection.FORWARD, 2, 3)
    out = scatter_sequence(Tensor(np.zeros((3, 6), dtype=np.float32)), s)
    assert not out.array.any()


def test_gather_shape_mismatch():
    t = Tensor(np.zeros((1, 2, 2), dtype=np.float32))
    s = base_schedule(ScanMethod.SWEEP, 2, 3)
    with pytest.raises(ValueError):
        gather_sequence(t, s)


@settings(max_examples=80, deadline=None)
@given(
    method=st.sampled_from(METHODS),
    direction=st.sampled_from(DIRECTIONS),
    h=st.sampled_from([1, 2, 3, 4, 8]),
    w=st.sampled_from([1, 2, 3, 4, 8]),
    channels=st.integers(1, 3),
    seed=st.integers(0, 2**31),
)
def test_gather_scatter_roundtrip_bitwise(method, direction, h, w, channels, seed):
    if not _geometry_ok(method, h, w):
        return
    if "rot90" in direction.value and h != w:
        return
    s = make_schedule(method, direction, h, w)
    rng = np.random.default_rng(seed)
    t = Tensor(rng.standard_normal((channels, h, w)).astype(np.float32))
    back = scatter_sequence(gather_sequence(t, s), s)
    assert back.array.tobytes() == t.array.tobytes()


def test_exhaustive_bijection_small_grids():
    # every supported combination up to 8x8
    for method in METHODS:
        for direction in DIRECTIONS:
            for h in range(1, 9):
                for w in range(1, 9):
                    if not _geometry_ok(method, h, w):
                        continue
                    if "rot90" in direction.value and h != w:
                        continue
                    s = make_schedule(method, direction, h, w)
                    assert sorted(s.order) == list(range(h * w))
