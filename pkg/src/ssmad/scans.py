"""Grid-visit schedules: five scan curves crossed with eight directions.

A schedule is a permutation of the row-major cell indices of an h x w grid.
``gather_sequence`` reorders the spatial positions of a feature map into a
1-D sequence along the curve, ``scatter_sequence`` puts per-step outputs back
on the grid, and ``invert`` swaps the two views of the permutation.

Curve conventions (fixed so every schedule is reproducible):

  sweep    raster order, every row left to right
  scan     boustrophedon, odd rows traversed right to left
  zigzag   anti-diagonals d = r + c ascending; odd diagonals walk from the
           top-right end downwards, even diagonals from the bottom-left end
           upwards (the 8x8 special case is the classic transform-coding
           coefficient order)
  zorder   Morton order with the row bit above the column bit at each level;
           both extents must be powers of two
  hilbert  ranks of the order-n construction below; requires h = w = 2**n

The Hilbert ranks come from a matrix recursion rather than the usual
state-machine formulation.  With E the all-ones matrix, X^T the transpose,
X^ud the up-down flip, and X^lr the left-right flip:

  H(1) = [[1, 2],
          [4, 3]]

  building H(n+1) from H(n), q = 4**n:
    n even:  [[H,              q*E + H^T        ],
              [(4q+1)*E - H^ud, (3q+1)*E - (H^lr)^T]]
    n odd:   [[H,              (4q+1)*E - H^lr  ],
              [q*E + H^T,      (3q+1)*E - (H^T)^lr]]

Consecutive ranks are always 4-neighbours, which is checked by the tests up
to order 6.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .tensor import Tensor

__all__ = [
    "ScanMethod",
    "ScanDirection",
    "ScanSchedule",
    "HilbertGrid",
    "UnsupportedGeometry",
    "NonSquareRotation",
    "hilbert_matrix",
    "base_schedule",
    "apply_direction",
    "make_schedule",
    "invert",
    "gather_sequence",
    "scatter_sequence",
]

MAX_HILBERT_ORDER = 8


class UnsupportedGeometry(ValueError):
    """Grid extents incompatible with the requested curve or direction."""


class NonSquareRotation(UnsupportedGeometry):
    """Rot90-family directions need a square grid."""


class ScanMethod(enum.Enum):
    SWEEP = "sweep"
    SCAN = "scan"
    ZORDER = "zorder"
    ZIGZAG = "zigzag"
    HILBERT = "hilbert"


class ScanDirection(enum.Enum):
    FORWARD = "forward"
    REVERSE = "reverse"
    WH_FORWARD = "wh-forward"
    WH_REVERSE = "wh-reverse"
    ROT90_FORWARD = "rot90-forward"
    ROT90_REVERSE = "rot90-reverse"
    WH_ROT90_FORWARD = "wh-rot90-forward"
    WH_ROT90_REVERSE = "wh-rot90-reverse"


# direction -> (transpose first, then rotate 90 degrees clockwise, then reverse)
_DIRECTION_PARTS = {
    ScanDirection.FORWARD: (False, False, False),
    ScanDirection.REVERSE: (False, False, True),
    ScanDirection.WH_FORWARD: (True, False, False),
    ScanDirection.WH_REVERSE: (True, False, True),
    ScanDirection.ROT90_FORWARD: (False, True, False),
    ScanDirection.ROT90_REVERSE: (False, True, True),
    ScanDirection.WH_ROT90_FORWARD: (True, True, False),
    ScanDirection.WH_ROT90_REVERSE: (True, True, True),
}


@dataclass(frozen=True)
class ScanSchedule:
    """Visit order over an h x w grid plus its inverse permutation.

    order[t] is the flat row-major cell index visited at step t;
    inverse[cell] is the step at which that cell is visited.
    """

    height: int
    width: int
    order: np.ndarray
    inverse: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise UnsupportedGeometry("grid extents must be >= 1")
        order = np.ascontiguousarray(self.order, dtype=np.int64)
        n = self.height * self.width
        if order.shape != (n,):
            raise ValueError(f"order must have length {n}, got {order.shape}")
        inverse = np.empty(n, dtype=np.int64)
        seen = np.zeros(n, dtype=bool)
        if order.min() < 0 or order.max() >= n:
            raise ValueError("order entries outside the grid")
        seen[order] = True
        if not seen.all():
            raise ValueError("order is not a permutation")
        inverse[order] = np.arange(n, dtype=np.int64)
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "inverse", inverse)

    @property
    def length(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class HilbertGrid:
    """Rank matrix of the order-n curve on a 2**n square grid."""

    order: int
    ranks: np.ndarray

    @property
    def side(self) -> int:
        return 2**self.order


def hilbert_matrix(n: int) -> HilbertGrid:
    """Rank matrix for curve order n, 1 <= n <= MAX_HILBERT_ORDER."""
    if not 1 <= n <= MAX_HILBERT_ORDER:
        raise UnsupportedGeometry(
            f"curve order must be in 1..{MAX_HILBERT_ORDER}, got {n}"
        )
    h = np.array([[1, 2], [4, 3]], dtype=np.int64)
    for m in range(1, n):
        q = 4**m
        e = np.ones_like(h)
        if m % 2 == 0:
            tl = h
            tr = q * e + h.T
            bl = (4 * q + 1) * e - h[::-1, :]
            br = (3 * q + 1) * e - h[:, ::-1].T
        else:
            tl = h
            tr = (4 * q + 1) * e - h[:, ::-1]
            bl = q * e + h.T
            br = (3 * q + 1) * e - h.T[:, ::-1]
        h = np.block([[tl, tr], [bl, br]])
    return HilbertGrid(order=n, ranks=h)


def _is_pow2(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


def _morton_key(r: np.ndarray, c: np.ndarray, bits: int) -> np.ndarray:
    key = np.zeros_like(r)
    for i in range(bits):
        key |= ((c >> i) & 1) << (2 * i)
        key |= ((r >> i) & 1) << (2 * i + 1)
    return key


def base_schedule(method: ScanMethod, h: int, w: int) -> ScanSchedule:
    """Forward-direction schedule of the given curve on an h x w grid."""
    if h < 1 or w < 1:
        raise UnsupportedGeometry("grid extents must be >= 1")

    if method is ScanMethod.SWEEP:
        order = np.arange(h * w, dtype=np.int64)

    elif method is ScanMethod.SCAN:
        rows = np.arange(h * w, dtype=np.int64).reshape(h, w)
        rows[1::2] = rows[1::2, ::-1]
        order = rows.reshape(-1)

    elif method is ScanMethod.ZIGZAG:
        chunks = []
        for d in range(h + w - 1):
            r_lo = max(0, d - w + 1)
            r_hi = min(d, h - 1)
            rs = np.arange(r_lo, r_hi + 1, dtype=np.int64)
            if d % 2 == 0:
                rs = rs[::-1]
            chunks.append(rs * w + (d - rs))
        order = np.concatenate(chunks)

    elif method is ScanMethod.ZORDER:
        if not (_is_pow2(h) and _is_pow2(w)):
            raise UnsupportedGeometry(
                f"zorder requires power-of-two extents, got {h}x{w}"
            )
        cells = np.arange(h * w, dtype=np.int64)
        key = _morton_key(cells // w, cells % w, max(h, w).bit_length())
        order = cells[np.argsort(key, kind="stable")]

    elif method is ScanMethod.HILBERT:
        if h != w or not _is_pow2(h) or h < 2:
            raise UnsupportedGeometry(
                f"hilbert requires square power-of-two extents >= 2, got {h}x{w}"
            )
        n = h.bit_length() - 1
        ranks = hilbert_matrix(n).ranks
        order = np.argsort(ranks.reshape(-1), kind="stable").astype(np.int64)

    else:  # pragma: no cover - closed enum
        raise ValueError(f"unknown method {method}")

    return ScanSchedule(height=h, width=w, order=order)


def apply_direction(s: ScanSchedule, d: ScanDirection) -> ScanSchedule:
    """Reorient a schedule.

    The transpose step swaps the grid axes (and, on non-square grids, the
    schedule's extents); the rotation step maps (r, c) to (c, h-1-r) and is
    only defined on square grids; the reverse step flips the visit order.
    The steps compose in that order.
    """
    transpose, rotate, reverse = _DIRECTION_PARTS[d]
    h, w = s.height, s.width
    r = s.order // w
    c = s.order % w
    if transpose:
        r, c = c, r
        h, w = w, h
    if rotate:
        if h != w:
            raise NonSquareRotation(
                f"rot90 directions need a square grid, got {h}x{w}"
            )
        r, c = c, h - 1 - r
    order = r * w + c
    if reverse:
        order = order[::-1]
    return ScanSchedule(height=h, width=w, order=order)


@lru_cache(maxsize=512)
def _cached_schedule(method: ScanMethod, direction: ScanDirection, h: int, w: int):
    transpose, rotate, reverse = _DIRECTION_PARTS[direction]
    if transpose:
        # traverse the transposed geometry, then map every visit back into
        # the caller's grid so the result always addresses an h x w map
        b = base_schedule(method, w, h)
        r = b.order % h
        c = b.order // h
    else:
        b = base_schedule(method, h, w)
        r = b.order // w
        c = b.order % w
    if rotate:
        if h != w:
            raise NonSquareRotation(
                f"rot90 directions need a square grid, got {h}x{w}"
            )
        r, c = c, h - 1 - r
    order = r * w + c
    if reverse:
        order = order[::-1]
    return ScanSchedule(height=h, width=w, order=order)


def make_schedule(
    method: ScanMethod, direction: ScanDirection, h: int, w: int
) -> ScanSchedule:
    """Directed schedule over an h x w grid; memoised since blocks reuse a
    handful of geometries.

    Unlike ``apply_direction``, the returned schedule always addresses the
    requested extents: transposing directions traverse the transposed
    geometry but report visits as cells of the caller's grid.
    """
    return _cached_schedule(method, direction, h, w)


def invert(s: ScanSchedule) -> ScanSchedule:
    """Swap the order/inverse views; an involution."""
    return ScanSchedule(height=s.height, width=s.width, order=s.inverse.copy())


def gather_sequence(t: Tensor, s: ScanSchedule) -> Tensor:
    """(C, H, W) feature map -> (C, L) sequence along the schedule."""
    if t.ndim != 3:
        raise ValueError(f"gather expects a (C, H, W) tensor, got {t.shape}")
    ch, hh, ww = t.shape
    if (hh, ww) != (s.height, s.width):
        raise ValueError(
            f"schedule is {s.height}x{s.width} but the map is {hh}x{ww}"
        )
    flat = t.array.reshape(ch, hh * ww)
    return Tensor(flat[:, s.order])

def scatter_sequence(q: Tensor, s: ScanSchedule) -> Tensor:
    """(C, L) sequence -> (C, H, W) map; exact inverse of gather_sequence."""
    if q.ndim != 2:
        raise ValueError(f"scatter expects a (C, L) tensor, got {q.shape}")
    ch, length = q.shape
    if length != s.length:
        raise ValueError(f"sequence length {length} != schedule length {s.length}")
    flat = np.empty((ch, length), dtype=np.float32)
    flat[:, s.order] = q.array
    return Tensor(flat.reshape(ch, s.height, s.width))
