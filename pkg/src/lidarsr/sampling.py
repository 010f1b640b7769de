"""Row-selection observation operator between aligned high/low-res grids.

The operator keeps a subset of high-resolution rows. Its Gram matrix is
diagonal (1 on kept rows, 0 elsewhere) and applying it after its adjoint is
the identity, which is what makes the solver's data step closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .rangeview import RangeImage


@dataclass(frozen=True)
class RowSelection:
    h_hi: int
    rows: tuple[int, ...]

    def __post_init__(self):
        rows = tuple(int(r) for r in self.rows)
        object.__setattr__(self, "rows", rows)
        if self.h_hi < 1:
            raise ConfigError("h_hi must be positive")
        if not 1 <= len(rows) <= self.h_hi:
            raise ConfigError(f"need between 1 and {self.h_hi} rows, got {len(rows)}")
        if rows[0] < 0 or rows[-1] >= self.h_hi:
            raise ConfigError("selected row out of range")
        if any(b <= a for a, b in zip(rows, rows[1:])):
            raise ConfigError("rows must be strictly increasing")

    @property
    def h_lo(self) -> int:
        return len(self.rows)

    @property
    def index(self) -> np.ndarray:
        return np.asarray(self.rows, dtype=np.intp)

    def matrix(self) -> np.ndarray:
        """Dense (h_lo, h_hi) 0/1 matrix. Only for tests and small checks."""
        d = np.zeros((self.h_lo, self.h_hi))
        d[np.arange(self.h_lo), self.index] = 1.0
        return d

    def nearest_selected(self) -> np.ndarray:
        """For every high-res row, the low-res row index closest to it.

        Ties go to the smaller (upper) row.
        """
        sel = self.index
        dist = np.abs(np.arange(self.h_hi)[:, None] - sel[None, :])
        return np.argmin(dist, axis=1)


def uniform_selection(h_hi: int, h_lo: int, offset: int = 0) -> RowSelection:
    """Every ``h_hi // h_lo``-th row starting at ``offset``."""
    if h_lo < 1 or h_hi < 1 or h_hi % h_lo:
        raise ConfigError(f"h_hi={h_hi} is not a multiple of h_lo={h_lo}")
    stride = h_hi // h_lo
    if not 0 <= offset < stride:
        raise ConfigError(f"offset must lie in [0, {stride}), got {offset}")
    return RowSelection(h_hi, tuple(range(offset, h_hi, stride)))


def apply_array(x: np.ndarray, sel: RowSelection) -> np.ndarray:
    if x.shape[0] != sel.h_hi:
        raise ShapeError(f"expected {sel.h_hi} rows, got {x.shape[0]}")
    return x[sel.index]


def adjoint_array(y: np.ndarray, sel: RowSelection) -> np.ndarray:
    if y.shape[0] != sel.h_lo:
        raise ShapeError(f"expected {sel.h_lo} rows, got {y.shape[0]}")
    out = np.zeros((sel.h_hi,) + y.shape[1:], dtype=y.dtype)
    out[sel.index] = y
    return out


def apply(T: RangeImage, sel: RowSelection) -> RangeImage:
    """Keep the selected rows of a high-res image."""
    apply_array(T.range, sel)
    cfg = T.config.with_height(sel.h_lo)
    inten = None if T.intensity is None else T.intensity[sel.index]
    return RangeImage(cfg, T.range[sel.index], T.valid[sel.index], inten)


def adjoint(S: RangeImage, sel: RowSelection) -> RangeImage:
    """Scatter low-res rows into an otherwise empty high-res image.

    Unselected rows carry no data: they are invalid, so ``values()`` reads
    them as zero.
    """
    cfg = S.config.with_height(sel.h_hi)
    rng = adjoint_array(S.values(), sel)
    valid = adjoint_array(S.valid, sel)
    inten = None if S.intensity is None else adjoint_array(S.intensity, sel)
    return RangeImage(cfg, rng, valid, inten)


def gram_diagonal(sel: RowSelection) -> np.ndarray:
    g = np.zeros(sel.h_hi)
    g[sel.index] = 1.0
    return g
