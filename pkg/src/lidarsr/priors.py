"""Denoisers plugged into the prior step of the unrolled solver.

Every denoiser is mask-aware: invalid pixels are never read as data and are
returned untouched (still invalid).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import ConfigError
from .rangeview import RangeImage

PRIOR_KINDS = ("identity", "median", "tv-prox")


@dataclass(frozen=True)
class DenoiserPrior:
    kind: str = "tv-prox"
    weight: float = 6.0
    window: int = 3
    inner_iters: int = 5

    def __post_init__(self):
        if self.kind not in _REGISTRY:
            raise ConfigError(f"unknown prior {self.kind!r}; known: {sorted(_REGISTRY)}")
        if not self.weight >= 0:
            raise ConfigError("prior weight must be non-negative")
        if self.window < 3 or self.window % 2 == 0:
            raise ConfigError("median window must be odd and at least 3")
        if self.inner_iters < 1:
            raise ConfigError("TV inner iterations must be at least 1")

    def with_weight(self, weight: float) -> DenoiserPrior:
        return replace(self, weight=weight)


def _edge_masks(valid: np.ndarray):
    """Vertical and horizontal 4-neighbour edges whose two ends are valid."""
    ev = valid[:-1, :] & valid[1:, :]
    eh = valid[:, :-1] & valid[:, 1:]
    return ev, eh


def _grad(u, ev, eh):
    gv = np.zeros_like(u)
    gh = np.zeros_like(u)
    gv[:-1, :] = np.where(ev, u[1:, :] - u[:-1, :], 0.0)
    gh[:, :-1] = np.where(eh, u[:, 1:] - u[:, :-1], 0.0)
    return gv, gh


def _div(pv, ph):
    # negative adjoint of _grad; pv/ph are already zero off the edge set
    d = pv.copy()
    d[1:, :] -= pv[:-1, :]
    d += ph
    d[:, 1:] -= ph[:, :-1]
    return d


def total_variation(values: np.ndarray, valid: np.ndarray) -> float:
    """Anisotropic TV: sum of |differences| over edges between valid pixels."""
    ev, eh = _edge_masks(valid)
    gv, gh = _grad(np.where(valid, values, 0.0), ev, eh)
    return float(np.abs(gv).sum() + np.abs(gh).sum())


def tv_prox_array(y: np.ndarray, valid: np.ndarray, weight: float, inner_iters: int, tau: float = 0.25) -> np.ndarray:
    """argmin_x 0.5*||x - y||^2 + weight*TV(x) by projected iterations on the dual.

    One dual variable per edge, kept in [-1, 1]; x = y - weight * div p.
    """
    y = np.where(valid, y, 0.0)
    if weight == 0:
        return y
    ev, eh = _edge_masks(valid)
    ev = ev.astype(y.dtype)
    eh = eh.astype(y.dtype)
    H, W = y.shape
    pv = np.zeros((H - 1, W))
    ph = np.zeros((H, W - 1))
    g = y / weight
    d = np.empty_like(y)
    for _ in range(inner_iters):
        # d = div p - g, then ascend along its gradient and project onto the box
        np.negative(g, out=d)
        d[:-1, :] += pv
        d[1:, :] -= pv
        d[:, :-1] += ph
        d[:, 1:] -= ph
        pv += tau * np.diff(d, axis=0) * ev
        np.clip(pv, -1.0, 1.0, out=pv)
        ph += tau * np.diff(d, axis=1) * eh
        np.clip(ph, -1.0, 1.0, out=ph)
    div = np.zeros_like(y)
    div[:-1, :] += pv
    div[1:, :] -= pv
    div[:, :-1] += ph
    div[:, 1:] -= ph
    return y - weight * div


def tv_prox(img: RangeImage, weight: float, inner_iters: int = 5) -> RangeImage:
    if weight < 0:
        raise ConfigError("TV weight must be non-negative")
    if weight == 0 or not img.valid.any():
        return img
    out = tv_prox_array(img.range, img.valid, weight, inner_iters)
    # the prox can in principle push a range through zero; clamp to keep the mask honest
    out = np.where(img.valid, np.maximum(out, np.finfo(float).tiny), out)
    return RangeImage(img.config, out, img.valid, img.intensity)


def median_filter(img: RangeImage, window: int, strength: float = 1.0) -> RangeImage:
    """Median over the valid pixels of each window, blended in by ``strength``."""
    h = window // 2
    padded = np.pad(np.where(img.valid, img.range, np.nan), h, constant_values=np.nan)
    win = np.lib.stride_tricks.sliding_window_view(padded, (window, window))
    med = np.nanmedian(win.reshape(img.shape + (-1,)), axis=-1) if img.valid.any() else img.range
    s = min(max(strength, 0.0), 1.0)
    out = np.where(img.valid, img.range + s * (med - img.range), img.range)
    return RangeImage(img.config, out, img.valid, img.intensity)


def _identity(img: RangeImage, prior: DenoiserPrior) -> RangeImage:
    return img


def _median(img: RangeImage, prior: DenoiserPrior) -> RangeImage:
    return median_filter(img, prior.window, prior.weight)


def _tv(img: RangeImage, prior: DenoiserPrior) -> RangeImage:
    return tv_prox(img, prior.weight, prior.inner_iters)


_REGISTRY: dict[str, Callable[[RangeImage, DenoiserPrior], RangeImage]] = {
    "identity": _identity,
    "median": _median,
    "tv-prox": _tv,
}


def register_prior(kind: str, fn: Callable[[RangeImage, DenoiserPrior], RangeImage]) -> None:
    """Make a denoiser (e.g. a learned network) selectable by ``kind``."""
    _REGISTRY[kind] = fn


def prior_step(T: RangeImage, prior: DenoiserPrior) -> RangeImage:
    return _REGISTRY[prior.kind](T, prior)
