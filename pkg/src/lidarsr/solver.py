"""Unrolled half-quadratic-splitting solver for range-image super-resolution.

Each unrolled layer runs a denoiser (the prior step) and then the exact
minimiser of ``||S - D T||^2 + b ||T - Z||^2``. Because ``D`` selects rows,
``D^T D + b I`` is diagonal and that minimiser is a per-pixel weighted mean.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .priors import DenoiserPrior, prior_step, total_variation
from .rangeview import RangeImage
from .sampling import RowSelection, adjoint

logger = logging.getLogger(__name__)

INIT_MODES = ("replicate-rows", "adjoint-zero-fill")


@dataclass(frozen=True)
class SolverConfig:
    b: float = 0.5
    iterations: int = 5
    prior: DenoiserPrior = field(default_factory=DenoiserPrior)
    prior_strength: float = 6.0
    init: str = "replicate-rows"

    def __post_init__(self):
        if not self.b > 0 or not np.isfinite(self.b):
            raise ConfigError(f"b must be a positive finite number, got {self.b}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ConfigError(f"iterations must be a positive integer, got {self.iterations}")
        if not self.prior_strength >= 0:
            raise ConfigError("prior_strength must be non-negative")
        if self.init not in INIT_MODES:
            raise ConfigError(f"init must be one of {INIT_MODES}, got {self.init!r}")

    @property
    def effective_prior(self) -> DenoiserPrior:
        return self.prior.with_weight(self.prior_strength)


@dataclass
class SolverState:
    T: RangeImage
    Z: RangeImage
    k: int = 0
    residual_history: list[float] = field(default_factory=list)


def _check(S: RangeImage, sel: RowSelection):
    if S.shape[0] != sel.h_lo:
        raise ShapeError(f"observation has {S.shape[0]} rows, selection expects {sel.h_lo}")


def observed_mask(S: RangeImage, sel: RowSelection) -> np.ndarray:
    """High-res mask of pixels carrying a valid observation."""
    return adjoint(S, sel).valid


def data_step(S: RangeImage, Z: RangeImage, sel: RowSelection, b: float) -> RangeImage:
    """Closed-form ``(D^T D + b I)^{-1} (D^T S + b Z)``, pixel by pixel.

    Pixels with no valid observation take Z; pixels where Z is invalid but an
    observation exists take the observation; pixels with neither stay invalid.
    """
    _check(S, sel)
    if Z.shape[0] != sel.h_hi or Z.shape[1] != S.shape[1]:
        raise ShapeError(f"estimate shape {Z.shape} does not match selection ({sel.h_hi}, {S.shape[1]})")
    if not b > 0:
        raise ConfigError(f"b must be positive, got {b}")
    DtS = adjoint(S, sel)
    obs = DtS.valid
    zv = Z.valid
    w_obs = obs.astype(np.float64)
    w_z = np.where(zv, b, 0.0)
    den = w_obs + w_z
    valid = den > 0
    num = w_obs * DtS.values() + w_z * Z.values()
    out = np.divide(num, den, out=np.zeros_like(num), where=valid)
    return RangeImage(Z.config, out, valid, Z.intensity)


def residual(S: RangeImage, T: RangeImage, sel: RowSelection) -> float:
    """Frobenius norm of ``S - D T`` over observed pixels that T also covers."""
    _check(S, sel)
    TS = T.range[sel.index]
    m = S.valid & T.valid[sel.index]
    d = np.where(m, S.range - TS, 0.0)
    return float(np.sqrt((d * d).sum()))


def objective(T: RangeImage, S: RangeImage, sel: RowSelection, mu: float) -> float:
    """``0.5 * ||S - D T||_F^2 + mu * TV(T)``, for reporting only."""
    if T.shape[0] != sel.h_hi or T.shape[1] != S.shape[1]:
        raise ShapeError("T does not match the selection")
    r = residual(S, T, sel)
    return 0.5 * r * r + mu * total_variation(T.range, T.valid)


def initial_estimate(S: RangeImage, sel: RowSelection, mode: str) -> RangeImage:
    if mode == "adjoint-zero-fill":
        return adjoint(S, sel)
    if mode != "replicate-rows":
        raise ConfigError(f"unknown init {mode!r}")
    src = sel.nearest_selected()
    inten = None if S.intensity is None else S.intensity[src]
    return RangeImage(S.config.with_height(sel.h_hi), S.range[src], S.valid[src], inten)


def superresolve(
    S: RangeImage,
    sel: RowSelection,
    cfg: SolverConfig | None = None,
    initial: RangeImage | None = None,
) -> tuple[RangeImage, SolverState]:
    """Run ``cfg.iterations`` unrolled layers and return the estimate.

    ``initial`` overrides ``cfg.init`` as a warm start.
    """
    cfg = cfg or SolverConfig()
    _check(S, sel)
    T = initial if initial is not None else initial_estimate(S, sel, cfg.init)
    if T.shape != (sel.h_hi, S.shape[1]):
        raise ShapeError(f"initial estimate has shape {T.shape}")
    prior = cfg.effective_prior
    state = SolverState(T=T, Z=T)
    for _ in range(cfg.iterations):
        state.Z = prior_step(state.T, prior)
        state.T = data_step(S, state.Z, sel, cfg.b)
        state.k += 1
        state.residual_history.append(residual(S, state.T, sel))
    logger.debug("superresolve: %d layers, final residual %.3g", state.k, state.residual_history[-1])
    return state.T, state
