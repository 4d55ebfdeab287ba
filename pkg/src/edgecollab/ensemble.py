"""Knowledge integration across training moments and across architectures.

Four pure operations implement the label-correction machinery:

* ``momentum_update``   -- epoch-wise parameter averaging (halving recurrence)
* ``uncertainty_weights`` / ``fuse`` -- confidence-weighted prediction fusion
* ``eta_at``            -- linear trust ramp for the corrected targets
* ``soft_target``       -- convex blend of fused prediction and annotation

All map-valued functions take and return plain numpy arrays and never mutate
their inputs, so they are safe under arbitrary concurrency.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .models.params import ModelParams, require_compatible

DEGENERATE_EPS = 1e-8


@dataclass(frozen=True)
class TrustSchedule:
    """Linear ramp of the target-correction weight over training epochs."""

    eta_final: float = 0.8
    total_epochs: int = 30

    def __post_init__(self):
        if not 0.0 <= self.eta_final <= 1.0:
            raise ValueError(f"eta_final must be in [0, 1], got {self.eta_final}")
        if self.total_epochs <= 0:
            raise ValueError("total_epochs must be positive")


@dataclass(frozen=True)
class UncertaintyWeights:
    """Per-pixel fusion weights; u_r + u_nonr == 1 everywhere."""

    u_r: np.ndarray
    u_nonr: np.ndarray


def momentum_update(w_bp: ModelParams, w_m_prev: ModelParams) -> ModelParams:
    """Element-wise mean of a back-propagated network and its momentum twin.

    Produces fresh storage; neither input is mutated. Unrolled over epochs
    (with the epoch-0 copy) this yields exponentially decaying contributions:
    w_m(ep) = 2^-ep * w_bp(0) + sum_k 2^-(ep-k+1) * w_bp(k).
    """
    require_compatible(w_bp, w_m_prev)
    averaged = OrderedDict(
        (name, (t + w_m_prev.tensors[name]) / 2.0) for name, t in w_bp.tensors.items()
    )
    return ModelParams(w_bp.kind, dict(w_bp.config), averaged)


def uncertainty_weights(
    m_r: np.ndarray, m_nonr: np.ndarray, epsilon: float = DEGENERATE_EPS
) -> UncertaintyWeights:
    """Fusion weights from each prediction's distance to the 0.5 ambiguity point.

    Where both predictions sit (numerically) at 0.5 the shares are undefined;
    those pixels get an even 0.5/0.5 split so the weights still sum to one.
    """
    m_r = np.asarray(m_r, dtype=np.float64)
    m_nonr = np.asarray(m_nonr, dtype=np.float64)
    if m_r.shape != m_nonr.shape:
        raise ValueError(f"shape mismatch: {m_r.shape} vs {m_nonr.shape}")
    d_r = np.abs(m_r - 0.5)
    d_nonr = np.abs(m_nonr - 0.5)
    denom = d_r + d_nonr
    tied = denom < epsilon
    safe = np.where(tied, 1.0, denom)
    u_r = np.where(tied, 0.5, d_r / safe)
    u_nonr = np.where(tied, 0.5, d_nonr / safe)
    return UncertaintyWeights(u_r, u_nonr)


def fuse(m_r: np.ndarray, m_nonr: np.ndarray) -> np.ndarray:
    """Confidence-weighted pixel-wise fusion of two probability maps.

    The result is a convex combination, hence bounded by the two inputs at
    every pixel and symmetric in its arguments.
    """
    w = uncertainty_weights(m_r, m_nonr)
    fused = np.asarray(m_r, dtype=np.float64) * w.u_r + np.asarray(
        m_nonr, dtype=np.float64
    ) * w.u_nonr
    return np.clip(fused, 0.0, 1.0)


def eta_at(schedule: TrustSchedule, ep: int) -> float:
    """Trust weight at epoch ``ep``: linear from 0 up to eta_final at the end."""
    if not 0 <= ep <= schedule.total_epochs:
        raise ValueError(
            f"epoch {ep} outside [0, {schedule.total_epochs}]"
        )
    return schedule.eta_final * ep / schedule.total_epochs


def soft_target(m: np.ndarray, y: np.ndarray, eta: float) -> np.ndarray:
    """Corrected target: eta * fused prediction + (1 - eta) * annotation."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    m = np.asarray(m, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if m.shape != y.shape:
        raise ValueError(f"shape mismatch: {m.shape} vs {y.shape}")
    return np.clip(eta * m + (1.0 - eta) * y, 0.0, 1.0)
