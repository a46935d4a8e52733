"""
Polar-form collision constraints and discrete-time barrier machinery.

A trajectory point p is written relative to obstacle o as

    p = o + d * (lx cos(w), ly sin(w)),   d >= 1,

so ``h = d - 1`` is the barrier value for that obstacle.  Masked entries
(virtual obstacles used to pad configurations to a fixed size) are neutral:
``d = 1``, ``w = 0`` and they never fail a barrier check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bezier import BasisSet, ControlPointBatch, build_consensus


@dataclass(frozen=True)
class EllipseSchedule:
    lx: np.ndarray    # N x M
    ly: np.ndarray    # N x M
    mask: np.ndarray  # N x M bool


def ellipse_schedule(lx_max, lx_min, ly_max, ly_min, N: int, mask=None) -> EllipseSchedule:
    """Safety ellipses shrinking linearly from the max axes (step 0) to the min axes (step N-1).

    `mask` may be None (one always-active column), a length-M vector, or an N x M array.
    """
    if lx_min > lx_max or ly_min > ly_max:
        raise ValueError("ellipse minimum axis exceeds maximum")
    if lx_min <= 0 or ly_min <= 0:
        raise ValueError("ellipse axes must be positive")
    if mask is None:
        mask = np.ones((N, 1), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, (N, mask.size))
    ramp = np.linspace(0.0, 1.0, N)[:, None] if N > 1 else np.zeros((1, 1))
    lx = (lx_max + (lx_min - lx_max) * ramp) * mask
    ly = (ly_max + (ly_min - ly_max) * ramp) * mask
    return EllipseSchedule(lx, ly, mask.copy())


def barrier_coefficients(alpha_init: float, N: int) -> np.ndarray:
    """Linear ramp of barrier coefficients from `alpha_init` to 1 over N steps."""
    if not 0 < alpha_init <= 1:
        raise ValueError(f"alpha_init must lie in (0, 1], got {alpha_init}")
    if N == 1:
        return np.ones(1)
    return alpha_init + np.arange(N) * (1.0 - alpha_init) / (N - 1)


def polar_angle(px, py, ox, oy, lx, ly):
    """Angle of the EV around the obstacle in axis-scaled coordinates; 0 where inactive."""
    lx = np.asarray(lx, dtype=float)
    ly = np.asarray(ly, dtype=float)
    active = (lx > 0) & (ly > 0)
    w = np.arctan2(lx * (np.asarray(py) - oy), ly * (np.asarray(px) - ox))
    return np.where(active, w, 0.0)


def scale_factor(px, py, ox, oy, lx, ly):
    """Ellipse scale through the EV position; 1 (neutral) where inactive."""
    lx = np.asarray(lx, dtype=float)
    ly = np.asarray(ly, dtype=float)
    active = (lx > 0) & (ly > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.hypot((np.asarray(px) - ox) / lx, (np.asarray(py) - oy) / ly)
    return np.where(active, d, 1.0)


def _broadcast_alpha(alpha, shape):
    """Broadcast a per-step alpha (length N) over (N*M, Nc) or (N, M, Nc) arrays."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim == 0 or alpha.shape == tuple(shape):
        return alpha
    N = alpha.size
    if shape[0] == N:
        return alpha.reshape((N,) + (1,) * (len(shape) - 1))
    if shape[0] % N == 0:
        M = shape[0] // N
        return np.repeat(alpha, M).reshape((N * M,) + (1,) * (len(shape) - 1))
    raise ValueError(f"cannot broadcast alpha of length {N} to shape {shape}")


def d_update(D_prev, alpha, strict: bool = True):
    """Contraction ``max(1, 1 + (1 - alpha) (D - 1))`` with alpha broadcast per step.

    With `strict` the result for D > 1 is raised by a few ulps of D, so the
    barrier condition ``h+ > (1 - alpha) h`` holds strictly in floating point
    (in either algebraic form) instead of only up to rounding.  D <= 1 maps to 1.
    """
    D_prev = np.asarray(D_prev, dtype=float)
    a = _broadcast_alpha(alpha, D_prev.shape)
    D = 1.0 + (1.0 - a) * (D_prev - 1.0)
    if strict:
        D = np.where(D_prev > 1.0, D + 8.0 * np.finfo(float).eps * D_prev, D)
    return np.maximum(1.0, D)


def bf_condition(h_next, h_curr, alpha, mask=None):
    """Discrete-time barrier condition ``h_next - h_curr > -alpha h_curr``."""
    h_next = np.asarray(h_next, dtype=float)
    h_curr = np.asarray(h_curr, dtype=float)
    a = _broadcast_alpha(alpha, h_curr.shape)
    ok = (h_next - h_curr) > -a * h_curr
    if mask is not None:
        ok = ok | ~np.asarray(mask, dtype=bool)
    return ok


def reconstruct_position(ox, oy, lx, ly, d, omega):
    """Invert the polar form back to Cartesian EV coordinates."""
    return ox + lx * d * np.cos(omega), oy + ly * d * np.sin(omega)


@dataclass
class InvarianceReport:
    position_deviation: float  # max pairwise distance between consensus positions, m
    segment_deviation: float   # max pairwise abs difference over all extracted rows
    min_h: float               # min over (trajectory, configuration) of h on the segment
    min_h_matrix: np.ndarray   # Nc x Nconfigs

    @property
    def ok(self) -> bool:
        return self.min_h >= 0.0


def consensus_invariance_check(batch: ControlPointBatch, configs, basis: BasisSet,
                               Ns: int) -> InvarianceReport:
    """Check the shared-segment safety condition across all configurations.

    Every trajectory's first `Ns` steps are evaluated against every
    configuration's obstacles, since safety of the shared segment must not
    depend on which hypothesis turns out to be true.
    """
    Nc = batch.Nc
    n_cfg = len(configs)
    if Ns == 0:
        return InvarianceReport(0.0, 0.0, np.inf, np.full((Nc, n_cfg), np.inf))
    cons = build_consensus(basis, Ns)
    seg = np.vstack([cons.Acons_xy.T @ batch.Cx, cons.Acons_xy.T @ batch.Cy,
                     cons.Acons_theta.T @ batch.Ctheta])
    px, py = seg[:Ns], seg[3 * Ns:4 * Ns]
    pos_dev = 0.0
    seg_dev = float(np.max(seg.max(axis=1) - seg.min(axis=1))) if Nc > 1 else 0.0
    for a in range(Nc):
        for b in range(a + 1, Nc):
            pos_dev = max(pos_dev, float(np.max(np.hypot(px[:, a] - px[:, b], py[:, a] - py[:, b]))))

    hmin = np.full((Nc, n_cfg), np.inf)
    for jc, cfg in enumerate(configs):
        act = cfg.step_mask[:Ns]
        if not act.any():
            continue
        d = scale_factor(px[:, :, None], py[:, :, None],
                         cfg.ox[:Ns, None, :], cfg.oy[:Ns, None, :],
                         cfg.lx[:Ns, None, :], cfg.ly[:Ns, None, :])
        h = np.where(act[:, None, :], d - 1.0, np.inf)
        hmin[:, jc] = h.min(axis=(0, 2))
    return InvarianceReport(pos_dev, seg_dev, float(hmin.min()) if hmin.size else np.inf, hmin)
