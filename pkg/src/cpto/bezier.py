"""
Bernstein basis matrices and Bezier trajectory evaluation.

The planning grid is nu_k = k / N for k = 1..N, so column ``k - 1`` of every
basis matrix corresponds to the state ``k * dt`` seconds ahead of the current
one.  The current state itself (nu = 0) only appears in the initial-boundary
matrix ``A0``.

Derivative matrices are exact: the hodograph of a degree-n Bernstein
polynomial is a weighted difference of degree n-k polynomials, and the chain
rule through nu = t / T contributes a factor ``T**-k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import comb


class DimensionError(ValueError):
    """Invalid basis or batch dimensions."""


def bernstein(n: int, nu) -> np.ndarray:
    """Bernstein polynomials of degree `n` evaluated at `nu`.

    Returns an array of shape (n + 1, len(nu)); indices outside [0, n] are
    never produced.
    """
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    i = np.arange(n + 1)[:, None]
    return comb(n, i) * nu[None, :] ** i * (1.0 - nu[None, :]) ** (n - i)


def bernstein_derivative(n: int, nu, order: int) -> np.ndarray:
    """`order`-th derivative with respect to nu of the degree-n basis."""
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    if order == 0:
        return bernstein(n, nu)
    out = np.zeros((n + 1, nu.size))
    if order > n:
        return out
    lower = bernstein(n - order, nu)
    scale = np.prod(np.arange(n - order + 1, n + 1, dtype=float))
    for j in range(order + 1):
        sign = (-1.0) ** (order - j)
        # shift: B_{i-j, n-order} contributes to row i
        out[j:j + n - order + 1] += sign * comb(order, j) * lower
    return scale * out


@dataclass(frozen=True)
class BasisSet:
    n: int
    N: int
    T: float
    W: np.ndarray
    W1: np.ndarray
    W2: np.ndarray
    W3: np.ndarray

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nu(self) -> np.ndarray:
        return np.arange(1, self.N + 1) / self.N

    def at(self, nu, order: int = 0) -> np.ndarray:
        """Time-derivative basis of the given order at arbitrary nu."""
        return bernstein_derivative(self.n, nu, order) / self.T ** order


def build_basis(n: int = 10, N: int = 40, T: float = 4.0) -> BasisSet:
    if n < 3 or N < 2 or not T > 0:
        raise DimensionError(f"need n >= 3, N >= 2, T > 0 (got n={n}, N={N}, T={T})")
    nu = np.arange(1, N + 1) / N
    mats = [bernstein_derivative(n, nu, k) / T ** k for k in range(4)]
    for m in mats:
        m.setflags(write=False)
    return BasisSet(n, N, float(T), *mats)


@dataclass(frozen=True)
class BoundaryMatrices:
    A0: np.ndarray        # 2 x (n+1): value, rate at nu = 0
    Af_xy: np.ndarray     # 1 x (n+1): value at nu = 1
    Af_theta: np.ndarray  # 2 x (n+1): value, rate at nu = 1


def build_boundary(basis: BasisSet) -> BoundaryMatrices:
    A0 = np.vstack([basis.at(0.0, 0).T, basis.at(0.0, 1).T])
    Af_theta = np.vstack([basis.W[:, -1], basis.W1[:, -1]])
    return BoundaryMatrices(A0, Af_theta[:1].copy(), Af_theta)


@dataclass(frozen=True)
class ConsensusMatrices:
    Acons_xy: np.ndarray     # (n+1) x 3Ns: value | rate | accel columns
    Acons_theta: np.ndarray  # (n+1) x Ns
    Ns: int


def build_consensus(basis: BasisSet, Ns: int) -> ConsensusMatrices:
    """Consensus extraction matrices for steps 1..Ns.

    ``Ns = 0`` gives empty matrices, which switches consensus off.
    """
    if Ns < 0 or Ns >= basis.N:
        raise DimensionError(f"consensus steps must satisfy 0 <= Ns < N={basis.N}, got {Ns}")
    s = slice(0, Ns)
    A_xy = np.hstack([basis.W[:, s], basis.W1[:, s], basis.W2[:, s]])
    return ConsensusMatrices(A_xy, basis.W[:, s].copy(), Ns)


@dataclass
class ControlPointBatch:
    Cx: np.ndarray
    Cy: np.ndarray
    Ctheta: np.ndarray

    def __post_init__(self):
        self.Cx = np.atleast_2d(np.asarray(self.Cx, dtype=float))
        self.Cy = np.atleast_2d(np.asarray(self.Cy, dtype=float))
        self.Ctheta = np.atleast_2d(np.asarray(self.Ctheta, dtype=float))
        if not (self.Cx.shape == self.Cy.shape == self.Ctheta.shape):
            raise DimensionError(
                f"control point shapes differ: {self.Cx.shape}, {self.Cy.shape}, {self.Ctheta.shape}")
        if not (np.all(np.isfinite(self.Cx)) and np.all(np.isfinite(self.Cy))
                and np.all(np.isfinite(self.Ctheta))):
            raise ValueError("control points must be finite")

    @property
    def Nc(self) -> int:
        return self.Cx.shape[1]

    @property
    def degree(self) -> int:
        return self.Cx.shape[0] - 1

    def copy(self) -> "ControlPointBatch":
        return ControlPointBatch(self.Cx.copy(), self.Cy.copy(), self.Ctheta.copy())

    def column(self, j: int) -> "ControlPointBatch":
        return ControlPointBatch(self.Cx[:, [j]], self.Cy[:, [j]], self.Ctheta[:, [j]])


@dataclass
class StateSamples:
    px: np.ndarray
    py: np.ndarray
    theta: np.ndarray
    theta_dot: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    jx: np.ndarray
    jy: np.ndarray

    @property
    def v(self) -> np.ndarray:
        return np.hypot(self.vx, self.vy)


def eval_states(batch: ControlPointBatch, basis: BasisSet) -> StateSamples:
    """Sample position, heading and derivatives on the planning grid (N x Nc)."""
    if batch.degree != basis.n:
        raise DimensionError(f"batch degree {batch.degree} != basis degree {basis.n}")
    W, W1, W2, W3 = basis.W.T, basis.W1.T, basis.W2.T, basis.W3.T
    return StateSamples(
        px=W @ batch.Cx, py=W @ batch.Cy,
        theta=W @ batch.Ctheta, theta_dot=W1 @ batch.Ctheta,
        vx=W1 @ batch.Cx, vy=W1 @ batch.Cy,
        ax=W2 @ batch.Cx, ay=W2 @ batch.Cy,
        jx=W3 @ batch.Cx, jy=W3 @ batch.Cy,
    )


def shift_matrix(n: int, shift: float) -> np.ndarray:
    """Matrix S with ``c'(nu) = c(nu + shift)`` for control points ``c' = S c``.

    Exact up to round-off since both sides are degree-n polynomials; the
    interpolation uses Chebyshev nodes to keep the solve well conditioned.
    """
    nodes = 0.5 - 0.5 * np.cos(np.pi * (2 * np.arange(n + 1) + 1) / (2 * n + 2))
    B_here = bernstein(n, nodes)
    B_there = bernstein(n, nodes + shift)
    return np.linalg.solve(B_here.T, B_there.T)
