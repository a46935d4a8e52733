"""
Over-relaxed consensus ADMM for a batch of Bezier candidate trajectories.

Each candidate j owns control points (cx_j, cy_j, ctheta_j) and one obstacle
hypothesis.  The non-convex problem (nonholonomic coupling, polar collision
constraints) is split into alternating convex pieces:

    C_theta -> C_x -> C_y -> slack Z -> angles w -> scales D -> consensus Y -> duals

Every primal block is an equality-constrained least-squares problem whose
Hessian depends only on static matrices, the penalties and the obstacle mask,
so the per-column solution operators are factorized once per horizon and the
iteration itself is matrix products only.

Two solution modes are supported:

``kkt-exact``
    boundary rows are hard equalities (stationarity + constraint system).
``paper-pseudoinverse``
    the stationarity block is stacked on top of the boundary rows (scaled by
    ``boundary_weight``) and the system is solved in the least-squares sense
    via a cached pseudoinverse.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import barrier
from .bezier import (BasisSet, BoundaryMatrices, ConsensusMatrices, ControlPointBatch,
                     build_boundary, build_consensus, shift_matrix)

MODES = ("kkt-exact", "paper-pseudoinverse")


class SingularSystemError(np.linalg.LinAlgError):
    """A primal subproblem has no unique solution."""


@dataclass
class SolverConfig:
    rho_theta: float = 5.0
    rho_x: float = 5.0
    rho_y: float = 5.0
    rho_obs: float = 6.0
    rho_cons_x: float = 4.0
    rho_cons_y: float = 4.0
    rho_cons_theta: float = 2.0
    relax_alpha: float = 1.5
    eps_pri: float = 0.1
    iter_max: int = 200
    q_weights: tuple = (100.0, 100.0, 150.0)
    boundary_weight: float = 1e3
    mode: str = "kkt-exact"
    v_floor: float = 0.1
    residual_norm: str = "rms"
    obstacle_norm: str = "max"   # a single penetration must not be averaged away
    coupling_dual: str = "velocity"
    consensus_tol: float | None = 1e-2  # m, pairwise spread of shared positions; None disables
    # residual balancing: when only the consensus spread is still failing, the
    # consensus penalties are multiplied by `consensus_boost` every
    # `boost_every` iterations, up to `boost_max` times the base value
    consensus_boost: float = 2.0
    boost_every: int = 20
    boost_max: float = 64.0
    Qx: np.ndarray | None = None
    Qy: np.ndarray | None = None
    Qtheta: np.ndarray | None = None

    def __post_init__(self):
        rhos = [self.rho_theta, self.rho_x, self.rho_y, self.rho_obs,
                self.rho_cons_x, self.rho_cons_y, self.rho_cons_theta]
        if min(rhos) <= 0:
            raise ValueError("all penalty parameters must be positive")
        if not 0 < self.relax_alpha < 2:
            raise ValueError("relax_alpha must lie in (0, 2)")
        if not 0.1 <= self.eps_pri <= 1.0:
            raise ValueError(f"eps_pri must lie in [0.1, 1], got {self.eps_pri}")
        if self.iter_max < 1:
            raise ValueError("iter_max must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.residual_norm not in ("rms", "max") or self.obstacle_norm not in ("rms", "max"):
            raise ValueError("residual norms must be 'rms' or 'max'")
        if self.coupling_dual not in ("velocity", "heading"):
            raise ValueError("coupling_dual must be 'velocity' or 'heading'")
        if self.consensus_boost < 1 or self.boost_max < 1 or self.boost_every < 1:
            raise ValueError("consensus_boost and boost_max must be >= 1, boost_every positive")


def smoothness_matrix(basis: BasisSet, weight: float) -> np.ndarray:
    """Weighted mean squared acceleration of the curve as a quadratic form."""
    return weight * (basis.W2 @ basis.W2.T) / basis.N


@dataclass
class StateBounds:
    px: tuple = (-500.0, 5000.0)
    py: tuple = (-1e3, 1e3)
    ax: tuple = (-4.0, 3.0)
    ay: tuple = (-5.0, 5.0)
    jx: tuple = (-6.0, 6.0)
    jy: tuple = (-6.0, 6.0)


def bound_matrix(basis: BasisSet) -> np.ndarray:
    """Stacked position / acceleration / jerk rows, both signs (6N x (n+1))."""
    W, W2, W3 = basis.W.T, basis.W2.T, basis.W3.T
    return np.vstack([W, -W, W2, -W2, W3, -W3])


def bound_vector(N: int, p, a, j) -> np.ndarray:
    return np.concatenate([np.full(N, p[1]), np.full(N, -p[0]),
                           np.full(N, a[1]), np.full(N, -a[0]),
                           np.full(N, j[1]), np.full(N, -j[0])])


@dataclass
class ProblemData:
    basis: BasisSet
    boundary: BoundaryMatrices
    consensus: ConsensusMatrices
    Ex: np.ndarray       # 3 x Nc: x0, vx0, PxN
    Ey: np.ndarray       # 3 x Nc
    Etheta: np.ndarray   # 4 x Nc: theta0, theta_dot0, 0, 0
    Ox: np.ndarray       # N*M x Nc, row k*M + i
    Oy: np.ndarray
    Lx: np.ndarray
    Ly: np.ndarray
    mask: np.ndarray     # N*M x Nc bool
    alpha: np.ndarray    # N
    G: np.ndarray        # 6N x (n+1)
    Fx: np.ndarray       # 6N x Nc
    Fy: np.ndarray
    M: int
    slot_ids: np.ndarray | None = None  # M x Nc obstacle ids, -1 for virtual slots

    @property
    def Nc(self) -> int:
        return self.Ex.shape[1]

    @property
    def N(self) -> int:
        return self.basis.N

    def Ah(self) -> np.ndarray:
        """Dense stacked evaluation matrix for one column (N*M x (n+1))."""
        return np.repeat(self.basis.W.T, self.M, axis=0)

    def Ah_T(self, v: np.ndarray) -> np.ndarray:
        """A_h^T v for an (N*M, Nc) array, masked rows dropped."""
        s = np.where(self.mask, v, 0.0).reshape(self.N, self.M, -1).sum(axis=1)
        return self.basis.W @ s

    def Ah_C(self, C: np.ndarray) -> np.ndarray:
        """Stacked positions A_h C, (N*M, Nc)."""
        return np.repeat(self.basis.W.T @ C, self.M, axis=0)


def assemble(ego, configs, targets, basis: BasisSet, Ns: int = 6, alpha_init: float = 0.2,
             bounds: StateBounds | None = None, inflation: float = 1.0) -> ProblemData:
    """Build the batched problem for one planning cycle.

    `ego` needs attributes px, py, vx, vy, theta, theta_dot; `configs` is a list
    of obstacle configurations (one per candidate, all padded to the same M);
    `targets` is the pair (PxN, PyN) of terminal positions per candidate.
    `inflation` scales the ellipse axes the solver plans against, so an
    approximately converged iterate still clears the nominal ellipses.
    """
    if inflation < 1.0:
        raise ValueError("inflation must be >= 1")
    bounds = bounds or StateBounds()
    PxN, PyN = (np.asarray(t, dtype=float).ravel() for t in targets)
    Nc = len(configs)
    if Nc == 0:
        raise ValueError("need at least one configuration")
    if PxN.size != Nc or PyN.size != Nc:
        raise ValueError(f"{Nc} configurations but {PxN.size}/{PyN.size} terminal targets")
    M = configs[0].M
    N = basis.N
    for cfg in configs:
        if cfg.M != M:
            raise ValueError("all configurations must be padded to the same M")
        if cfg.ox.shape != (N, M):
            raise ValueError(f"configuration predictions have shape {cfg.ox.shape}, expected {(N, M)}")

    def stack(attr):
        return np.stack([getattr(c, attr).reshape(N * M) for c in configs], axis=1)

    mask = stack("step_mask").astype(bool)
    Ox, Oy = stack("ox"), stack("oy")
    Lx, Ly = inflation * stack("lx") * mask, inflation * stack("ly") * mask
    one = np.ones(Nc)
    Ex = np.vstack([ego.px * one, ego.vx * one, PxN])
    Ey = np.vstack([ego.py * one, ego.vy * one, PyN])
    Eth = np.vstack([ego.theta * one, ego.theta_dot * one, 0 * one, 0 * one])
    G = bound_matrix(basis)
    Fx = np.tile(bound_vector(N, bounds.px, bounds.ax, bounds.jx)[:, None], (1, Nc))
    Fy = np.tile(bound_vector(N, bounds.py, bounds.ay, bounds.jy)[:, None], (1, Nc))
    slot_ids = np.full((M, Nc), -1, dtype=np.int64)
    for j, cfg in enumerate(configs):
        for i, ob in enumerate(getattr(cfg, "obstacles", [])[:M]):
            if ob is not None and cfg.mask[i]:
                slot_ids[i, j] = ob.id
    return ProblemData(basis, build_boundary(basis), build_consensus(basis, Ns),
                       Ex, Ey, Eth, Ox, Oy, Lx, Ly, mask,
                       barrier.barrier_coefficients(alpha_init, N), G, Fx, Fy, M, slot_ids)


@dataclass
class SolveOperators:
    """Cached per-column solution operators: C[:, j] = S[j] @ b[:, j] + R[j] @ e[:, j]."""
    S_theta: np.ndarray
    R_theta: np.ndarray
    S_x: np.ndarray
    R_x: np.ndarray
    S_y: np.ndarray
    R_y: np.ndarray
    H_theta: np.ndarray
    H_x: np.ndarray
    H_y: np.ndarray


def _operators(H: np.ndarray, Aeq: np.ndarray, mode: str, weight: float):
    """Solution operators for min 1/2 c'Hc - b'c s.t. Aeq c = e, batched over H[j]."""
    Nc, k, _ = H.shape
    m = Aeq.shape[0]
    S = np.empty((Nc, k, k))
    R = np.empty((Nc, k, m))
    for j in range(Nc):
        if mode == "kkt-exact":
            K = np.block([[H[j], Aeq.T], [Aeq, np.zeros((m, m))]])
            if np.linalg.matrix_rank(K) < k + m:
                raise SingularSystemError("KKT system of a primal subproblem is singular")
            Kinv = np.linalg.inv(K)
            S[j], R[j] = Kinv[:k, :k], Kinv[:k, k:]
        else:
            Xi = np.vstack([H[j], weight * Aeq])
            if np.linalg.matrix_rank(Xi) < k:
                raise SingularSystemError("stacked system of a primal subproblem is rank deficient")
            P = np.linalg.pinv(Xi)
            S[j], R[j] = P[:, :k], weight * P[:, k:]
    return S, R


def hessians(data: ProblemData, cfg: SolverConfig):
    """Per-column Hessians of the three primal subproblems, each (Nc, n+1, n+1)."""
    b = data.basis
    cons = data.consensus
    Qx = cfg.Qx if cfg.Qx is not None else smoothness_matrix(b, cfg.q_weights[0])
    Qy = cfg.Qy if cfg.Qy is not None else smoothness_matrix(b, cfg.q_weights[1])
    Qt = cfg.Qtheta if cfg.Qtheta is not None else smoothness_matrix(b, cfg.q_weights[2])
    Nc = data.Nc
    active = data.mask.reshape(data.N, data.M, Nc).sum(axis=1)  # N x Nc
    obs = np.einsum("ak,kj,bk->jab", b.W, active, b.W)
    GtG = data.G.T @ data.G
    W1W1 = b.W1 @ b.W1.T
    Hx = (Qx + cfg.rho_theta * W1W1 + cfg.rho_cons_x * cons.Acons_xy @ cons.Acons_xy.T
          + cfg.rho_x * GtG)[None] + cfg.rho_obs * obs
    Hy = (Qy + cfg.rho_theta * W1W1 + cfg.rho_cons_y * cons.Acons_xy @ cons.Acons_xy.T
          + cfg.rho_y * GtG)[None] + cfg.rho_obs * obs
    Ht = Qt + cfg.rho_theta * b.W @ b.W.T + cfg.rho_cons_theta * cons.Acons_theta @ cons.Acons_theta.T
    Ht = np.broadcast_to(Ht, (Nc,) + Ht.shape).copy()
    return Ht, Hx, Hy


def build_operators(data: ProblemData, cfg: SolverConfig) -> SolveOperators:
    Ht, Hx, Hy = hessians(data, cfg)
    bd = data.boundary
    A_th = np.vstack([bd.A0, bd.Af_theta])
    A_xy = np.vstack([bd.A0, bd.Af_xy])
    St, Rt = _operators(Ht, A_th, cfg.mode, cfg.boundary_weight)
    Sx, Rx = _operators(Hx, A_xy, cfg.mode, cfg.boundary_weight)
    Sy, Ry = _operators(Hy, A_xy, cfg.mode, cfg.boundary_weight)
    return SolveOperators(St, Rt, Sx, Rx, Sy, Ry, Ht, Hx, Hy)


def _apply(S, R, b, e):
    return np.einsum("jab,bj->aj", S, b) + np.einsum("jab,bj->aj", R, e)


@dataclass
class SolverWorkspace:
    batch: ControlPointBatch
    Zx: np.ndarray
    Zy: np.ndarray
    omega: np.ndarray
    D: np.ndarray
    Yx: np.ndarray
    Yy: np.ndarray
    Ytheta: np.ndarray
    lam_theta: np.ndarray
    lam_x: np.ndarray
    lam_y: np.ndarray
    lam_obs_x: np.ndarray
    lam_obs_y: np.ndarray
    lam_cons_x: np.ndarray
    lam_cons_y: np.ndarray
    lam_cons_theta: np.ndarray
    lam_vx: np.ndarray   # N x Nc, velocity-coupling duals
    lam_vy: np.ndarray
    V: np.ndarray
    ops: SolveOperators
    heading_target: np.ndarray = None
    iteration: int = 0


@dataclass
class SolveReport:
    iterations: int
    primal_residuals: list = field(default_factory=list)
    converged: bool = False
    wall_time: float = 0.0  # ms
    rho_scale: float = 1.0  # final consensus penalty multiplier

    @property
    def final_residual(self) -> float:
        if not self.primal_residuals:
            return np.inf
        return max(self.primal_residuals[-1].values())


def smooth_interpolant(Q: np.ndarray, Aeq: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Minimizer of c'Qc subject to Aeq c = E, column by column."""
    k, m = Q.shape[0], Aeq.shape[0]
    K = np.block([[Q, Aeq.T], [Aeq, np.zeros((m, m))]])
    rhs = np.vstack([np.zeros((k, E.shape[1])), E])
    return np.linalg.solve(K, rhs)[:k]


def initial_guess(data: ProblemData) -> ControlPointBatch:
    """Minimum-acceleration curves meeting every boundary condition."""
    b, bd = data.basis, data.boundary
    Q = b.W2 @ b.W2.T
    A_xy = np.vstack([bd.A0, bd.Af_xy])
    A_th = np.vstack([bd.A0, bd.Af_theta])
    return ControlPointBatch(smooth_interpolant(Q, A_xy, data.Ex),
                             smooth_interpolant(Q, A_xy, data.Ey),
                             smooth_interpolant(Q, A_th, data.Etheta))


def shift_batch(batch: ControlPointBatch, steps: int, N: int) -> ControlPointBatch:
    S = shift_matrix(batch.degree, steps / N)
    return ControlPointBatch(S @ batch.Cx, S @ batch.Cy, S @ batch.Ctheta)


def _speed(data: ProblemData, batch: ControlPointBatch, v_floor: float):
    vx = data.basis.W1.T @ batch.Cx
    vy = data.basis.W1.T @ batch.Cy
    return np.maximum(np.hypot(vx, vy), v_floor), np.arctan2(vy, vx)


def _polar_from_batch(data: ProblemData, batch: ControlPointBatch):
    px, py = data.Ah_C(batch.Cx), data.Ah_C(batch.Cy)
    omega = barrier.polar_angle(px, py, data.Ox, data.Oy, data.Lx, data.Ly)
    d = barrier.scale_factor(px, py, data.Ox, data.Oy, data.Lx, data.Ly)
    return omega, d


def init_workspace(data: ProblemData, cfg: SolverConfig,
                   warm_start: ControlPointBatch | None = None, shift: bool = True,
                   warm_duals: "SolverWorkspace | None" = None,
                   prev_data: ProblemData | None = None) -> SolverWorkspace:
    """Fresh workspace, zero duals unless `warm_duals` is given.

    A warm start is the previous horizon's batch; with ``shift=True`` it is
    advanced by one grid step first so that nu = 0 lines up with the new
    current time.  `warm_duals` carries the previous horizon's multipliers,
    shifted the same way (see `shift_duals`).
    """
    if warm_start is not None and warm_start.Nc == data.Nc and warm_start.degree == data.basis.n:
        batch = shift_batch(warm_start, 1, data.N) if shift else warm_start.copy()
    else:
        batch = initial_guess(data)
    ops = build_operators(data, cfg)
    V, _ = _speed(data, batch, cfg.v_floor)
    Zx = np.maximum(0.0, data.Fx - data.G @ batch.Cx)
    Zy = np.maximum(0.0, data.Fy - data.G @ batch.Cy)
    omega, d = _polar_from_batch(data, batch)
    D = np.where(data.mask, np.maximum(d, 1.0), 1.0)
    cons = data.consensus
    Nc = data.Nc
    Yx = _consensus_mean(cons.Acons_xy.T @ batch.Cx)
    Yy = _consensus_mean(cons.Acons_xy.T @ batch.Cy)
    Yt = _consensus_mean(cons.Acons_theta.T @ batch.Ctheta)
    z = np.zeros
    NM = data.N * data.M
    ws = SolverWorkspace(
        batch=batch, Zx=Zx, Zy=Zy, omega=omega, D=D, Yx=Yx, Yy=Yy, Ytheta=Yt,
        lam_theta=z((data.N, Nc)), lam_x=z_like(Zx), lam_y=z_like(Zy),
        lam_obs_x=z((NM, Nc)), lam_obs_y=z((NM, Nc)),
        lam_cons_x=z_like(Yx), lam_cons_y=z_like(Yy), lam_cons_theta=z_like(Yt),
        lam_vx=z((data.N, Nc)), lam_vy=z((data.N, Nc)), V=V, ops=ops)
    if warm_duals is not None and warm_duals.lam_theta.shape == ws.lam_theta.shape \
            and warm_duals.lam_cons_x.shape == ws.lam_cons_x.shape:
        shift_duals(ws, warm_duals, data, prev_data, 1 if shift else 0)
    return ws


def _shift_rows(a: np.ndarray, block: int, steps: int) -> np.ndarray:
    """Advance step-indexed rows (stacked in blocks of `block`) by `steps`, holding the last row."""
    if steps == 0 or a.shape[0] == 0 or block == 0:
        return a.copy()
    b = a.reshape(-1, block, a.shape[1])
    idx = np.minimum(np.arange(block) + steps, block - 1)
    return b[:, idx].reshape(a.shape)


def shift_duals(ws: SolverWorkspace, prev: SolverWorkspace, data: ProblemData,
                prev_data: ProblemData | None, steps: int = 1):
    """Copy the previous horizon's multipliers into `ws`, advanced by `steps` grid steps.

    Obstacle multipliers follow obstacle ids across horizons; slots whose
    obstacle is new start from zero.
    """
    N, Ns = data.N, data.consensus.Ns
    ws.lam_theta = _shift_rows(prev.lam_theta, N, steps)
    ws.lam_vx = _shift_rows(prev.lam_vx, N, steps)
    ws.lam_vy = _shift_rows(prev.lam_vy, N, steps)
    ws.lam_x = _shift_rows(prev.lam_x, N, steps)
    ws.lam_y = _shift_rows(prev.lam_y, N, steps)
    ws.lam_cons_x = _shift_rows(prev.lam_cons_x, Ns, steps)
    ws.lam_cons_y = _shift_rows(prev.lam_cons_y, Ns, steps)
    ws.lam_cons_theta = _shift_rows(prev.lam_cons_theta, Ns, steps)
    if prev_data is None or prev_data.slot_ids is None or data.slot_ids is None \
            or prev_data.M != data.M:
        return
    M, Nc = data.M, data.Nc
    lox = _shift_rows(prev.lam_obs_x.reshape(N, M * Nc), N, steps).reshape(N, M, Nc)
    loy = _shift_rows(prev.lam_obs_y.reshape(N, M * Nc), N, steps).reshape(N, M, Nc)
    nx = np.zeros((N, M, Nc))
    ny = np.zeros((N, M, Nc))
    for j in range(Nc):
        for i in range(M):
            oid = data.slot_ids[i, j]
            if oid < 0:
                continue
            hit = np.flatnonzero(prev_data.slot_ids[:, j] == oid)
            if hit.size:
                nx[:, i, j], ny[:, i, j] = lox[:, hit[0], j], loy[:, hit[0], j]
    ws.lam_obs_x = nx.reshape(N * M, Nc)
    ws.lam_obs_y = ny.reshape(N * M, Nc)


def z_like(a):
    return np.zeros_like(a)


def _consensus_mean(seg: np.ndarray) -> np.ndarray:
    """Across-trajectory mean broadcast back to every column."""
    if seg.shape[0] == 0:
        return seg.copy()
    mean = np.zeros(seg.shape[0])
    for j in range(seg.shape[1]):  # fixed left-to-right summation order
        mean += seg[:, j]
    mean /= seg.shape[1]
    return np.repeat(mean[:, None], seg.shape[1], axis=1)


# -- primal updates ---------------------------------------------------------

def rhs_theta(ws: SolverWorkspace, data: ProblemData, cfg: SolverConfig) -> np.ndarray:
    W = data.basis.W
    A = data.consensus.Acons_theta
    return (-W @ ws.lam_theta + cfg.rho_theta * W @ ws.heading_target
            - A @ ws.lam_cons_theta + cfg.rho_cons_theta * A @ ws.Ytheta)


def rhs_x(ws: SolverWorkspace, data: ProblemData, cfg: SolverConfig) -> np.ndarray:
    b = data.basis
    A = data.consensus.Acons_xy
    heading = b.W.T @ ws.batch.Ctheta
    target = data.Ox + data.Lx * ws.D * np.cos(ws.omega)
    lam_v = ws.lam_theta if cfg.coupling_dual == "heading" else ws.lam_vx
    return (-data.G.T @ ws.lam_x - b.W1 @ lam_v - data.Ah_T(ws.lam_obs_x)
            + cfg.rho_theta * b.W1 @ (ws.V * np.cos(heading))
            + cfg.rho_obs * data.Ah_T(target)
            - A @ ws.lam_cons_x + cfg.rho_cons_x * A @ ws.Yx
            + cfg.rho_x * data.G.T @ (data.Fx - ws.Zx))


def rhs_y(ws: SolverWorkspace, data: ProblemData, cfg: SolverConfig) -> np.ndarray:
    b = data.basis
    A = data.consensus.Acons_xy
    heading = b.W.T @ ws.batch.Ctheta
    target = data.Oy + data.Ly * ws.D * np.sin(ws.omega)
    lam_v = ws.lam_theta if cfg.coupling_dual == "heading" else ws.lam_vy
    return (-data.G.T @ ws.lam_y - b.W1 @ lam_v - data.Ah_T(ws.lam_obs_y)
            + cfg.rho_theta * b.W1 @ (ws.V * np.sin(heading))
            + cfg.rho_obs * data.Ah_T(target)
            - A @ ws.lam_cons_y + cfg.rho_cons_y * A @ ws.Yy
            + cfg.rho_y * data.G.T @ (data.Fy - ws.Zy))


def refresh_speed(ws: SolverWorkspace, data: ProblemData, cfg: SolverConfig):
    ws.V, ws.heading_target = _speed(data, ws.batch, cfg.v_floor)


def update_c_theta(ws, data, cfg) -> np.ndarray:
    if ws.heading_target is None:
        refresh_speed(ws, data, cfg)
    ws.batch.Ctheta = _apply(ws.ops.S_theta, ws.ops.R_theta, rhs_theta(ws, data, cfg), data.Etheta)
    return ws.batch.Ctheta


def update_c_x(ws, data, cfg) -> np.ndarray:
    ws.batch.Cx = _apply(ws.ops.S_x, ws.ops.R_x, rhs_x(ws, data, cfg), data.Ex)
    return ws.batch.Cx


def update_c_y(ws, data, cfg) -> np.ndarray:
    ws.batch.Cy = _apply(ws.ops.S_y, ws.ops.R_y, rhs_y(ws, data, cfg), data.Ey)
    return ws.batch.Cy


def update_slack(ws, data):
    ws.Zx = np.maximum(0.0, data.Fx - data.G @ ws.batch.Cx)
    ws.Zy = np.maximum(0.0, data.Fy - data.G @ ws.batch.Cy)
    return ws.Zx, ws.Zy


def update_omega(ws, data):
    px, py = data.Ah_C(ws.batch.Cx), data.Ah_C(ws.batch.Cy)
    ws.omega = barrier.polar_angle(px, py, data.Ox, data.Oy, data.Lx, data.Ly)
    return ws.omega


def update_d(ws, data):
    """Scale factors: projection of the current positions, floored by the barrier contraction.

    Outside the ellipse the projection reproduces the position exactly, so the
    obstacle constraint is slack; inside, the barrier floor (always >= 1)
    limits how far the margin may shrink in one iteration.
    """
    px, py = data.Ah_C(ws.batch.Cx), data.Ah_C(ws.batch.Cy)
    d = barrier.scale_factor(px, py, data.Ox, data.Oy, data.Lx, data.Ly)
    floor = barrier.d_update(ws.D, data.alpha)
    ws.D = np.where(data.mask, np.maximum(d, floor), 1.0)
    return ws.D


def update_consensus(ws, data):
    cons = data.consensus
    ws.Yx = _consensus_mean(cons.Acons_xy.T @ ws.batch.Cx)
    ws.Yy = _consensus_mean(cons.Acons_xy.T @ ws.batch.Cy)
    ws.Ytheta = _consensus_mean(cons.Acons_theta.T @ ws.batch.Ctheta)
    return ws.Yx, ws.Yy, ws.Ytheta


def relaxed_dual(lam, rho, relax, dZ, residual):
    """Over-relaxed dual step; relax = 1 is the plain ``lam + rho * residual``."""
    if relax == 1.0:
        return lam + rho * residual
    return lam + rho * ((1.0 - relax) * dZ + relax * residual)


def update_duals(ws, data, cfg, Zx_prev, Zy_prev):
    b = data.basis
    C = ws.batch
    vx, vy = b.W1.T @ C.Cx, b.W1.T @ C.Cy
    heading = b.W.T @ C.Ctheta
    ws.lam_theta = ws.lam_theta + cfg.rho_theta * (heading - np.arctan2(vy, vx))
    if cfg.coupling_dual == "velocity":
        ws.lam_vx = ws.lam_vx + cfg.rho_theta * (vx - ws.V * np.cos(heading))
        ws.lam_vy = ws.lam_vy + cfg.rho_theta * (vy - ws.V * np.sin(heading))
    rx = data.G @ C.Cx - data.Fx + ws.Zx
    ry = data.G @ C.Cy - data.Fy + ws.Zy
    ws.lam_x = relaxed_dual(ws.lam_x, cfg.rho_x, cfg.relax_alpha, ws.Zx - Zx_prev, rx)
    ws.lam_y = relaxed_dual(ws.lam_y, cfg.rho_y, cfg.relax_alpha, ws.Zy - Zy_prev, ry)
    cons = data.consensus
    ws.lam_cons_x = ws.lam_cons_x + cfg.rho_cons_x * (cons.Acons_xy.T @ C.Cx - ws.Yx)
    ws.lam_cons_y = ws.lam_cons_y + cfg.rho_cons_y * (cons.Acons_xy.T @ C.Cy - ws.Yy)
    ws.lam_cons_theta = ws.lam_cons_theta + cfg.rho_cons_theta * (cons.Acons_theta.T @ C.Ctheta - ws.Ytheta)
    ox_res, oy_res = obstacle_residual(ws, data)
    ws.lam_obs_x = ws.lam_obs_x + cfg.rho_obs * ox_res
    ws.lam_obs_y = ws.lam_obs_y + cfg.rho_obs * oy_res


def obstacle_residual(ws, data):
    px, py = data.Ah_C(ws.batch.Cx), data.Ah_C(ws.batch.Cy)
    rx = px - data.Ox - data.Lx * ws.D * np.cos(ws.omega)
    ry = py - data.Oy - data.Ly * ws.D * np.sin(ws.omega)
    return np.where(data.mask, rx, 0.0), np.where(data.mask, ry, 0.0)


def _norm(r: np.ndarray, kind: str, count: int | None = None) -> float:
    if r.size == 0:
        return 0.0
    if kind == "max":
        return float(np.max(np.abs(r)))
    count = r.size if count is None else count
    return float(np.sqrt(np.sum(r * r) / count)) if count else 0.0


def primal_residual(ws, data, cfg: SolverConfig | None = None) -> dict:
    """Per-block residual norms: nonholonomic, obstacle, consensus, bounds."""
    kind = cfg.residual_norm if cfg is not None else "rms"
    obs_kind = cfg.obstacle_norm if cfg is not None else "rms"
    v_floor = cfg.v_floor if cfg is not None else 0.1
    b = data.basis
    C = ws.batch
    V, _ = _speed(data, C, v_floor)
    heading = b.W.T @ C.Ctheta
    nh = np.vstack([b.W1.T @ C.Cx - V * np.cos(heading), b.W1.T @ C.Cy - V * np.sin(heading)])
    ox, oy = obstacle_residual(ws, data)
    n_active = 2 * int(data.mask.sum())
    obs = np.vstack([ox, oy])[np.vstack([data.mask, data.mask])]
    cons = data.consensus
    cr = np.vstack([cons.Acons_xy.T @ C.Cx - ws.Yx, cons.Acons_xy.T @ C.Cy - ws.Yy,
                    cons.Acons_theta.T @ C.Ctheta - ws.Ytheta])
    br = np.vstack([np.maximum(0.0, data.G @ C.Cx - data.Fx), np.maximum(0.0, data.G @ C.Cy - data.Fy)])
    return {
        "nonholonomic": _norm(nh, kind),
        "obstacle": _norm(obs, obs_kind, n_active),
        "consensus": _norm(cr, kind),
        "bounds": _norm(br, kind),
    }


def consensus_spread(ws: SolverWorkspace, data: ProblemData) -> float:
    """Upper bound on the pairwise distance between shared-segment positions."""
    Ns = data.consensus.Ns
    if Ns == 0 or data.Nc == 1:
        return 0.0
    A = data.consensus.Acons_xy[:, :Ns]
    px, py = A.T @ ws.batch.Cx, A.T @ ws.batch.Cy
    return float(np.max(np.hypot(np.ptp(px, axis=1), np.ptp(py, axis=1))))


def iterate(ws: SolverWorkspace, data: ProblemData, cfg: SolverConfig) -> dict:
    """One full ADMM sweep; returns the residual blocks after it."""
    refresh_speed(ws, data, cfg)
    update_c_theta(ws, data, cfg)
    update_c_x(ws, data, cfg)
    update_c_y(ws, data, cfg)
    Zx_prev, Zy_prev = ws.Zx, ws.Zy
    update_slack(ws, data)
    update_omega(ws, data)
    update_d(ws, data)
    update_consensus(ws, data)
    update_duals(ws, data, cfg, Zx_prev, Zy_prev)
    ws.iteration += 1
    return primal_residual(ws, data, cfg)


def solve(data: ProblemData, cfg: SolverConfig | None = None,
          warm_start: ControlPointBatch | None = None, shift: bool = True,
          warm_duals: SolverWorkspace | None = None, prev_data: ProblemData | None = None):
    """Run ADMM until the largest residual block drops below ``eps_pri`` or ``iter_max``.

    Returns (batch, workspace, report).  Non-convergence is reported, not raised.
    """
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    ws = init_workspace(data, cfg, warm_start, shift, warm_duals, prev_data)
    report = SolveReport(iterations=0)
    base, active, stalled = cfg, cfg, 0
    tol = cfg.consensus_tol or np.inf
    for _ in range(cfg.iter_max):
        res = iterate(ws, data, active)
        report.primal_residuals.append(res)
        report.iterations = ws.iteration
        blocks_ok = max(res.values()) <= cfg.eps_pri
        if blocks_ok and consensus_spread(ws, data) <= tol:
            report.converged = True
            break
        stalled = stalled + 1 if blocks_ok else 0
        scale = active.rho_cons_x / base.rho_cons_x
        if stalled >= cfg.boost_every and scale * cfg.consensus_boost <= cfg.boost_max:
            k = cfg.consensus_boost
            active = replace(active, rho_cons_x=k * active.rho_cons_x, rho_cons_y=k * active.rho_cons_y,
                             rho_cons_theta=k * active.rho_cons_theta)
            ws.ops = build_operators(data, active)
            stalled = 0
    report.rho_scale = active.rho_cons_x / base.rho_cons_x
    report.wall_time = 1e3 * (time.perf_counter() - t0)
    return ws.batch, ws, report
