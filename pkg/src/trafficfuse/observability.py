"""Linearized observability analysis for camera placement.

The simulator's update is linearized around a nominal regime into
x(t+1) = A x(t) + B u(t), y = C x with C selecting camera segments. In
free flow a perturbation advects forward along turn-ratio-weighted edges
and dissipates at downstream exits; in congestion the influence pattern
is transposed (spillback moves upstream) and dissipates at entries. Rank
of the stacked observability matrix, finite- and infinite-horizon
Gramians, and their diagonals then score how well each segment is seen
by a set of cameras.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .ctm import FdParams, TurnRatios
from .network import RoadNetwork, boundary_segments
from .util import atomic_write_text, canonical_json

__all__ = [
    "LinearSystem",
    "ObservabilityReport",
    "linearize",
    "selection_matrix",
    "observability_rank",
    "gramian",
    "spectral_radius",
    "lyapunov_gramian",
    "time_varying_gramian",
    "segment_scores",
    "analyze",
    "report_to_json",
    "report_to_csv",
]

REGIMES = ("free", "congested")


@dataclass(frozen=True)
class LinearSystem:
    """One-regime linear surrogate of the network dynamics."""

    a: np.ndarray  # (N, N)
    b: np.ndarray  # (N, p)
    c: np.ndarray  # (m, N) stacked basis rows
    regime: str

    def __post_init__(self):
        a, c = np.asarray(self.a), np.asarray(self.c)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("A must be square")
        if not np.isfinite(a).all():
            raise ValueError("A must be finite")
        if c.ndim != 2 or c.shape[1] != a.shape[0]:
            raise ValueError("C must be (m, N)")
        for r, row in enumerate(c):
            if not (np.count_nonzero(row) == 1 and row.max() == 1.0):
                raise ValueError(f"C row {r} is not a standard basis vector")

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def cameras(self) -> tuple:
        return tuple(int(np.argmax(row)) for row in self.c)


def selection_matrix(cameras, n: int) -> np.ndarray:
    cams = [int(i) for i in cameras]
    for i in cams:
        if not 0 <= i < n:
            raise ValueError(f"camera segment {i} outside the network")
    c = np.zeros((len(cams), n))
    for r, i in enumerate(cams):
        c[r, i] = 1.0
    return c


def _inflow_shares(net: RoadNetwork, beta: TurnRatios) -> np.ndarray:
    """share[i, j]: fraction of segment j's inflow arriving from i."""
    n = len(net.segments)
    share = np.zeros((n, n))
    for i, j in net.edges:
        share[i, j] = beta.matrix[i, j]
    cols = share.sum(axis=0, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cols > 0, share / cols, 0.0)


def linearize(
    net: RoadNetwork,
    fd: FdParams,
    regime: str,
    beta: TurnRatios | None = None,
    bin_seconds: int = 900,
    cameras=(),
    state=None,
) -> LinearSystem:
    """Regime-dependent propagation matrix from segment kinematics.

    Free flow: a fraction f_i = min(1, v_free dt / l_i) of segment i's
    perturbation advances along its outgoing edges (split by turn ratios),
    the rest is retained; exits at segments without downstream neighbours.
    Congestion: the same construction on the reversed influence graph at
    the backward wave speed, split by inflow shares. A nominal state, when
    supplied, must not contradict the regime (mean speed ratio below 0.4
    is not free flow; at or above 0.7 is not congestion).
    """
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}")
    if beta is None:
        beta = TurnRatios.uniform(net)
    fd.validate(net)
    if state is not None:
        ratios = np.array([s / seg.free_flow_mps for s, seg in zip(state.speeds, net.segments)])
        mean_b = float(ratios.mean())
        if regime == "free" and mean_b < 0.4:
            raise ValueError(f"nominal state (mean speed ratio {mean_b:.2f}) is congested, not free")
        if regime == "congested" and mean_b >= 0.7:
            raise ValueError(f"nominal state (mean speed ratio {mean_b:.2f}) is free, not congested")
    n = len(net.segments)
    a = np.zeros((n, n))
    lengths = net.lengths()
    if regime == "free":
        frac = np.minimum(1.0, net.free_flow() * bin_seconds / lengths)
        for i in range(n):
            a[i, i] = 1.0 - frac[i]
        for i, j in net.edges:
            a[j, i] += beta.matrix[i, j] * frac[i]
    else:
        frac = np.minimum(1.0, fd.wave_speed * bin_seconds / lengths)
        share = _inflow_shares(net, beta)
        for j in range(n):
            a[j, j] = 1.0 - frac[j]
        for i, j in net.edges:
            a[i, j] += share[i, j] * frac[j]
    boundary = sorted(boundary_segments(net))
    b = selection_matrix(boundary, n).T if boundary else np.zeros((n, 0))
    return LinearSystem(a=a, b=b, c=selection_matrix(cameras, n), regime=regime)


def observability_rank(sys: LinearSystem, max_segments: int = 600):
    """Numerical rank of [C; CA; ...; CA^(N-1)] and the coverage index rank/N."""
    n = sys.n
    if n > max_segments:
        raise ValueError(
            f"{n} segments exceeds the dense-rank cap {max_segments}; score via the Gramian instead"
        )
    blocks = []
    blk = sys.c.copy()
    for _ in range(n):
        blocks.append(blk)
        blk = blk @ sys.a
    obs = np.vstack(blocks)
    sv = np.linalg.svd(obs, compute_uv=False)
    tol = max(obs.shape) * sv[0] * np.finfo(float).eps if sv.size else 0.0
    rank = int((sv > tol).sum())
    return rank, rank / n


def gramian(sys: LinearSystem, horizon: int | None = None) -> np.ndarray:
    """Finite-horizon observability Gramian, default horizon N."""
    if horizon is None:
        horizon = sys.n
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    q = sys.c.T @ sys.c
    term = q.copy()
    total = q.copy()
    for _ in range(horizon - 1):
        term = sys.a.T @ term @ sys.a
        total += term
    return 0.5 * (total + total.T)


def spectral_radius(a: np.ndarray, iterations: int = 500) -> float:
    """Power-iteration estimate; exact enough for the stability gate."""
    a = np.asarray(a, dtype=float)
    x = np.full(a.shape[0], 1.0 / np.sqrt(a.shape[0]))
    rho = 0.0
    for _ in range(iterations):
        y = a @ x
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        rho = norm
        x = y / norm
    return float(rho)


def lyapunov_gramian(sys: LinearSystem, tol: float = 1e-10, max_iterations: int = 200_000) -> np.ndarray:
    """Infinite-horizon Gramian as the fixed point of W <- A'WA + C'C."""
    rho = spectral_radius(sys.a)
    if rho >= 1.0 - 1e-12:
        raise ValueError(f"A is not Schur-stable (estimated spectral radius {rho:.6f})")
    q = sys.c.T @ sys.c
    w = q.copy()
    for _ in range(max_iterations):
        w_next = sys.a.T @ w @ sys.a + q
        change = np.abs(w_next - w).max()
        w = w_next
        if change < tol:
            break
    else:
        raise RuntimeError(f"Lyapunov iteration did not reach {tol} in {max_iterations} steps")
    residual = np.abs(sys.a.T @ w @ sys.a + q - w).max()
    if residual >= 10 * tol:
        raise RuntimeError(f"Lyapunov residual {residual:.3e} exceeds 10 * tol")
    return 0.5 * (w + w.T)


def time_varying_gramian(a_sequence, c: np.ndarray, horizon: int) -> np.ndarray:
    """Gramian under a time-varying linearization, via transition products."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    a_sequence = [np.asarray(a, dtype=float) for a in a_sequence]
    if len(a_sequence) < horizon - 1:
        raise ValueError(f"need at least {horizon - 1} transition matrices, got {len(a_sequence)}")
    q = c.T @ c
    n = q.shape[0]
    phi = np.eye(n)
    total = q.copy()
    for t in range(1, horizon):
        phi = a_sequence[t - 1] @ phi
        total += phi.T @ q @ phi
    return 0.5 * (total + total.T)


@dataclass(frozen=True)
class ObservabilityReport:
    """Per-segment scores plus the per-regime summary numbers."""

    obs: np.ndarray  # (N,) max-over-regimes Gramian diagonal
    conf: np.ndarray  # (N,) obs / max(obs), zeros if nothing observed
    gamma_rank: dict  # regime -> rank index
    spectral_radius: dict  # regime -> power-iteration estimate
    horizon: int
    cameras: tuple


def segment_scores(gramians: dict) -> tuple:
    """Max-over-regimes diagonal and its normalized confidence."""
    if not gramians:
        raise ValueError("need at least one regime Gramian")
    diags = np.stack([np.diag(w) for w in gramians.values()])
    obs = diags.max(axis=0)
    top = obs.max()
    if top <= 0.0:
        warnings.warn("all-zero Gramian: no segment is observed", stacklevel=2)
        return obs, np.zeros_like(obs)
    return obs, obs / top


def analyze(
    net: RoadNetwork,
    fd: FdParams,
    cameras,
    regimes=REGIMES,
    horizon: int | None = None,
    beta: TurnRatios | None = None,
    bin_seconds: int = 900,
) -> ObservabilityReport:
    """Rank index, Gramian scores, and stability estimates for a placement."""
    n = len(net.segments)
    horizon = n if horizon is None else horizon
    gramians: dict = {}
    gamma: dict = {}
    radius: dict = {}
    for regime in regimes:
        sys = linearize(net, fd, regime, beta=beta, bin_seconds=bin_seconds, cameras=cameras)
        _, gamma[regime] = observability_rank(sys)
        radius[regime] = spectral_radius(sys.a)
        gramians[regime] = gramian(sys, horizon)
    obs, conf = segment_scores(gramians)
    return ObservabilityReport(
        obs=obs, conf=conf, gamma_rank=gamma, spectral_radius=radius,
        horizon=horizon, cameras=tuple(int(i) for i in cameras),
    )


def report_to_json(report: ObservabilityReport, net: RoadNetwork, path: str) -> None:
    payload = {
        "horizon": report.horizon,
        "cameras": [net.external_ids[i] for i in report.cameras],
        "gamma_rank": report.gamma_rank,
        "spectral_radius": report.spectral_radius,
        "segments": {
            net.external_ids[i]: {"obs": float(report.obs[i]), "conf": float(report.conf[i])}
            for i in range(len(report.obs))
        },
    }
    atomic_write_text(path, canonical_json(payload))


def report_to_csv(report: ObservabilityReport, net: RoadNetwork, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment_id", "obs", "conf"])
        for i in range(len(report.obs)):
            w.writerow([net.external_ids[i], repr(float(report.obs[i])), repr(float(report.conf[i]))])
