"""Cell-transmission kinematics on a segment network.

Units convention. Flows and storages are vehicles per bin; Q_max for a
segment over a bin is capacity_vph * dt / 3600. The density here is a
per-segment aggregate pseudo-density rho with units count / speed, so
that rho * v_free carries vehicle units; the jam value for segment i is
jam_density * length_m * lanes / free_flow_mps. The speed-to-density map
is piecewise in the speed ratio b = v / v_free and is discontinuous at
the branch threshold b = v_crit / v_free for general parameters; the
jump magnitude is exposed as a diagnostic rather than hidden.

All functions are pure; the simulator threads an explicit state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import CountMatrix, RoadNetwork, Segment, boundary_segments, max_storage

__all__ = [
    "FdParams",
    "TurnRatios",
    "TrafficState",
    "SimulationResult",
    "default_fd_params",
    "speed_ratio",
    "density_from_speed",
    "speed_from_density",
    "demand",
    "supply",
    "link_flow",
    "fd_discontinuity",
    "ctm_step",
    "simulate",
]

ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class FdParams:
    """Triangular fundamental-diagram parameters shared by the network.

    wave_speed is the congestion wave speed v_w (m/s), jam_density is per
    lane-metre (veh/m), crit_speed is the free/congested branch threshold
    speed v_crit (m/s). Both speeds must stay below every segment's free
    flow speed; use validate() against a network.
    """

    wave_speed: float
    jam_density: float
    crit_speed: float

    def __post_init__(self):
        if self.wave_speed <= 0 or self.jam_density <= 0 or self.crit_speed <= 0:
            raise ValueError("FdParams fields must be positive")

    def validate(self, net: RoadNetwork) -> None:
        vmin = min(s.free_flow_mps for s in net.segments)
        if self.wave_speed >= vmin:
            raise ValueError(f"wave_speed {self.wave_speed} >= min free flow {vmin}")
        if self.crit_speed >= vmin:
            raise ValueError(f"crit_speed {self.crit_speed} >= min free flow {vmin}")

    def jam_pseudo(self, seg: Segment) -> float:
        """Aggregate jam pseudo-density of one segment (count / speed units)."""
        return self.jam_density * seg.length_m * seg.lanes / seg.free_flow_mps


def default_fd_params(net: RoadNetwork, bin_seconds: float = 900.0) -> FdParams:
    """Network-calibrated defaults.

    wave_speed = 0.25 * min free-flow speed, crit_speed = 0.7 * min free-flow
    speed, and jam_density large enough that supply at zero density reaches
    Q_max on every segment (both min-branches of the supply curve stay
    reachable).
    """
    vmin = min(s.free_flow_mps for s in net.segments)
    v_w = 0.25 * vmin
    need = max(
        max_storage(s, bin_seconds) * s.free_flow_mps / (v_w * s.length_m * s.lanes)
        for s in net.segments
    )
    return FdParams(wave_speed=v_w, jam_density=need, crit_speed=0.7 * vmin)


class TurnRatios:
    """Edge split fractions beta[i, j]: share of segment i's outflow sent to j.

    Rows over segments with a nonempty downstream set must sum to 1 within
    1e-9; all other entries are zero and support is restricted to network
    edges.
    """

    def __init__(self, matrix: np.ndarray, net: RoadNetwork):
        b = np.asarray(matrix, dtype=float)
        n = net.n_segments
        if b.shape != (n, n):
            raise ValueError(f"turn ratio matrix must be {n}x{n}")
        if (b < 0).any():
            raise ValueError("turn ratios must be nonnegative")
        support = net.adjacency() == 0
        if (b[support] != 0).any():
            raise ValueError("turn ratios supported off the edge set")
        sums = b.sum(axis=1)
        for i in range(n):
            if net.downstream[i]:
                if abs(sums[i] - 1.0) > ROW_SUM_TOL:
                    raise ValueError(f"turn ratio row {i} sums to {sums[i]!r}, not 1")
            elif sums[i] != 0:
                raise ValueError(f"segment {i} has no downstream but nonzero ratios")
        self.matrix = b
        # flat edge view used by the stepping kernel
        self.edge_from = np.array([i for i, _ in net.edges], dtype=int)
        self.edge_to = np.array([j for _, j in net.edges], dtype=int)
        self.edge_beta = b[self.edge_from, self.edge_to]

    @classmethod
    def uniform(cls, net: RoadNetwork) -> "TurnRatios":
        """Equal split over each segment's downstream neighbours."""
        b = np.zeros((net.n_segments, net.n_segments))
        for i in range(net.n_segments):
            down = net.downstream[i]
            for j in down:
                b[i, j] = 1.0 / len(down)
        return cls(b, net)


@dataclass(frozen=True)
class TrafficState:
    """Counts and speeds at one time index.

    Speeds outside [0, free flow] are clipped at construction and the
    number of clipped entries recorded. Instances are never mutated by
    the stepping functions.
    """

    counts: np.ndarray
    speeds: np.ndarray
    t: int = 0
    n_speed_clipped: int = 0
    n_boundary_clipped: int = 0

    @classmethod
    def create(cls, counts, speeds, net: RoadNetwork, t: int = 0) -> "TrafficState":
        counts = np.asarray(counts, dtype=float)
        speeds = np.asarray(speeds, dtype=float)
        if counts.shape != (net.n_segments,) or speeds.shape != (net.n_segments,):
            raise ValueError("state arrays must have one entry per segment")
        if (counts < 0).any():
            raise ValueError("counts must be nonnegative")
        vf = net.free_flow()
        clipped = np.clip(speeds, 0.0, vf)
        n_clip = int((clipped != speeds).sum())
        return cls(counts=counts, speeds=clipped, t=t, n_speed_clipped=n_clip)

    @classmethod
    def empty(cls, net: RoadNetwork, t: int = 0) -> "TrafficState":
        n = net.n_segments
        return cls(np.zeros(n), net.free_flow().copy(), t=t)


class _Clip:
    """Mutable clamp counter shared by callers that want the diagnostic."""

    __slots__ = ("n",)

    def __init__(self):
        self.n = 0


ClipCounter = _Clip


def speed_ratio(v: float, v_free: float, diag: _Clip | None = None) -> float:
    """b = v / v_free clamped into [0, 1]; clamping increments diag."""
    if v_free <= 0:
        raise ValueError("v_free must be > 0")
    b = v / v_free
    if b < 0.0 or b > 1.0:
        if diag is not None:
            diag.n += 1
        b = min(max(b, 0.0), 1.0)
    return b


def _fd_scalars(seg: Segment, fd: FdParams, bin_seconds: float):
    qmax = max_storage(seg, bin_seconds)
    vf = seg.free_flow_mps
    if fd.wave_speed >= vf or fd.crit_speed >= vf:
        raise ValueError(f"segment {seg.id}: fd speeds must stay below free flow {vf}")
    return qmax, vf, fd.wave_speed, fd.jam_pseudo(seg), fd.crit_speed / vf


def density_from_speed(b: float, seg: Segment, fd: FdParams, bin_seconds: float) -> float:
    """Pseudo-density from a speed ratio, piecewise at b = v_crit / v_free.

    Free branch (b at or above the threshold): rho = (Q_max / v_free)
    * (1 - b) * v_free / (v_free - v_w). Congested branch: rho =
    rho_jam * (1 - b).
    """
    if not 0.0 <= b <= 1.0:
        raise ValueError(f"speed ratio {b} outside [0, 1]")
    qmax, vf, vw, rho_jam, b_crit = _fd_scalars(seg, fd, bin_seconds)
    if b >= b_crit:
        return (qmax / vf) * (1.0 - b) * vf / (vf - vw)
    return rho_jam * (1.0 - b)


def speed_from_density(rho: float, seg: Segment, fd: FdParams, bin_seconds: float) -> float:
    """Branch-wise inverse of density_from_speed, returning the ratio b.

    The free-branch inverse is used whenever it lands at or above the
    branch threshold, the congested inverse otherwise. Round-trips with
    density_from_speed on either branch away from the threshold.
    """
    if rho < 0:
        raise ValueError("density must be nonnegative")
    qmax, vf, vw, rho_jam, b_crit = _fd_scalars(seg, fd, bin_seconds)
    b_free = 1.0 - rho * (vf - vw) / qmax
    if b_free >= b_crit:
        return min(b_free, 1.0)
    return float(np.clip(1.0 - rho / rho_jam, 0.0, 1.0))


def demand(rho: float, seg: Segment, fd: FdParams, bin_seconds: float) -> float:
    """Vehicles segment i offers downstream this bin: min(rho v_free, Q_max)."""
    qmax, vf, _, _, _ = _fd_scalars(seg, fd, bin_seconds)
    return min(rho * vf, qmax)


def supply(rho: float, seg: Segment, fd: FdParams, bin_seconds: float) -> float:
    """Vehicles segment j can absorb this bin: min(v_w (rho_jam - rho), Q_max), floored at 0."""
    qmax, _, vw, rho_jam, _ = _fd_scalars(seg, fd, bin_seconds)
    return max(0.0, min(vw * (rho_jam - rho), qmax))


def link_flow(d_i: float, s_j: float, beta_ij: float) -> float:
    """Flow over one edge, min(D_i beta, S_j beta)."""
    if beta_ij < 0:
        raise ValueError("turn ratio must be nonnegative")
    return min(d_i * beta_ij, s_j * beta_ij)


def fd_discontinuity(seg: Segment, fd: FdParams, bin_seconds: float) -> float:
    """Jump magnitude of density_from_speed at the branch threshold."""
    qmax, vf, vw, rho_jam, b_crit = _fd_scalars(seg, fd, bin_seconds)
    free_side = (qmax / vf) * (1.0 - b_crit) * vf / (vf - vw)
    cong_side = rho_jam * (1.0 - b_crit)
    return abs(free_side - cong_side)


def _net_arrays(net: RoadNetwork, fd: FdParams, bin_seconds: float):
    qmax = np.array([max_storage(s, bin_seconds) for s in net.segments])
    vf = net.free_flow()
    rho_jam = np.array([fd.jam_pseudo(s) for s in net.segments])
    b_crit = fd.crit_speed / vf
    return qmax, vf, rho_jam, b_crit


def _speeds_from_residual(residual, qmax, vf, vw, rho_jam, b_crit):
    rho = residual / vf
    b_free = 1.0 - rho * (vf - vw) / qmax
    b_cong = np.clip(1.0 - rho / rho_jam, 0.0, 1.0)
    return np.where(b_free >= b_crit, np.minimum(b_free, 1.0), b_cong) * vf


def _step_kernel(q, net, fd, beta, bin_seconds, bc_in, bc_out_req):
    """One stepping kernel pass; returns (q_next, speeds, link_flows, bc_out_realized, n_clipped)."""
    n = net.n_segments
    qmax, vf, rho_jam, b_crit = _net_arrays(net, fd, bin_seconds)
    rho = q / vf
    dem = np.minimum(rho * vf, qmax)
    sup = np.maximum(0.0, np.minimum(fd.wave_speed * (rho_jam - rho), qmax))

    ef, et, eb = beta.edge_from, beta.edge_to, beta.edge_beta
    if len(ef):
        flows = np.minimum(dem[ef] * eb, sup[et] * eb)
        out_sum = np.bincount(ef, weights=flows, minlength=n)
        # no segment emits more than it holds
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(out_sum > q, np.where(out_sum > 0, q / out_sum, 1.0), 1.0)
        flows = flows * scale[ef]
        out_sum = np.bincount(ef, weights=flows, minlength=n)
        in_sum = np.bincount(et, weights=flows, minlength=n)
    else:
        flows = np.zeros(0)
        out_sum = np.zeros(n)
        in_sum = np.zeros(n)

    # implicit discharge at sink segments, then requested boundary outflow
    sink = np.array([len(net.downstream[i]) == 0 for i in range(n)])
    exit_out = np.minimum(np.where(sink, dem, 0.0), np.maximum(q - out_sum, 0.0))
    room = np.maximum(q - out_sum - exit_out, 0.0)
    bc_out = np.minimum(bc_out_req, room)
    n_clipped = int((bc_out < bc_out_req).sum())
    bc_out_total = exit_out + bc_out

    q_next = np.maximum(q + in_sum - out_sum + bc_in - bc_out_total, 0.0)
    residual = np.maximum(q - out_sum - bc_out_total, 0.0)
    speeds = _speeds_from_residual(residual, qmax, vf, fd.wave_speed, rho_jam, b_crit)
    return q_next, speeds, flows, bc_out_total, n_clipped


def _check_boundary_vectors(net, bc_in, bc_out_req):
    n = net.n_segments
    bset = set(boundary_segments(net))
    for name, vec in (("boundary_in", bc_in), ("boundary_out", bc_out_req)):
        if vec.shape != (n,):
            raise ValueError(f"{name} must have one entry per segment")
        if (vec < 0).any():
            raise ValueError(f"{name} must be nonnegative")
        bad = [int(i) for i in np.nonzero(vec)[0] if int(i) not in bset]
        if bad:
            raise ValueError(f"{name} supported off the boundary set at segments {bad}")


def ctm_step(
    state: TrafficState,
    net: RoadNetwork,
    fd: FdParams,
    beta: TurnRatios,
    bin_seconds: float,
    boundary_in: np.ndarray | None = None,
    boundary_out: np.ndarray | None = None,
) -> TrafficState:
    """Advance counts by one bin.

    Per-edge flow is min(D_i beta_ij, S_j beta_ij); total link outflow of a
    segment is additionally capped at its current count, and requested
    boundary outflow is clipped to what remains (clips are counted on the
    returned state). Segments with no downstream edges discharge their
    demand out of the network. Boundary vectors must be nonnegative and
    supported on the boundary set. Emitted speeds invert the density map
    on the residual (unserved) vehicles, so unimpeded flow reports free
    flow exactly.
    """
    n = net.n_segments
    bc_in = np.zeros(n) if boundary_in is None else np.asarray(boundary_in, dtype=float)
    bc_out_req = np.zeros(n) if boundary_out is None else np.asarray(boundary_out, dtype=float)
    _check_boundary_vectors(net, bc_in, bc_out_req)
    fd.validate(net)
    q_next, speeds, _, _, n_clipped = _step_kernel(
        state.counts, net, fd, beta, bin_seconds, bc_in, bc_out_req
    )
    return TrafficState(
        counts=q_next,
        speeds=speeds,
        t=state.t + 1,
        n_speed_clipped=state.n_speed_clipped,
        n_boundary_clipped=state.n_boundary_clipped + n_clipped,
    )


@dataclass
class SimulationResult:
    """Per-bin trajectory emitted by simulate.

    counts[i, t] is the occupancy of segment i at the start of bin t;
    speeds[i, t] the FD-consistent speed during bin t; boundary_in /
    boundary_out the realized boundary exchanges during bin t;
    link_flows[k, t] the flow over edge k during bin t.
    """

    counts: CountMatrix
    speeds: np.ndarray
    boundary_in: np.ndarray
    boundary_out: np.ndarray
    link_flows: np.ndarray
    n_boundary_clipped: int = 0

    def speed_ratios(self, net: RoadNetwork) -> np.ndarray:
        return self.speeds / net.free_flow()[:, None]


def simulate(
    net: RoadNetwork,
    fd: FdParams,
    beta: TurnRatios,
    demand_profile: np.ndarray,
    bin_seconds: float,
    start_time,
    initial: TrafficState | None = None,
) -> SimulationResult:
    """Roll ctm_step over a boundary demand profile.

    demand_profile has shape (n_segments, n_bins) and must be supported on
    boundary segments. Mass balance is asserted every step: the change in
    total count equals net boundary exchange to within 1e-9 of scale.
    """
    n = net.n_segments
    profile = np.asarray(demand_profile, dtype=float)
    if profile.ndim != 2 or profile.shape[0] != n:
        raise ValueError("demand profile must be (n_segments, n_bins)")
    if (profile < 0).any():
        raise ValueError("demand profile must be nonnegative")
    fd.validate(net)
    horizon = profile.shape[1]
    state = TrafficState.empty(net) if initial is None else initial
    zero_out = np.zeros(n)
    _check_boundary_vectors(net, profile.max(axis=1), zero_out)
    counts = np.zeros((n, horizon))
    speeds = np.zeros((n, horizon))
    bc_out_hist = np.zeros((n, horizon))
    flow_hist = np.zeros((len(net.edges), horizon))
    q = state.counts.copy()
    clipped = state.n_boundary_clipped
    for t in range(horizon):
        counts[:, t] = q
        before = q.sum()
        q_next, spd, flows, bc_out, n_clip = _step_kernel(
            q, net, fd, beta, bin_seconds, profile[:, t], zero_out
        )
        clipped += n_clip
        drift = abs(q_next.sum() - before - profile[:, t].sum() + bc_out.sum())
        assert drift <= 1e-9 * max(1.0, before + profile[:, t].sum()), "mass balance violated"
        speeds[:, t] = spd
        bc_out_hist[:, t] = bc_out
        flow_hist[:, t] = flows
        q = q_next
    cm = CountMatrix(counts, int(bin_seconds), start_time)
    return SimulationResult(
        counts=cm,
        speeds=speeds,
        boundary_in=profile.copy(),
        boundary_out=bc_out_hist,
        link_flows=flow_hist,
        n_boundary_clipped=clipped,
    )
