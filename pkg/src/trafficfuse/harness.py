"""End-to-end experiments on synthetic road networks.

Everything the pipeline needs to rehearse the full workflow at desk
scale lives here: probe thinning at a heterogeneous penetration rate,
time-of-week pooling, two built-in ground-truth twins (a short chain and
a 5x10 grid with a bottleneck), metric computation, and run_pipeline,
which chains simulate -> thin -> features -> train -> predict ->
assimilate -> calibrate -> evaluate and writes every artifact with the
seed embedded in its metadata.

All randomness descends from one experiment seed through named
substreams, so a rerun with the same config is byte-identical.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from . import ensrf
from .ctm import FdParams, TurnRatios, default_fd_params, simulate
from .features import build_tensor
from .model import ModelConfig, normalized_adjacency
from .network import (
    CountMatrix,
    RoadNetwork,
    Segment,
    boundary_segments,
    load_network,
    max_storage,
    save_counts,
)
from .observability import analyze, report_to_csv, report_to_json
from .propagation import (
    build_transition,
    calibrate_counts,
    export_localization,
    export_transition,
    localization_vectors,
    shrink_blend,
    update_confidence,
)
from .train import build_windows, predict, save_checkpoint, train
from .util import atomic_write_text, canonical_json, substream

__all__ = [
    "RATE_FLOOR",
    "PenetrationModel",
    "thin_counts",
    "pool_windows",
    "LocationMetrics",
    "MetricsReport",
    "evaluate",
    "link_flow_stats",
    "grid_network",
    "chain_network",
    "demand_profile",
    "ExperimentConfig",
    "load_config",
    "PipelineError",
    "Pipeline",
    "run_pipeline",
]

RATE_FLOOR = 1e-6


# -- probe sampling ----------------------------------------------------------


@dataclass(frozen=True)
class PenetrationModel:
    """Heterogeneous probe sampling rates.

    base is the per-segment rate (scalar or length-N array); hour and day
    multipliers modulate it by time of week. The effective rate is
    clipped to [RATE_FLOOR, 1].
    """

    base: float | np.ndarray = 0.1
    hour_mult: np.ndarray | None = None
    day_mult: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        base = np.atleast_1d(np.asarray(self.base, dtype=float))
        if (base <= 0).any() or (base > 1).any():
            raise ValueError("base penetration rates must lie in (0, 1]")
        for name, mult, k in (("hour", self.hour_mult, 24), ("day", self.day_mult, 7)):
            if mult is None:
                continue
            m = np.asarray(mult, dtype=float)
            if m.shape != (k,) or (m <= 0).any():
                raise ValueError(f"{name} multipliers must be {k} positive values")

    def effective(self, n_segments: int, hours: np.ndarray, days: np.ndarray) -> np.ndarray:
        """Clipped rate matrix (n_segments, n_bins)."""
        base = np.broadcast_to(np.atleast_1d(np.asarray(self.base, dtype=float)), (n_segments,))
        hm = np.ones(24) if self.hour_mult is None else np.asarray(self.hour_mult, dtype=float)
        dm = np.ones(7) if self.day_mult is None else np.asarray(self.day_mult, dtype=float)
        rate = base[:, None] * hm[hours][None, :] * dm[days][None, :]
        return np.clip(rate, RATE_FLOOR, 1.0)


def thin_counts(truth: CountMatrix, pen: PenetrationModel) -> CountMatrix:
    """Binomial probe sample of a true count matrix; NaN bins stay NaN."""
    values = truth.values
    if np.nanmin(values) < 0:
        raise ValueError("true counts must be nonnegative")
    rate = pen.effective(values.shape[0], truth.hours(), truth.days())
    missing = np.isnan(values)
    n = np.rint(np.where(missing, 0.0, values)).astype(np.int64)
    rng = substream(pen.seed, "thinning")
    probe = rng.binomial(n, rate).astype(float)
    probe[missing] = np.nan
    return CountMatrix(probe, truth.bin_seconds, truth.start_time)


def _week_keys(cm: CountMatrix) -> list:
    return [
        (cm.bin_start(t).weekday(), cm.bin_start(t).hour, cm.bin_start(t).minute)
        for t in range(cm.n_bins)
    ]


def pool_windows(probe: CountMatrix, others=()) -> CountMatrix:
    """Sum count matrices aligned by (day-of-week, hour, minute) bins.

    Pooling independent samples of the same underlying traffic raises the
    effective penetration additively: k datasets at rate p behave like
    one at k*p. Bins missing everywhere stay missing; otherwise missing
    bins contribute zero. Pooling a single matrix returns it unchanged.
    """
    matrices = [probe, *others]
    if len(matrices) == 1:
        return probe
    ref_keys = _week_keys(probe)
    for k, cm in enumerate(matrices[1:], start=1):
        if cm.values.shape != probe.values.shape or cm.bin_seconds != probe.bin_seconds:
            raise ValueError(f"pooled dataset {k} does not match the reference shape")
        if _week_keys(cm) != ref_keys:
            raise ValueError(f"pooled dataset {k} is misaligned in time-of-week bins")
    stack = np.stack([cm.values for cm in matrices])
    pooled = np.nansum(stack, axis=0)
    pooled[np.isnan(stack).all(axis=0)] = np.nan
    return CountMatrix(pooled, probe.bin_seconds, probe.start_time)


# -- metrics -----------------------------------------------------------------


@dataclass(frozen=True)
class LocationMetrics:
    mae: float
    rmse: float
    r2: float | None
    r: float | None

    def to_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "r2": self.r2, "r": self.r}


@dataclass(frozen=True)
class MetricsReport:
    """Per-location and pooled scores against a per-location mean baseline."""

    per_location: dict
    pooled_r2: float | None
    coverage: float | None
    n_points: int
    notes: tuple = ()

    def to_dict(self) -> dict:
        return {
            "per_location": {str(k): v.to_dict() for k, v in self.per_location.items()},
            "pooled_r2": self.pooled_r2,
            "coverage": self.coverage,
            "n_points": self.n_points,
            "notes": list(self.notes),
        }


def _pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    if x.std() == 0.0 or y.std() == 0.0:
        return None
    r = float(np.corrcoef(x, y)[0, 1])
    return min(1.0, max(-1.0, r))


def evaluate(estimate, truth, locations, lo=None, hi=None) -> MetricsReport:
    """Score estimates at the given segments.

    R^2 is 1 - SSE/SST with SST taken about each location's own mean;
    a zero-variance location gets r2 = None with a note rather than a
    division by zero. Coverage is the fraction of scored points falling
    inside [lo, hi] when interval arrays are supplied.
    """
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise ValueError("estimate and truth shapes differ")
    locations = [int(i) for i in locations]
    if not locations:
        raise ValueError("need at least one location to score")
    per: dict = {}
    notes: list = []
    sse_tot = sst_tot = 0.0
    n_points = 0
    hits = trials = 0
    for i in locations:
        if not 0 <= i < truth.shape[0]:
            raise ValueError(f"location {i} outside the network")
        mask = np.isfinite(estimate[i]) & np.isfinite(truth[i])
        e, t = estimate[i][mask], truth[i][mask]
        if e.size == 0:
            raise ValueError(f"location {i} has no scorable bins")
        n_points += e.size
        err = e - t
        sse = float((err**2).sum())
        sst = float(((t - t.mean()) ** 2).sum())
        sse_tot += sse
        sst_tot += sst
        if sst == 0.0:
            r2 = None
            notes.append(f"segment {i}: zero-variance truth, r2 undefined")
        else:
            r2 = 1.0 - sse / sst
        per[i] = LocationMetrics(
            mae=float(np.abs(err).mean()),
            rmse=float(np.sqrt((err**2).mean())),
            r2=r2,
            r=_pearson(e, t),
        )
        if lo is not None and hi is not None:
            cmask = mask & np.isfinite(lo[i]) & np.isfinite(hi[i])
            hits += int(((truth[i] >= lo[i]) & (truth[i] <= hi[i]))[cmask].sum())
            trials += int(cmask.sum())
    pooled = None if sst_tot == 0.0 else 1.0 - sse_tot / sst_tot
    coverage = hits / trials if trials else None
    return MetricsReport(per, pooled, coverage, n_points, tuple(notes))


def link_flow_stats(transitions, net: RoadNetwork) -> np.ndarray:
    """Accumulate (i, j, count) trajectory transitions into a flow matrix."""
    edges = set(net.edges)
    q = np.zeros((net.n_segments, net.n_segments))
    for k, (i, j, count) in enumerate(transitions):
        if (int(i), int(j)) not in edges:
            raise ValueError(f"record {k}: ({i}, {j}) is not a network edge")
        if count < 0:
            raise ValueError(f"record {k}: negative transition count")
        q[int(i), int(j)] += count
    return q


# -- synthetic twins ---------------------------------------------------------

GRID_CONNECTOR_COLS = (0, 3, 6)
EAST_SHARE = 0.8  # connector cells send the rest south


def grid_network(
    rows: int = 5,
    cols: int = 10,
    length: float = 500.0,
    lanes: int = 2,
    capacity: float = 3600.0,
    vfree: float = 10.0,
    bottleneck=(2, 5),
    bottleneck_capacity: float = 1700.0,
    sources=((0, 0), (2, 0)),
):
    """Directed grid: eastbound rows linked southward at connector columns.

    Returns (net, beta, source_ids). Demand enters at the source cells,
    each row drains at its eastern end, and one reduced-capacity cell in
    the middle queues up during peaks so both fundamental-diagram
    branches are exercised.
    """

    def sid(r, c):
        return r * cols + c

    source_ids = [sid(r, c) for r, c in sources]
    flagged = set(source_ids) | {sid(r, cols - 1) for r in range(rows)}
    segs = []
    for r in range(rows):
        for c in range(cols):
            cap = bottleneck_capacity if (r, c) == tuple(bottleneck) else capacity
            segs.append(
                Segment(
                    id=sid(r, c),
                    length_m=length,
                    lanes=lanes,
                    capacity_vph=cap,
                    free_flow_mps=vfree,
                    is_boundary=sid(r, c) in flagged,
                )
            )
    edges = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                edges.append((sid(r, c), sid(r, c + 1)))
            if r + 1 < rows and c in GRID_CONNECTOR_COLS:
                edges.append((sid(r, c), sid(r + 1, c)))
    net = RoadNetwork(tuple(segs), tuple(edges), tuple(f"g{r}_{c}" for r in range(rows) for c in range(cols)))

    b = np.zeros((net.n_segments, net.n_segments))
    for i in range(net.n_segments):
        down = net.downstream[i]
        if len(down) == 1:
            b[i, down[0]] = 1.0
        elif len(down) == 2:
            east, south = min(down), max(down)  # east neighbour has the smaller id
            b[i, east] = EAST_SHARE
            b[i, south] = 1.0 - EAST_SHARE
    return net, TurnRatios(b, net), source_ids


def chain_network(n: int = 4, length: float = 500.0, capacity: float = 2400.0, vfree: float = 10.0):
    """Short boundary-fed chain; the small twin for fast end-to-end runs."""
    segs = tuple(
        Segment(id=i, length_m=length, lanes=2, capacity_vph=capacity,
                free_flow_mps=vfree, is_boundary=i in (0, n - 1))
        for i in range(n)
    )
    net = RoadNetwork(segs, tuple((i, i + 1) for i in range(n - 1)), tuple(f"c{i}" for i in range(n)))
    return net, TurnRatios.uniform(net), [0]


def _daily_weight(hour_frac: np.ndarray) -> np.ndarray:
    """Two-peak weekday demand shape, normalized to max 1."""

    def bump(center, width):
        d = (hour_frac - center + 12.0) % 24.0 - 12.0
        return np.exp(-((d / width) ** 2))

    w = bump(8.5, 2.5) + 0.9 * bump(17.75, 3.0)
    return w / w.max()


DAY_FACTORS = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 0.8, 0.7])


def demand_profile(
    net: RoadNetwork,
    counts_like: CountMatrix,
    sources,
    peak: float,
    floor_fraction: float = 0.12,
) -> np.ndarray:
    """Daily two-peak demand at the source segments, damped on weekends."""
    t = counts_like.n_bins
    starts = [counts_like.bin_start(k) for k in range(t)]
    hour_frac = np.array([s.hour + s.minute / 60.0 for s in starts])
    days = counts_like.days()
    shape = floor_fraction + (1.0 - floor_fraction) * _daily_weight(hour_frac)
    profile = np.zeros((net.n_segments, t))
    peaks = np.broadcast_to(np.atleast_1d(np.asarray(peak, dtype=float)), (len(sources),))
    for s, p in zip(sources, peaks):
        profile[s] = p * shape * DAY_FACTORS[days]
    return profile


# -- experiment config -------------------------------------------------------


def _default_model() -> ModelConfig:
    return ModelConfig(
        n_features=22, embed_dim=24, spatial_layers=2, temporal_blocks=1,
        heads=4, history=6, horizon=2, ffn_width=48,
    )


def _default_filter() -> ensrf.FilterConfig:
    # Reversion timescales sit far above one day so the hour-of-day globals
    # can hold a persistent diurnal penetration pattern instead of bleeding
    # it back to zero between revisits of the same hour bucket.
    return ensrf.FilterConfig(
        n_members=128, sigma_0=0.25, sigma_y=5.0, lambda_base=1e-4,
        lambda_glob=3e-4, q_base=1e-4, q_hour=1e-4, q_day=1e-5, q_regime=1e-5,
        global_gain_scale=0.6, init_base_sd=0.25, init_glob_sd=0.1,
    )


@dataclass(frozen=True)
class ExperimentConfig:
    """One JSON-serializable document describing a full experiment."""

    twin: str | None = "grid"
    network_path: str | None = None
    days: int = 14
    forecast_days: int = 0
    bin_seconds: int = 900
    start: str = "2024-03-04T00:00:00"  # a Monday
    demand_peak: float = 700.0
    penetration_base: float = 0.10
    penetration_hour_amplitude: float = 0.4
    penetration_day_weekend: float = 0.85
    cameras_calibration: tuple = ()
    cameras_validation: tuple = ()
    model: ModelConfig = field(default_factory=_default_model)
    train_steps: int = 400
    train_batch: int = 8
    train_lr: float = 1e-3
    train_days: int | None = None  # defaults to ~70% of days
    filter: ensrf.FilterConfig = field(default_factory=_default_filter)
    gamma_pd: float = 0.8
    diffusion_s: float = 0.1
    confidence_decay: float = 0.999
    interval: float = 0.95
    burn_days: int = 1
    seed: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if self.twin is None and self.network_path is None:
            raise ValueError("config needs a twin name or a network path")
        overlap = set(self.cameras_calibration) & set(self.cameras_validation)
        if overlap:
            raise ValueError(f"calibration and validation cameras overlap: {sorted(overlap)}")
        if self.days < 1 or self.forecast_days < 0:
            raise ValueError("days must be >= 1 and forecast_days >= 0")
        if not 0 < self.interval < 1:
            raise ValueError("interval must lie in (0, 1)")

    def to_dict(self) -> dict:
        # out_dir identifies the run's placement, not the experiment
        return {
            "twin": self.twin,
            "network_path": self.network_path,
            "days": self.days,
            "forecast_days": self.forecast_days,
            "bin_seconds": self.bin_seconds,
            "start": self.start,
            "demand_peak": self.demand_peak,
            "penetration_base": self.penetration_base,
            "penetration_hour_amplitude": self.penetration_hour_amplitude,
            "penetration_day_weekend": self.penetration_day_weekend,
            "cameras_calibration": list(self.cameras_calibration),
            "cameras_validation": list(self.cameras_validation),
            "model": self.model.to_dict(),
            "train_steps": self.train_steps,
            "train_batch": self.train_batch,
            "train_lr": self.train_lr,
            "train_days": self.train_days,
            "filter": _filter_to_dict(self.filter),
            "gamma_pd": self.gamma_pd,
            "diffusion_s": self.diffusion_s,
            "confidence_decay": self.confidence_decay,
            "interval": self.interval,
            "burn_days": self.burn_days,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d.pop("out_dir", None)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "filter" in d:
            d["filter"] = ensrf.FilterConfig(**d["filter"])
        for key in ("cameras_calibration", "cameras_validation"):
            if key in d:
                d[key] = tuple(int(i) for i in d[key])
        return cls(**d)


def _filter_to_dict(fc: ensrf.FilterConfig) -> dict:
    return {k: getattr(fc, k) for k in fc.__dataclass_fields__}


def load_config(path: str) -> ExperimentConfig:
    import json

    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


GRID_CAMERAS = {"calibration": (2, 14, 23, 36, 48), "validation": (5, 16, 27, 37)}
CHAIN_CAMERAS = {"calibration": (1,), "validation": (3,)}


# -- pipeline ----------------------------------------------------------------


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


@contextmanager
def _stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


@dataclass
class PipelineResult:
    config: ExperimentConfig
    report: MetricsReport
    uncalibrated: MetricsReport
    diagnostics: dict
    calibrated: CountMatrix
    truth: CountMatrix
    intervals: tuple  # (lo, hi) arrays aligned with calibrated
    artifacts: dict


class Pipeline:
    """Stage-by-stage pipeline; each stage caches its output on self.

    Stages recompute deterministically from the config, so a CLI
    subcommand can run any prefix of the chain in a fresh process and
    land on identical numbers.
    """

    def __init__(self, config: ExperimentConfig):
        self.cfg = config
        self._built = False

    # - network and ground truth -

    def build(self):
        if self._built:
            return self
        cfg = self.cfg
        with _stage("build"):
            if cfg.twin == "grid":
                self.net, self.beta, self.sources = grid_network()
                cameras = GRID_CAMERAS
            elif cfg.twin == "chain":
                self.net, self.beta, self.sources = chain_network()
                cameras = CHAIN_CAMERAS
            elif cfg.twin is None:
                self.net = load_network(cfg.network_path)
                self.beta = TurnRatios.uniform(self.net)
                self.sources = [i for i in boundary_segments(self.net) if not self.net.upstream[i]]
                cameras = {"calibration": (), "validation": ()}
            else:
                raise ValueError(f"unknown twin {cfg.twin!r}")
            self.calibration = tuple(cfg.cameras_calibration) or cameras["calibration"]
            self.validation = tuple(cfg.cameras_validation) or cameras["validation"]
            overlap = set(self.calibration) & set(self.validation)
            if overlap:
                raise ValueError(f"calibration and validation cameras overlap: {sorted(overlap)}")
            for i in (*self.calibration, *self.validation):
                if not 0 <= i < self.net.n_segments:
                    raise ValueError(f"camera segment {i} outside the network")
            self.fd = default_fd_params(self.net, cfg.bin_seconds)
            self.bins_per_day = int(round(86400 / cfg.bin_seconds))
            self._built = True
        return self

    def simulate(self):
        if hasattr(self, "sim"):
            return self
        self.build()
        cfg = self.cfg
        with _stage("simulate"):
            import datetime as dt

            start = dt.datetime.fromisoformat(cfg.start)
            n_bins = (cfg.days + cfg.forecast_days) * self.bins_per_day
            shell = CountMatrix(np.zeros((1, n_bins)), cfg.bin_seconds, start)
            profile = demand_profile(self.net, shell, self.sources, cfg.demand_peak)
            self.sim = simulate(self.net, self.fd, self.beta, profile, cfg.bin_seconds, start)
            self.truth = self.sim.counts
        return self

    def sample(self):
        if hasattr(self, "probe"):
            return self
        self.simulate()
        cfg = self.cfg
        with _stage("sample"):
            hours = np.arange(24)
            hour_mult = 1.0 + cfg.penetration_hour_amplitude * np.sin(2 * np.pi * (hours - 16) / 24.0)
            day_mult = np.where(np.arange(7) >= 5, cfg.penetration_day_weekend, 1.0)
            self.penetration = PenetrationModel(
                base=cfg.penetration_base, hour_mult=hour_mult, day_mult=day_mult,
                seed=int(substream(cfg.seed, "penetration").integers(2**31)),
            )
            self.probe = pool_windows(thin_counts(self.truth, self.penetration))
        return self

    def features(self):
        if hasattr(self, "tensor"):
            return self
        self.sample()
        with _stage("features"):
            self.train_bins = (self.cfg.train_days or max(1, round(0.7 * self.cfg.days))) * self.bins_per_day
            self.tensor = build_tensor(
                self.net, self.fd, self.probe, self.sim.speeds, train_cols=self.train_bins
            )
        return self

    def fit(self):
        if hasattr(self, "trained"):
            return self
        self.features()
        cfg = self.cfg
        with _stage("train"):
            self.a_hat = normalized_adjacency(self.net.adjacency())
            self.qmax = np.array([max_storage(s, cfg.bin_seconds) for s in self.net.segments])
            windows = build_windows(
                self.tensor, self.probe.values, cfg.model,
                t_last=self.train_bins - cfg.model.horizon - 1,
            )
            self.trained = train(
                cfg.model, self.a_hat, windows, self.qmax,
                seed=cfg.seed, steps=cfg.train_steps,
                batch_size=cfg.train_batch, lr=cfg.train_lr,
            )
        return self

    def forecasts(self):
        if hasattr(self, "q_hat"):
            return self
        self.fit()
        cfg = self.cfg
        with _stage("predict"):
            h = cfg.model.history
            anchors = np.arange(h - 1, self.truth.n_bins - 1)
            raw, sigma = predict(
                self.trained.params, cfg.model, self.a_hat, self.tensor,
                self.probe.values, anchors,
            )
            t = self.truth.n_bins
            n = self.net.n_segments
            # q_hat[:, b] is the one-step-ahead probe-scale estimate of bin b
            self.q_hat = np.full((n, t), np.nan)
            self.q_hat[:, anchors + 1] = np.maximum(raw[:, :, 0], 0.0).T
            self.sigma_hat = np.full((n, t), np.nan)
            self.sigma_hat[:, anchors + 1] = sigma[:, :, 0].T
            self.first_bin = h  # earliest bin with an estimate
        return self

    def transition(self):
        if hasattr(self, "trans"):
            return self
        self.simulate()
        cfg = self.cfg
        with _stage("transition"):
            totals = self.sim.link_flows.sum(axis=1)
            rng = substream(cfg.seed, "transitions")
            records = [
                (i, j, float(rng.binomial(int(round(tot)), cfg.penetration_base)))
                for (i, j), tot in zip(self.net.edges, totals)
            ]
            flows = link_flow_stats(records, self.net)
            self.trans = build_transition(flows, net=self.net, gamma_pd=cfg.gamma_pd, s=cfg.diffusion_s)
            self.localization = localization_vectors(self.trans, self.calibration)
            far = []
            for i in range(self.net.n_segments):
                if all(vec[i] == 0.0 for vec in self.localization.values()):
                    far.append(i)
            self.far_segments = far
        return self

    def calibrate(self):
        if hasattr(self, "calibrated"):
            return self
        self.forecasts()
        self.transition()
        cfg = self.cfg
        with _stage("calibrate"):
            self._assimilation_loop()
        return self

    def _assimilation_loop(self):
        cfg = self.cfg
        fcfg = cfg.filter
        if not self.calibration:
            raise ValueError("no calibration cameras configured")
        n = self.net.n_segments
        t_total = self.truth.n_bins
        t_assim = cfg.days * self.bins_per_day
        hours, days = self.truth.hours(), self.truth.days()
        ratios = np.clip(self.sim.speed_ratios(self.net), 0.0, 1.0)
        valid_set = set(self.validation)

        # prior scale from the first assimilated day at the calibration cameras
        warm = slice(self.first_bin, min(self.first_bin + self.bins_per_day, t_assim))
        y_warm = self.truth.values[list(self.calibration), warm].ravel()
        q_warm = self.q_hat[list(self.calibration), warm].ravel()
        self.alpha_star = ensrf.warmup_alpha(y_warm, q_warm, eps=fcfg.eps)

        rng = substream(cfg.seed, "ensrf")
        ens = ensrf.init_ensemble(n, fcfg, rng, alpha_0=self.alpha_star)
        delta = np.ones(n)
        calibrated = np.full((n, t_total), np.nan)
        lo = np.full((n, t_total), np.nan)
        hi = np.full((n, t_total), np.nan)
        alpha_path = np.full((n, t_total), np.nan)
        alpha_width = np.full((n, t_total), np.nan)
        far = self.far_segments
        far_change = 0.0
        crit = float(ndtri(0.5 + cfg.interval / 2.0))

        for t in range(self.first_bin, t_total):
            regimes = ensrf.regime_index(ratios[:, t])
            ens = ensrf.forecast_step(ens, fcfg, rng, transition=self.trans)
            if t < t_assim:
                obs = [
                    ensrf.CameraObservation(segment=c, t_index=t, count=float(self.truth.values[c, t]))
                    for c in self.calibration
                ]
                leaked = [o.segment for o in obs if o.segment in valid_set]
                if leaked:
                    raise RuntimeError(f"validation cameras {leaked} entered assimilation")
                before = ens.base[:, far].copy() if far else None
                ens = ensrf.analysis_step(
                    ens, obs, self.q_hat[:, t], self.localization, fcfg,
                    int(hours[t]), int(days[t]), regimes,
                )
                if far:
                    far_change = max(far_change, float(np.abs(ens.base[:, far] - before).max()))
            beta_eff = ens.effective_beta(int(hours[t]), int(days[t]), regimes)
            alpha_members = np.exp(beta_eff)
            mean = alpha_members.mean(axis=0)
            var = alpha_members.var(axis=0, ddof=1)
            delta = update_confidence(delta, mean, var, cameras=self.calibration, decay=cfg.confidence_decay)
            alpha_c = shrink_blend(mean, delta, self.alpha_star)
            alpha_path[:, t] = alpha_c
            calibrated[:, t] = calibrate_counts(self.q_hat[:, t], alpha_c)
            # Predictive band: posterior log-ratio spread convolved with the
            # filter's own count-noise model, moment-matched in log space.
            z_mean = beta_eff.mean(axis=0)
            z_var = beta_eff.var(axis=0, ddof=1)
            r_z = ensrf.obs_variance(self.q_hat[:, t] * mean, fcfg)
            half = crit * np.sqrt(z_var + r_z)
            lo[:, t] = self.q_hat[:, t] * np.exp(z_mean - half)
            hi[:, t] = self.q_hat[:, t] * np.exp(z_mean + half)
            # calibration-band width on the log-multiplier scale: pure
            # parameter spread, immune to level shifts from the learned
            # weekday/hour pattern and free of the count-noise floor
            alpha_width[:, t] = 2.0 * crit * np.sqrt(z_var)

        self.ensemble = ens
        self.delta = delta
        self.calibrated = CountMatrix(calibrated, cfg.bin_seconds, self.truth.start_time)
        self.intervals = (lo, hi)
        self.alpha_path = alpha_path
        self.far_base_change = far_change
        self.t_assim = t_assim
        self.alpha_width = alpha_width
        if cfg.forecast_days > 0 and far:
            # multiplier-scale width of the camera-disconnected region,
            # day-averaged so the daily demand cycle drops out
            aw = alpha_width[far, t_assim:].mean(axis=0)
            self.far_alpha_width_daily = aw.reshape(cfg.forecast_days, self.bins_per_day).mean(axis=1)
        else:
            self.far_alpha_width_daily = np.zeros(0)

    def metrics(self):
        if hasattr(self, "report"):
            return self
        self.calibrate()
        cfg = self.cfg
        with _stage("evaluate"):
            t0 = max(self.first_bin, cfg.burn_days * self.bins_per_day)
            window = slice(t0, self.t_assim)
            locs = list(self.validation) or list(self.calibration)
            truth = self.truth.values[:, window]
            lo, hi = self.intervals
            self.report = evaluate(
                self.calibrated.values[:, window], truth, locs,
                lo=lo[:, window], hi=hi[:, window],
            )
            self.uncal_report = evaluate(self.q_hat[:, window], truth, locs)
            mae_cal = float(np.mean([m.mae for m in self.report.per_location.values()]))
            mae_unc = float(np.mean([m.mae for m in self.uncal_report.per_location.values()]))
            self.diagnostics = {
                "alpha_star": self.alpha_star,
                "alpha_final_median": float(np.median(self.alpha_path[:, self.t_assim - 1])),
                "far_segments": list(self.far_segments),
                "far_base_change": self.far_base_change,
                "far_width_daily": [float(v) for v in self.far_alpha_width_daily],
                "improvement_mae": 1.0 - mae_cal / mae_unc if mae_unc > 0 else None,
                "n_assimilated": self.ensemble.n_assimilated,
                "train_best_val": self.trained.best_val,
                "eval_window": [t0, self.t_assim],
            }
        return self

    # - artifacts -

    def write_artifacts(self, out_dir: str) -> dict:
        import os

        self.metrics()
        cfg = self.cfg
        os.makedirs(out_dir, exist_ok=True)

        def p(name):
            return os.path.join(out_dir, name)

        paths = {}
        with _stage("write"):
            payload = {
                "seed": cfg.seed,
                "config": cfg.to_dict(),
                "metrics": self.report.to_dict(),
                "uncalibrated": self.uncal_report.to_dict(),
                "diagnostics": self.diagnostics,
            }
            atomic_write_text(p("metrics.json"), canonical_json(payload))
            paths["metrics"] = p("metrics.json")
            save_counts(self.calibrated, p("calibrated_counts.csv"))
            paths["calibrated_counts"] = p("calibrated_counts.csv")
            self._write_calibration_field(p("calibration_field.csv"))
            paths["calibration_field"] = p("calibration_field.csv")
            export_transition(self.trans, self.net, p("transition.csv"))
            paths["transition"] = p("transition.csv")
            export_localization(self.localization, self.net, p("localization.csv"))
            paths["localization"] = p("localization.csv")
            obs_report = analyze(self.net, self.fd, self.calibration, bin_seconds=cfg.bin_seconds)
            report_to_json(obs_report, self.net, p("observability.json"))
            report_to_csv(obs_report, self.net, p("observability_conf.csv"))
            paths["observability"] = p("observability.json")
            self.trained.write_log(p("training_log.csv"))
            paths["training_log"] = p("training_log.csv")
            save_checkpoint(p("model"), self.trained.params, cfg.model)
            paths["checkpoint"] = p("model.npz")
        return paths

    def _write_calibration_field(self, path: str) -> None:
        import csv

        final = self.alpha_path[:, self.t_assim - 1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["segment_id", "alpha", "delta", "localized"])
            for i in range(self.net.n_segments):
                w.writerow([
                    self.net.external_ids[i],
                    repr(float(final[i])),
                    repr(float(self.delta[i])),
                    int(i not in self.far_segments),
                ])


def run_pipeline(config: ExperimentConfig, out_dir: str | None = None) -> PipelineResult:
    """Run every stage and write the artifact set when a directory is given."""
    pipe = Pipeline(config).metrics()
    target = out_dir or config.out_dir
    artifacts = pipe.write_artifacts(target) if target else {}
    return PipelineResult(
        config=config,
        report=pipe.report,
        uncalibrated=pipe.uncal_report,
        diagnostics=pipe.diagnostics,
        calibrated=pipe.calibrated,
        truth=pipe.truth,
        intervals=pipe.intervals,
        artifacts=artifacts,
    )
