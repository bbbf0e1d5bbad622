"""Per-segment, per-bin feature vectors for the graph predictor.

Each segment/bin pair yields a 22-entry vector laid out as

    [q_traj | temporal(7) | q_boundary | speed-density(9) | spatial(4)]

Indicator entries are exactly 0 or 1 and are never normalized; all other
entries get per-feature mean/scale statistics computed over the training
columns only. The layout is versioned and hashed into the manifest so a
tensor written by one build cannot silently feed a model trained on
another layout.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .ctm import FdParams, demand, density_from_speed, supply
from .network import CountMatrix, RoadNetwork, boundary_segments, max_storage

__all__ = [
    "FEATURE_NAMES",
    "FEATURE_VERSION",
    "INDICATOR_FEATURES",
    "FeatureTensor",
    "temporal_features",
    "los_band",
    "sd_features",
    "sp_features",
    "boundary_flow_feature",
    "build_tensor",
    "load_tensor",
]

FEATURE_VERSION = "1"

FEATURE_NAMES = (
    "q_traj",
    "hour_sin",
    "hour_cos",
    "day_sin",
    "day_cos",
    "is_weekend",
    "is_rush",
    "is_night",
    "q_boundary",
    "b",
    "b_complement",
    "demand_ratio",
    "supply_ratio",
    "volume_ratio",
    "los",
    "is_congested",
    "is_near_capacity",
    "q_rel_max",
    "b_downstream",
    "b_downstream_gap",
    "b_upstream",
    "b_upstream_gap",
)

INDICATOR_FEATURES = ("is_weekend", "is_rush", "is_night", "is_congested", "is_near_capacity")

# calendar policy: Monday is day 0
WEEKEND_DAYS = frozenset({5, 6})
RUSH_HOURS = frozenset({7, 8, 9, 16, 17, 18})
NIGHT_HOURS = frozenset({22, 23, 0, 1, 2, 3, 4, 5})

_LOS_THRESHOLDS = np.array([0.35, 0.55, 0.75, 0.9, 1.0])
_LOS_VALUES = np.array([0.0, 0.2, 0.4, 0.6, 0.8, 1.0])


def manifest_hash(names=FEATURE_NAMES, version=FEATURE_VERSION) -> str:
    h = hashlib.sha256()
    h.update(version.encode())
    for n in names:
        h.update(b"|")
        h.update(n.encode())
    return h.hexdigest()


def temporal_features(hour: int, day: int) -> np.ndarray:
    """Cyclic hour/day encodings plus weekend, rush and night indicators."""
    if not 0 <= hour <= 23:
        raise ValueError(f"hour {hour} outside [0, 23]")
    if not 0 <= day <= 6:
        raise ValueError(f"day {day} outside [0, 6]")
    return np.array(
        [
            np.sin(2.0 * np.pi * hour / 24.0),
            np.cos(2.0 * np.pi * hour / 24.0),
            np.sin(2.0 * np.pi * day / 7.0),
            np.cos(2.0 * np.pi * day / 7.0),
            float(day in WEEKEND_DAYS),
            float(hour in RUSH_HOURS),
            float(hour in NIGHT_HOURS),
        ]
    )


def los_band(ratio: float) -> float:
    """Ordinal level-of-service value for a volume/capacity ratio."""
    if ratio < 0:
        raise ValueError("volume ratio must be nonnegative")
    idx = int(np.searchsorted(_LOS_THRESHOLDS, ratio, side="right"))
    return float(_LOS_VALUES[idx])


def boundary_flow_feature(entries: float, exits: float, seg, bin_seconds: float) -> float:
    """Net boundary exchange scaled by segment capacity for one bin."""
    return (entries - exits) / max_storage(seg, bin_seconds)


def sd_features(b, q, seg, fd: FdParams, bin_seconds: float, n_max: float) -> np.ndarray:
    """Speed-density block for one segment/bin.

    [b, 1-b, D/C, S/C, q/C, LOS, congested flag (b < 0.5), near-capacity
    flag (0.7 < q/C < 0.9), q/n_max] with C the per-bin capacity and D, S
    evaluated at the density recovered from b.
    """
    c = max_storage(seg, bin_seconds)
    rho = density_from_speed(b, seg, fd, bin_seconds)
    vc = q / c
    return np.array(
        [
            b,
            1.0 - b,
            demand(rho, seg, fd, bin_seconds) / c,
            supply(rho, seg, fd, bin_seconds) / c,
            vc,
            los_band(vc),
            float(b < 0.5),
            float(0.7 < vc < 0.9),
            q / max(n_max, 1.0),
        ]
    )


def sp_features(b: np.ndarray, net: RoadNetwork) -> np.ndarray:
    """Spatial block, shape (n_segments, 4).

    [mean downstream b, own b minus that, mean upstream b, own b minus
    that]; segments with no neighbours on a side use their own b there so
    the gradient reads zero.
    """
    b = np.asarray(b, dtype=float)
    n = net.n_segments
    if b.shape != (n,):
        raise ValueError("b must have one entry per segment")
    out = np.empty((n, 4))
    for i in range(n):
        ds = net.downstream[i]
        us = net.upstream[i]
        mean_ds = b[list(ds)].mean() if ds else b[i]
        mean_us = b[list(us)].mean() if us else b[i]
        out[i] = (mean_ds, b[i] - mean_ds, mean_us, b[i] - mean_us)
    return out


@dataclass
class FeatureTensor:
    """Raw feature values plus the manifest needed to (de)normalize them.

    values has shape (n_segments, n_bins, 22) and is kept unnormalized;
    normalized() applies the stored statistics. n_max and the statistics
    come from the training columns only.
    """

    values: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    n_max: np.ndarray
    train_cols: int
    bin_seconds: int
    start_time: _dt.datetime
    n_imputed_speed: int = 0
    n_imputed_count: int = 0
    names: tuple = FEATURE_NAMES
    version: str = FEATURE_VERSION

    @property
    def indicator_mask(self) -> np.ndarray:
        return np.array([n in INDICATOR_FEATURES for n in self.names])

    def normalized(self) -> np.ndarray:
        return (self.values - self.mean) / self.scale

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.scale + self.mean

    def save(self, prefix: str) -> None:
        """Write <prefix>.bin (flat float64) and <prefix>.json manifest."""
        arr = np.ascontiguousarray(self.values, dtype="<f8")
        with open(prefix + ".bin", "wb") as fh:
            arr.tofile(fh)
        manifest = {
            "layout_hash": manifest_hash(self.names, self.version),
            "version": self.version,
            "names": list(self.names),
            "shape": list(self.values.shape),
            "dtype": "<f8",
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "n_max": self.n_max.tolist(),
            "train_cols": self.train_cols,
            "bin_seconds": self.bin_seconds,
            "start_time": self.start_time.isoformat(),
            "n_imputed_speed": self.n_imputed_speed,
            "n_imputed_count": self.n_imputed_count,
        }
        with open(prefix + ".json", "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)


def load_tensor(prefix: str) -> FeatureTensor:
    """Read a tensor written by FeatureTensor.save, verifying the manifest."""
    with open(prefix + ".json") as fh:
        m = json.load(fh)
    names = tuple(m["names"])
    if m["layout_hash"] != manifest_hash(names, m["version"]):
        raise ValueError("feature manifest hash mismatch")
    if names != FEATURE_NAMES or m["version"] != FEATURE_VERSION:
        raise ValueError("feature layout differs from this build")
    values = np.fromfile(prefix + ".bin", dtype=m["dtype"])
    shape = tuple(m["shape"])
    if values.size != int(np.prod(shape)):
        raise ValueError(
            f"feature payload holds {values.size} values, manifest says {shape}"
        )
    return FeatureTensor(
        values=values.reshape(shape),
        mean=np.array(m["mean"]),
        scale=np.array(m["scale"]),
        n_max=np.array(m["n_max"]),
        train_cols=int(m["train_cols"]),
        bin_seconds=int(m["bin_seconds"]),
        start_time=_dt.datetime.fromisoformat(m["start_time"]),
        n_imputed_speed=int(m["n_imputed_speed"]),
        n_imputed_count=int(m["n_imputed_count"]),
        names=names,
        version=m["version"],
    )


def build_tensor(
    net: RoadNetwork,
    fd: FdParams,
    counts: CountMatrix,
    speeds: np.ndarray | None,
    boundary_in: np.ndarray | None = None,
    boundary_out: np.ndarray | None = None,
    train_cols: int | None = None,
) -> FeatureTensor:
    """Assemble the (n_segments, n_bins, 22) tensor from aligned inputs.

    speeds is in m/s with NaN for missing bins; missing speeds impute free
    flow (b = 1) and missing counts impute 0, both counted on the result.
    train_cols bounds the columns used for n_max and the normalization
    statistics (defaults to every column).
    """
    n, t = counts.values.shape
    if train_cols is None:
        train_cols = t
    if not 0 < train_cols <= t:
        raise ValueError("train_cols must lie in (0, n_bins]")
    fd.validate(net)

    q = counts.values.copy()
    n_imp_count = int(np.isnan(q).sum())
    q[np.isnan(q)] = 0.0

    vf = net.free_flow()[:, None]
    if speeds is None:
        b = np.ones((n, t))
        n_imp_speed = n * t
    else:
        speeds = np.asarray(speeds, dtype=float)
        if speeds.shape != (n, t):
            raise ValueError("speeds must align with counts")
        n_imp_speed = int(np.isnan(speeds).sum())
        b = np.clip(np.where(np.isnan(speeds), vf, speeds) / vf, 0.0, 1.0)

    bin_s = counts.bin_seconds
    qmax = np.array([max_storage(s, bin_s) for s in net.segments])[:, None]
    vw = fd.wave_speed
    rho_jam = np.array([fd.jam_pseudo(s) for s in net.segments])[:, None]
    b_crit = (fd.crit_speed / net.free_flow())[:, None]

    rho = np.where(
        b >= b_crit,
        (qmax / vf) * (1.0 - b) * vf / (vf - vw),
        rho_jam * (1.0 - b),
    )
    dem = np.minimum(rho * vf, qmax)
    sup = np.maximum(0.0, np.minimum(vw * (rho_jam - rho), qmax))
    vc = q / qmax
    los = _LOS_VALUES[np.searchsorted(_LOS_THRESHOLDS, vc, side="right")]

    n_max = np.maximum(q[:, :train_cols].max(axis=1), 1.0)

    hours = counts.hours()
    days = counts.days()
    temp = np.stack([temporal_features(int(h), int(d)) for h, d in zip(hours, days)])  # (t, 7)

    bset = boundary_segments(net)
    q_bc = np.zeros((n, t))
    if boundary_in is not None or boundary_out is not None:
        bi = np.zeros((n, t)) if boundary_in is None else np.asarray(boundary_in, dtype=float)
        bo = np.zeros((n, t)) if boundary_out is None else np.asarray(boundary_out, dtype=float)
        if bi.shape != (n, t) or bo.shape != (n, t):
            raise ValueError("boundary arrays must align with counts")
        mask = np.zeros(n, dtype=bool)
        mask[list(bset)] = True
        q_bc[mask] = (bi[mask] - bo[mask]) / qmax[mask]

    # spatial means via adjacency matvecs; empty sides fall back to own b
    a = net.adjacency()
    out_deg = a.sum(axis=1)[:, None]
    in_deg = a.sum(axis=0)[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_ds = np.where(out_deg > 0, (a @ b) / out_deg, b)
        mean_us = np.where(in_deg > 0, (a.T @ b) / in_deg, b)

    x = np.empty((n, t, 22))
    x[:, :, 0] = q
    x[:, :, 1:8] = temp[None, :, :]
    x[:, :, 8] = q_bc
    x[:, :, 9] = b
    x[:, :, 10] = 1.0 - b
    x[:, :, 11] = dem / qmax
    x[:, :, 12] = sup / qmax
    x[:, :, 13] = vc
    x[:, :, 14] = los
    x[:, :, 15] = (b < 0.5).astype(float)
    x[:, :, 16] = ((vc > 0.7) & (vc < 0.9)).astype(float)
    x[:, :, 17] = q / n_max[:, None]
    x[:, :, 18] = mean_ds
    x[:, :, 19] = b - mean_ds
    x[:, :, 20] = mean_us
    x[:, :, 21] = b - mean_us

    train = x[:, :train_cols, :].reshape(-1, 22)
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    scale = np.where(std < 1e-12, 1.0, std)
    ind = np.array([nm in INDICATOR_FEATURES for nm in FEATURE_NAMES])
    mean[ind] = 0.0
    scale[ind] = 1.0

    return FeatureTensor(
        values=x,
        mean=mean,
        scale=scale,
        n_max=n_max,
        train_cols=train_cols,
        bin_seconds=counts.bin_seconds,
        start_time=counts.start_time,
        n_imputed_speed=n_imp_speed,
        n_imputed_count=n_imp_count,
    )
