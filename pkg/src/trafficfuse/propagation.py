"""Flow-weighted propagation of calibration information.

A row-stochastic transition matrix built from aggregated trajectory
transitions drives three things: localization of filter gains (a camera
only updates segments within three flow hops), spatial diffusion of the
calibration field, and the confidence-weighted shrinkage that produces
the final calibrated counts. Flow-isolated segments are left alone by
all three and revert to the network prior.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .network import RoadNetwork

__all__ = [
    "TransitionMatrix",
    "build_transition",
    "localization_vector",
    "localization_vectors",
    "diffuse",
    "update_confidence",
    "shrink_blend",
    "calibrate_counts",
    "export_transition",
    "export_localization",
]


@dataclass(frozen=True)
class TransitionMatrix:
    """P and its derived kernels; immutable after build.

    p: row-stochastic on segments with outflow, zero rows elsewhere
    w: symmetrized decayed kernel gamma_pd * (P + P^T) / 2
    w2, w3: multi-hop kernels gamma_pd * W^2 and gamma_pd * W2 @ W
    w_eff: diffusion matrix, every row sums to exactly 1
    """

    p: np.ndarray
    w: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    w_eff: np.ndarray
    gamma_pd: float
    s: float


def _effective_rows(w: np.ndarray) -> np.ndarray:
    """Off-diagonal from W, self-loop absorbing the remainder.

    W rows can sum past 1 after symmetrization; such rows are scaled down
    so the invariant (row sum exactly 1, diagonal >= 0) always holds.
    """
    n = w.shape[0]
    out = np.array(w, dtype=float)
    np.fill_diagonal(out, 0.0)
    for i in range(n):
        row = out[i]
        total = row.sum()
        if total > 1.0:
            row /= total
            total = row.sum()
            if total > 1.0:
                # float residue from the division; shave the largest entry
                row[np.argmax(row)] -= total - 1.0
                total = 1.0
        row[i] = max(0.0, 1.0 - total)
    return out


def build_transition(
    link_flows: np.ndarray,
    net: RoadNetwork | None = None,
    gamma_pd: float = 0.8,
    s: float = 0.1,
) -> TransitionMatrix:
    """Turn aggregated directed trajectory counts into the kernel family.

    link_flows[i, j] counts observed moves from segment i to j; rows with
    no recorded outflow stay all-zero and end up flow-isolated.
    """
    q = np.asarray(link_flows, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ValueError("link flows must be a square matrix")
    if (q < 0).any():
        i, j = np.argwhere(q < 0)[0]
        raise ValueError(f"negative trajectory flow at ({i}, {j})")
    if not 0.0 < gamma_pd < 1.0:
        raise ValueError("gamma_pd must lie in (0, 1)")
    if not 0.0 <= s < 1.0:
        raise ValueError("smoothing coefficient must lie in [0, 1)")
    if net is not None:
        if q.shape[0] != len(net.segments):
            raise ValueError("link flows do not match the network size")
        allowed = set(net.edges)
        for i, j in np.argwhere(q > 0):
            if (int(i), int(j)) not in allowed:
                raise ValueError(f"trajectory flow on missing edge ({i}, {j})")
    totals = q.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(totals > 0, q / totals, 0.0)
    w = gamma_pd * 0.5 * (p + p.T)
    w2 = gamma_pd * (w @ w)
    w3 = gamma_pd * (w2 @ w)
    return TransitionMatrix(p=p, w=w, w2=w2, w3=w3, w_eff=_effective_rows(w), gamma_pd=gamma_pd, s=s)


def localization_vector(t: TransitionMatrix, segment: int) -> np.ndarray:
    """Geometric hop-decay influence of a camera at `segment`, in [0, 1]."""
    n = t.w.shape[0]
    if not 0 <= segment < n:
        raise ValueError(f"segment {segment} outside the network")
    rho = t.w[:, segment] + 0.5 * t.w2[:, segment] + 0.25 * t.w3[:, segment]
    rho = np.clip(rho, 0.0, 1.0)
    rho[segment] = 1.0
    return rho


def localization_vectors(t: TransitionMatrix, cameras) -> dict:
    return {int(i): localization_vector(t, int(i)) for i in cameras}


def diffuse(beta: np.ndarray, t: TransitionMatrix, s: float | None = None) -> np.ndarray:
    """One diffusion step, (1-s) * beta + s * W_eff beta, per member.

    Written in difference form beta_i + s * sum_j w_ij (beta_j - beta_i)
    so a spatially constant field passes through bitwise unchanged.
    """
    if s is None:
        s = t.s
    if not 0.0 <= s < 1.0:
        raise ValueError("smoothing coefficient must lie in [0, 1)")
    beta = np.asarray(beta, dtype=float)
    squeeze = beta.ndim == 1
    b = beta[None, :] if squeeze else beta
    # pairwise differences keep the consensus state an exact fixed point
    d = b[:, None, :] - b[:, :, None]  # d[m, i, j] = beta_j - beta_i
    out = b + s * (t.w_eff[None, :, :] * d).sum(axis=2)
    return out[0] if squeeze else out


def update_confidence(
    delta_prev: np.ndarray,
    alpha_mean: np.ndarray,
    alpha_var: np.ndarray,
    cameras=(),
    decay: float = 0.999,
) -> np.ndarray:
    """Confidence rises as the ensemble coefficient of variation falls.

    delta = max(decay * previous, 1 / (1 + cv)), pinned to 1 on segments a
    camera observed this step.
    """
    alpha_mean = np.asarray(alpha_mean, dtype=float)
    alpha_var = np.asarray(alpha_var, dtype=float)
    if (alpha_mean <= 0).any():
        raise ValueError("alpha mean must be positive")
    cv = np.sqrt(np.maximum(alpha_var, 0.0)) / alpha_mean
    delta = np.maximum(decay * np.asarray(delta_prev, dtype=float), 1.0 / (1.0 + cv))
    delta = np.clip(delta, 0.0, 1.0)
    cams = list(cameras)
    if cams:
        delta[cams] = 1.0
    return delta


def shrink_blend(alpha_mean: np.ndarray, delta: np.ndarray, alpha_star: float) -> np.ndarray:
    """Confidence-weighted interpolation between segment and network scale."""
    delta = np.asarray(delta, dtype=float)
    return delta * np.asarray(alpha_mean, dtype=float) + (1.0 - delta) * alpha_star


def calibrate_counts(q_hat: np.ndarray, alpha_c: np.ndarray) -> np.ndarray:
    """Scale predictor counts by the blended calibration field."""
    alpha_c = np.asarray(alpha_c, dtype=float)
    if (alpha_c <= 0).any():
        raise ValueError("calibration factors must be positive")
    q_hat = np.asarray(q_hat, dtype=float)
    if q_hat.ndim == 1:
        return alpha_c * q_hat
    return alpha_c[:, None] * q_hat


def export_transition(t: TransitionMatrix, net: RoadNetwork, path: str) -> None:
    """Sparse triplets (from_id, to_id, p) using external segment ids."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["from_id", "to_id", "p"])
        for i, j in np.argwhere(t.p > 0):
            w.writerow([net.external_ids[i], net.external_ids[j], repr(float(t.p[i, j]))])


def export_localization(vectors: dict, net: RoadNetwork, path: str) -> None:
    """Long-form CSV (camera_id, segment_id, rho), one block per camera."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["camera_id", "segment_id", "rho"])
        for cam in sorted(vectors):
            for j, val in enumerate(vectors[cam]):
                w.writerow([net.external_ids[cam], net.external_ids[j], repr(float(val))])
