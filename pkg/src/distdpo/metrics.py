"""Completion metrics: Chamfer, EMD, Jensen-Shannon divergence and voxel IoU."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .pointcloud import PointCloudError, as_cloud, voxelize


class MetricError(ValueError):
    pass


class DegenerateHistogramError(MetricError):
    pass


def _nonempty(cloud, name):
    c = as_cloud(cloud)
    if c.shape[0] == 0:
        raise MetricError(f"{name} point cloud is empty")
    return c


def pairwise_distances(a, b) -> np.ndarray:
    # explicit differences keep d(a_i, b_j) bitwise equal to d(b_j, a_i)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def nearest_distances(a, b, accel: str = "brute", chunk: int = 2048) -> np.ndarray:
    """Distance from every point of ``a`` to its nearest neighbour in ``b``."""
    if accel == "kdtree":
        d, _ = cKDTree(b).query(a, k=1)
        return np.asarray(d, dtype=np.float64)
    if accel != "brute":
        raise MetricError(f"unknown nearest-neighbour method {accel!r}")
    out = np.empty(a.shape[0])
    for start in range(0, a.shape[0], chunk):
        out[start:start + chunk] = pairwise_distances(a[start:start + chunk], b).min(axis=1)
    return out


def chamfer_terms(a, b, accel: str = "brute") -> tuple[float, float]:
    """Directed mean nearest-neighbour distances ``(a->b, b->a)``."""
    a = _nonempty(a, "first")
    b = _nonempty(b, "second")
    if accel == "brute" and a.shape[0] * b.shape[0] <= 4_000_000:
        d = pairwise_distances(a, b)
        return float(d.min(axis=1).mean()), float(d.min(axis=0).mean())
    return (float(nearest_distances(a, b, accel).mean()),
            float(nearest_distances(b, a, accel).mean()))


def chamfer(a, b, accel: str = "brute") -> float:
    """Symmetric Chamfer distance with unsquared Euclidean norms, in meters."""
    ab, ba = chamfer_terms(a, b, accel)
    return ab + ba


def _canonical_order(a, b):
    # fixed argument order makes emd exactly symmetric even when ties
    # admit several optimal matchings
    if (a.shape[0], a.tobytes()) > (b.shape[0], b.tobytes()):
        return b, a
    return a, b


def emd(a, b) -> float:
    """Exact Earth Mover's distance between equal-size clouds.

    Mean matched Euclidean distance under the optimal bijection.
    """
    a = _nonempty(a, "first")
    b = _nonempty(b, "second")
    if a.shape[0] != b.shape[0]:
        raise MetricError(f"emd needs equal sizes, got {a.shape[0]} and {b.shape[0]}")
    a, b = _canonical_order(a, b)
    cost = pairwise_distances(a, b)
    rows, cols = linear_sum_assignment(cost)
    return math.fsum(cost[rows, cols].tolist()) / a.shape[0]


def subsample_pair(a, b, cap: int, rng: np.random.Generator):
    """Seeded subsample of both clouds to ``min(|a|, |b|, cap)`` points."""
    n = min(a.shape[0], b.shape[0], cap)

    def pick(c):
        if c.shape[0] == n:
            return c
        return c[np.sort(rng.choice(c.shape[0], size=n, replace=False))]

    return pick(a), pick(b)


# --- Jensen-Shannon ----------------------------------------------------------

@dataclass(frozen=True)
class Histogram:
    edges: tuple
    counts: np.ndarray

    def pmf(self) -> np.ndarray:
        total = self.counts.sum()
        if total <= 0:
            raise DegenerateHistogramError("histogram has no mass inside the extent")
        return self.counts / total


def occupancy_histogram(cloud, bins_per_axis: int, extent: float, dims: int = 2) -> Histogram:
    """Uniform histogram over ``[-extent, extent]`` on the first ``dims`` axes.

    Points outside the extent are dropped.
    """
    if bins_per_axis < 1:
        raise MetricError("bins_per_axis must be >= 1")
    if not extent > 0:
        raise MetricError("extent must be > 0")
    if dims not in (2, 3):
        raise MetricError("histogram dims must be 2 (bird's-eye) or 3")
    cloud = _nonempty(cloud, "histogram")
    edges = tuple(np.linspace(-extent, extent, bins_per_axis + 1) for _ in range(dims))
    counts, _ = np.histogramdd(cloud[:, :dims], bins=edges)
    return Histogram(edges, counts.astype(np.int64))


def jsd_pmf(p, q) -> float:
    """Base-2 Jensen-Shannon divergence between two PMFs; lies in [0, 1]."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise MetricError("PMFs must have the same shape")
    m = 0.5 * (p + q)

    def kl(x):
        nz = x > 0
        return float(np.sum(x[nz] * np.log2(x[nz] / m[nz])))

    val = 0.5 * kl(p) + 0.5 * kl(q)
    return min(max(val, 0.0), 1.0)


def jsd(a, b, bins_per_axis: int = 64, extent: float = 2.0, dims: int = 2) -> float:
    ha = occupancy_histogram(a, bins_per_axis, extent, dims)
    hb = occupancy_histogram(b, bins_per_axis, extent, dims)
    return jsd_pmf(ha.pmf(), hb.pmf())


def voxel_iou(a, b, resolution: float) -> float:
    _nonempty(a, "first")
    _nonempty(b, "second")
    try:
        va = voxelize(a, resolution).occupied
        vb = voxelize(b, resolution).occupied
    except PointCloudError as exc:
        raise MetricError(str(exc)) from None
    return len(va & vb) / len(va | vb)


# --- reports -----------------------------------------------------------------

@dataclass(frozen=True)
class MetricConfig:
    jsd_bins: int = 64
    jsd_extent: float | None = None  # None: bounding radius of the ground truth
    jsd_dims: int = 2
    iou_resolutions: tuple = (0.5, 0.2, 0.1)
    emd_cap: int = 512
    seed: int = 0


@dataclass
class MetricReport:
    cd: float
    jsd: float
    emd: float
    iou: dict = field(default_factory=dict)
    wall_time_seconds: float = 0.0

    def as_row(self) -> dict:
        row = {"cd": self.cd, "jsd": self.jsd, "emd": self.emd}
        for res, val in self.iou.items():
            row[f"iou_{res:g}"] = val
        row["wall_time_seconds"] = self.wall_time_seconds
        return row


def bounding_radius(cloud) -> float:
    c = as_cloud(cloud)
    return float(np.max(np.linalg.norm(c[:, :2], axis=1)))


def evaluate(completed, gt, cfg: MetricConfig = MetricConfig(),
             wall_time_seconds: float = 0.0) -> MetricReport:
    completed = _nonempty(completed, "completed")
    gt = _nonempty(gt, "ground truth")
    extent = cfg.jsd_extent if cfg.jsd_extent is not None else bounding_radius(gt)
    # a tiny pad keeps boundary points of the ground truth inside the last bin
    extent = max(extent, 1e-9) * (1 + 1e-9)
    rng = np.random.default_rng(cfg.seed)
    ea, eb = subsample_pair(completed, gt, cfg.emd_cap, rng)
    return MetricReport(
        cd=chamfer(completed, gt),
        jsd=jsd(completed, gt, cfg.jsd_bins, extent, cfg.jsd_dims),
        emd=emd(ea, eb),
        iou={float(r): voxel_iou(completed, gt, r) for r in cfg.iou_resolutions},
        wall_time_seconds=float(wall_time_seconds),
    )


def mean_report(reports) -> MetricReport:
    """Average the metrics; wall time is the median per-report time."""
    reports = list(reports)
    if not reports:
        raise MetricError("no reports to average")
    keys = reports[0].iou.keys()
    return MetricReport(
        cd=float(np.mean([r.cd for r in reports])),
        jsd=float(np.mean([r.jsd for r in reports])),
        emd=float(np.mean([r.emd for r in reports])),
        iou={k: float(np.mean([r.iou[k] for r in reports])) for k in keys},
        wall_time_seconds=float(np.median([r.wall_time_seconds for r in reports])),
    )
