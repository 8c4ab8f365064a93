"""Point clouds, voxel grids, synthetic scenes and ASCII XYZ I/O.

A point cloud is a plain ``(n, 3)`` float64 array in meters. Helpers here
validate and build those arrays; they never wrap them in a class.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Hashable

import numpy as np


class PointCloudError(ValueError):
    pass


class XYZParseError(PointCloudError):
    def __init__(self, path, lineno: int, line: str):
        super().__init__(f"{path}:{lineno}: cannot parse point from {line!r}")
        self.path = path
        self.lineno = lineno


def as_cloud(points, *, allow_empty: bool = True) -> np.ndarray:
    """Return ``points`` as a finite ``(n, 3)`` float64 array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        if not allow_empty:
            raise PointCloudError("point cloud is empty")
        return np.zeros((0, 3))
    if arr.ndim == 1 and arr.shape[0] == 3:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise PointCloudError(f"expected shape (n, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise PointCloudError("point cloud contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class ScenePair:
    sparse: np.ndarray
    ground_truth: np.ndarray
    scene_id: Hashable = None

    def __post_init__(self):
        sparse = as_cloud(self.sparse, allow_empty=False)
        gt = as_cloud(self.ground_truth, allow_empty=False)
        if gt.shape[0] < sparse.shape[0]:
            raise PointCloudError("ground truth has fewer points than the sparse scan")
        sparse.setflags(write=False)
        gt.setflags(write=False)
        object.__setattr__(self, "sparse", sparse)
        object.__setattr__(self, "ground_truth", gt)


@dataclass(frozen=True)
class VoxelGrid:
    resolution: float
    occupied: frozenset = field(default_factory=frozenset)

    def __len__(self):
        return len(self.occupied)


def replicate_scan(scan, K: int) -> np.ndarray:
    """Stack ``K`` consecutive copies of ``scan`` (copy-major order)."""
    if int(K) != K or K < 1:
        raise PointCloudError(f"K must be a positive integer, got {K}")
    return np.tile(as_cloud(scan), (int(K), 1))


def voxel_indices(cloud, resolution: float) -> np.ndarray:
    if not resolution > 0:
        raise PointCloudError(f"voxel resolution must be > 0, got {resolution}")
    return np.floor(as_cloud(cloud) / resolution).astype(np.int64)


def voxelize(cloud, resolution: float) -> VoxelGrid:
    idx = voxel_indices(cloud, resolution)
    return VoxelGrid(float(resolution), frozenset(map(tuple, idx.tolist())))


# --- synthetic scenes -------------------------------------------------------

@dataclass(frozen=True)
class SceneRecipe:
    """Parameters of a synthetic scene family.

    ``ground-boxes`` is a flat disc of ground with 2-4 axis-aligned boxes
    standing on it. ``two-clusters`` is two Gaussian blobs, handy for tiny
    tests.
    """

    family: str = "ground-boxes"
    n_gt: int = 256
    n_sparse: int = 32
    radius: float = 2.0
    noise: float = 0.01
    min_objects: int = 2
    max_objects: int = 4

    def __post_init__(self):
        if self.family not in SCENE_FAMILIES:
            raise PointCloudError(f"unknown scene family {self.family!r}")
        if self.n_sparse < 1 or self.n_gt < 1:
            raise PointCloudError("point counts must be positive")
        if self.n_sparse > self.n_gt:
            raise PointCloudError(
                f"sparse count N={self.n_sparse} exceeds ground-truth count M={self.n_gt}")
        if not 2 <= self.min_objects <= self.max_objects <= 4:
            raise PointCloudError("object count range must lie within [2, 4]")


def _box_surface(rng, center, size, n):
    # sample faces proportionally to area, skipping the bottom face
    sx, sy, sz = size
    areas = np.array([sx * sy, sx * sz, sx * sz, sy * sz, sy * sz])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * size
    half = 0.5 * np.asarray(size)
    pts = u.copy()
    pts[face == 0, 2] = half[2]
    pts[face == 1, 1] = -half[1]
    pts[face == 2, 1] = half[1]
    pts[face == 3, 0] = -half[0]
    pts[face == 4, 0] = half[0]
    return pts + center


def _ground_boxes(rng, recipe: SceneRecipe) -> np.ndarray:
    n_obj = int(rng.integers(recipe.min_objects, recipe.max_objects + 1))
    sizes = rng.uniform([0.3, 0.3, 0.3], [0.8, 0.8, 0.8], size=(n_obj, 3))
    # objects claim about half of the points, the disc the rest
    n_objects_total = recipe.n_gt // 2
    counts = np.full(n_obj, n_objects_total // n_obj)
    counts[: n_objects_total % n_obj] += 1
    n_ground = recipe.n_gt - counts.sum()

    r = recipe.radius * np.sqrt(rng.uniform(0.0, 1.0, n_ground))
    phi = rng.uniform(0.0, 2 * math.pi, n_ground)
    parts = [np.stack([r * np.cos(phi), r * np.sin(phi), np.zeros(n_ground)], axis=1)]
    for size, count in zip(sizes, counts):
        rho = rng.uniform(0.3, 0.7) * recipe.radius
        ang = rng.uniform(0.0, 2 * math.pi)
        center = np.array([rho * math.cos(ang), rho * math.sin(ang), size[2] / 2])
        parts.append(_box_surface(rng, center, size, int(count)))
    return np.concatenate(parts)


def _two_clusters(rng, recipe: SceneRecipe) -> np.ndarray:
    half = recipe.n_gt // 2
    c = recipe.radius / 2
    a = rng.normal([-c, 0.0, 0.0], 0.2, size=(half, 3))
    b = rng.normal([c, 0.0, 0.0], 0.2, size=(recipe.n_gt - half, 3))
    return np.concatenate([a, b])


SCENE_FAMILIES = {"ground-boxes": _ground_boxes, "two-clusters": _two_clusters}


def synth_scene(recipe: SceneRecipe, seed: int) -> ScenePair:
    """Build a deterministic (sparse, ground truth) pair for ``seed``.

    The sparse scan is a seeded subsample without replacement of the ground
    truth, so it is a subset of it point for point.
    """
    rng = np.random.default_rng(seed)
    gt = SCENE_FAMILIES[recipe.family](rng, recipe)
    if recipe.noise > 0:
        gt = gt + rng.normal(0.0, recipe.noise, size=gt.shape)
    pick = np.sort(rng.choice(gt.shape[0], size=recipe.n_sparse, replace=False))
    return ScenePair(sparse=gt[pick], ground_truth=gt, scene_id=f"{recipe.family}-{seed}")


def synth_dataset(recipe: SceneRecipe, seeds) -> list[ScenePair]:
    return [synth_scene(recipe, int(s)) for s in seeds]


# --- ASCII XYZ ---------------------------------------------------------------

def load_xyz(path) -> np.ndarray:
    points = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = stripped.split()
            if len(fields) != 3:
                raise XYZParseError(path, lineno, stripped)
            try:
                xyz = [float(f) for f in fields]
            except ValueError:
                raise XYZParseError(path, lineno, stripped) from None
            if not all(math.isfinite(v) for v in xyz):
                raise XYZParseError(path, lineno, stripped)
            points.append(xyz)
    return as_cloud(points)


def save_xyz(cloud, path, header: str | None = None) -> None:
    cloud = as_cloud(cloud)
    with open(path, "w", encoding="ascii") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        # repr-precision floats round-trip exactly
        for x, y, z in cloud.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")


def save_scene(scene: ScenePair, directory, name: str | None = None) -> tuple[str, str]:
    name = name or str(scene.scene_id)
    os.makedirs(directory, exist_ok=True)
    sparse_path = os.path.join(directory, f"{name}_sparse.xyz")
    gt_path = os.path.join(directory, f"{name}_gt.xyz")
    save_xyz(scene.sparse, sparse_path)
    save_xyz(scene.ground_truth, gt_path)
    return sparse_path, gt_path


def load_scene_dir(directory) -> list[ScenePair]:
    """Load every ``<id>_sparse.xyz`` / ``<id>_gt.xyz`` pair in ``directory``."""
    scenes = []
    for fname in sorted(os.listdir(directory)):
        if not fname.endswith("_sparse.xyz"):
            continue
        name = fname[: -len("_sparse.xyz")]
        gt_path = os.path.join(directory, f"{name}_gt.xyz")
        if not os.path.exists(gt_path):
            raise PointCloudError(f"missing ground truth file for scene {name!r}")
        scenes.append(ScenePair(load_xyz(os.path.join(directory, fname)),
                                load_xyz(gt_path), scene_id=name))
    if not scenes:
        raise PointCloudError(f"no *_sparse.xyz scenes found in {directory}")
    return scenes
