"""Chamfer data term, Geman-McClure robustification and batch scoring."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .geometry import PointCloud, Sim3, SpatialIndex, sim3_apply

DEFAULT_DELTA = 0.05


@dataclass(frozen=True)
class ObjectiveConfig:
    robust_delta: float = DEFAULT_DELTA
    use_robust: bool = True

    def __post_init__(self):
        if not self.robust_delta > 0:
            raise ValueError("robust_delta must be positive")


def geman_mcclure(d: NDArray, delta: float = DEFAULT_DELTA) -> NDArray:
    d2 = np.asarray(d, dtype=np.float64) ** 2
    return d2 / (d2 + delta * delta)


def _check(measured: PointCloud) -> NDArray:
    pts = np.asarray(measured, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("no observed points for object")
    return pts


def nearest_sq_distances(measured: PointCloud, T: Sim3, model_index: SpatialIndex) -> NDArray:
    return model_index.query(sim3_apply(T, _check(measured)))[1]


def chamfer(measured: PointCloud, T: Sim3, model_index: SpatialIndex) -> float:
    """Mean squared distance from transformed measured points to their nearest model point."""
    return float(np.mean(nearest_sq_distances(measured, T, model_index)))


def robust_chamfer(measured: PointCloud, T: Sim3, model_index: SpatialIndex,
                   cfg: ObjectiveConfig = ObjectiveConfig()) -> float:
    """Mean of rho_GM over Euclidean nearest distances (plain Chamfer if not robust)."""
    d2 = nearest_sq_distances(measured, T, model_index)
    if not cfg.use_robust:
        return float(np.mean(d2))
    dd = cfg.robust_delta * cfg.robust_delta
    return float(np.mean(d2 / (d2 + dd)))


def score_batch(measured: PointCloud, candidates: list[Sim3], model_index: SpatialIndex,
                cfg: ObjectiveConfig = ObjectiveConfig(), workers: int = 1) -> list[float]:
    """Per-candidate ``robust_chamfer``; worker count never changes the values."""
    if len(candidates) == 0:
        raise ValueError("empty candidate list")
    pts = _check(measured)

    def one(T: Sim3) -> float:
        return robust_chamfer(pts, T, model_index, cfg)

    if workers <= 1:
        return [one(T) for T in candidates]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, candidates))


def argmin_candidate(scores) -> int:
    """Lowest score, ties to the lowest index."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty score list")
    return int(np.argmin(arr))
