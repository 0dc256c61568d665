"""Per-shape precomputation shared by the objective, constraints, solver and metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.typing import NDArray

from .geometry import SdfGrid, SpatialIndex, TriangleMesh, build_sdf_grid, sample_surface_points

DEFAULT_SAMPLES = 2000
DEFAULT_VOLUME_SAMPLES = 2000


def interior_probes(mesh: TriangleMesh, sdf: SdfGrid) -> NDArray:
    """Volume centroid plus a 3x3x3 bounding-box lattice without its center, kept where inside."""
    lo, hi = mesh.bounds()
    frac = np.array([0.25, 0.5, 0.75])
    lattice = np.stack(np.meshgrid(frac, frac, frac, indexing="ij"), -1).reshape(-1, 3)
    lattice = np.delete(lattice, 13, axis=0)  # the bbox center
    pts = np.concatenate([mesh.volume_centroid()[None], lo + lattice * (hi - lo)])
    return pts[np.asarray(sdf.query(pts)) < 0]


@dataclass(frozen=True)
class BodyModel:
    """A shape with its SDF grid, surface samples and interior probes (all local frame)."""

    mesh: TriangleMesh
    sdf: SdfGrid
    samples: NDArray
    probes: NDArray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.probes is None:
            object.__setattr__(self, "probes", interior_probes(self.mesh, self.sdf))

    @staticmethod
    def from_mesh(mesh: TriangleMesh, n_samples: int = DEFAULT_SAMPLES, seed: int = 0,
                  voxel_size: float | None = None) -> BodyModel:
        sdf = build_sdf_grid(mesh, voxel_size)
        return BodyModel(mesh, sdf, sample_surface_points(mesh, n_samples, seed))

    @cached_property
    def check_points(self) -> NDArray:
        """Surface samples augmented with interior probes."""
        return np.concatenate([self.samples, self.probes])

    @cached_property
    def volume_samples(self) -> NDArray:
        """Uniform interior points (rejection in the bounding box, fixed seed)."""
        lo, hi = self.mesh.bounds()
        rng = np.random.default_rng(0)
        out, have = [], 0
        for _ in range(64):
            cand = lo + rng.random((4 * DEFAULT_VOLUME_SAMPLES, 3)) * (hi - lo)
            cand = cand[np.asarray(self.sdf.query(cand)) < 0]
            out.append(cand)
            have += len(cand)
            if have >= DEFAULT_VOLUME_SAMPLES:
                break
        pts = np.concatenate(out)[:DEFAULT_VOLUME_SAMPLES]
        return pts if len(pts) else self.probes

    @cached_property
    def index(self) -> SpatialIndex:
        return SpatialIndex(self.samples)
