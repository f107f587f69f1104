"""Spatial point transformation: patch -> axis-aligned cylindrical volume.

The pipeline removes the rotational degrees of freedom of a local patch in
two steps: a reference axis estimated from the patch covariance is rotated
onto +Z (fixing two DOF), then every spherical voxel is rotated about Z so
its center lands on the YZ-plane (fixing the third DOF voxel-locally while
keeping the volume equivariant to discrete Z rotations of the input).

Azimuth bin centers sit at theta_l = 2*pi*l/L for l = 1..L, so the voxel
rotation Rz(pi/2 - 2*pi*l/L) maps each center exactly onto the +Y half of
the YZ-plane and consecutive centers are exact 2*pi/L rotations of each
other. Radial and elevation centers are bin midpoints: rho_j = (j-1/2)*R/J,
phi_k = -pi/2 + (k-1/2)*pi/K.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegeneratePatch
from .geometry import as_points, minimal_rotation_to_z, rotation_about_z


@dataclass(frozen=True)
class VolumeConfig:
    """Geometry of the support ball and its spherical voxelization.

    support_radius is the patch radius R; the grid has J radial, K
    elevation, and L azimuth bins; voxel point sets come from radius
    queries of radius voxel_radius around the bin centers, capped at
    points_per_voxel samples chosen by a seeded deterministic draw.
    """

    support_radius: float = 0.3
    radial_bins: int = 9
    elevation_bins: int = 40
    azimuth_bins: int = 80
    voxel_radius: float = 0.04
    points_per_voxel: int = 30
    sampling_seed: int = 0
    viewpoint: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis_alignment_enabled: bool = True
    xy_transform_enabled: bool = True

    def __post_init__(self):
        if min(self.radial_bins, self.elevation_bins, self.azimuth_bins) < 1:
            raise ValueError("grid dimensions must be >= 1")
        if self.voxel_radius <= 0 or self.support_radius <= 0:
            raise ValueError("radii must be positive")
        if self.points_per_voxel < 1:
            raise ValueError("points_per_voxel must be >= 1")

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return (self.radial_bins, self.elevation_bins, self.azimuth_bins)

    def viewpoint_array(self) -> np.ndarray:
        return np.asarray(self.viewpoint, dtype=np.float64)


@dataclass(frozen=True)
class AlignedPatch:
    """Patch in anchor-centered coordinates with the reference axis on +Z."""

    points: np.ndarray
    rotation: np.ndarray
    anchor: np.ndarray


@dataclass
class CylindricalVolume:
    """J x K x L grid of per-voxel point samples, periodic in azimuth.

    Storage is CSR-style: stored_points holds the kept (rotated) samples
    for all voxels concatenated in voxel-major order (azimuth fastest),
    with offsets delimiting each voxel's slice. occupancy counts every
    candidate within voxel_radius of the center, before the per-voxel cap.
    """

    grid_shape: tuple[int, int, int]
    stored_points: np.ndarray
    offsets: np.ndarray
    occupancy: np.ndarray
    centers: np.ndarray
    config: VolumeConfig = field(repr=False, default=None)

    def flat_index(self, j: int, k: int, l: int) -> int:
        jj, kk, ll = self.grid_shape
        return (j * kk + k) * ll + (l % ll)

    def points_in(self, j: int, k: int, l: int) -> np.ndarray:
        """Stored samples of voxel (j, k, l), 0-based, azimuth periodic."""
        f = self.flat_index(j, k, l)
        return self.stored_points[self.offsets[f] : self.offsets[f + 1]]

    @property
    def total_stored(self) -> int:
        return len(self.stored_points)

    def segment_lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def shift_azimuth(self, shift: int) -> "CylindricalVolume":
        """Volume with voxel (j, k, l) holding the data of (j, k, l - shift)."""
        jj, kk, ll = self.grid_shape
        src_flat = (
            (np.arange(jj)[:, None, None] * kk + np.arange(kk)[None, :, None]) * ll
            + (np.arange(ll)[None, None, :] - shift) % ll
        ).ravel()
        lengths = self.segment_lengths()
        new_lengths = lengths[src_flat]
        new_offsets = np.concatenate([[0], np.cumsum(new_lengths)]).astype(np.intp)
        total = int(new_offsets[-1])
        # Flat gather: row r of the output belongs to destination segment s;
        # it reads source row starts[src(s)] + (r - new_offsets[s]).
        ranks = np.arange(total) - np.repeat(new_offsets[:-1], new_lengths)
        rows = np.repeat(self.offsets[:-1][src_flat], new_lengths) + ranks
        return CylindricalVolume(
            self.grid_shape,
            self.stored_points[rows],
            new_offsets,
            np.roll(self.occupancy, shift, axis=2),
            self.centers,
            self.config,
        )


def estimate_reference_axis(patch: np.ndarray, viewpoint) -> np.ndarray:
    """Unit axis of least covariance, oriented toward the viewpoint.

    The axis is the eigenvector of the centered patch covariance with the
    smallest eigenvalue, sign-flipped so axis . (viewpoint - centroid) >= 0.
    Exact-zero alignment ties prefer a nonnegative Z, then Y, then X
    component. Raises DegeneratePatch when the covariance rank is < 2.
    """
    pts = as_points(patch)
    if len(pts) < 3:
        raise DegeneratePatch("need at least 3 points to estimate an axis")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / len(pts)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[1] <= max(eigvals[2], 1e-300) * 1e-12:
        raise DegeneratePatch("patch covariance rank < 2")
    axis = eigvecs[:, 0]
    axis = axis / np.linalg.norm(axis)
    toward = np.asarray(viewpoint, dtype=np.float64) - centroid
    d = float(axis @ toward)
    if d < 0:
        return -axis
    if d > 0:
        return axis
    for comp in (2, 1, 0):
        if axis[comp] > 0:
            return axis
        if axis[comp] < 0:
            return -axis
    return axis


def align_patch(patch: np.ndarray, anchor, cfg: VolumeConfig) -> AlignedPatch:
    """Rotate the reference axis onto +Z and recenter on the anchor.

    Output points are R_z @ p - R_z @ anchor. All statistics run on
    anchor-relative coordinates, so jointly translating patch, anchor, and
    viewpoint cannot change the result. With axis alignment disabled the
    rotation is the identity and only the recentering is applied.
    """
    pts = as_points(patch)
    anchor = np.asarray(anchor, dtype=np.float64).reshape(3)
    rel = pts - anchor
    dist = np.linalg.norm(rel, axis=1)
    if len(dist) and dist.max() > cfg.support_radius + 1e-9:
        raise ValueError("patch extends beyond the support radius of the anchor")
    if cfg.axis_alignment_enabled:
        axis = estimate_reference_axis(rel, cfg.viewpoint_array() - anchor)
        rot = minimal_rotation_to_z(axis)
    else:
        rot = np.eye(3)
    return AlignedPatch(points=rel @ rot.T, rotation=rot, anchor=anchor)


def voxel_rotation(l: int, azimuth_bins: int) -> np.ndarray:
    """Z rotation by pi/2 - 2*pi*l/L aligning bin l's center with +Y (1-based l)."""
    if not 1 <= l <= azimuth_bins:
        raise ValueError("azimuth index out of range")
    return rotation_about_z(np.pi / 2 - 2.0 * np.pi * l / azimuth_bins)


def voxel_centers(cfg: VolumeConfig) -> np.ndarray:
    """Cartesian bin centers, shape (J, K, L, 3)."""
    return _grid_for(cfg).centers


class _VoxelGrid:
    """Precomputed centers, center KD-tree, and per-azimuth rotations."""

    def __init__(self, shape, support_radius, voxel_radius):
        jj, kk, ll = shape
        rho = (np.arange(1, jj + 1) - 0.5) * support_radius / jj
        phi = -np.pi / 2 + (np.arange(1, kk + 1) - 0.5) * np.pi / kk
        theta = 2.0 * np.pi * np.arange(1, ll + 1) / ll
        r = rho[:, None, None]
        p = phi[None, :, None]
        t = theta[None, None, :]
        centers = np.stack(
            [
                r * np.cos(p) * np.cos(t),
                r * np.cos(p) * np.sin(t),
                r * np.sin(p) * np.ones_like(t),
            ],
            axis=-1,
        )
        self.shape = shape
        self.voxel_radius = voxel_radius
        self.centers = centers
        self.flat_centers = centers.reshape(-1, 3)
        self.tree = cKDTree(self.flat_centers)
        self.rotations = np.stack(
            [voxel_rotation(l, ll) for l in range(1, ll + 1)], axis=0
        )


@lru_cache(maxsize=32)
def _grid_cached(shape, support_radius, voxel_radius) -> _VoxelGrid:
    return _VoxelGrid(shape, support_radius, voxel_radius)


def _grid_for(cfg: VolumeConfig) -> _VoxelGrid:
    return _grid_cached(cfg.grid_shape, cfg.support_radius, cfg.voxel_radius)


@lru_cache(maxsize=4096)
def _sample_ranks(seed: int, count: int, keep: int) -> np.ndarray:
    """Deterministic choice of `keep` ranks out of `count` sorted candidates.

    Depends only on (seed, count, keep) so that voxels holding the same
    geometric point set sample the same ranks regardless of their azimuth
    index; this is what makes the volume exactly shift-equivariant.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, count, keep])))
    return np.sort(rng.choice(count, size=keep, replace=False))


def build_cylindrical_volume(aligned: AlignedPatch, cfg: VolumeConfig) -> CylindricalVolume:
    """Project an aligned patch into the cylindrical volume.

    Every voxel gathers the patch points within voxel_radius of its center
    (a point may appear in several voxels), sorts them by (distance to
    center, source index), keeps at most points_per_voxel via the seeded
    rank draw, and stores them rotated by the voxel's Z rotation (or raw
    when the XY transform is disabled). occupancy records the uncapped
    candidate counts; empty voxels have occupancy 0 and an empty slice.
    """
    grid = _grid_for(cfg)
    jj, kk, ll = cfg.grid_shape
    n_voxels = jj * kk * ll
    pts = aligned.points

    neighbor_lists = grid.tree.query_ball_point(pts, cfg.voxel_radius) if len(pts) else []
    counts = np.array([len(nb) for nb in neighbor_lists], dtype=np.intp)
    total = int(counts.sum())
    if total == 0:
        return CylindricalVolume(
            cfg.grid_shape,
            np.empty((0, 3)),
            np.zeros(n_voxels + 1, dtype=np.intp),
            np.zeros(cfg.grid_shape, dtype=np.intp),
            grid.centers,
            cfg,
        )

    pid = np.repeat(np.arange(len(pts), dtype=np.intp), counts)
    cid = np.concatenate([np.asarray(nb, dtype=np.intp) for nb in neighbor_lists if len(nb)])
    diff = pts[pid] - grid.flat_centers[cid]
    d2 = np.einsum("ij,ij->i", diff, diff)
    inside = d2 <= cfg.voxel_radius * cfg.voxel_radius
    pid, cid, d2 = pid[inside], cid[inside], d2[inside]

    order = np.lexsort((pid, d2, cid))
    pid, cid, d2 = pid[order], cid[order], d2[order]
    occupancy = np.bincount(cid, minlength=n_voxels).astype(np.intp)

    starts = np.concatenate([[0], np.cumsum(occupancy)])
    rank = np.arange(len(pid)) - starts[cid]
    keep = rank < cfg.points_per_voxel
    over = np.flatnonzero(occupancy > cfg.points_per_voxel)
    for f in over:
        ranks = _sample_ranks(cfg.sampling_seed, int(occupancy[f]), cfg.points_per_voxel)
        seg = slice(starts[f], starts[f + 1])
        mask = np.zeros(occupancy[f], dtype=bool)
        mask[ranks] = True
        keep[seg] = mask

    pid, cid = pid[keep], cid[keep]
    kept_counts = np.bincount(cid, minlength=n_voxels).astype(np.intp)
    offsets = np.concatenate([[0], np.cumsum(kept_counts)]).astype(np.intp)

    raw = pts[pid]
    if cfg.xy_transform_enabled:
        stored = np.einsum("pij,pj->pi", grid.rotations[cid % ll], raw)
    else:
        stored = raw.copy()

    return CylindricalVolume(cfg.grid_shape, stored, offsets, occupancy.reshape(cfg.grid_shape), grid.centers, cfg)


def volume_max_deviation(a: CylindricalVolume, b: CylindricalVolume) -> float:
    """Max per-coordinate deviation between two volumes (inf on layout mismatch)."""
    if a.grid_shape != b.grid_shape or not np.array_equal(a.offsets, b.offsets):
        return float("inf")
    if a.total_stored == 0:
        return 0.0
    return float(np.max(np.abs(a.stored_points - b.stored_points)))
