"""Rigid-motion algebra, spatial search, and least-squares alignment.

Point clouds are plain ``(N, 3)`` float64 arrays throughout; the row order
is stable and meaningful (indices identify points for correspondences).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateConfiguration

ORTHONORMAL_TOL = 1e-9


def as_points(points) -> np.ndarray:
    """Coerce input to a C-contiguous (N, 3) float64 array of finite values."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) point array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion: x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(rot) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation determinant is not +1 within 1e-9")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidTransform":
        rot_inv = self.rotation.T
        return RigidTransform(rot_inv, -rot_inv @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self ∘ other)(x) = self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


def apply_transform(transform: RigidTransform, points: np.ndarray) -> np.ndarray:
    """Apply a rigid motion to every point, preserving row order."""
    pts = as_points(points)
    return pts @ transform.rotation.T + transform.translation


def rotation_about_z(angle: float) -> np.ndarray:
    """Right-handed rotation about the +Z axis by `angle` radians."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def minimal_rotation_to_z(axis: np.ndarray) -> np.ndarray:
    """Minimal-angle rotation taking the unit vector `axis` onto (0, 0, 1).

    Rotates about axis x ẑ. The antipodal input (0, 0, -1) has no minimal
    choice; by convention it maps through a 180 degree rotation about X.
    """
    a = np.asarray(axis, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(a)
    if abs(norm - 1.0) > ORTHONORMAL_TOL:
        raise ValueError("axis must be unit length within 1e-9")
    a = a / norm
    c = a[2]
    if 1.0 + c < 1e-12:
        return np.diag([1.0, -1.0, -1.0])
    # cross = a x z_hat; R = I + [cross]_x + [cross]_x^2 / (1 + c)
    cx, cy = a[1], -a[0]
    k = np.array([[0.0, 0.0, cy], [0.0, 0.0, -cx], [-cy, cx, 0.0]])
    return np.eye(3) + k + (k @ k) / (1.0 + c)


def kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid alignment of matched point rows (src[i] <-> dst[i]).

    Returns the transform minimizing sum ||dst_i - (R src_i + t)||^2. A
    reflection in the optimum is corrected by flipping the sign of the
    smallest singular vector.

    Raises DegenerateConfiguration when the centered cross-covariance has
    rank < 2 (e.g. collinear points), which leaves the rotation ambiguous.
    """
    s = as_points(src)
    d = as_points(dst)
    if s.shape != d.shape or len(s) < 3:
        raise ValueError("kabsch needs matched point sets with >= 3 rows")
    centroid_s = s.mean(axis=0)
    centroid_d = d.mean(axis=0)
    h = (s - centroid_s).T @ (d - centroid_d)
    u, sigma, vt = np.linalg.svd(h)
    if sigma[1] <= max(sigma[0], 1.0) * 1e-12:
        raise DegenerateConfiguration("cross-covariance rank < 2")
    sign = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, sign]) @ u.T
    return RigidTransform(rot, centroid_d - rot @ centroid_s)


def alignment_residual(transform: RigidTransform, src, dst) -> float:
    """Root-mean-square residual of dst against the transformed src."""
    moved = apply_transform(transform, src)
    return float(np.sqrt(np.mean(np.sum((as_points(dst) - moved) ** 2, axis=1))))


@dataclass
class SpatialIndex:
    """Radius-query structure over a fixed cloud.

    Results are defined by the linear-scan contract: exactly the source
    indices within the (inclusive) radius, in ascending index order.
    """

    points: np.ndarray
    _tree: cKDTree = field(repr=False, default=None)

    def __post_init__(self):
        self.points = as_points(self.points)
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def radius_query(self, center, radius: float) -> np.ndarray:
        """Indices i with ||points[i] - center|| <= radius, ascending."""
        if radius < 0:
            raise ValueError("radius must be >= 0")
        idx = self._tree.query_ball_point(np.asarray(center, dtype=np.float64), radius)
        idx = np.asarray(sorted(idx), dtype=np.intp)
        if len(idx) == 0:
            return idx
        # Own the boundary arithmetic: keep d^2 <= r^2 under our evaluation.
        d2 = np.sum((self.points[idx] - np.asarray(center, dtype=np.float64)) ** 2, axis=1)
        return idx[d2 <= radius * radius]

    def radius_query_many(self, centers: np.ndarray, radius: float) -> list[np.ndarray]:
        """Vectorized radius_query for a batch of centers."""
        if radius < 0:
            raise ValueError("radius must be >= 0")
        centers = as_points(centers)
        raw = self._tree.query_ball_point(centers, radius)
        out = []
        r2 = radius * radius
        for center, idx in zip(centers, raw):
            idx = np.asarray(sorted(idx), dtype=np.intp)
            if len(idx):
                d2 = np.sum((self.points[idx] - center) ** 2, axis=1)
                idx = idx[d2 <= r2]
            out.append(idx)
        return out

    def nearest(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest source index and distance for each query point."""
        dist, idx = self._tree.query(as_points(queries), k=1)
        return np.asarray(idx, dtype=np.intp), np.asarray(dist, dtype=np.float64)


def radius_query(index: SpatialIndex, center, radius: float) -> np.ndarray:
    return index.radius_query(center, radius)


def median_spacing(points: np.ndarray) -> float:
    """Median nearest-neighbor distance of a cloud."""
    pts = as_points(points)
    if len(pts) < 2:
        raise ValueError("need at least two points")
    dist, _ = cKDTree(pts).query(pts, k=2)
    return float(np.median(dist[:, 1]))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix (QR of a Gaussian, sign-fixed)."""
    m = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(m)
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q
