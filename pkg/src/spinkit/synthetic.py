"""Seeded synthetic-scene generator for desk-scale training and evaluation.

Scenes are unions of primitive surfaces (planes, spheres, boxes, cylinders)
placed in a box a couple of meters in front of the origin, which plays the
role of the sensor viewpoint. A fragment pair shares an overlap band of the
scene; fragment B reuses the overlap points of A (so exact correspondences
exist), tops up with fresh surface samples, and moves through the pair's
rigid transform plus Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidTransform

SCENE_CENTER = np.array([0.0, 0.0, 2.5])
SCENE_EXTENT = 1.8  # edge length of the box that holds the primitives


@dataclass(frozen=True)
class SyntheticSceneSpec:
    seed: int = 0
    planes: int = 2
    spheres: int = 2
    boxes: int = 1
    cylinders: int = 1
    points_per_fragment: int = 2000
    overlap: float = 0.5
    noise_sigma: float = 0.0
    density_variation: float = 0.0
    rotation_deg_range: tuple[float, float] = (10.0, 180.0)
    translation_range: tuple[float, float] = (0.05, 0.3)
    # Amplitude of the smooth displacement field riding on every surface.
    # Bare primitives are locally interchangeable (any plane patch looks
    # like any other), which no local descriptor can disambiguate; the
    # waves give patches distinctive curvature signatures like real scans.
    waviness: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.overlap <= 1.0:
            raise ValueError("overlap target must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.planes + self.spheres + self.boxes + self.cylinders < 1:
            raise ValueError("need at least one primitive")


@dataclass
class _Primitive:
    kind: str
    area: float
    sampler: object = field(repr=False)


def _frame(rng) -> np.ndarray:
    m = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(m)
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def _make_wave_field(spec: SyntheticSceneSpec, rng):
    """Smooth multi-scale scalar displacement field over scene coordinates.

    Wavelengths span coarse structure down to a few point spacings so that
    nearby patches differ; amplitudes shrink with wavelength to keep short
    waves gentle relative to the geometry.
    """
    n_waves = 7
    lengths = np.exp(rng.uniform(np.log(0.1), np.log(0.7), size=n_waves))
    amps = spec.waviness * np.sqrt(lengths / 0.7) * rng.uniform(0.5, 1.0, size=n_waves)
    dirs = rng.standard_normal((n_waves, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    kvecs = dirs * (2 * np.pi / lengths)[:, None]
    phases = rng.uniform(0, 2 * np.pi, size=n_waves)

    def field(points):
        return np.sum(amps * np.sin(points @ kvecs.T + phases), axis=1)

    return field


def _make_primitives(spec: SyntheticSceneSpec, rng) -> list[_Primitive]:
    """Primitive samplers returning (points, outward normals)."""
    prims: list[_Primitive] = []
    half = SCENE_EXTENT / 2

    def center():
        return SCENE_CENTER + rng.uniform(-half * 0.8, half * 0.8, size=3)

    for _ in range(spec.planes):
        c, fr = center(), _frame(rng)
        a, b = rng.uniform(0.4, 0.9, size=2)

        def sample(n, c=c, fr=fr, a=a, b=b):
            uv = rng.uniform(-1, 1, size=(n, 2)) * [a, b]
            pts = c + uv[:, :1] * fr[:, 0] + uv[:, 1:] * fr[:, 1]
            return pts, np.broadcast_to(fr[:, 2], (n, 3))

        prims.append(_Primitive("plane", 4 * a * b, sample))
    for _ in range(spec.spheres):
        c = center()
        r = rng.uniform(0.15, 0.4)

        def sample(n, c=c, r=r):
            d = rng.standard_normal((n, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            return c + r * d, d

        prims.append(_Primitive("sphere", 4 * np.pi * r * r, sample))
    for _ in range(spec.boxes):
        c, fr = center(), _frame(rng)
        ext = rng.uniform(0.2, 0.5, size=3)
        faces = []
        for axis in range(3):
            u, v = fr[:, (axis + 1) % 3] * ext[(axis + 1) % 3], fr[:, (axis + 2) % 3] * ext[(axis + 2) % 3]
            area = 4 * ext[(axis + 1) % 3] * ext[(axis + 2) % 3]
            for sign in (-1, 1):
                faces.append((c + sign * fr[:, axis] * ext[axis], u, v, sign * fr[:, axis], area))
        total = sum(f[4] for f in faces)
        weights = np.array([f[4] for f in faces]) / total

        def sample(n, faces=faces, weights=weights):
            picks = rng.choice(len(faces), size=n, p=weights)
            uv = rng.uniform(-1, 1, size=(n, 2))
            pts = np.empty((n, 3))
            normals = np.empty((n, 3))
            for i, f in enumerate(faces):
                m = picks == i
                pts[m] = f[0] + uv[m, :1] * f[1] + uv[m, 1:] * f[2]
                normals[m] = f[3]
            return pts, normals

        prims.append(_Primitive("box", total, sample))
    for _ in range(spec.cylinders):
        c, fr = center(), _frame(rng)
        r, h = rng.uniform(0.1, 0.3), rng.uniform(0.4, 0.9)

        def sample(n, c=c, fr=fr, r=r, h=h):
            theta = rng.uniform(0, 2 * np.pi, size=n)
            z = rng.uniform(-h / 2, h / 2, size=n)
            radial = np.cos(theta)[:, None] * fr[:, 0] + np.sin(theta)[:, None] * fr[:, 1]
            return c + r * radial + z[:, None] * fr[:, 2], radial

        prims.append(_Primitive("cylinder", 2 * np.pi * r * h, sample))
    return prims


def _sample_surface(prims, wave_field, rng, n, weights=None) -> np.ndarray:
    areas = np.array([p.area for p in prims])
    if weights is not None:
        areas = areas * weights
    probs = areas / areas.sum()
    counts = rng.multinomial(n, probs)
    chunks = []
    for p, c in zip(prims, counts):
        if not c:
            continue
        pts, normals = p.sampler(c)
        chunks.append(pts + wave_field(pts)[:, None] * normals)
    return np.concatenate(chunks) if chunks else np.empty((0, 3))


def _random_transform(spec: SyntheticSceneSpec, rng) -> RigidTransform:
    angle = np.deg2rad(rng.uniform(*spec.rotation_deg_range))
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    # Rodrigues rotation about the random axis.
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    rot = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    translation = direction * rng.uniform(*spec.translation_range)
    return RigidTransform(rot, translation)


def synth_pair(spec: SyntheticSceneSpec):
    """Generate a fragment pair.

    Returns (frag_a, frag_b, transform, overlap_mask): frag_a and frag_b
    hold points_per_fragment rows each; transform maps A coordinates onto B
    coordinates; overlap_mask marks the A rows whose exact correspondent
    (up to the noise) exists somewhere in B.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed])))
    prims = _make_primitives(spec, rng)
    wave_field = _make_wave_field(spec, rng)
    ppf = spec.points_per_fragment

    frag_a = _sample_surface(prims, wave_field, rng, ppf)
    # Overlap band: the slab above the (1 - overlap) quantile along a seeded
    # scene direction; exactly round(overlap * ppf) A points fall inside.
    band_dir = rng.standard_normal(3)
    band_dir /= np.linalg.norm(band_dir)
    coords = frag_a @ band_dir
    n_ov = int(round(spec.overlap * ppf))
    order = np.argsort(coords, kind="stable")
    mask = np.zeros(ppf, dtype=bool)
    mask[order[ppf - n_ov :]] = True
    threshold = coords[order[ppf - n_ov]] if n_ov else np.inf

    shared = frag_a[mask]
    fresh_needed = ppf - n_ov
    fresh = np.empty((0, 3))
    if fresh_needed:
        weights = np.exp(spec.density_variation * rng.uniform(-1.0, 1.0, size=len(prims)))
        chunks = []
        got = 0
        while got < fresh_needed:
            cand = _sample_surface(prims, wave_field, rng, max(4 * fresh_needed, 256), weights)
            keep = cand[cand @ band_dir >= threshold]
            chunks.append(keep)
            got += len(keep)
        fresh = np.concatenate(chunks)[:fresh_needed]

    transform = _random_transform(spec, rng)
    b_scene = np.vstack([shared, fresh])
    b_scene = b_scene[rng.permutation(ppf)]
    frag_b = b_scene @ transform.rotation.T + transform.translation
    if spec.noise_sigma > 0:
        frag_b = frag_b + rng.normal(scale=spec.noise_sigma, size=frag_b.shape)
    return frag_a, frag_b, transform, mask


def random_surface_patch(rng, n: int = 400, radius: float = 0.3) -> np.ndarray:
    """Smooth quadratic surface patch inside a ball around the origin.

    The workhorse input for equivariance and invariance property checks:
    low-frequency geometry with a stable covariance axis.
    """
    xy = rng.uniform(-0.75, 0.75, size=(n, 2)) * radius
    c = rng.uniform(-1.5, 1.5, size=5)
    z = (
        c[0] * xy[:, 0] ** 2 + c[1] * xy[:, 0] * xy[:, 1] + c[2] * xy[:, 1] ** 2
    ) / radius + 0.15 * (c[3] * xy[:, 0] + c[4] * xy[:, 1])
    pts = np.column_stack([xy, z])
    return pts[np.linalg.norm(pts, axis=1) <= radius]


def rotated_copy(points, transform: RigidTransform, rng) -> tuple[np.ndarray, RigidTransform]:
    """Apply an extra uniform rotation about the origin to a fragment.

    Rotating about the origin keeps the sensor viewpoint fixed, so this is
    the rotated-benchmark protocol: returns the rotated points and the
    updated ground-truth transform.
    """
    from .geometry import random_rotation

    extra = random_rotation(rng)
    rotated = points @ extra.T
    new_t = RigidTransform(extra @ transform.rotation, extra @ transform.translation)
    return rotated, new_t
