"""Full descriptor pipeline: local patch -> compact rotation-invariant vector.

describe() chains patch alignment, cylindrical voxelization, the shared
point MLP (or the density-count ablation), the cylindrical convolution
stack, global max pooling, and optional L2 normalization. The azimuth
periodicity of the convolutions plus the final pooling is what turns the
volume's shift equivariance into rotation invariance of the output.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ConvSpec, ParamStore, Variable
from .errors import DegeneratePatch, EmptyVolume, ShapeMismatch
from .geometry import SpatialIndex, as_points
from .layers import density_signature, point_layers_forward
from .volume import CylindricalVolume, VolumeConfig, align_patch, build_cylindrical_volume

MAX_CHANNELS = 128

DEFAULT_CONV_STACK = (
    ConvSpec(32, 64, (3, 3, 3), (1, 1, 2)),
    ConvSpec(64, 128, (3, 3, 3), (1, 2, 2)),
    ConvSpec(128, 128, (3, 3, 3), (1, 1, 1)),
    ConvSpec(128, 32, (1, 1, 1), (1, 1, 1)),
)


@dataclass(frozen=True)
class DescriptorConfig:
    """Architecture and ablation switches of the descriptor network."""

    volume: VolumeConfig = field(default_factory=VolumeConfig)
    point_mlp_widths: tuple[int, ...] = (16, 32)
    conv_stack: tuple[ConvSpec, ...] = DEFAULT_CONV_STACK
    l2_normalize: bool = True
    density_signature: bool = False
    voxel_relative_coords: bool = False

    def __post_init__(self):
        if not self.conv_stack:
            raise ValueError("conv stack must not be empty")
        widths = list(self.point_mlp_widths)
        if not self.density_signature and not widths:
            raise ValueError("point MLP needs at least one layer")
        first_in = 1 if self.density_signature else widths[-1]
        if self.conv_stack[0].in_channels != first_in:
            raise ShapeMismatch(
                f"first conv expects {self.conv_stack[0].in_channels} channels, "
                f"feature signature provides {first_in}"
            )
        for a, b in zip(self.conv_stack, self.conv_stack[1:]):
            if a.out_channels != b.in_channels:
                raise ShapeMismatch("conv stack channel chain is inconsistent")
        for ch in widths + [s.out_channels for s in self.conv_stack]:
            if ch > MAX_CHANNELS:
                raise ValueError(f"channel count {ch} exceeds the {MAX_CHANNELS} cap")
        # The conv stack must fit the grid.
        self.output_spatial()

    @property
    def output_dim(self) -> int:
        return self.conv_stack[-1].out_channels

    def output_spatial(self) -> tuple[int, int, int]:
        spatial = self.volume.grid_shape
        for spec in self.conv_stack:
            spatial = spec.output_spatial(spatial)
        return spatial

    def azimuth_stride_product(self) -> int:
        """Smallest azimuth shift (in bins) with exact descriptor invariance."""
        prod = 1
        for spec in self.conv_stack:
            prod *= spec.stride[2]
        return prod

    @classmethod
    def desk_scale(cls, support_radius: float = 0.3, seed: int = 0) -> "DescriptorConfig":
        """Small CPU-friendly network used by the CLI defaults and CI."""
        vol = VolumeConfig(
            support_radius=support_radius,
            radial_bins=4,
            elevation_bins=10,
            azimuth_bins=24,
            voxel_radius=support_radius / 4.0,
            points_per_voxel=24,
            sampling_seed=seed,
        )
        return cls(
            volume=vol,
            point_mlp_widths=(16, 32),
            conv_stack=(
                ConvSpec(32, 48, (2, 3, 3), (1, 1, 2)),
                ConvSpec(48, 64, (2, 2, 3), (1, 1, 1)),
                ConvSpec(64, 32, (1, 1, 1), (1, 1, 1)),
            ),
        )


def ablate(cfg: DescriptorConfig, name: str) -> DescriptorConfig:
    """Named ablations of the full model.

    no-axis     drop the reference-axis alignment
    no-xy       drop the per-voxel XY-plane rotation
    density     per-voxel point counts instead of learned point features
    mlp-conv    per-voxel shared MLPs (1x1x1 kernels) instead of the conv stack
    """
    if name == "no-axis":
        return replace(cfg, volume=replace(cfg.volume, axis_alignment_enabled=False))
    if name == "no-xy":
        return replace(cfg, volume=replace(cfg.volume, xy_transform_enabled=False))
    if name == "density":
        stack = (replace(cfg.conv_stack[0], in_channels=1),) + cfg.conv_stack[1:]
        return replace(cfg, density_signature=True, conv_stack=stack)
    if name == "mlp-conv":
        # Same number of layers, 1x1x1 kernels; interior widths scaled up
        # toward parameter parity, capped by the channel limit.
        factor = np.sqrt(
            np.mean([np.prod(s.kernel) for s in cfg.conv_stack])
        )
        widths = [cfg.conv_stack[0].in_channels]
        for spec in cfg.conv_stack[:-1]:
            widths.append(min(MAX_CHANNELS, int(round(spec.out_channels * factor))))
        widths.append(cfg.conv_stack[-1].out_channels)
        stack = tuple(
            ConvSpec(widths[i], widths[i + 1], (1, 1, 1), (1, 1, 1))
            for i in range(len(cfg.conv_stack))
        )
        return replace(cfg, conv_stack=stack)
    raise ValueError(f"unknown ablation {name!r}")


def init_descriptor_params(cfg: DescriptorConfig, seed: int = 0) -> ParamStore:
    """Seeded He-style initialization of every network parameter."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    store = ParamStore()
    if not cfg.density_signature:
        fan_in = 3
        for i, width in enumerate(cfg.point_mlp_widths):
            std = np.sqrt(2.0 / fan_in)
            store.add(f"point_mlp.{i}.weight", rng.normal(scale=std, size=(fan_in, width)))
            store.add(f"point_mlp.{i}.bias", np.zeros(width))
            fan_in = width
    for i, spec in enumerate(cfg.conv_stack):
        fan_in = int(np.prod(spec.kernel)) * spec.in_channels
        std = np.sqrt(2.0 / fan_in)
        store.add(f"conv.{i}.weight", rng.normal(scale=std, size=spec.weight_shape))
    return store


def descriptor_graph(
    volumes: Sequence[CylindricalVolume], cfg: DescriptorConfig, params: ParamStore
) -> Variable:
    """Differentiable network forward over a batch of volumes -> (B, D)."""
    if cfg.density_signature:
        fm = density_signature(list(volumes))
    else:
        fm = point_layers_forward(list(volumes), params, cfg.voxel_relative_coords)
    last = len(cfg.conv_stack) - 1
    for i, spec in enumerate(cfg.conv_stack):
        fm = ad.cyl_conv(fm, params[f"conv.{i}.weight"], spec)
        if i < last:
            fm = ad.relu(fm)
    desc = ad.global_maxpool(fm)
    if cfg.l2_normalize:
        desc = ad.l2_normalize_rows(desc)
    return desc


def patch_volume(patch: np.ndarray, anchor, cfg: DescriptorConfig) -> CylindricalVolume:
    """Align a patch and build its cylindrical volume; reject empty volumes."""
    pts = as_points(patch)
    if len(pts) < 3:
        raise DegeneratePatch("patch needs at least 3 points")
    aligned = align_patch(pts, anchor, cfg.volume)
    vol = build_cylindrical_volume(aligned, cfg.volume)
    if vol.total_stored == 0:
        raise EmptyVolume("no patch point falls inside any voxel")
    return vol


def describe(patch: np.ndarray, anchor, cfg: DescriptorConfig, params: ParamStore) -> np.ndarray:
    """Descriptor of a single anchor-centered patch."""
    vol = patch_volume(patch, anchor, cfg)
    return descriptor_graph([vol], cfg, params).value[0]


def describe_volumes(
    volumes: Sequence[CylindricalVolume], cfg: DescriptorConfig, params: ParamStore
) -> np.ndarray:
    """Forward-only batched descriptors for prebuilt volumes, shape (B, D)."""
    return descriptor_graph(list(volumes), cfg, params).value


@dataclass
class BatchDescriptors:
    """Per-anchor descriptors with skipped anchors flagged, order preserved."""

    descriptors: list[np.ndarray | None]
    skipped: list[tuple[int, str]]

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """Descriptors of the non-skipped anchors plus their list positions."""
        kept = [i for i, d in enumerate(self.descriptors) if d is not None]
        if not kept:
            dim = 0
            return np.empty((0, dim)), np.array([], dtype=np.intp)
        return np.stack([self.descriptors[i] for i in kept]), np.asarray(kept, dtype=np.intp)


def extract_patch(
    index: SpatialIndex, anchor_idx: int, cfg: DescriptorConfig, budget: int, seed: int
) -> np.ndarray:
    """Support points of an anchor, subsampled to the point budget (seeded)."""
    anchor = index.points[anchor_idx]
    support = index.radius_query(anchor, cfg.volume.support_radius)
    if len(support) > budget:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, int(anchor_idx)])))
        support = support[np.sort(rng.choice(len(support), size=budget, replace=False))]
    return index.points[support]


def describe_batch(
    cloud: np.ndarray,
    anchors: Sequence[int],
    cfg: DescriptorConfig,
    params: ParamStore,
    budget: int = 2048,
    seed: int = 0,
    threads: int = 1,
) -> BatchDescriptors:
    """Describe anchor points of a cloud; degenerate anchors are flagged, not fatal."""
    pts = as_points(cloud)
    index = SpatialIndex(pts)
    anchors = [int(a) for a in anchors]
    for a in anchors:
        if not 0 <= a < len(pts):
            raise IndexError(f"anchor index {a} out of range")

    def one(anchor_idx: int) -> np.ndarray:
        patch = extract_patch(index, anchor_idx, cfg, budget, seed)
        return describe(patch, pts[anchor_idx], cfg, params)

    results: list[np.ndarray | None] = [None] * len(anchors)
    skipped: list[tuple[int, str]] = []
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(one, a) for a in anchors]
            for pos, fut in enumerate(futures):
                try:
                    results[pos] = fut.result()
                except (DegeneratePatch, EmptyVolume) as exc:
                    skipped.append((pos, type(exc).__name__))
    else:
        for pos, a in enumerate(anchors):
            try:
                results[pos] = one(a)
            except (DegeneratePatch, EmptyVolume) as exc:
                skipped.append((pos, type(exc).__name__))
    return BatchDescriptors(results, skipped)
