"""Network layers bridging cylindrical volumes and the autodiff engine."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ConvSpec, ParamStore, Variable
from .errors import ShapeMismatch
from .volume import CylindricalVolume


def mlp_layer_names(params: ParamStore, prefix: str = "point_mlp") -> list[str]:
    names = []
    i = 0
    while f"{prefix}.{i}.weight" in params:
        names.append(f"{prefix}.{i}")
        i += 1
    return names


def _gather_volume_inputs(volumes: Sequence[CylindricalVolume], voxel_relative: bool):
    """Concatenate stored points of a batch of volumes with global offsets."""
    chunks = []
    offset_chunks = [np.zeros(1, dtype=np.intp)]
    base = 0
    for vol in volumes:
        pts = vol.stored_points
        if voxel_relative:
            lengths = vol.segment_lengths()
            centers = vol.centers.reshape(-1, 3)
            if vol.config is not None and vol.config.xy_transform_enabled:
                # Rotated center sits on the YZ-plane: (0, |xy|, z).
                ref = np.column_stack(
                    [
                        np.zeros(len(centers)),
                        np.hypot(centers[:, 0], centers[:, 1]),
                        centers[:, 2],
                    ]
                )
            else:
                ref = centers
            pts = pts - np.repeat(ref, lengths, axis=0)
        chunks.append(pts)
        offset_chunks.append(base + vol.offsets[1:])
        base += vol.total_stored
    points = np.concatenate(chunks) if chunks else np.empty((0, 3))
    offsets = np.concatenate(offset_chunks)
    return points, offsets


def point_layers_forward(
    volumes: CylindricalVolume | Sequence[CylindricalVolume],
    params: ParamStore,
    voxel_relative: bool = False,
) -> Variable:
    """Shared per-point MLP followed by a channelwise max over each voxel.

    The MLP weights (params "point_mlp.{i}.weight/bias") are shared across
    every voxel of every volume; empty voxels yield zero signatures. Returns
    a (J, K, L, D) map for a single volume or (B, J, K, L, D) for a batch.
    """
    single = isinstance(volumes, CylindricalVolume)
    batch = [volumes] if single else list(volumes)
    if not batch:
        raise ShapeMismatch("point_layers_forward needs at least one volume")
    shape = batch[0].grid_shape
    if any(v.grid_shape != shape for v in batch):
        raise ShapeMismatch("volumes in a batch must share the grid shape")
    layers = mlp_layer_names(params)
    if not layers:
        raise ShapeMismatch("no point_mlp parameters registered")
    if params[f"{layers[0]}.weight"].shape[0] != 3:
        raise ShapeMismatch("first point MLP layer must take 3-D inputs")

    points, offsets = _gather_volume_inputs(batch, voxel_relative)
    h = ad.constant(points)
    for name in layers:
        h = ad.relu(ad.add_bias(ad.matmul(h, params[f"{name}.weight"]), params[f"{name}.bias"]))
    pooled = ad.segment_max(h, offsets)
    d = pooled.shape[-1]
    out = ad.reshape(pooled, (len(batch),) + shape + (d,))
    return ad.reshape(out, shape + (d,)) if single else out


def density_signature(
    volumes: CylindricalVolume | Sequence[CylindricalVolume],
) -> Variable:
    """Per-voxel candidate count as a 1-channel feature map (ablation path)."""
    single = isinstance(volumes, CylindricalVolume)
    batch = [volumes] if single else list(volumes)
    maps = np.stack([v.occupancy.astype(np.float64) for v in batch])[..., None]
    out = ad.constant(maps)
    return ad.reshape(out, out.shape[1:]) if single else out


def cyl_conv_forward(
    feature_map: Variable, spec: ConvSpec, params: ParamStore, name: str
) -> Variable:
    """One cylindrical convolution layer using the named weight tensor."""
    return ad.cyl_conv(feature_map, params[f"{name}.weight"], spec)


def global_maxpool(feature_map: Variable) -> Variable:
    return ad.global_maxpool(feature_map)
