"""Rotation-invariant local 3D surface descriptors and registration tools."""

from .autodiff import ConvSpec, ParamStore, Variable, backward
from .descriptor import (
    BatchDescriptors,
    DescriptorConfig,
    ablate,
    describe,
    describe_batch,
    describe_volumes,
    init_descriptor_params,
)
from .errors import (
    BatchTooSmall,
    DegenerateConfiguration,
    DegeneratePatch,
    EmptyVolume,
    InsufficientOverlap,
    MagicMismatch,
    NoConsensus,
    NoForwardRecorded,
    ParseError,
    ShapeMismatch,
    SpinKitError,
)
from .evaluate import evaluate_pair, evaluate_pairs, fragment_descriptors
from .geometry import (
    RigidTransform,
    SpatialIndex,
    apply_transform,
    kabsch,
    median_spacing,
    minimal_rotation_to_z,
    radius_query,
    rotation_about_z,
)
from .io import (
    PairEntry,
    read_cloud,
    read_descriptors,
    read_manifest,
    write_cloud,
    write_descriptors,
    write_manifest,
)
from .registration import (
    CorrespondenceSet,
    EvalThresholds,
    feature_matching_recall,
    mutual_nn,
    pose_errors,
    ransac_register,
    success_rate,
)
from .synthetic import SyntheticSceneSpec, random_surface_patch, rotated_copy, synth_pair
from .training import TrainConfig, hardest_contrastive_loss, sample_anchor_pairs, train
from .volume import (
    AlignedPatch,
    CylindricalVolume,
    VolumeConfig,
    align_patch,
    build_cylindrical_volume,
    estimate_reference_axis,
    voxel_centers,
    voxel_rotation,
)

__version__ = "0.1.0"
