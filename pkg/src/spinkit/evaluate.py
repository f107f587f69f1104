"""Evaluation harness: descriptors -> correspondences -> pose -> metrics.

Shared by the CLI eval/register commands and the acceptance suite. Anchor
sets are independent seeded draws from each fragment, mirroring how the
matching-recall protocol samples its keypoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore
from .descriptor import DescriptorConfig, describe_volumes, extract_patch, patch_volume
from .errors import DegeneratePatch, EmptyVolume, NoConsensus
from .geometry import RigidTransform, SpatialIndex, as_points
from .registration import (
    CorrespondenceSet,
    EvalReport,
    EvalThresholds,
    PairReport,
    inlier_ratio,
    mutual_nn,
    pose_errors,
    ransac_register,
)

FORWARD_CHUNK = 64  # volumes per batched forward


def fragment_descriptors(
    cloud: np.ndarray,
    anchor_indices,
    desc_cfg: DescriptorConfig,
    params: ParamStore,
    budget: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched descriptors for anchor point indices of one fragment.

    Returns (descriptors, kept anchor indices); anchors with degenerate or
    empty patches are dropped.
    """
    pts = as_points(cloud)
    index = SpatialIndex(pts)
    volumes, kept = [], []
    for a in anchor_indices:
        try:
            patch = extract_patch(index, int(a), desc_cfg, budget, seed)
            volumes.append(patch_volume(patch, pts[a], desc_cfg))
            kept.append(int(a))
        except (DegeneratePatch, EmptyVolume):
            continue
    if not volumes:
        return np.empty((0, desc_cfg.output_dim)), np.array([], dtype=np.intp)
    chunks = [
        describe_volumes(volumes[i : i + FORWARD_CHUNK], desc_cfg, params)
        for i in range(0, len(volumes), FORWARD_CHUNK)
    ]
    return np.concatenate(chunks), np.asarray(kept, dtype=np.intp)


@dataclass
class PairEvaluation:
    """Everything measured for one fragment pair."""

    correspondences: CorrespondenceSet
    anchor_points_a: np.ndarray
    anchor_points_b: np.ndarray
    transform_gt: RigidTransform | None
    inlier_ratio: float
    matched: bool
    rre_deg: float | None = None
    rte: float | None = None
    success: bool | None = None
    estimate: RigidTransform | None = None
    note: str = ""

    def report(self) -> PairReport:
        return PairReport(
            inlier_ratio=self.inlier_ratio,
            matched=self.matched,
            rre_deg=self.rre_deg,
            rte=self.rte,
            success=self.success,
            note=self.note,
        )


def sample_eval_anchors(n_points: int, count: int, seed: int, tag: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, tag])))
    count = min(count, n_points)
    return np.sort(rng.choice(n_points, size=count, replace=False))


def evaluate_pair(
    frag_a: np.ndarray,
    frag_b: np.ndarray,
    gt: RigidTransform | None,
    desc_cfg: DescriptorConfig,
    params: ParamStore,
    thresholds: EvalThresholds,
    anchors_per_fragment: int = 256,
    budget: int = 2048,
    seed: int = 0,
    ransac_iterations: int = 2000,
) -> PairEvaluation:
    """Match one pair, register it, and score against the ground truth."""
    anchors_a = sample_eval_anchors(len(frag_a), anchors_per_fragment, seed, 11)
    anchors_b = sample_eval_anchors(len(frag_b), anchors_per_fragment, seed, 13)
    desc_a, kept_a = fragment_descriptors(frag_a, anchors_a, desc_cfg, params, budget, seed)
    desc_b, kept_b = fragment_descriptors(frag_b, anchors_b, desc_cfg, params, budget, seed)
    pts_a = as_points(frag_a)[kept_a] if len(kept_a) else np.empty((0, 3))
    pts_b = as_points(frag_b)[kept_b] if len(kept_b) else np.empty((0, 3))

    if len(desc_a) == 0 or len(desc_b) == 0:
        return PairEvaluation(
            CorrespondenceSet(np.empty((0, 2))), pts_a, pts_b, gt, 0.0, False,
            note="no valid anchors",
        )
    corr = mutual_nn(desc_a, desc_b)
    out = PairEvaluation(corr, pts_a, pts_b, gt, 0.0, False)
    if gt is not None:
        out.inlier_ratio = inlier_ratio(corr, gt, pts_a, pts_b, thresholds.inlier_distance)
        out.matched = out.inlier_ratio > thresholds.inlier_ratio
    if len(corr) >= 3:
        try:
            est, _ = ransac_register(
                pts_a, pts_b, corr,
                iterations=ransac_iterations,
                inlier_distance=thresholds.inlier_distance,
                seed=seed,
            )
            out.estimate = est
            if gt is not None:
                out.rre_deg, out.rte = pose_errors(est, gt)
                out.success = (out.rte < thresholds.rte_bound) and (
                    out.rre_deg < thresholds.rre_bound_deg
                )
        except NoConsensus:
            out.note = "no RANSAC consensus"
            out.success = False if gt is not None else None
    else:
        out.note = "too few correspondences"
        out.success = False if gt is not None else None
    return out


def evaluate_pairs(
    pair_data,
    desc_cfg: DescriptorConfig,
    params: ParamStore,
    thresholds: EvalThresholds,
    anchors_per_fragment: int = 256,
    budget: int = 2048,
    seed: int = 0,
    ransac_iterations: int = 2000,
) -> tuple[EvalReport, list[PairEvaluation]]:
    """Evaluate (frag_a, frag_b, gt_transform) triples into a report."""
    evaluations = []
    for i, (frag_a, frag_b, gt) in enumerate(pair_data):
        evaluations.append(
            evaluate_pair(
                frag_a, frag_b, gt, desc_cfg, params, thresholds,
                anchors_per_fragment=anchors_per_fragment,
                budget=budget,
                seed=int(np.random.SeedSequence([seed, 17, i]).generate_state(1)[0]),
                ransac_iterations=ransac_iterations,
            )
        )
    report = EvalReport([e.report() for e in evaluations], thresholds)
    return report, evaluations


def sweep_inputs(evaluations: list[PairEvaluation]):
    """Rows for fmr_threshold_sweep from completed evaluations."""
    return [
        (e.correspondences, e.transform_gt, e.anchor_points_a, e.anchor_points_b)
        for e in evaluations
        if e.transform_gt is not None
    ]
