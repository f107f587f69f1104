"""Descriptor matching and registration evaluation.

Implements mutual-nearest-neighbor correspondence selection, inlier-ratio
based feature matching recall, seeded RANSAC rigid estimation with a Kabsch
refit, rotation/translation pose errors, and the success-rate aggregate,
plus JSON/CSV report writers for the evaluation harness.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration, NoConsensus
from .geometry import RigidTransform, apply_transform, as_points, kabsch


@dataclass(frozen=True)
class EvalThresholds:
    """Inlier and success thresholds used across the evaluation metrics."""

    inlier_distance: float = 0.10
    inlier_ratio: float = 0.05
    rte_bound: float = 2.0
    rre_bound_deg: float = 5.0

    def __post_init__(self):
        if min(self.inlier_distance, self.inlier_ratio, self.rte_bound, self.rre_bound_deg) <= 0:
            raise ValueError("all thresholds must be positive")


@dataclass
class CorrespondenceSet:
    """Index pairs (i in A, j in B) with optional descriptor distances."""

    pairs: np.ndarray
    distances: np.ndarray | None = None

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.intp).reshape(-1, 2)
        if self.distances is not None:
            self.distances = np.asarray(self.distances, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.pairs)


def mutual_nn(desc_a: np.ndarray, desc_b: np.ndarray) -> CorrespondenceSet:
    """Keep (i, j) only when each descriptor is the other's nearest neighbor.

    Nearest-neighbor ties break toward the lower index on both sides.
    """
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("descriptor sets must be (N, D) and (M, D)")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("descriptor sets must be non-empty")
    diff = a[:, None, :] - b[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    nn_b = np.argmin(dist, axis=1)  # first occurrence wins ties
    nn_a = np.argmin(dist, axis=0)
    keep = np.flatnonzero(nn_a[nn_b] == np.arange(len(a)))
    pairs = np.column_stack([keep, nn_b[keep]])
    return CorrespondenceSet(pairs, dist[keep, nn_b[keep]])


def inlier_ratio(
    corr: CorrespondenceSet,
    transform: RigidTransform,
    points_a: np.ndarray,
    points_b: np.ndarray,
    inlier_distance: float,
) -> float:
    """Fraction of correspondences within the distance bound under the transform."""
    if len(corr) == 0:
        return 0.0
    moved = apply_transform(transform, as_points(points_a)[corr.pairs[:, 0]])
    target = as_points(points_b)[corr.pairs[:, 1]]
    dist = np.linalg.norm(moved - target, axis=1)
    return float(np.mean(dist < inlier_distance))


def feature_matching_recall(pair_results, thresholds: EvalThresholds):
    """Feature matching recall over fragment pairs.

    pair_results is a list of (correspondences, ground-truth transform,
    anchor points A, anchor points B). A pair counts as matched when its
    inlier ratio strictly exceeds the ratio threshold; pairs with no
    correspondences are flagged and count as non-matching. Returns
    (fmr, per-pair ratios, per-pair matched flags, empty-pair positions).
    """
    if not pair_results:
        raise ValueError("need at least one fragment pair")
    ratios, matched, empty = [], [], []
    for pos, (corr, transform, pts_a, pts_b) in enumerate(pair_results):
        if len(corr) == 0:
            empty.append(pos)
            ratios.append(0.0)
            matched.append(False)
            continue
        ratio = inlier_ratio(corr, transform, pts_a, pts_b, thresholds.inlier_distance)
        ratios.append(ratio)
        matched.append(ratio > thresholds.inlier_ratio)
    fmr = float(np.mean(matched))
    return fmr, np.asarray(ratios), np.asarray(matched), empty


def ransac_register(
    points_a: np.ndarray,
    points_b: np.ndarray,
    corr: CorrespondenceSet,
    iterations: int = 50000,
    inlier_distance: float = 0.10,
    seed: int = 0,
):
    """Robust rigid estimation from putative correspondences.

    Draws seeded 3-subsets, fits each with Kabsch, scores by inlier count
    (distance <= inlier_distance), keeps the best hypothesis (ties keep the
    earliest), and refits on its inlier set. Raises NoConsensus when no
    hypothesis reaches 3 inliers.
    """
    if len(corr) < 3:
        raise ValueError("need at least 3 correspondences")
    pts_a = as_points(points_a)[corr.pairs[:, 0]]
    pts_b = as_points(points_b)[corr.pairs[:, 1]]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    best_count = 0
    best_inliers = None
    for _ in range(iterations):
        pick = rng.choice(len(pts_a), size=3, replace=False)
        try:
            hyp = kabsch(pts_a[pick], pts_b[pick])
        except DegenerateConfiguration:
            continue
        dist = np.linalg.norm(apply_transform(hyp, pts_a) - pts_b, axis=1)
        inliers = dist <= inlier_distance
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
    if best_count < 3 or best_inliers is None:
        raise NoConsensus(f"best hypothesis had {best_count} inliers")
    idx = np.flatnonzero(best_inliers)
    try:
        refined = kabsch(pts_a[idx], pts_b[idx])
    except DegenerateConfiguration:
        refined = kabsch(pts_a[idx[:3]], pts_b[idx[:3]])
    return refined, idx


def pose_errors(estimate: RigidTransform, truth: RigidTransform) -> tuple[float, float]:
    """(rotation error in degrees, translation error in meters)."""
    trace = float(np.trace(estimate.rotation.T @ truth.rotation))
    arg = np.clip((trace - 1.0) / 2.0, -1.0, 1.0)
    rre = float(np.degrees(np.arccos(arg)))
    rte = float(np.linalg.norm(estimate.translation - truth.translation))
    return rre, rte


def success_rate(errors, thresholds: EvalThresholds) -> float:
    """Fraction of (rre_deg, rte) entries strictly inside both bounds."""
    errors = list(errors)
    if not errors:
        raise ValueError("need at least one registration result")
    hits = [
        (rte < thresholds.rte_bound) and (rre < thresholds.rre_bound_deg)
        for rre, rte in errors
    ]
    return float(np.mean(hits))


@dataclass
class PairReport:
    inlier_ratio: float
    matched: bool
    rre_deg: float | None = None
    rte: float | None = None
    success: bool | None = None
    note: str = ""


@dataclass
class EvalReport:
    """Per-pair rows plus the aggregate metrics, serializable to JSON/CSV."""

    pairs: list[PairReport] = field(default_factory=list)
    thresholds: EvalThresholds = field(default_factory=EvalThresholds)

    def aggregates(self) -> dict:
        fmr = float(np.mean([p.matched for p in self.pairs])) if self.pairs else 0.0
        rres = [p.rre_deg for p in self.pairs if p.rre_deg is not None]
        rtes = [p.rte for p in self.pairs if p.rte is not None]
        successes = [bool(p.success) for p in self.pairs]
        out = {
            "fmr": fmr,
            "success_rate": float(np.mean(successes)) if successes else 0.0,
            "rre_mean": float(np.mean(rres)) if rres else None,
            "rre_std": float(np.std(rres)) if rres else None,
            "rte_mean": float(np.mean(rtes)) if rtes else None,
            "rte_std": float(np.std(rtes)) if rtes else None,
        }
        return out

    def to_json(self, path) -> None:
        payload = {
            "thresholds": {
                "inlier_distance": self.thresholds.inlier_distance,
                "inlier_ratio": self.thresholds.inlier_ratio,
                "rte_bound": self.thresholds.rte_bound,
                "rre_bound_deg": self.thresholds.rre_bound_deg,
            },
            "pairs": [
                {
                    "inlier_ratio": p.inlier_ratio,
                    "matched": p.matched,
                    "rre_deg": p.rre_deg,
                    "rte": p.rte,
                    "success": p.success,
                    "note": p.note,
                }
                for p in self.pairs
            ],
            "aggregates": self.aggregates(),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pair", "inlier_ratio", "matched", "rre_deg", "rte", "success", "note"])
            for i, p in enumerate(self.pairs):
                writer.writerow(
                    [i, repr(p.inlier_ratio), int(p.matched), p.rre_deg, p.rte, p.success, p.note]
                )


def fmr_threshold_sweep(
    pair_results,
    tau1_values,
    tau2_values,
    base: EvalThresholds,
):
    """FMR over grids of inlier-distance and inlier-ratio thresholds.

    Returns rows (sweep_name, threshold_value, fmr): tau1 varies with tau2
    fixed at the base value and vice versa.
    """
    rows = []
    for t1 in tau1_values:
        thr = EvalThresholds(t1, base.inlier_ratio, base.rte_bound, base.rre_bound_deg)
        fmr, _, _, _ = feature_matching_recall(pair_results, thr)
        rows.append(("tau1", float(t1), fmr))
    for t2 in tau2_values:
        thr = EvalThresholds(base.inlier_distance, t2, base.rte_bound, base.rre_bound_deg)
        fmr, _, _, _ = feature_matching_recall(pair_results, thr)
        rows.append(("tau2", float(t2), fmr))
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sweep", "threshold", "fmr"])
        for name, value, fmr in rows:
            writer.writerow([name, repr(value), repr(fmr)])
