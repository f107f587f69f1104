"""End-to-end contrastive training on overlapping fragment pairs.

Each optimizer step takes the anchors of one fragment pair: anchors are
drawn from the overlap (points of A whose ground-truth image has a close
neighbor in B), their patches become cylindrical volumes once (cached
across epochs; the transformer stage has no learned parameters), and the
network trains with a hardest-in-batch contrastive loss. No rotation
augmentation is applied anywhere: rotation invariance comes from the
architecture, not the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Variable
from .descriptor import DescriptorConfig, descriptor_graph, extract_patch, init_descriptor_params, patch_volume
from .errors import BatchTooSmall, DegeneratePatch, EmptyVolume, InsufficientOverlap
from .geometry import RigidTransform, SpatialIndex, apply_transform, median_spacing
from .io import PairEntry, read_cloud, write_loss_history
from .volume import CylindricalVolume


@dataclass(frozen=True)
class TrainConfig:
    anchors_per_fragment: int = 20
    patch_point_budget: int = 2048
    batch_size: int | None = None  # None: all anchors of a pair per step
    epochs: int = 20
    lr: float = 0.001
    lr_decay: float = 0.5
    lr_decay_every: int = 5
    positive_margin: float = 0.1
    negative_margin: float = 1.4
    seed: int = 0
    validation_fraction: float = 0.1
    min_overlap: float = 0.3
    correspondence_tolerance_factor: float = 2.0  # times median point spacing
    resample_each_epoch: bool = True  # fresh anchor draw per pair per epoch

    def __post_init__(self):
        if not 0 < self.positive_margin < self.negative_margin:
            raise ValueError("margins must satisfy 0 < positive < negative")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)


@dataclass
class AnchorPairBatch:
    """Prebuilt volumes for matched anchors of one fragment pair."""

    volumes_a: list[CylindricalVolume]
    volumes_b: list[CylindricalVolume]
    anchor_indices_a: np.ndarray
    anchor_indices_b: np.ndarray
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.volumes_a)


def eligible_anchor_indices(
    frag_a: np.ndarray,
    frag_b: np.ndarray,
    transform: RigidTransform,
    tolerance: float,
) -> tuple[np.ndarray, np.ndarray]:
    """A-indices whose ground-truth image has a B-neighbor within tolerance,
    with that nearest neighbor as the correspondent."""
    moved = apply_transform(transform, frag_a)
    idx_b, dist = SpatialIndex(frag_b).nearest(moved)
    keep = np.flatnonzero(dist <= tolerance)
    return keep, idx_b[keep]


def sample_anchor_pairs(
    frag_a: np.ndarray,
    frag_b: np.ndarray,
    transform: RigidTransform,
    desc_cfg: DescriptorConfig,
    cfg: TrainConfig,
    seed: int,
) -> AnchorPairBatch:
    """Draw matched anchors from the overlap and build their volumes.

    Raises InsufficientOverlap when fewer eligible anchors exist than
    requested. Anchors whose patch is degenerate or produces an empty
    volume are dropped pairwise and counted in `dropped`.
    """
    tolerance = cfg.correspondence_tolerance_factor * median_spacing(frag_a)
    eligible, correspondents = eligible_anchor_indices(frag_a, frag_b, transform, tolerance)
    if len(eligible) < cfg.anchors_per_fragment:
        raise InsufficientOverlap(
            f"{len(eligible)} eligible anchors < requested {cfg.anchors_per_fragment}"
        )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    pick = np.sort(rng.choice(len(eligible), size=cfg.anchors_per_fragment, replace=False))
    anchors_a = eligible[pick]
    anchors_b = correspondents[pick]

    index_a = SpatialIndex(frag_a)
    index_b = SpatialIndex(frag_b)
    vols_a, vols_b, kept_a, kept_b = [], [], [], []
    dropped = 0
    for ia, ib in zip(anchors_a, anchors_b):
        try:
            patch_a = extract_patch(index_a, int(ia), desc_cfg, cfg.patch_point_budget, seed)
            patch_b = extract_patch(index_b, int(ib), desc_cfg, cfg.patch_point_budget, seed)
            va = patch_volume(patch_a, frag_a[ia], desc_cfg)
            vb = patch_volume(patch_b, frag_b[ib], desc_cfg)
        except (DegeneratePatch, EmptyVolume):
            dropped += 1
            continue
        vols_a.append(va)
        vols_b.append(vb)
        kept_a.append(ia)
        kept_b.append(ib)
    return AnchorPairBatch(
        vols_a,
        vols_b,
        np.asarray(kept_a, dtype=np.intp),
        np.asarray(kept_b, dtype=np.intp),
        dropped,
    )


def hardest_contrastive_loss(
    anchor_desc: Variable,
    positive_desc: Variable,
    positive_margin: float,
    negative_margin: float,
) -> Variable:
    """Hardest-in-batch contrastive loss over matched descriptor rows.

    L = mean_i relu(d(a_i, p_i) - m_p)^2
      + mean_i relu(m_n - min_{j != i} min(d(a_i, p_j), d(a_i, a_j)))^2

    The hardest negative never includes the true positive; its selection is
    made on values, with gradient flowing through the selected distances.
    """
    n = anchor_desc.shape[0]
    if anchor_desc.shape != positive_desc.shape or anchor_desc.value.ndim != 2:
        raise ValueError("anchor and positive descriptor matrices must match")
    if n < 2:
        raise BatchTooSmall("hardest-in-batch loss needs at least 2 pairs")
    d_ap = ad.pairwise_distances(anchor_desc, positive_desc)
    d_aa = ad.pairwise_distances(anchor_desc, anchor_desc)

    diag = np.arange(n)
    pos = ad.gather(d_ap, diag * n + diag)

    masked_ap = d_ap.value + np.diag(np.full(n, np.inf))
    masked_aa = d_aa.value + np.diag(np.full(n, np.inf))
    best_ap_j = np.argmin(masked_ap, axis=1)
    best_aa_j = np.argmin(masked_aa, axis=1)
    ap_min = masked_ap[diag, best_ap_j]
    aa_min = masked_aa[diag, best_aa_j]
    use_ap = ap_min <= aa_min

    neg_ap = ad.gather(d_ap, diag * n + best_ap_j)
    neg_aa = ad.gather(d_aa, diag * n + best_aa_j)
    mask = use_ap.astype(np.float64)
    neg = ad.add(
        ad.mul(neg_ap, ad.constant(mask)), ad.mul(neg_aa, ad.constant(1.0 - mask))
    )

    pos_term = ad.reduce_mean(ad.square(ad.relu(ad.shift(pos, -positive_margin))))
    neg_term = ad.reduce_mean(
        ad.square(ad.relu(ad.shift(ad.scale(neg, -1.0), negative_margin)))
    )
    return ad.add(pos_term, neg_term)


def pair_step_loss(
    batch: AnchorPairBatch, desc_cfg: DescriptorConfig, params: ParamStore, cfg: TrainConfig
) -> Variable:
    """Loss graph for one fragment-pair batch (both sides in one forward)."""
    volumes = batch.volumes_a + batch.volumes_b
    descs = descriptor_graph(volumes, desc_cfg, params)
    n = len(batch)
    anchors = ad.gather_rows(descs, np.arange(n))
    positives = ad.gather_rows(descs, np.arange(n, 2 * n))
    return hardest_contrastive_loss(anchors, positives, cfg.positive_margin, cfg.negative_margin)


@dataclass
class TrainResult:
    checkpoint_dir: Path
    best_checkpoint: Path
    final_checkpoint: Path
    history: list[tuple[int, int, float, float]]
    validation: list[tuple[int, float]] = field(default_factory=list)
    params: ParamStore | None = None


def _load_pairs(entries: list[PairEntry], root: Path):
    loaded = []
    for e in entries:
        frag_a = read_cloud(root / e.frag_a if not Path(e.frag_a).is_absolute() else e.frag_a)
        frag_b = read_cloud(root / e.frag_b if not Path(e.frag_b).is_absolute() else e.frag_b)
        loaded.append((frag_a, frag_b, e.transform, e.overlap))
    return loaded


def train(
    entries: list[PairEntry],
    desc_cfg: DescriptorConfig,
    cfg: TrainConfig,
    out_dir,
    manifest_root=".",
) -> TrainResult:
    """Train on manifest pairs; deterministic given the config seed.

    Pairs at or below the overlap floor are excluded. A seeded validation
    split tracks the best epoch; a checkpoint is written per epoch plus
    best.ckpt and final.ckpt, and the loss history goes to loss_history.csv.
    """
    if not entries:
        raise ValueError("manifest is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    usable = [e for e in entries if e.overlap > cfg.min_overlap]
    if not usable:
        raise InsufficientOverlap(f"no pair exceeds overlap {cfg.min_overlap}")
    data = _load_pairs(usable, Path(manifest_root))

    split_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 1])))
    order = split_rng.permutation(len(data))
    n_val = int(round(cfg.validation_fraction * len(data))) if len(data) >= 2 else 0
    val_ids = set(order[:n_val].tolist())
    train_ids = [i for i in range(len(data)) if i not in val_ids]

    def make_batch(i: int, epoch: int | None) -> AnchorPairBatch:
        tags = (2, i) if epoch is None else (2, i, epoch)
        batch = sample_anchor_pairs(
            data[i][0], data[i][1], data[i][2], desc_cfg, cfg, seed=_stream(cfg.seed, *tags)
        )
        if len(batch) < 2:
            raise BatchTooSmall(f"pair {i} kept {len(batch)} anchor pairs")
        return batch

    # Validation batches stay fixed so epoch losses are comparable.
    val_batches = {i: make_batch(i, None) for i in sorted(val_ids)}
    fixed_batches = (
        None if cfg.resample_each_epoch else {i: make_batch(i, None) for i in train_ids}
    )

    params = init_descriptor_params(desc_cfg, seed=cfg.seed)
    history: list[tuple[int, int, float, float]] = []
    validation: list[tuple[int, float]] = []
    best = (np.inf, -1)
    best_path = out_dir / "best.ckpt"
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        epoch_rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([cfg.seed, 3, epoch]))
        )
        for i in epoch_rng.permutation(train_ids):
            batch = fixed_batches[i] if fixed_batches is not None else make_batch(i, epoch)
            for chunk in _chunks(len(batch), cfg.batch_size):
                sub = _subset(batch, chunk)
                loss = pair_step_loss(sub, desc_cfg, params, cfg)
                ad.backward(loss)
                params.adam_step(lr=lr)
                history.append((step, epoch, float(loss.value), lr))
                step += 1
        if val_ids:
            val_loss = float(
                np.mean(
                    [
                        pair_step_loss(val_batches[i], desc_cfg, params, cfg).value
                        for i in sorted(val_ids)
                    ]
                )
            )
        else:
            val_loss = float(np.mean([h[2] for h in history if h[1] == epoch]))
        validation.append((epoch, val_loss))
        params.save(out_dir / f"epoch_{epoch:03d}.ckpt")
        if val_loss < best[0]:
            best = (val_loss, epoch)
            params.save(best_path)
    final_path = out_dir / "final.ckpt"
    params.save(final_path)
    if best[1] < 0:
        params.save(best_path)
    write_loss_history(out_dir / "loss_history.csv", history)
    return TrainResult(out_dir, best_path, final_path, history, validation, params)


def _stream(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def _chunks(n: int, batch_size: int | None):
    if batch_size is None or batch_size >= n:
        return [np.arange(n)]
    chunks = [np.arange(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _subset(batch: AnchorPairBatch, ids) -> AnchorPairBatch:
    if len(ids) == len(batch):
        return batch
    return AnchorPairBatch(
        [batch.volumes_a[i] for i in ids],
        [batch.volumes_b[i] for i in ids],
        batch.anchor_indices_a[ids],
        batch.anchor_indices_b[ids],
        batch.dropped,
    )
