"""File formats: point clouds, descriptor sets, pair manifests, loss history.

Binary layouts are little-endian everywhere so files are bit-identical
across platforms. Text formats are plain ASCII with '#' comments.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MagicMismatch, ParseError
from .geometry import RigidTransform, as_points

CLOUD_MAGIC = b"SPINPC1"
DESC_MAGIC = b"SPINDSC1"

MANIFEST_COLUMNS = [
    "fragA",
    "fragB",
    "overlap",
    "r00",
    "r01",
    "r02",
    "r10",
    "r11",
    "r12",
    "r20",
    "r21",
    "r22",
    "t0",
    "t1",
    "t2",
]


def write_cloud(path, points, binary: bool | None = None) -> None:
    """Write a cloud as ASCII XYZ, or binary when requested or suffix is .spc."""
    path = Path(path)
    pts = as_points(points)
    if binary is None:
        binary = path.suffix == ".spc"
    if binary:
        with open(path, "wb") as fh:
            fh.write(CLOUD_MAGIC)
            fh.write(struct.pack("<Q", len(pts)))
            fh.write(pts.astype("<f4").tobytes())
    else:
        with open(path, "w") as fh:
            for x, y, z in pts.astype(np.float32):
                fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def read_cloud(path) -> np.ndarray:
    """Read a cloud written by write_cloud; sniffs the binary magic."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(CLOUD_MAGIC))
        if head == CLOUD_MAGIC:
            (count,) = struct.unpack("<Q", fh.read(8))
            data = np.frombuffer(fh.read(12 * count), dtype="<f4")
            if data.size != 3 * count:
                raise ParseError(f"binary cloud truncated: expected {count} points")
            return data.reshape(count, 3).astype(np.float64)
    rows = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            fields = body.split()
            if len(fields) != 3:
                raise ParseError(f"expected 3 coordinates, got {len(fields)}", line=lineno)
            try:
                rows.append([float(f) for f in fields])
            except ValueError:
                raise ParseError(f"bad float in {body!r}", line=lineno)
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def write_descriptors(path, anchors, descriptors) -> None:
    """Descriptor set: magic, N, D (u64 LE), anchor u64 indices, f32 values."""
    desc = np.asarray(descriptors, dtype=np.float64)
    if desc.ndim != 2:
        raise ValueError("descriptors must be a (N, D) array")
    anchors = np.asarray(anchors, dtype=np.uint64)
    if len(anchors) != len(desc):
        raise ValueError("anchor count must match descriptor count")
    with open(path, "wb") as fh:
        fh.write(DESC_MAGIC)
        fh.write(struct.pack("<QQ", desc.shape[0], desc.shape[1]))
        fh.write(anchors.astype("<u8").tobytes())
        fh.write(desc.astype("<f4").tobytes())


def read_descriptors(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(len(DESC_MAGIC)) != DESC_MAGIC:
            raise MagicMismatch(f"{path} is not a descriptor file")
        count, dim = struct.unpack("<QQ", fh.read(16))
        anchors = np.frombuffer(fh.read(8 * count), dtype="<u8").astype(np.intp)
        values = np.frombuffer(fh.read(4 * count * dim), dtype="<f4")
        if values.size != count * dim:
            raise ParseError("descriptor file truncated")
        return anchors, values.reshape(count, dim).astype(np.float64)


@dataclass(frozen=True)
class PairEntry:
    """One row of a pair manifest: two fragment paths plus ground truth."""

    frag_a: str
    frag_b: str
    overlap: float
    transform: RigidTransform

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap fraction must lie in [0, 1]")


def write_manifest(path, entries) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for e in entries:
            rot = e.transform.rotation.reshape(-1)
            writer.writerow(
                [e.frag_a, e.frag_b, repr(float(e.overlap))]
                + [repr(float(v)) for v in rot]
                + [repr(float(v)) for v in e.transform.translation]
            )


def read_manifest(path) -> list[PairEntry]:
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_COLUMNS:
            raise ParseError(f"manifest header must be {','.join(MANIFEST_COLUMNS)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ParseError(f"expected {len(MANIFEST_COLUMNS)} fields", line=lineno)
            try:
                overlap = float(row[2])
                values = [float(v) for v in row[3:]]
            except ValueError:
                raise ParseError("bad float in manifest row", line=lineno)
            transform = RigidTransform(np.array(values[:9]).reshape(3, 3), np.array(values[9:]))
            entries.append(PairEntry(row[0], row[1], overlap, transform))
    return entries


def write_loss_history(path, rows) -> None:
    """Loss history CSV with columns step,epoch,loss,lr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "loss", "lr"])
        for step, epoch, loss, lr in rows:
            writer.writerow([step, epoch, repr(float(loss)), repr(float(lr))])


def read_loss_history(path) -> list[tuple[int, int, float, float]]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            if row:
                rows.append((int(row[0]), int(row[1]), float(row[2]), float(row[3])))
    return rows
