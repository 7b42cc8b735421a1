"""Dataset ingestion (IDX, synthetic blobs) and report/CSV emission.

IDX is the classic big-endian binary image format: magic 0x00000803 for
image files (u32 count, rows, cols, then row-major unsigned bytes) and
0x00000801 for label files (u32 count, one byte per label).  Pixels are
scaled by 1/255 into [0, 1] with no centering, so the certification domain
box stays the literal unit box.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .netcore import atomic_write_text

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """An IDX file failed a structural check."""


@dataclass(frozen=True)
class Dataset:
    """Inputs scaled to [0, 1] with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    split: str = "train"

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        if len(inputs) != len(labels):
            raise ValueError(
                f"{len(inputs)} inputs but {len(labels)} labels"
            )
        if len(inputs) and not np.all(np.isfinite(inputs)):
            raise ValueError("inputs must be finite")
        if len(inputs) and (inputs.min() < 0.0 or inputs.max() > 1.0):
            raise ValueError("inputs must lie in [0, 1]")
        if len(labels) and labels.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, limit: int) -> "Dataset":
        if limit >= len(self):
            return self
        return Dataset(self.inputs[:limit], self.labels[:limit], self.name, self.split)


def _read_u32(data: bytes, offset: int, path: str) -> int:
    if offset + 4 > len(data):
        raise IdxFormatError(f"{path}: truncated header")
    return struct.unpack(">I", data[offset : offset + 4])[0]


def load_idx(images_path: str, labels_path: str, name: str = "idx",
             split: str = "test") -> Dataset:
    """Load an IDX image/label file pair into a flat-vector dataset."""
    with open(images_path, "rb") as handle:
        img = handle.read()
    with open(labels_path, "rb") as handle:
        lab = handle.read()
    magic = _read_u32(img, 0, images_path)
    if magic != IMAGES_MAGIC:
        raise IdxFormatError(
            f"{images_path}: bad images magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"
        )
    count = _read_u32(img, 4, images_path)
    rows = _read_u32(img, 8, images_path)
    cols = _read_u32(img, 12, images_path)
    payload = img[16:]
    if len(payload) != count * rows * cols:
        raise IdxFormatError(
            f"{images_path}: payload holds {len(payload)} bytes, header promises {count * rows * cols}"
        )
    magic = _read_u32(lab, 0, labels_path)
    if magic != LABELS_MAGIC:
        raise IdxFormatError(
            f"{labels_path}: bad labels magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}"
        )
    lab_count = _read_u32(lab, 4, labels_path)
    if lab_count != count:
        raise IdxFormatError(
            f"label count {lab_count} does not match image count {count}"
        )
    if len(lab) - 8 != lab_count:
        raise IdxFormatError(f"{labels_path}: truncated label payload")
    inputs = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows * cols) / 255.0
    labels = np.frombuffer(lab[8:], dtype=np.uint8).astype(np.int64)
    return Dataset(inputs, labels, name=name, split=split)


def save_idx(dataset: Dataset, images_path: str, labels_path: str,
             rows: int, cols: int) -> None:
    """Inverse of load_idx; used by repo tooling and test fixtures."""
    count = len(dataset)
    pixels = np.clip(np.rint(dataset.inputs * 255.0), 0, 255).astype(np.uint8)
    if pixels.shape[1] != rows * cols:
        raise ValueError(f"inputs have {pixels.shape[1]} pixels, grid wants {rows * cols}")
    with open(images_path, "wb") as handle:
        handle.write(struct.pack(">IIII", IMAGES_MAGIC, count, rows, cols))
        handle.write(pixels.tobytes())
    with open(labels_path, "wb") as handle:
        handle.write(struct.pack(">II", LABELS_MAGIC, count))
        handle.write(dataset.labels.astype(np.uint8).tobytes())


def synthetic_blobs(num_classes: int, dims: int, n: int, seed: int,
                    separation: float, name: str = "synthetic",
                    split: str = "train") -> Dataset:
    """Gaussian class blobs on a jittered lattice in [0, 1]^dims.

    ``n`` points per class; larger ``separation`` shrinks the blobs relative
    to the lattice pitch, so far-apart blobs become linearly separable.
    Deterministic for a fixed seed.
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    if n < 1:
        raise ValueError("need at least one sample per class")
    if dims < 1 or num_classes < 1:
        raise ValueError("num_classes and dims must be positive")
    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(num_classes)))
    pitch = 0.6 / max(1, side - 1) if side > 1 else 0.0
    centers = np.full((num_classes, dims), 0.5)
    for c in range(num_classes):
        gy, gx = divmod(c, side)
        centers[c, 0] = 0.2 + gx * pitch if side > 1 else 0.5
        if dims > 1:
            centers[c, 1] = 0.2 + gy * pitch if side > 1 else 0.5
    centers += rng.uniform(-0.02, 0.02, centers.shape)
    sigma = (pitch if pitch > 0 else 0.5) / (2.0 * separation)
    points = []
    labels = []
    for c in range(num_classes):
        pts = centers[c] + rng.normal(0.0, sigma, (n, dims))
        points.append(np.clip(pts, 0.0, 1.0))
        labels.append(np.full(n, c, dtype=np.int64))
    return Dataset(np.vstack(points), np.concatenate(labels), name=name, split=split)


def emit_report(report, path: str) -> None:
    """Write an evaluation report as JSON (atomic)."""
    obj = report.to_dict() if hasattr(report, "to_dict") else report
    atomic_write_text(path, json.dumps(obj, indent=2))


@dataclass(frozen=True)
class SweepRow:
    """Certified counts per configuration at one radius.

    ``kind`` distinguishes sound-but-incomplete certifier counts ("bound")
    from complete-search results ("exact").
    """

    epsilon: float
    counts: dict
    kind: str = "bound"

    def __post_init__(self):
        if self.kind not in ("exact", "bound"):
            raise ValueError("kind must be 'exact' or 'bound'")


def emit_sweep_csv(rows: list[SweepRow], path: str,
                   columns: list[str] | None = None) -> None:
    """Write sweep rows as CSV: epsilon,<config columns...>,kind."""
    if columns is None:
        columns = list(rows[0].counts.keys()) if rows else []
    lines = ["epsilon," + ",".join(columns) + ("," if columns else "") + "kind"]
    for row in rows:
        missing = [c for c in columns if c not in row.counts]
        if missing:
            raise ValueError(f"sweep row at eps={row.epsilon} lacks columns {missing}")
        vals = ",".join(str(int(row.counts[c])) for c in columns)
        lines.append(f"{row.epsilon:.6g}," + vals + ("," if columns else "") + row.kind)
    atomic_write_text(path, "\n".join(lines) + "\n")
