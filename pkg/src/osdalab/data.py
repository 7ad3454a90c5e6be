"""Synthetic open-set adaptation tasks and the feature-table interchange format.

A task is a labeled source set drawn from the first ``n_source_classes``
Gaussian clusters and an unlabeled target set drawn from all
``n_total_classes`` clusters under a shifted distribution (rotation,
translation, and inflated spread). Cluster centers sit on a circle in the
first two feature dimensions, with known and target-only classes
interleaved so the extra classes are not separable by norm alone. Target
ground-truth labels are carried along for evaluation only.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

__all__ = [
    "UNLABELED",
    "OsdaTask",
    "SourceBatch",
    "SynthConfig",
    "TargetBatch",
    "batch_iterator",
    "generate_task",
    "load_feature_table",
    "save_feature_table",
]

log = logging.getLogger(__name__)

UNLABELED = -1


@dataclass
class SynthConfig:
    """Controls for synthetic task generation.

    The domain shift applied to the target side is a rotation of the first
    two feature dimensions, a translation of ``translation_scale *
    cluster_sigma`` added to every dimension, and a ``spread_multiplier``
    inflation of the per-cluster standard deviation.
    """

    feature_dim: int = 6
    samples_per_class: int = 40
    cluster_sigma: float = 0.5
    cluster_spacing: float = 3.0
    rotation_deg: float = 25.0
    translation_scale: float = 0.5
    spread_multiplier: float = 1.2
    private_radius: float = 0.5
    private_lift: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be at least 2")
        if self.samples_per_class < 8:
            raise ValueError("need at least 8 samples per class")
        if self.private_radius <= 0:
            raise ValueError("private_radius must be positive")
        if self.private_lift < 0:
            raise ValueError("private_lift must be non-negative")


@dataclass
class OsdaTask:
    """One adaptation problem: labeled source rows, unlabeled target rows.

    Labels are 1-based; target labels equal to ``UNLABELED`` carry no ground
    truth and are excluded from metric computation. ``n_total_classes`` is
    None when no target ground truth is available.
    """

    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray
    n_source_classes: int
    n_total_classes: int | None

    @property
    def feature_dim(self) -> int:
        return self.source_x.shape[1]

    @property
    def n_source(self) -> int:
        return self.source_x.shape[0]

    @property
    def n_target(self) -> int:
        return self.target_x.shape[0]

    @property
    def openness(self) -> float | None:
        if self.n_total_classes is None:
            return None
        return 1.0 - self.n_source_classes / self.n_total_classes


def _cluster_centers(cfg: SynthConfig, n_source: int, n_total: int) -> np.ndarray:
    """Class centers: known classes on a circle, private ones lifted off it.

    Known classes sit on a circle in the first two dimensions, filling even
    angular slots first so private clusters land at the angular midpoints
    between them. Each private cluster is pulled toward the center
    (``private_radius`` times the circle radius) and lifted out of the
    class plane along its own extra dimension (``private_lift`` times the
    radius), cycling through the available dimensions. Off-plane placement
    plays the role unknown categories have in practice -- they occupy
    feature directions the known classes never use, so no class
    discriminant separates them cleanly -- while the combined offset keeps
    their vector norms inside the known classes' range instead of making
    the norm alone a give-away. With only two feature dimensions the lift
    has nowhere to go and privates stay in the plane.
    """
    even = [s for s in range(n_total) if s % 2 == 0]
    odd = [s for s in range(n_total) if s % 2 == 1]
    slot_order = even + odd
    # Slots are packed at most 40 degrees apart so neighboring known
    # classes stay close enough that a modest rotation of the target
    # domain pushes them toward each other's decision regions.
    slot_angle = min(2.0 * math.pi / n_total, math.radians(40.0))
    centers = np.zeros((n_total, cfg.feature_dim))
    lift_dims = cfg.feature_dim - 2
    for cls in range(n_total):
        radius = cfg.cluster_spacing
        angle = slot_angle * slot_order[cls]
        if cls >= n_source:
            radius *= cfg.private_radius
            if lift_dims > 0:
                lift_dim = 2 + (cls - n_source) % lift_dims
                centers[cls, lift_dim] = cfg.private_lift * cfg.cluster_spacing
        centers[cls, 0] = radius * math.cos(angle)
        centers[cls, 1] = radius * math.sin(angle)
    return centers


def generate_task(cfg: SynthConfig, n_source_classes: int, n_total_classes: int) -> OsdaTask:
    """Draw one synthetic task; bit-reproducible for a fixed ``cfg.seed``."""
    if not 0 < n_source_classes < n_total_classes:
        raise ValueError(
            "open-set tasks need strictly more target classes than source classes"
        )
    rng = np.random.default_rng(cfg.seed)
    centers = _cluster_centers(cfg, n_source_classes, n_total_classes)
    per_class = cfg.samples_per_class
    d = cfg.feature_dim

    source_rows, source_labels = [], []
    for cls in range(n_source_classes):
        noise = cfg.cluster_sigma * rng.standard_normal((per_class, d))
        source_rows.append(centers[cls] + noise)
        source_labels.append(np.full(per_class, cls + 1, dtype=np.int64))

    theta = math.radians(cfg.rotation_deg)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    translation = cfg.translation_scale * cfg.cluster_sigma

    target_rows, target_labels = [], []
    for cls in range(n_total_classes):
        sigma = cfg.cluster_sigma * cfg.spread_multiplier
        rows = centers[cls] + sigma * rng.standard_normal((per_class, d))
        rows[:, :2] = rows[:, :2] @ rot.T
        rows = rows + translation
        target_rows.append(rows)
        target_labels.append(np.full(per_class, cls + 1, dtype=np.int64))

    return OsdaTask(
        source_x=np.concatenate(source_rows),
        source_y=np.concatenate(source_labels),
        target_x=np.concatenate(target_rows),
        target_y=np.concatenate(target_labels),
        n_source_classes=n_source_classes,
        n_total_classes=n_total_classes,
    )


def save_feature_table(task: OsdaTask, path) -> None:
    """Write the task in the feature-table CSV interchange format."""
    d = task.feature_dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "label"] + [f"f{i + 1}" for i in range(d)])
        for x, y in zip(task.source_x, task.source_y):
            writer.writerow(["source", int(y)] + [format(v, ".17g") for v in x])
        for x, y in zip(task.target_x, task.target_y):
            writer.writerow(["target", int(y)] + [format(v, ".17g") for v in x])


def load_feature_table(path) -> OsdaTask:
    """Read a feature-table CSV: header ``split,label,f1..fd``.

    Source rows must carry labels >= 1; target rows may carry ground truth
    (for evaluation) or ``-1`` when unlabeled. Malformed rows are rejected
    with their 1-based line number.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if len(header) < 3 or header[0] != "split" or header[1] != "label":
            raise ValueError(f"{path}: expected header 'split,label,f1..fd'")
        d = len(header) - 2
        if [h for h in header[2:]] != [f"f{i + 1}" for i in range(d)]:
            raise ValueError(f"{path}: feature columns must be named f1..f{d}")

        sx, sy, tx, ty = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise ValueError(f"{path}: line {lineno}: expected {d + 2} columns, got {len(row)}")
            split = row[0]
            try:
                label = int(row[1])
                feats = [float(v) for v in row[2:]]
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-numeric value") from None
            if split == "source":
                if label < 1:
                    raise ValueError(f"{path}: line {lineno}: source labels must be >= 1")
                sx.append(feats)
                sy.append(label)
            elif split == "target":
                if label < 1 and label != UNLABELED:
                    raise ValueError(
                        f"{path}: line {lineno}: target labels must be >= 1 or {UNLABELED}"
                    )
                tx.append(feats)
                ty.append(label)
            else:
                raise ValueError(f"{path}: line {lineno}: split must be 'source' or 'target'")

    if not sx:
        raise ValueError(f"{path}: no source rows")
    if not tx:
        raise ValueError(f"{path}: no target rows")

    source_y = np.asarray(sy, dtype=np.int64)
    target_y = np.asarray(ty, dtype=np.int64)
    n_source_classes = int(source_y.max())
    labeled = target_y[target_y != UNLABELED]
    n_total_classes = None
    if labeled.size:
        n_total_classes = int(max(labeled.max(), n_source_classes))
        if n_total_classes <= n_source_classes:
            raise ValueError(
                f"{path}: labeled targets define no extra classes; open-set tasks "
                "need target-only classes"
            )
    return OsdaTask(
        source_x=np.asarray(sx, dtype=np.float64),
        source_y=source_y,
        target_x=np.asarray(tx, dtype=np.float64),
        target_y=target_y,
        n_source_classes=n_source_classes,
        n_total_classes=n_total_classes,
    )


class SourceBatch(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    indices: np.ndarray


class TargetBatch(NamedTuple):
    x: np.ndarray
    indices: np.ndarray


def _index_stream(n: int, batch_size: int, rng: np.random.Generator, domain: str):
    if batch_size > n:
        log.warning(
            "batch size %d exceeds %s size %d; batches will repeat samples",
            batch_size,
            domain,
            n,
        )
        repeats = math.ceil(batch_size / n)
        while True:
            idx = np.concatenate([rng.permutation(n) for _ in range(repeats)])
            yield idx[:batch_size]
    else:
        while True:
            perm = rng.permutation(n)
            for start in range(0, n - batch_size + 1, batch_size):
                yield perm[start : start + batch_size]


def batch_iterator(
    task: OsdaTask, batch_size: int, seed
) -> Iterator[tuple[SourceBatch, TargetBatch]]:
    """Endless stream of (source batch, target batch) pairs.

    Each domain is shuffled independently per pass with the last partial
    batch dropped; the shorter domain simply starts a fresh pass. Fully
    deterministic for a fixed seed.
    """
    if batch_size < 2:
        raise ValueError("batch size must be at least 2")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    source_ss, target_ss = root.spawn(2)
    source_idx = _index_stream(task.n_source, batch_size, np.random.default_rng(source_ss), "source")
    target_idx = _index_stream(task.n_target, batch_size, np.random.default_rng(target_ss), "target")
    while True:
        si = next(source_idx)
        ti = next(target_idx)
        yield (
            SourceBatch(task.source_x[si], task.source_y[si], si),
            TargetBatch(task.target_x[ti], ti),
        )
