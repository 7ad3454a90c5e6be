"""Self-tuned decision threshold from open-set head outputs.

Once per epoch the target set's probability vectors are paired at random,
and the threshold is one minus the average paired interaction of the
known-class mass. Confidently-unknown targets contribute nothing to the
interaction, so the threshold starts high and falls only as known-class
mass accumulates on the target side.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = ["ThresholdEntry", "ThresholdSchedule", "compute_threshold"]


def compute_threshold(probs, lambda1: float, seed) -> float:
    """Threshold in [0, 1] from target probability vectors.

    Args:
        probs: array of shape [N, n_classes + 1]; rows are open-set head
            outputs for target samples (last column is the unknown mass).
        lambda1: reduction-speed control in [0.5, 1]. At 0.5 the threshold
            falls fastest; at 1.0 it is pinned to exactly 1.
        seed: drives the random disjoint pairing; fixed seed, fixed value.

    The N rows are shuffled and split into floor(N/2) disjoint pairs. For a
    pair (a, b) the interaction is sum_c lambda1*(a_c+b_c) * (1-lambda1)*(a_c+b_c)
    over the known-class components; the threshold is one minus the mean
    interaction, clipped to [0, 1].
    """
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError("need at least two probability rows to form a pair")
    if not 0.5 <= lambda1 <= 1.0:
        raise ValueError(f"lambda1 must lie in [0.5, 1], got {lambda1}")

    rng = np.random.default_rng(seed)
    perm = rng.permutation(arr.shape[0])
    n_pairs = arr.shape[0] // 2
    pairs = perm[: 2 * n_pairs].reshape(n_pairs, 2)

    known = arr[:, :-1]
    paired_mass = known[pairs[:, 0]] + known[pairs[:, 1]]
    interaction = (lambda1 * paired_mass * ((1.0 - lambda1) * paired_mass)).sum(axis=1)
    return float(np.clip(1.0 - interaction.mean(), 0.0, 1.0))


@dataclass
class ThresholdEntry:
    epoch: int
    value: float
    pairs: int
    lambda1: float


@dataclass
class ThresholdSchedule:
    """Per-epoch threshold trajectory of one training run."""

    entries: list[ThresholdEntry] = field(default_factory=list)

    def record(self, epoch: int, value: float, pairs: int, lambda1: float) -> None:
        self.entries.append(ThresholdEntry(epoch, value, pairs, lambda1))

    def values(self) -> list[float]:
        return [e.value for e in self.entries]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "h", "pairs", "lambda1"])
            for e in self.entries:
                writer.writerow(
                    [e.epoch, format(e.value, ".17g"), e.pairs, format(e.lambda1, ".17g")]
                )
