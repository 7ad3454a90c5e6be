"""Commonness scoring and cross-domain mixup training of the committee.

Each target sample gets a commonness score built from three criteria
measured across the committee heads: normalized entropy, inter-head
consistency (variance), and confidence. Targets scoring at or above the
current threshold are paired with a source sample of the same
pseudo-label (predicted by the open-set head) and blended in input space;
the committee then trains on the blend against the source label. During
the alternating-training phase the extractor is frozen for these updates
so the committee members stay diverse.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import math

import numpy as np

from .autodiff import Tensor, backward, no_grad, stop_gradient
from .alignment import PROB_FLOOR
from .networks import ModelBundle, log_softmax_rows

_LOG_FLOOR = math.log(PROB_FLOOR)

__all__ = [
    "CriteriaBatch",
    "CriteriaScores",
    "MixRatioError",
    "MixupPair",
    "build_mixup_pairs",
    "combine_criteria",
    "commonness_score",
    "consistency_score",
    "confidence_score",
    "entropy_score",
    "mixed_inputs",
    "mixup_loss",
    "mixup_step",
    "pretrain_loss",
    "pseudo_labels",
    "sample_mix_ratio",
    "score_batch",
]

log = logging.getLogger(__name__)


def _as_probe(probs) -> np.ndarray:
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a [heads, classes] probability array")
    return arr


def entropy_score(probs) -> float:
    """Mean Shannon entropy across heads, normalized by log(n_classes)."""
    arr = _as_probe(probs)
    if arr.shape[1] < 2:
        raise ValueError("entropy needs at least two classes")
    plogp = np.where(arr > 0.0, arr * np.log(np.where(arr > 0.0, arr, 1.0)), 0.0)
    return float(-plogp.sum(axis=1).mean() / np.log(arr.shape[1]))


def consistency_score(probs) -> float:
    """Mean squared deviation of each head from the head-average vector."""
    arr = _as_probe(probs)
    m, c = arr.shape
    if m < 2:
        raise ValueError("consistency needs at least two heads")
    return float(((arr - arr.mean(axis=0)) ** 2).sum() / (m * c))


def confidence_score(probs) -> float:
    """Mean over heads of each head's maximum component."""
    return float(_as_probe(probs).max(axis=1).mean())


def combine_criteria(entropy, consistency, confidence):
    """Commonness from the three criteria: ((1-ent) + (1-cons) + conf) / 3."""
    return ((1.0 - entropy) + (1.0 - consistency) + confidence) / 3.0


@dataclass
class CriteriaScores:
    """Per-sample uncertainty criteria and their combination.

    commonness = ((1 - entropy) + (1 - consistency) + confidence) / 3;
    smaller values mean the sample looks less like a known class.
    """

    entropy: float
    consistency: float
    confidence: float
    commonness: float


@dataclass
class CriteriaBatch:
    entropy: np.ndarray
    consistency: np.ndarray
    confidence: np.ndarray
    commonness: np.ndarray

    def row(self, i: int) -> CriteriaScores:
        return CriteriaScores(
            float(self.entropy[i]),
            float(self.consistency[i]),
            float(self.confidence[i]),
            float(self.commonness[i]),
        )


def score_batch(bundle: ModelBundle, x) -> CriteriaBatch:
    """Criteria for every row of x, committee evaluated without jitter."""
    with no_grad():
        z = bundle.features(x)
        stacked = np.stack(
            [bundle.mix_probs(z, k).data for k in range(1, bundle.m + 1)]
        )  # [m, B, C]
    m, _, c = stacked.shape
    plogp = np.where(stacked > 0.0, stacked * np.log(np.where(stacked > 0.0, stacked, 1.0)), 0.0)
    entropy = -plogp.sum(axis=2).mean(axis=0) / np.log(c)
    consistency = ((stacked - stacked.mean(axis=0)) ** 2).sum(axis=(0, 2)) / (m * c)
    confidence = stacked.max(axis=2).mean(axis=0)
    return CriteriaBatch(entropy, consistency, confidence, combine_criteria(entropy, consistency, confidence))


def commonness_score(bundle: ModelBundle, x_row) -> CriteriaScores:
    """Criteria for a single input row."""
    return score_batch(bundle, np.atleast_2d(np.asarray(x_row, dtype=np.float64))).row(0)


class MixRatioError(ValueError):
    """The adaptive mixing-ratio constraints do not hold."""


def sample_mix_ratio(score: float, threshold: float, r: float, rng: np.random.Generator) -> float:
    """One Beta(score * r, threshold * r) draw for the mixing ratio.

    Valid only when score * r > threshold * r > 1; higher-scoring targets
    then receive larger ratios on average.
    """
    if not score * r > threshold * r > 1.0:
        raise MixRatioError(
            f"need score*r > threshold*r > 1, got score={score}, threshold={threshold}, r={r}"
        )
    return float(rng.beta(score * r, threshold * r))


@dataclass
class MixupPair:
    source_index: int
    target_index: int
    label: int
    ratio: float
    score: float


def pseudo_labels(bundle: ModelBundle, x) -> np.ndarray:
    """1-based argmax over the known-class components of the open-set head."""
    with no_grad():
        probs = bundle.open_probs(bundle.features(x)).data
    return probs[:, : bundle.n_classes].argmax(axis=1) + 1


def build_mixup_pairs(
    bundle: ModelBundle,
    source_x,
    source_y,
    target_x,
    threshold: float,
    ratio_policy: Callable[[float, float], float],
    rng: np.random.Generator,
) -> list[MixupPair]:
    """Pair every gated target with a same-pseudo-label source sample.

    A target is gated in when its commonness score is at least the
    threshold; targets whose pseudo-label matches no source label in the
    batch are skipped. Matching source rows are chosen uniformly.
    """
    source_y = np.asarray(source_y)
    scores = score_batch(bundle, target_x).commonness
    labels = pseudo_labels(bundle, target_x)
    by_label = {int(lbl): np.flatnonzero(source_y == lbl) for lbl in np.unique(source_y)}

    pairs: list[MixupPair] = []
    for j, (score, label) in enumerate(zip(scores, labels)):
        if score < threshold:
            continue
        candidates = by_label.get(int(label))
        if candidates is None or candidates.size == 0:
            continue
        i = int(candidates[rng.integers(candidates.size)])
        pairs.append(
            MixupPair(
                source_index=i,
                target_index=j,
                label=int(label),
                ratio=float(ratio_policy(float(score), threshold)),
                score=float(score),
            )
        )
    return pairs


def mixed_inputs(pairs: Sequence[MixupPair], source_x, target_x) -> np.ndarray:
    """Input-space blends (1 - ratio) * source + ratio * target."""
    source_x = np.asarray(source_x, dtype=np.float64)
    target_x = np.asarray(target_x, dtype=np.float64)
    ratios = np.array([p.ratio for p in pairs])[:, None]
    src = source_x[[p.source_index for p in pairs]]
    tgt = target_x[[p.target_index for p in pairs]]
    return (1.0 - ratios) * src + ratios * tgt


def _committee_ce(bundle: ModelBundle, z: Tensor, labels: np.ndarray, k: int) -> Tensor:
    log_probs = log_softmax_rows(bundle.mix_heads[k - 1].logits(z))
    picked = log_probs[np.arange(labels.size), labels - 1]
    return -(picked.clip_value(_LOG_FLOOR, 0.0).mean())


def mixup_loss(
    bundle: ModelBundle,
    pairs: Sequence[MixupPair],
    source_x,
    target_x,
    k: int,
    freeze_extractor: bool = True,
    jitter: bool = False,
) -> Tensor:
    """Cross-entropy of committee head k on blended inputs vs source labels.

    With ``freeze_extractor`` the feature pass is wrapped in stop-gradient,
    so the extractor receives exactly zero gradient from this loss. An
    empty pair list yields a constant zero.
    """
    if not pairs:
        return Tensor(0.0)
    x = mixed_inputs(pairs, source_x, target_x)
    if jitter:
        x = bundle.jitter(x, k)
    labels = np.array([p.label for p in pairs])
    z = bundle.features(Tensor(x))
    if freeze_extractor:
        z = stop_gradient(z)
    return _committee_ce(bundle, z, labels, k)


def pretrain_loss(bundle: ModelBundle, x, y, k: int, jitter: bool = False) -> Tensor:
    """Plain source cross-entropy for committee head k; trains the extractor too."""
    y = np.asarray(y)
    if y.size and (y.min() < 1 or y.max() > bundle.n_classes):
        raise ValueError(f"labels must lie in [1, {bundle.n_classes}]")
    x = np.asarray(x, dtype=np.float64)
    if jitter:
        x = bundle.jitter(x, k)
    return _committee_ce(bundle, bundle.features(Tensor(x)), y, k)


def mixup_step(
    bundle: ModelBundle,
    batches: Sequence[tuple],
    threshold: float,
    mix_optimizers: Sequence,
    lr: float,
    ratio_policy: Callable[[float, float], float],
    rng: np.random.Generator,
    jitter: bool = True,
) -> tuple[list[float], int]:
    """One committee update: per-head batches, gated pairs, frozen extractor.

    ``batches`` supplies one (source batch, target batch) pair per head.
    Only heads that produced at least one pair take an optimizer step.
    Returns the per-head loss values and the total pair count.
    """
    if len(batches) != bundle.m:
        raise ValueError(f"expected {bundle.m} batches, got {len(batches)}")
    losses: list[float] = []
    graphs: list[tuple[int, Tensor]] = []
    total_pairs = 0
    for k in range(1, bundle.m + 1):
        source_batch, target_batch = batches[k - 1]
        pairs = build_mixup_pairs(
            bundle, source_batch.x, source_batch.y, target_batch.x, threshold, ratio_policy, rng
        )
        total_pairs += len(pairs)
        if not pairs:
            losses.append(0.0)
            continue
        loss_k = mixup_loss(
            bundle,
            pairs,
            source_batch.x,
            target_batch.x,
            k,
            freeze_extractor=True,
            jitter=jitter,
        )
        graphs.append((k, loss_k))
        losses.append(float(loss_k.data))

    if graphs:
        total = graphs[0][1]
        for _, extra in graphs[1:]:
            total = total + extra
        bundle.zero_grads()
        backward(total)
        for k, _ in graphs:
            mix_optimizers[k - 1].step(lr)
    return losses, total_pairs
