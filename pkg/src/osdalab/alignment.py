"""Dual-classifier losses and the adversarial alignment step.

Per step, four losses are combined:

* source cross-entropy of the open-set head (also trains the extractor);
* source binary cross-entropy of the auxiliary head (extractor frozen);
* a weighted adversarial loss on the open-set head's unknown probability,
  where each sample's weight is its probability of belonging to the known
  classes -- the gradient path into the extractor runs through a
  gradient-reversal node so the head descends this term while the
  extractor ascends it;
* the nuclear-norm discrepancy between target and source auxiliary
  probability matrices, which never reaches the extractor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, backward, gradient_reversal, nuclear_norm, stop_gradient
from .networks import (
    ModelBundle,
    log_leaky_complement_rows,
    log_leaky_softmax_rows,
    log_mass_of,
    log_softmax_rows,
    softmax_rows,
)

__all__ = [
    "PROB_FLOOR",
    "AlignmentLosses",
    "adversarial_loss",
    "alignment_step",
    "aux_discrepancy_loss",
    "confusion_penalty",
    "one_hot",
    "source_bce_loss",
    "source_ce_loss",
]

# Probability floor applied to every logarithm's argument: each log term is
# bounded as log(clip(p, 1e-7, 1 - 1e-7)). Losses are composed in logit
# space (log-softmax), so gradients stay alive at saturation while the
# loss values themselves remain finite.
PROB_FLOOR = 1e-7
_LOG_FLOOR = math.log(PROB_FLOOR)
_LOG_CEIL = math.log(1.0 - PROB_FLOOR)


def _bounded_log(log_p: Tensor) -> Tensor:
    return log_p.clip_value(_LOG_FLOOR, _LOG_CEIL)


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 1 or labels.max() > n_classes):
        raise ValueError(f"labels must lie in [1, {n_classes}]")
    return labels


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels - 1] = 1.0
    return out


def source_ce_loss(bundle: ModelBundle, x, y) -> Tensor:
    """Mean negative log-likelihood of the open-set head on labeled rows."""
    y = _check_labels(y, bundle.n_classes)
    log_probs = log_softmax_rows(bundle.open_head.logits(bundle.features(x)))
    picked = log_probs[np.arange(y.size), y - 1]
    return -(picked.clip_value(_LOG_FLOOR, 0.0).mean())


def source_bce_loss(bundle: ModelBundle, x, y) -> Tensor:
    """Mean one-vs-rest binary cross-entropy of the auxiliary head.

    The extractor is frozen here; only the head learns from this loss.
    """
    y = _check_labels(y, bundle.n_classes)
    z = stop_gradient(bundle.features(x))
    logits = bundle.aux_head.logits(z)
    log_p = _bounded_log(log_leaky_softmax_rows(logits))
    log_1mp = _bounded_log(log_leaky_complement_rows(logits))
    targets = Tensor(one_hot(y, bundle.n_classes))
    per_row = -(targets * log_p + (1.0 - targets) * log_1mp).sum(axis=1)
    return per_row.mean()


def confusion_penalty(p_unknown: Tensor, weights) -> Tensor:
    """Mean of -w * (log p + log(1 - p)) over a batch.

    Minimized at p = 1/2 for positive weights, so a head descending it is
    pushed toward maximal uncertainty about "unknown" on weighted samples.
    """
    weights = weights if isinstance(weights, Tensor) else Tensor(weights)
    log_p = _bounded_log(p_unknown.clamp(PROB_FLOOR, 1.0).log())
    log_1mp = _bounded_log((1.0 - p_unknown).clamp(PROB_FLOOR, 1.0).log())
    return (-(weights * (log_p + log_1mp))).mean()


def adversarial_loss(
    bundle: ModelBundle,
    source_x,
    target_x,
    include_source_term: bool = True,
    include_aux: bool = True,
    attached_weights: bool = False,
    grl_coeff: float = 1.0,
) -> Tensor:
    """Weighted unknown-probability confusion loss over both domains.

    Target rows are weighted by their known-class probability, source rows
    by one minus it. Weights are treated as constants unless
    ``attached_weights`` is set (study flag). The path from the unknown
    probability into the extractor runs through a gradient-reversal node.
    """
    if np.asarray(source_x).shape[0] == 0 or np.asarray(target_x).shape[0] == 0:
        raise ValueError("adversarial loss needs non-empty source and target batches")

    c = bundle.n_classes
    z_t = bundle.features(target_x)
    z_s = bundle.features(source_x)
    logits_t = bundle.open_head.logits(gradient_reversal(z_t, grl_coeff))
    logits_s = bundle.open_head.logits(gradient_reversal(z_s, grl_coeff))
    aux_t = bundle.aux_probs(stop_gradient(z_t))
    aux_s = bundle.aux_probs(stop_gradient(z_s))

    def common_weight(logits: Tensor, aux_probs: Tensor) -> Tensor:
        p1 = softmax_rows(logits)[:, :c].sum(axis=1)
        w = p1 * aux_probs.sum(axis=1) if include_aux else p1
        return w if attached_weights else Tensor(w.data)

    def penalty(logits: Tensor, weights: Tensor) -> Tensor:
        log_unknown = _bounded_log(log_softmax_rows(logits)[:, c])
        log_known = _bounded_log(log_mass_of(logits, slice(0, c))[:, 0])
        return (-(weights * (log_unknown + log_known))).mean()

    loss = penalty(logits_t, common_weight(logits_t, aux_t))
    if include_source_term:
        loss = loss + penalty(logits_s, 1.0 - common_weight(logits_s, aux_s))
    return loss


def aux_discrepancy_loss(bundle: ModelBundle, source_x, target_x) -> Tensor:
    """Nuclear norm of target aux probabilities minus the source one.

    Features enter the auxiliary head through stop-gradient nodes, so this
    loss trains the head alone and contributes exactly zero gradient to the
    extractor.
    """
    if np.asarray(source_x).shape[0] == 0 or np.asarray(target_x).shape[0] == 0:
        raise ValueError("discrepancy loss needs non-empty source and target batches")
    probs_t = bundle.aux_probs(stop_gradient(bundle.features(target_x)))
    probs_s = bundle.aux_probs(stop_gradient(bundle.features(source_x)))
    return nuclear_norm(probs_t) - nuclear_norm(probs_s)


@dataclass
class AlignmentLosses:
    source_ce: float
    source_bce: float
    adversarial: float
    aux_discrepancy: float


def alignment_step(
    bundle: ModelBundle,
    source_batch,
    target_batch,
    optimizers,
    lr: float,
    include_source_term: bool = True,
    include_aux: bool = True,
    attached_weights: bool = False,
    grl_coeff: float = 1.0,
) -> AlignmentLosses:
    """One combined update of extractor, open-set head, and auxiliary head.

    ``optimizers`` maps the group names "extractor", "open", and "aux" to
    objects with ``step(lr)``. The single backward pass realizes the
    min/max split: the open head descends its source and adversarial
    terms, the extractor descends source cross-entropy while ascending the
    adversarial term, and the auxiliary head descends its source and
    discrepancy terms.
    """
    ce = source_ce_loss(bundle, source_batch.x, source_batch.y)
    bce = source_bce_loss(bundle, source_batch.x, source_batch.y)
    adv = adversarial_loss(
        bundle,
        source_batch.x,
        target_batch.x,
        include_source_term=include_source_term,
        include_aux=include_aux,
        attached_weights=attached_weights,
        grl_coeff=grl_coeff,
    )
    disc = aux_discrepancy_loss(bundle, source_batch.x, target_batch.x)

    bundle.zero_grads()
    backward(ce + bce + adv + disc)
    for group in ("extractor", "open", "aux"):
        optimizers[group].step(lr)
    return AlignmentLosses(
        source_ce=float(ce.data),
        source_bce=float(bce.data),
        adversarial=float(adv.data),
        aux_discrepancy=float(disc.data),
    )
