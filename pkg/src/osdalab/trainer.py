"""End-to-end training: warm-up, alternating alignment/mixup epochs, metrics.

The schedule is: pretrain the extractor and committee on source labels,
then per epoch run a block of alignment steps, recompute the self-tuned
threshold from the full target set, and run a block of committee mixup
steps with the extractor frozen. At test time a sample is rejected as
unknown when its commonness score falls below the threshold recomputed
over the evaluation target set; otherwise the open-set head picks a known
class.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .alignment import AlignmentLosses, alignment_step
from .autodiff import NumericError, Tensor, backward, no_grad
from .data import OsdaTask, UNLABELED, batch_iterator
from .mixup import (
    MixRatioError,
    mixup_step,
    pretrain_loss,
    pseudo_labels,
    sample_mix_ratio,
    score_batch,
)
from .networks import ModelBundle
from .threshold import ThresholdSchedule, compute_threshold

__all__ = [
    "UNKNOWN_LABEL",
    "AuditRow",
    "EpochRecord",
    "Metrics",
    "SgdNesterov",
    "TrainConfig",
    "TrainLog",
    "TrainResult",
    "evaluate",
    "lr_at",
    "make_ratio_policy",
    "metrics_from_predictions",
    "predict",
    "predict_batch",
    "pretrain",
    "run",
    "train",
]

log = logging.getLogger(__name__)

# Prediction label reserved for "not one of the known classes".
UNKNOWN_LABEL = 0

# Pairing seed used whenever the threshold is recomputed for evaluation
# (training-time gating uses per-epoch seeds derived from the run seed).
EVAL_PAIR_SEED = 0


@dataclass
class TrainConfig:
    """All run hyperparameters; flags mirror the command-line interface."""

    seed: int
    lambda1: float = 0.5
    lambda2: float = 0.5
    r: float = 30.0
    m: int = 5
    batch_size: int = 48
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_gamma: float = 0.001
    lr_beta: float = 0.75
    max_pre_iter: int = 200
    max_epochs: int = 30
    iters_per_epoch: int = 50
    widths: tuple[int, ...] = (64, 32)
    grl_coeff: float = 1.0
    # The extractor trains slower than the heads so the classifier side of
    # the adversarial game can track the feature side without blowing up.
    extractor_lr_scale: float = 0.1
    # The open-set head also steps gently: its uncertainty-spreading pull
    # should act on the target side before source cross-entropy saturates
    # its outputs, which is what lets the threshold start high and relax.
    open_lr_scale: float = 1.0
    # The auxiliary head learns fast so its domain discriminability
    # saturates early; target-side sample weights then anneal over
    # training, letting the open head re-concentrate known mass late.
    aux_lr_scale: float = 1.0
    # Committee heads fine-tune gently from their warmed-up state; large
    # steps would re-sharpen them globally and wash out the uncertainty
    # signal the commonness criteria rely on.
    mix_lr_scale: float = 1.0
    jitter: bool = True
    # ablation switches
    no_adv_source_term: bool = False
    no_gaux: bool = False
    no_cmmc: bool = False
    no_cmmc_h: bool = False
    no_mixup: bool = False
    beta_lambda2: bool = False
    attached_weights: bool = False

    def __post_init__(self):
        if not 0.5 <= self.lambda1 <= 1.0:
            raise ValueError(f"lambda1 must lie in [0.5, 1], got {self.lambda1}")
        if not 0.0 <= self.lambda2 <= 1.0:
            raise ValueError(f"lambda2 must lie in [0, 1], got {self.lambda2}")
        if self.m < 2:
            raise ValueError("m must be at least 2")
        if self.max_pre_iter < 1 or self.iters_per_epoch < 1:
            raise ValueError("iteration counts must be at least 1")
        if self.max_epochs < 0:
            raise ValueError("epoch count must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")

    @property
    def prediction_mode(self) -> str:
        if self.no_cmmc:
            return "open-threshold"
        if self.no_cmmc_h:
            return "open-confidence"
        return "commonness"


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Polynomially decayed learning rate at a 0-based global iteration."""
    return cfg.learning_rate * (1.0 + cfg.lr_gamma * iteration) ** (-cfg.lr_beta)


class SgdNesterov:
    """Nesterov-momentum SGD with decoupled-into-gradient weight decay.

    With velocity v <- mu*v + g (g includes weight decay), each parameter
    moves by -lr * (g + mu*v). Velocity persists across steps; one
    instance per parameter group keeps momentum uncoupled across groups.
    """

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = list(params)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocities):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - lr * (g + self.momentum * v)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class _ScaledSgd:
    """Wraps an optimizer so its steps use a scaled learning rate."""

    def __init__(self, inner: SgdNesterov, scale: float):
        self.inner = inner
        self.scale = float(scale)

    def step(self, lr: float) -> None:
        self.inner.step(lr * self.scale)

    def zero_grad(self) -> None:
        self.inner.zero_grad()


class OptimizerSet:
    """One velocity state per parameter group; the extractor runs scaled."""

    def __init__(self, bundle: ModelBundle, cfg: TrainConfig):
        make = lambda params: SgdNesterov(params, cfg.momentum, cfg.weight_decay)
        self.groups = {
            "extractor": _ScaledSgd(make(bundle.extractor.params), cfg.extractor_lr_scale),
            "open": _ScaledSgd(make(bundle.open_head.params), cfg.open_lr_scale),
            "aux": _ScaledSgd(make(bundle.aux_head.params), cfg.aux_lr_scale),
        }
        # Warm-up steps the committee at full rate (mix_warm); the
        # alternating phase uses the scaled view (mix).
        self.mix_warm = [make(head.params) for head in bundle.mix_heads]
        self.mix = [_ScaledSgd(opt, cfg.mix_lr_scale) for opt in self.mix_warm]

    def __getitem__(self, name: str):
        return self.groups[name]


@dataclass
class Metrics:
    """Per-class accuracy summaries over known classes plus unknown."""

    os_score: float
    os_star: float
    unknown_acc: float
    h_score: float


def metrics_from_predictions(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> Metrics:
    """Metrics from mapped labels (0 = unknown, 1..n_classes = known).

    os_score averages per-class accuracy over every class present in the
    ground truth (unknown included); os_star averages over present known
    classes; unknown_acc is the unknown class accuracy (0 when absent).
    h_score is the harmonic mean of os_star and unknown_acc, 0 when their
    sum is 0.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    per_class: list[float] = []
    known: list[float] = []
    unknown_acc = 0.0
    for cls in range(n_classes + 1):
        mask = y_true == cls
        if not mask.any():
            continue
        acc = float((y_pred[mask] == cls).mean())
        per_class.append(acc)
        if cls == UNKNOWN_LABEL:
            unknown_acc = acc
        else:
            known.append(acc)
    if not per_class:
        raise ValueError("no ground-truth labels to score")
    os_star = float(np.mean(known)) if known else 0.0
    denom = os_star + unknown_acc
    h_score = 2.0 * os_star * unknown_acc / denom if denom > 0.0 else 0.0
    return Metrics(
        os_score=float(np.mean(per_class)),
        os_star=os_star,
        unknown_acc=unknown_acc,
        h_score=h_score,
    )


def predict_batch(bundle: ModelBundle, x, threshold: float, mode: str = "commonness") -> np.ndarray:
    """Labels for each row of x: UNKNOWN_LABEL or a known class in 1..C.

    Modes:
      commonness      -- reject when the committee commonness score is
                         strictly below the threshold, else argmax of the
                         open-set head's known components (default path);
      open-threshold  -- reject when the open-set head's best known-class
                         probability falls below the threshold;
      open-confidence -- argmax over all n_classes + 1 components, the
                         threshold is ignored.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c = bundle.n_classes
    with no_grad():
        open_probs = bundle.open_probs(bundle.features(x)).data
    best_known = open_probs[:, :c].argmax(axis=1) + 1

    if mode == "commonness":
        scores = score_batch(bundle, x).commonness
        return np.where(scores < threshold, UNKNOWN_LABEL, best_known)
    if mode == "open-threshold":
        best_mass = open_probs[:, :c].max(axis=1)
        return np.where(best_mass < threshold, UNKNOWN_LABEL, best_known)
    if mode == "open-confidence":
        top = open_probs.argmax(axis=1)
        return np.where(top == c, UNKNOWN_LABEL, top + 1)
    raise ValueError(f"unknown prediction mode {mode!r}")


def predict(bundle: ModelBundle, x_row, threshold: float, mode: str = "commonness") -> int:
    return int(predict_batch(bundle, np.atleast_2d(x_row), threshold, mode)[0])


def _target_open_probs(bundle: ModelBundle, x) -> np.ndarray:
    with no_grad():
        return bundle.open_probs(bundle.features(np.asarray(x, dtype=np.float64))).data


def evaluate(
    task: OsdaTask,
    bundle: ModelBundle,
    cfg: TrainConfig,
    threshold: float | None = None,
    pair_seed: int = EVAL_PAIR_SEED,
) -> tuple[Metrics, float]:
    """Score the bundle on the task's labeled target rows.

    When no threshold is passed it is recomputed over the full evaluation
    target set with the self-tuning formula (manual thresholds exist only
    as an override for ablation runs). Returns (metrics, threshold used).
    """
    labeled = task.target_y != UNLABELED
    if not labeled.any():
        raise ValueError("task has no labeled target rows to evaluate")
    if threshold is None:
        probs = _target_open_probs(bundle, task.target_x)
        threshold = compute_threshold(probs, cfg.lambda1, pair_seed)
    preds = predict_batch(bundle, task.target_x[labeled], threshold, cfg.prediction_mode)
    truth = task.target_y[labeled]
    mapped = np.where(truth <= bundle.n_classes, truth, UNKNOWN_LABEL)
    return metrics_from_predictions(mapped, preds, bundle.n_classes), threshold


@dataclass
class EpochRecord:
    epoch: int
    threshold: float
    pair_count: int
    source_ce: float
    source_bce: float
    adversarial: float
    aux_discrepancy: float
    mixup: float
    metrics: Metrics | None


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    final_metrics: Metrics | None = None
    final_threshold: float | None = None

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.epochs:
                row = {
                    "type": "epoch",
                    "epoch": rec.epoch,
                    "h": rec.threshold,
                    "pairs": rec.pair_count,
                    "loss_source_ce": rec.source_ce,
                    "loss_source_bce": rec.source_bce,
                    "loss_adversarial": rec.adversarial,
                    "loss_aux_discrepancy": rec.aux_discrepancy,
                    "loss_mixup": rec.mixup,
                }
                if rec.metrics is not None:
                    row.update(_metrics_dict(rec.metrics))
                fh.write(json.dumps(row) + "\n")
            summary = {"type": "summary", "epochs": len(self.epochs), "final_h": self.final_threshold}
            if self.final_metrics is not None:
                summary.update(_metrics_dict(self.final_metrics))
            fh.write(json.dumps(summary) + "\n")


def _metrics_dict(metrics: Metrics) -> dict:
    return {
        "os": metrics.os_score,
        "os_star": metrics.os_star,
        "unknown": metrics.unknown_acc,
        "h_score": metrics.h_score,
    }


@dataclass
class AuditRow:
    epoch: int
    target_index: int
    entropy: float
    consistency: float
    confidence: float
    commonness: float
    pseudo_label: int
    gated: bool
    ratio: float | None


@dataclass
class TrainResult:
    bundle: ModelBundle
    log: TrainLog
    schedule: ThresholdSchedule
    audit_rows: list[AuditRow]


def _seed_tree(cfg: TrainConfig) -> dict[str, np.random.SeedSequence]:
    names = ("model", "pretrain_batches", "train_batches", "pairing", "mixup", "audit")
    return dict(zip(names, np.random.SeedSequence(cfg.seed).spawn(len(names))))


def make_ratio_policy(cfg: TrainConfig, rng: np.random.Generator):
    """Mixing-ratio policy: fixed value, zero, or adaptive Beta draws.

    With Beta draws enabled, constraint violations (threshold too small for
    the concentration r, or score not above the threshold) fall back to the
    fixed ratio with a logged warning.
    """
    if cfg.no_mixup:
        return lambda score, threshold: 0.0
    if not cfg.beta_lambda2:
        return lambda score, threshold: cfg.lambda2

    def policy(score: float, threshold: float) -> float:
        try:
            return sample_mix_ratio(score, threshold, cfg.r, rng)
        except MixRatioError as exc:
            log.warning("adaptive mixing ratio unavailable (%s); using %s", exc, cfg.lambda2)
            return cfg.lambda2

    return policy


def pretrain(task: OsdaTask, cfg: TrainConfig) -> tuple[ModelBundle, OptimizerSet]:
    """Warm up the extractor and committee on source labels.

    The open-set and auxiliary heads keep their initialization. The bundle
    and optimizer states are fully determined by cfg.seed.
    """
    seeds = _seed_tree(cfg)
    bundle = ModelBundle.create(
        input_dim=task.feature_dim,
        n_classes=task.n_source_classes,
        m=cfg.m,
        widths=cfg.widths,
        seed=seeds["model"],
    )
    opts = OptimizerSet(bundle, cfg)
    batches = batch_iterator(task, cfg.batch_size, seeds["pretrain_batches"])

    for i in range(cfg.max_pre_iter):
        total: Tensor | None = None
        for k in range(1, cfg.m + 1):
            source_batch, _ = next(batches)
            loss_k = pretrain_loss(bundle, source_batch.x, source_batch.y, k, jitter=cfg.jitter)
            total = loss_k if total is None else total + loss_k
        if not np.isfinite(total.data):
            raise NumericError(f"non-finite loss at pretrain iteration {i}")
        bundle.zero_grads()
        backward(total)
        lr = lr_at(i, cfg)
        opts["extractor"].inner.step(lr)
        for opt in opts.mix_warm:
            opt.step(lr)
    return bundle, opts


def train(
    task: OsdaTask, cfg: TrainConfig, bundle: ModelBundle, opts: OptimizerSet
) -> tuple[TrainLog, ThresholdSchedule, list[AuditRow]]:
    """Alternating training after warm-up; mutates the bundle in place.

    Per epoch: iters_per_epoch alignment steps, one threshold computation
    over the full target set, then iters_per_epoch committee mixup steps
    during which the extractor is frozen.
    """
    seeds = _seed_tree(cfg)
    batches = batch_iterator(task, cfg.batch_size, seeds["train_batches"])
    pairing = seeds["pairing"].spawn(max(cfg.max_epochs, 1))
    ratio_policy = make_ratio_policy(cfg, np.random.default_rng(seeds["mixup"]))
    pair_rng = np.random.default_rng(seeds["mixup"].spawn(1)[0])
    audit_seeds = seeds["audit"].spawn(max(cfg.max_epochs, 1))

    train_log = TrainLog()
    schedule = ThresholdSchedule()
    audit_rows: list[AuditRow] = []
    iteration = cfg.max_pre_iter
    can_score = (task.target_y != UNLABELED).any()

    for epoch in range(1, cfg.max_epochs + 1):
        align_totals = np.zeros(4)
        for j in range(cfg.iters_per_epoch):
            source_batch, target_batch = next(batches)
            try:
                losses = alignment_step(
                    bundle,
                    source_batch,
                    target_batch,
                    opts,
                    lr_at(iteration, cfg),
                    include_source_term=not cfg.no_adv_source_term,
                    include_aux=not cfg.no_gaux,
                    attached_weights=cfg.attached_weights,
                    grl_coeff=cfg.grl_coeff,
                )
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, alignment iteration {j}: {exc}") from exc
            values = (losses.source_ce, losses.source_bce, losses.adversarial, losses.aux_discrepancy)
            if not np.isfinite(values).all():
                raise NumericError(f"non-finite loss at epoch {epoch}, alignment iteration {j}")
            align_totals += values
            iteration += 1

        probs = _target_open_probs(bundle, task.target_x)
        threshold = compute_threshold(probs, cfg.lambda1, pairing[epoch - 1])
        schedule.record(epoch, threshold, task.n_target // 2, cfg.lambda1)

        mix_loss_sum = 0.0
        mix_loss_n = 0
        pair_count = 0
        if not cfg.no_cmmc:
            for j in range(cfg.iters_per_epoch):
                head_batches = [next(batches) for _ in range(cfg.m)]
                try:
                    losses_k, pairs = mixup_step(
                        bundle,
                        head_batches,
                        threshold,
                        opts.mix,
                        lr_at(iteration, cfg),
                        ratio_policy,
                        pair_rng,
                        jitter=cfg.jitter,
                    )
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch}, mixup iteration {j}: {exc}") from exc
                if not np.isfinite(losses_k).all():
                    raise NumericError(f"non-finite loss at epoch {epoch}, mixup iteration {j}")
                mix_loss_sum += sum(losses_k)
                mix_loss_n += len(losses_k)
                pair_count += pairs
                iteration += 1

        metrics = None
        if can_score:
            metrics, _ = evaluate(task, bundle, cfg, threshold=threshold)
        train_log.epochs.append(
            EpochRecord(
                epoch=epoch,
                threshold=threshold,
                pair_count=pair_count,
                source_ce=align_totals[0] / cfg.iters_per_epoch,
                source_bce=align_totals[1] / cfg.iters_per_epoch,
                adversarial=align_totals[2] / cfg.iters_per_epoch,
                aux_discrepancy=align_totals[3] / cfg.iters_per_epoch,
                mixup=mix_loss_sum / mix_loss_n if mix_loss_n else 0.0,
                metrics=metrics,
            )
        )
        audit_rows.extend(
            _audit_epoch(bundle, task, cfg, epoch, threshold, audit_seeds[epoch - 1])
        )

    if can_score:
        train_log.final_metrics, train_log.final_threshold = evaluate(task, bundle, cfg)
    elif cfg.max_epochs:
        train_log.final_threshold = train_log.epochs[-1].threshold
    return train_log, schedule, audit_rows


def _audit_epoch(
    bundle: ModelBundle,
    task: OsdaTask,
    cfg: TrainConfig,
    epoch: int,
    threshold: float,
    audit_seed: np.random.SeedSequence,
) -> list[AuditRow]:
    """Epoch-end snapshot of criteria, pseudo-labels, and gating decisions."""
    scores = score_batch(bundle, task.target_x)
    labels = pseudo_labels(bundle, task.target_x)
    policy = make_ratio_policy(cfg, np.random.default_rng(audit_seed))
    rows = []
    for idx in range(task.n_target):
        gated = bool(scores.commonness[idx] >= threshold)
        ratio = policy(float(scores.commonness[idx]), threshold) if gated else None
        rows.append(
            AuditRow(
                epoch=epoch,
                target_index=idx,
                entropy=float(scores.entropy[idx]),
                consistency=float(scores.consistency[idx]),
                confidence=float(scores.confidence[idx]),
                commonness=float(scores.commonness[idx]),
                pseudo_label=int(labels[idx]),
                gated=gated,
                ratio=ratio,
            )
        )
    return rows


def run(task: OsdaTask, cfg: TrainConfig) -> TrainResult:
    """Full pipeline: pretrain, alternate train, final evaluation."""
    bundle, opts = pretrain(task, cfg)
    train_log, schedule, audit_rows = train(task, cfg, bundle, opts)
    if train_log.final_metrics is None and (task.target_y != UNLABELED).any():
        train_log.final_metrics, train_log.final_threshold = evaluate(task, bundle, cfg)
    return TrainResult(bundle=bundle, log=train_log, schedule=schedule, audit_rows=audit_rows)
