"""Screening harness: score candidate defaults against acceptance-style checks.

Scratch tool for choosing default geometry/optimization constants; not part
of the package.
"""

import itertools
import sys

import numpy as np

from osdalab import SynthConfig, TrainConfig, generate_task, no_grad
from osdalab.mixup import score_batch
from osdalab.networks import ModelBundle
from osdalab.trainer import UNKNOWN_LABEL, metrics_from_predictions, pretrain, run

ORIG_CREATE = ModelBundle.create.__func__


def set_jitter_scale(scale):
    def patched(cls, input_dim, n_classes, m=5, widths=(64, 32), seed=0, jitter_scale=scale):
        return ORIG_CREATE(cls, input_dim, n_classes, m=m, widths=widths, seed=seed,
                           jitter_scale=scale)

    ModelBundle.create = classmethod(patched)


def baseline_h_score(task, bundle, h, n_classes):
    with no_grad():
        z = bundle.features(task.target_x)
        stacked = np.stack([bundle.mix_probs(z, k).data for k in range(1, bundle.m + 1)])
    mp = stacked.mean(axis=0)
    preds = np.where(mp.max(1) < h, UNKNOWN_LABEL, mp.argmax(1) + 1)
    truth = np.where(task.target_y <= n_classes, task.target_y, UNKNOWN_LABEL)
    return metrics_from_predictions(truth, preds, n_classes).h_score


def screen(sig, sp, prad, plift, rot, lr, scale, jit, pre, seed=1):
    set_jitter_scale(jit)
    base = dict(feature_dim=6, cluster_sigma=sig, cluster_spacing=sp, rotation_deg=rot,
                private_radius=prad, private_lift=plift, seed=seed)
    cfg_kw = dict(seed=seed, learning_rate=lr, extractor_lr_scale=scale, max_pre_iter=pre)
    try:
        task = generate_task(SynthConfig(**base), 3, 6)
        res = run(task, TrainConfig(**cfg_kw))
        hs = res.schedule.values()
        m = res.log.final_metrics
        sc = score_batch(res.bundle, task.target_x).commonness
        cm = task.target_y <= 3
        pre_bundle, _ = pretrain(task, TrainConfig(**cfg_kw))
        bh = baseline_h_score(task, pre_bundle, res.log.final_threshold, 3)
        nm = run(task, TrainConfig(**cfg_kw, no_mixup=True)).log.final_metrics
        h_by_o = []
        for total in (4, 6, 12):
            t2 = generate_task(SynthConfig(**base), 3, total)
            h_by_o.append(run(t2, TrainConfig(**cfg_kw)).log.final_threshold)
    except Exception as exc:
        return (f"sig={sig} sp={sp} pr={prad} pl={plift} rot={rot} lr={lr} sc={scale} "
                f"jit={jit} pre={pre}: ABORT {str(exc)[:40]}")
    decay = float(np.mean(hs[:3]) - np.mean(hs[-3:]))
    c4 = decay > 0
    c5 = h_by_o[0] <= h_by_o[1] + 1e-9 and h_by_o[1] <= h_by_o[2] + 1e-9
    c6 = m.h_score - bh >= 0.10
    c7 = nm.h_score <= m.h_score + 0.02 and m.h_score > nm.h_score
    return (
        f"sig={sig} sp={sp} pr={prad} pl={plift} rot={rot} lr={lr} sc={scale} jit={jit} pre={pre}: "
        f"[{'4' if c4 else '.'}{'5' if c5 else '.'}{'6' if c6 else '.'}{'7' if c7 else '.'}] "
        f"decay={decay:+.2f} hO={h_by_o[0]:.2f}/{h_by_o[1]:.2f}/{h_by_o[2]:.2f} "
        f"omega c={sc[cm].mean():.2f} p={sc[~cm].mean():.2f} "
        f"os*={m.os_star:.2f} unk={m.unknown_acc:.2f} H={m.h_score:.2f} "
        f"baseH={bh:.2f} nomixH={nm.h_score:.2f}"
    )


GRID = [
    # sigma, spacing, private_radius, private_lift, rotation, lr, ex_scale, jitter, pre
    (0.8, 2.5, 0.5, 0.8, 25.0, 0.003, 0.1, 0.05, 200),
    (0.8, 2.5, 0.5, 0.8, 25.0, 0.01, 0.1, 0.05, 200),
    (0.5, 3.0, 0.5, 0.8, 25.0, 0.003, 0.1, 0.05, 200),
    (0.5, 3.0, 0.5, 0.8, 25.0, 0.01, 0.1, 0.05, 200),
    (0.8, 2.5, 0.4, 1.0, 25.0, 0.003, 0.1, 0.05, 200),
    (0.8, 2.5, 0.6, 0.6, 25.0, 0.003, 0.1, 0.05, 200),
    (1.0, 2.5, 0.5, 0.8, 25.0, 0.003, 0.1, 0.05, 200),
    (0.8, 3.0, 0.5, 0.8, 25.0, 0.003, 0.1, 0.05, 200),
    (0.8, 2.5, 0.5, 0.8, 10.0, 0.003, 0.1, 0.05, 200),
    (0.8, 2.5, 0.5, 0.8, 25.0, 0.003, 0.3, 0.05, 200),
    (0.8, 2.5, 0.5, 0.8, 25.0, 0.003, 0.1, 0.6, 200),
    (0.8, 2.5, 0.5, 0.8, 25.0, 0.003, 0.1, 0.05, 100),
    (0.6, 2.8, 0.5, 0.9, 25.0, 0.003, 0.1, 0.05, 200),
    (0.8, 2.5, 0.3, 0.9, 25.0, 0.01, 0.1, 0.05, 200),
    (0.5, 3.0, 0.4, 0.9, 25.0, 0.003, 0.1, 0.05, 200),
    (0.7, 2.8, 0.5, 0.8, 25.0, 0.005, 0.1, 0.05, 200),
]

if __name__ == "__main__":
    shard = int(sys.argv[1])
    nshards = int(sys.argv[2])
    for idx, combo in enumerate(GRID):
        if idx % nshards == shard:
            print(screen(*combo), flush=True)
