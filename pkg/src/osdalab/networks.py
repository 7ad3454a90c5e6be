"""Feature extractor and the three classifier families.

The extractor is a small multilayer perceptron; every classifier head is a
single linear projection from its feature vector. Three output mappings are
used:

* ``open_probs`` -- softmax over ``n_classes + 1`` logits; the last component
  is the probability of not belonging to any known class.
* ``aux_probs`` -- leaky softmax over ``n_classes`` logits, whose component
  sum stays strictly below one so that missing mass can signal "none of the
  known classes".
* ``mix_probs`` -- plain softmax over ``n_classes`` logits, one head per
  member of the scoring committee trained with cross-domain mixup.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor, parameter

__all__ = [
    "FEATURE_WIDTHS",
    "ClassifierHead",
    "FeatureExtractor",
    "Linear",
    "ModelBundle",
    "leaky_softmax_rows",
    "load_checkpoint",
    "log_leaky_complement_rows",
    "log_leaky_softmax_rows",
    "log_mass_of",
    "log_softmax_rows",
    "save_checkpoint",
    "softmax_rows",
]

FEATURE_WIDTHS = (64, 32)

# Largest per-head input-noise scale; head k of m gets 0.05 * (k-1) / (m-1).
JITTER_SCALE = 0.05

# Committee head k of m keeps a random fraction 1 - 0.4 * (k-1) / (m-1) of
# the feature dimensions; head 1 sees everything.
MASK_SPAN = 0.4

# Initial bias on the open-set head's rejection logit. exp(2) to 1 odds
# against each known class, i.e. roughly 70% unknown mass at start for a
# three-class problem.
UNKNOWN_PRIOR_LOGIT = 2.0


def _committee_mask(feature_dim: int, k: int, m: int) -> np.ndarray | None:
    """Fixed random feature-subspace mask for committee head k of m.

    Determined by (feature_dim, k, m) only, so any two bundles with the
    same architecture share masks and checkpoints reload consistently.
    """
    fraction = 1.0 - MASK_SPAN * (k - 1) / (m - 1)
    keep = max(1, round(fraction * feature_dim))
    if keep >= feature_dim:
        return None
    rng = np.random.default_rng(900_000 + 7919 * k)
    mask = np.zeros(feature_dim)
    mask[rng.choice(feature_dim, size=keep, replace=False)] = 1.0
    return mask


def softmax_rows(logits: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by subtracting the row maximum."""
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    exps = (logits - shift).exp()
    return exps / exps.sum(axis=1, keepdims=True)


def leaky_softmax_rows(logits: Tensor) -> Tensor:
    """Row-wise exp(l_c) / (n + sum_c exp(l_c)).

    The additive ``n`` in the denominator keeps every component in (0, 1)
    and the component sum strictly below 1. Numerator and denominator are
    both scaled by exp(-max(l, 0)), which leaves the value algebraically
    unchanged while avoiding overflow.
    """
    n = logits.data.shape[1]
    shift_val = np.maximum(logits.data.max(axis=1, keepdims=True), 0.0)
    exps = (logits - Tensor(shift_val)).exp()
    return exps / (exps.sum(axis=1, keepdims=True) + Tensor(n * np.exp(-shift_val)))


def log_softmax_rows(logits: Tensor) -> Tensor:
    """Row-wise log softmax, computed in logit space.

    Unlike log(softmax(l)), the gradient does not vanish when a component
    saturates: d log p_i / d l_j = delta_ij - p_j everywhere.
    """
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    shifted = logits - shift
    return shifted - shifted.exp().sum(axis=1, keepdims=True).log()


def log_mass_of(logits: Tensor, columns: slice) -> Tensor:
    """Log of the summed softmax mass over a column range, shape [B, 1].

    Computed in logit space so the gradient survives saturation of the
    complementary columns.
    """
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    exps = (logits - shift).exp()
    return exps[:, columns].sum(axis=1, keepdims=True).log() - exps.sum(
        axis=1, keepdims=True
    ).log()


def log_leaky_softmax_rows(logits: Tensor) -> Tensor:
    """Log of ``leaky_softmax_rows``, computed in logit space."""
    n = logits.data.shape[1]
    shift_val = np.maximum(logits.data.max(axis=1, keepdims=True), 0.0)
    shifted = logits - Tensor(shift_val)
    denom = shifted.exp().sum(axis=1, keepdims=True) + Tensor(n * np.exp(-shift_val))
    return shifted - denom.log()


def log_leaky_complement_rows(logits: Tensor) -> Tensor:
    """Log of one minus each leaky-softmax component, shape [B, n].

    The additive class-count term keeps every complement strictly
    positive. It is added after the cancellation-prone subtraction so the
    numerator cannot round to zero when one component dominates.
    """
    n = logits.data.shape[1]
    shift_val = np.maximum(logits.data.max(axis=1, keepdims=True), 0.0)
    exps = (logits - Tensor(shift_val)).exp()
    total = exps.sum(axis=1, keepdims=True)
    leak = Tensor(n * np.exp(-shift_val))
    return ((total - exps) + leak).log() - (total + leak).log()


class Linear:
    """Fully connected layer with Glorot-uniform weights and zero bias.

    ``init_scale`` shrinks the weight range; heads that sit on top of
    already-trained features start near-uniform that way instead of
    making confident arbitrary calls.
    """

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, init_scale: float = 1.0):
        bound = init_scale * math.sqrt(6.0 / (n_in + n_out))
        self.weight = parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x.matmul(self.weight) + self.bias

    @property
    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


class FeatureExtractor:
    """MLP mapping raw input vectors to a fixed-width feature vector.

    Hidden layers use rectified-linear activations; the final projection is
    linear so features are unconstrained in sign.
    """

    def __init__(self, input_dim: int, widths: tuple[int, ...], rng: np.random.Generator):
        if input_dim < 1 or len(widths) < 1:
            raise ValueError("extractor needs a positive input size and one layer width")
        self.input_dim = int(input_dim)
        self.widths = tuple(int(w) for w in widths)
        self.layers = []
        fan_in = self.input_dim
        for width in self.widths:
            self.layers.append(Linear(fan_in, width, rng))
            fan_in = width

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.layers[:-1]:
            h = layer(h).relu()
        return self.layers[-1](h)

    @property
    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params]


class ClassifierHead:
    """One linear classification head over extractor features.

    kind is "open" (n_classes + 1 outputs), "aux" (n_classes, leaky softmax)
    or "mix" (n_classes, committee member). Mix heads additionally carry an
    input-jitter stream (train-time augmentation) and a fixed feature
    subspace mask. The masks give committee members genuinely different
    views of the feature vector, so their agreement carries information:
    on inputs unlike anything seen in training, differently-masked heads
    extrapolate differently and disagree. Masks are derived from the head
    index alone, making them a property of the architecture rather than of
    a particular training run.
    """

    def __init__(
        self,
        kind: str,
        feature_dim: int,
        n_out: int,
        rng: np.random.Generator,
        index: int = 0,
        jitter_sigma: float = 0.0,
        jitter_seed=None,
        feature_mask: np.ndarray | None = None,
        init_scale: float = 1.0,
    ):
        if kind not in ("open", "aux", "mix"):
            raise ValueError(f"unknown head kind {kind!r}")
        self.kind = kind
        self.index = index
        self.linear = Linear(feature_dim, n_out, rng, init_scale=init_scale)
        self.jitter_sigma = float(jitter_sigma)
        self.jitter_rng = np.random.default_rng(jitter_seed)
        self.feature_mask = feature_mask

    def logits(self, z: Tensor) -> Tensor:
        if self.feature_mask is not None:
            z = z * Tensor(self.feature_mask)
        return self.linear(z)

    @property
    def params(self) -> list[Tensor]:
        return self.linear.params


class ModelBundle:
    """Feature extractor plus open-set, auxiliary, and committee heads."""

    def __init__(
        self,
        extractor: FeatureExtractor,
        open_head: ClassifierHead,
        aux_head: ClassifierHead,
        mix_heads: list[ClassifierHead],
        n_classes: int,
    ):
        if len(mix_heads) < 2:
            raise ValueError("at least two mix heads are required")
        self.extractor = extractor
        self.open_head = open_head
        self.aux_head = aux_head
        self.mix_heads = mix_heads
        self.n_classes = int(n_classes)

    @classmethod
    def create(
        cls,
        input_dim: int,
        n_classes: int,
        m: int = 5,
        widths: tuple[int, ...] = FEATURE_WIDTHS,
        seed=0,
        jitter_scale: float = JITTER_SCALE,
    ) -> "ModelBundle":
        """Build a freshly initialized bundle; fully determined by `seed`."""
        if m < 2:
            raise ValueError("the committee needs at least two heads")
        if n_classes < 2:
            raise ValueError("need at least two known classes")
        root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        init_ss, jitter_ss = root.spawn(2)
        rng = np.random.default_rng(init_ss)
        jitter_children = jitter_ss.spawn(m)

        extractor = FeatureExtractor(input_dim, widths, rng)
        fdim = extractor.feature_dim
        # The open-set head starts from an unknown-favoring prior: tiny
        # weights (no arbitrary confident calls on warmed-up features) and
        # a positive bias on the rejection logit, so before any evidence it
        # assigns most mass to "none of the known classes". Source training
        # then earns known-class mass back, which is what makes the
        # self-tuned threshold start high and relax.
        open_head = ClassifierHead("open", fdim, n_classes + 1, rng, init_scale=0.05)
        open_head.linear.bias.data[n_classes] = UNKNOWN_PRIOR_LOGIT
        aux_head = ClassifierHead("aux", fdim, n_classes, rng)
        mix_heads = [
            ClassifierHead(
                "mix",
                fdim,
                n_classes,
                rng,
                index=k,
                jitter_sigma=jitter_scale * (k - 1) / (m - 1),
                jitter_seed=jitter_children[k - 1],
                feature_mask=_committee_mask(fdim, k, m),
            )
            for k in range(1, m + 1)
        ]
        return cls(extractor, open_head, aux_head, mix_heads, n_classes)

    @property
    def m(self) -> int:
        return len(self.mix_heads)

    @property
    def input_dim(self) -> int:
        return self.extractor.input_dim

    def features(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        return self.extractor(x)

    def open_probs(self, z: Tensor) -> Tensor:
        return softmax_rows(self.open_head.logits(z))

    def aux_probs(self, z: Tensor) -> Tensor:
        return leaky_softmax_rows(self.aux_head.logits(z))

    def mix_probs(self, z: Tensor, k: int) -> Tensor:
        if not 1 <= k <= self.m:
            raise IndexError(f"mix head index {k} outside [1, {self.m}]")
        return softmax_rows(self.mix_heads[k - 1].logits(z))

    def common_prob(self, x, include_aux: bool = True) -> Tensor:
        """Per-row probability of belonging to one of the known classes.

        Product of the known-class mass under the open-set head and the
        component sum of the auxiliary head (the latter dropped when
        ``include_aux`` is false).
        """
        z = self.features(x)
        p1 = self.open_probs(z)[:, : self.n_classes].sum(axis=1)
        if not include_aux:
            return p1
        p2 = self.aux_probs(z).sum(axis=1)
        return p1 * p2

    def jitter(self, x: np.ndarray, k: int) -> np.ndarray:
        """Head k's noisy view of the inputs (training-time augmentation)."""
        head = self.mix_heads[k - 1]
        if head.jitter_sigma == 0.0:
            return x
        return x + head.jitter_sigma * head.jitter_rng.standard_normal(x.shape)

    def parameters(self) -> list[Tensor]:
        """All trainable tensors, in the fixed checkpoint declaration order."""
        out = list(self.extractor.params)
        out += self.open_head.params
        out += self.aux_head.params
        for head in self.mix_heads:
            out += head.params
        return out

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()


_MAGIC = b"OSDACKPT"
_VERSION = 1


def save_checkpoint(bundle: ModelBundle, path) -> None:
    """Write parameters as a flat little-endian binary file.

    Layout: magic, version, n_classes, m, width count, widths (input dim
    followed by layer widths), then every parameter array as raw float64 in
    ``ModelBundle.parameters`` order.
    """
    widths = (bundle.input_dim, *bundle.extractor.widths)
    header = struct.pack(
        f"<8sIIII{len(widths)}I",
        _MAGIC,
        _VERSION,
        bundle.n_classes,
        bundle.m,
        len(widths),
        *widths,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for p in bundle.parameters():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelBundle:
    """Rebuild a bundle from ``save_checkpoint`` output.

    The loaded bundle is meant for evaluation or further orchestration; the
    jitter streams restart from a fixed seed because they are not part of
    the stored state.
    """
    blob = Path(path).read_bytes()
    fixed = struct.calcsize("<8sIIII")
    if len(blob) < fixed:
        raise ValueError(f"checkpoint {path} is truncated")
    magic, version, n_classes, m, n_widths = struct.unpack_from("<8sIIII", blob)
    if magic != _MAGIC:
        raise ValueError(f"{path} is not a model checkpoint")
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    widths = struct.unpack_from(f"<{n_widths}I", blob, fixed)
    offset = fixed + struct.calcsize(f"<{n_widths}I")

    bundle = ModelBundle.create(widths[0], n_classes, m=m, widths=widths[1:], seed=0)
    for p in bundle.parameters():
        nbytes = p.data.size * 8
        if offset + nbytes > len(blob):
            raise ValueError(f"checkpoint {path} is truncated")
        flat = np.frombuffer(blob, dtype="<f8", count=p.data.size, offset=offset)
        p.data = flat.reshape(p.data.shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise ValueError(f"checkpoint {path} has trailing bytes")
    return bundle
