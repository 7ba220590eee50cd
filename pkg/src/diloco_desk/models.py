"""Loss models with hand-written backprop.

Two model kinds are supported:

``softmax-regression``
    logits = W[x] + b, with W of shape (V, V) and b of shape (V,). Context
    length is 1.

``mlp-char-lm``
    A Bengio-style n-gram language model::

        tokens (B, C) -> embed (V, d) -> concat (B, C*d)
                      -> [tanh(h @ W_i + b_i)] for each hidden width
                      -> h @ W_out + b_out -> logits (B, V)

    Tensor names: ``embed``, ``hidden{i}.weight``, ``hidden{i}.bias``,
    ``out.weight``, ``out.bias``. For V=16, C=4, hidden=[32] the flat
    size is ``16 d + (4 d) 32 + 32 + 32 * 16 + 16``.

The loss is the mean cross-entropy (nats) over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import LayoutError, ParamVector, Rng, TensorLayout, matmul

__all__ = [
    "Batch",
    "ModelSpec",
    "build_layout",
    "init_params",
    "loss",
    "grad",
    "loss_and_grad",
    "finite_diff_check",
]

MODEL_KINDS = ("softmax-regression", "mlp-char-lm")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Batch:
    contexts: np.ndarray  # (B, C) int64
    targets: np.ndarray  # (B,) int64
    vocab_size: int

    def __post_init__(self):
        contexts = np.asarray(self.contexts, dtype=np.int64)
        targets = np.asarray(self.targets, dtype=np.int64)
        if contexts.ndim != 2 or targets.ndim != 1 or contexts.shape[0] != targets.shape[0]:
            raise ModelError(
                f"bad batch shapes: contexts {contexts.shape}, targets {targets.shape}"
            )
        if targets.shape[0] < 1:
            raise ModelError("batch must contain at least one example")
        for arr in (contexts, targets):
            if arr.size and (arr.min() < 0 or arr.max() >= self.vocab_size):
                raise ModelError(f"token id outside [0, {self.vocab_size})")
        object.__setattr__(self, "contexts", contexts)
        object.__setattr__(self, "targets", targets)

    @property
    def size(self) -> int:
        return self.targets.shape[0]

    @classmethod
    def concat(cls, batches: list["Batch"]) -> "Batch":
        return cls(
            np.concatenate([b.contexts for b in batches]),
            np.concatenate([b.targets for b in batches]),
            batches[0].vocab_size,
        )


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "mlp-char-lm"
    vocab_size: int = 32
    context_length: int = 8
    hidden_dims: tuple[int, ...] = (64,)
    embed_dim: int = 16
    init_scale: float = 0.1
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.kind not in MODEL_KINDS:
            raise ModelError(f"kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.vocab_size < 2:
            raise ModelError("vocab_size must be >= 2")
        if self.init_scale < 0:
            raise ModelError("init_scale must be >= 0")
        if self.kind == "softmax-regression":
            if self.hidden_dims or self.context_length != 1:
                raise ModelError("softmax-regression needs hidden_dims=[] and context_length=1")
        else:
            if self.context_length < 2:
                raise ModelError("mlp-char-lm needs context_length >= 2")
            if not self.hidden_dims or min(self.hidden_dims) < 1:
                raise ModelError("mlp-char-lm needs at least one positive hidden width")
            if self.embed_dim < 1:
                raise ModelError("embed_dim must be >= 1")


def build_layout(spec: ModelSpec) -> TensorLayout:
    V = spec.vocab_size
    if spec.kind == "softmax-regression":
        return TensorLayout.from_shapes([("weight", (V, V)), ("bias", (V,))])
    shapes = [("embed", (V, spec.embed_dim))]
    fan_in = spec.context_length * spec.embed_dim
    for i, width in enumerate(spec.hidden_dims):
        shapes.append((f"hidden{i}.weight", (fan_in, width)))
        shapes.append((f"hidden{i}.bias", (width,)))
        fan_in = width
    shapes.append(("out.weight", (fan_in, V)))
    shapes.append(("out.bias", (V,)))
    return TensorLayout.from_shapes(shapes)


def init_params(spec: ModelSpec) -> ParamVector:
    """Uniform(-init_scale, init_scale) per tensor, one RNG stream per tensor."""
    layout = build_layout(spec)
    values = np.empty(layout.size)
    for i, (name, shape, offset) in enumerate(layout.entries):
        n = int(np.prod(shape))
        values[offset:offset + n] = Rng(spec.init_seed, i).uniform(n, -1.0, 1.0) * spec.init_scale
    return ParamVector(layout, values)


def _check(params: ParamVector, batch: Batch, spec: ModelSpec) -> None:
    if params.layout != build_layout(spec):
        raise LayoutError("parameter layout does not match the model spec")
    if batch.vocab_size != spec.vocab_size:
        raise LayoutError(f"batch vocab {batch.vocab_size} != model vocab {spec.vocab_size}")
    if batch.contexts.shape[1] != spec.context_length:
        raise LayoutError(
            f"batch context length {batch.contexts.shape[1]} != {spec.context_length}"
        )


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward(params: ParamVector, batch: Batch, spec: ModelSpec):
    t = params.tensors()
    if spec.kind == "softmax-regression":
        logits = t["weight"][batch.contexts[:, 0]] + t["bias"]
        return logits, []
    B = batch.size
    h = t["embed"][batch.contexts].reshape(B, -1)
    acts = [h]
    for i in range(len(spec.hidden_dims)):
        h = np.tanh(matmul(h, t[f"hidden{i}.weight"]) + t[f"hidden{i}.bias"])
        acts.append(h)
    logits = matmul(h, t["out.weight"]) + t["out.bias"]
    return logits, acts


def loss(params: ParamVector, batch: Batch, spec: ModelSpec) -> float:
    """Mean negative log-likelihood of the targets, in nats."""
    _check(params, batch, spec)
    logits, _ = _forward(params, batch, spec)
    logp = _log_softmax(logits)
    return float(-logp[np.arange(batch.size), batch.targets].mean())


def loss_and_grad(params: ParamVector, batch: Batch, spec: ModelSpec) -> tuple[float, ParamVector]:
    _check(params, batch, spec)
    B = batch.size
    logits, acts = _forward(params, batch, spec)
    logp = _log_softmax(logits)
    rows = np.arange(B)
    value = float(-logp[rows, batch.targets].mean())

    dlogits = np.exp(logp)
    dlogits[rows, batch.targets] -= 1.0
    dlogits /= B

    g = ParamVector.zeros(params.layout)
    gt = g.tensors()
    if spec.kind == "softmax-regression":
        np.add.at(gt["weight"], batch.contexts[:, 0], dlogits)
        gt["bias"][...] = dlogits.sum(axis=0)
        return value, g

    t = params.tensors()
    h = acts[-1]
    gt["out.weight"][...] = matmul(h.T, dlogits)
    gt["out.bias"][...] = dlogits.sum(axis=0)
    dh = matmul(dlogits, t["out.weight"].T)
    for i in reversed(range(len(spec.hidden_dims))):
        dz = dh * (1.0 - acts[i + 1] ** 2)
        gt[f"hidden{i}.weight"][...] = matmul(acts[i].T, dz)
        gt[f"hidden{i}.bias"][...] = dz.sum(axis=0)
        dh = matmul(dz, t[f"hidden{i}.weight"].T)
    demb = dh.reshape(B, spec.context_length, spec.embed_dim)
    np.add.at(gt["embed"], batch.contexts, demb)
    return value, g


def grad(params: ParamVector, batch: Batch, spec: ModelSpec) -> ParamVector:
    """Gradient of the mean cross-entropy, same layout as ``params``."""
    return loss_and_grad(params, batch, spec)[1]


def finite_diff_check(
    params: ParamVector,
    batch: Batch,
    spec: ModelSpec,
    probes: int,
    rng: Rng,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference partials.

    ``probes`` coordinates are sampled from ``rng``; the denominator is
    ``max(|analytic| + |numeric|, 1e-8)``.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    analytic = grad(params, batch, spec).values
    coords = rng.integers(probes, len(params))
    worst = 0.0
    for j in coords:
        plus = params.copy()
        minus = params.copy()
        plus.values[j] += step
        minus.values[j] -= step
        numeric = (loss(plus, batch, spec) - loss(minus, batch, spec)) / (2 * step)
        denom = max(abs(analytic[j]) + abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[j] - numeric) / denom)
    return worst
