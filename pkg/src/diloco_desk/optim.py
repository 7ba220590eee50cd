"""Inner optimizers (SGD, AdamW, Muon) and the outer momentum step.

All step functions are pure: they take (params, grad, state, cfg) and return
new (params, state) without touching their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from .numkit import (
    NS_COEFFS_FAST,
    NS_COEFFS_FIXED_POINT,
    LayoutError,
    ParamVector,
    TensorLayout,
    newton_schulz_orthogonalize,
)

__all__ = [
    "SGDConfig",
    "AdamWConfig",
    "AdamWState",
    "MuonConfig",
    "MuonState",
    "OuterConfig",
    "OuterState",
    "sgd_step",
    "adamw_step",
    "muon_step",
    "outer_step",
    "outer_step_from_replicas",
    "init_inner_state",
    "inner_step",
    "with_lr",
]


class OptimError(ValueError):
    pass


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 0.1
    kind: str = field(default="sgd", init=False)

    def __post_init__(self):
        if self.lr < 0:
            raise OptimError("lr must be >= 0")


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    kind: str = field(default="adamw", init=False)

    def __post_init__(self):
        if self.lr < 0:
            raise OptimError("lr must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise OptimError("beta1 and beta2 must lie in [0, 1)")
        if self.eps <= 0:
            raise OptimError("eps must be > 0")
        if self.weight_decay < 0:
            raise OptimError("weight_decay must be >= 0")


@dataclass(frozen=True)
class AdamWState:
    m: ParamVector
    v: ParamVector
    t: int = 0

    @classmethod
    def zeros(cls, layout: TensorLayout) -> "AdamWState":
        return cls(ParamVector.zeros(layout), ParamVector.zeros(layout), 0)


NS_PRESETS = {"fixed-point": NS_COEFFS_FIXED_POINT, "fast": NS_COEFFS_FAST}


@dataclass(frozen=True)
class MuonConfig:
    """Muon for 2-D tensors, AdamW (``adamw``) for everything else.

    The orthogonalized update of an (r, c) matrix is multiplied by
    ``sqrt(max(1, r / c))``.
    """

    lr: float = 0.02
    momentum: float = 0.9
    ns_iterations: int = 5
    ns_coeffs: str = "fixed-point"
    fallback: str = "adamw-for-non-2d"
    adamw: AdamWConfig = field(default_factory=AdamWConfig)
    kind: str = field(default="muon", init=False)

    def __post_init__(self):
        if self.lr < 0:
            raise OptimError("lr must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise OptimError("momentum must lie in [0, 1)")
        if self.ns_iterations < 1:
            raise OptimError("ns_iterations must be >= 1")
        if self.ns_coeffs not in NS_PRESETS:
            raise OptimError(f"ns_coeffs must be one of {sorted(NS_PRESETS)}")
        if self.fallback != "adamw-for-non-2d":
            raise OptimError("fallback must be 'adamw-for-non-2d'")


@dataclass(frozen=True)
class MuonState:
    buffer: ParamVector
    adamw: AdamWState

    @classmethod
    def zeros(cls, layout: TensorLayout) -> "MuonState":
        return cls(ParamVector.zeros(layout), AdamWState.zeros(layout))


InnerConfig = Union[SGDConfig, AdamWConfig, MuonConfig]


def _same_layout(*vectors: ParamVector) -> None:
    first = vectors[0].layout
    for v in vectors[1:]:
        if v.layout is not first and v.layout != first:
            raise LayoutError("optimizer operands have different layouts")


def sgd_step(params: ParamVector, grad: ParamVector, state, cfg: SGDConfig):
    _same_layout(params, grad)
    return ParamVector(params.layout, params.values - cfg.lr * grad.values), state


def _adamw_arrays(p, g, m, v, t, cfg: AdamWConfig):
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    p = p - cfg.lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p)
    return p, m, v


def adamw_step(params: ParamVector, grad: ParamVector, state: AdamWState, cfg: AdamWConfig):
    """Adam with bias correction and decoupled weight decay."""
    _same_layout(params, grad, state.m, state.v)
    t = state.t + 1
    p, m, v = _adamw_arrays(params.values, grad.values, state.m.values, state.v.values, t, cfg)
    layout = params.layout
    return ParamVector(layout, p), AdamWState(ParamVector(layout, m), ParamVector(layout, v), t)


def muon_step(params: ParamVector, grad: ParamVector, state: MuonState, cfg: MuonConfig):
    _same_layout(params, grad, state.buffer)
    layout = params.layout
    buf = cfg.momentum * state.buffer.values + grad.values
    new_p = params.values.copy()
    m = state.adamw.m.values.copy()
    v = state.adamw.v.values.copy()
    t = state.adamw.t + 1
    coeffs = NS_PRESETS[cfg.ns_coeffs]
    for name, shape, offset in layout.entries:
        sl = slice(offset, offset + int(np.prod(shape)))
        if len(shape) == 2:
            direction = newton_schulz_orthogonalize(
                buf[sl].reshape(shape), cfg.ns_iterations, coeffs
            )
            direction = direction * np.sqrt(max(1.0, shape[0] / shape[1]))
            new_p[sl] = params.values[sl] - cfg.lr * direction.ravel()
        else:
            new_p[sl], m[sl], v[sl] = _adamw_arrays(
                params.values[sl], grad.values[sl], m[sl], v[sl], t, cfg.adamw
            )
    adam = AdamWState(ParamVector(layout, m), ParamVector(layout, v), t)
    return ParamVector(layout, new_p), MuonState(ParamVector(layout, buf), adam)


def init_inner_state(cfg: InnerConfig, layout: TensorLayout):
    if isinstance(cfg, AdamWConfig):
        return AdamWState.zeros(layout)
    if isinstance(cfg, MuonConfig):
        return MuonState.zeros(layout)
    return None


def inner_step(params: ParamVector, grad: ParamVector, state, cfg: InnerConfig):
    if isinstance(cfg, AdamWConfig):
        return adamw_step(params, grad, state, cfg)
    if isinstance(cfg, MuonConfig):
        return muon_step(params, grad, state, cfg)
    return sgd_step(params, grad, state, cfg)


def with_lr(cfg: InnerConfig, factor: float) -> InnerConfig:
    """Copy of ``cfg`` with its learning rate(s) multiplied by ``factor``."""
    if factor == 1.0:
        return cfg
    if isinstance(cfg, MuonConfig):
        return replace(cfg, lr=cfg.lr * factor, adamw=replace(cfg.adamw, lr=cfg.adamw.lr * factor))
    return replace(cfg, lr=cfg.lr * factor)


@dataclass(frozen=True)
class OuterConfig:
    mu: float = 0.9
    eta: float = 0.8
    nesterov: bool = True

    def __post_init__(self):
        if not 0.0 <= self.mu < 1.0:
            raise OptimError("mu must lie in [0, 1)")
        if self.eta <= 0:
            raise OptimError("eta must be > 0")


@dataclass(frozen=True)
class OuterState:
    v: ParamVector
    mu: float = 0.9
    eta: float = 0.8
    nesterov: bool = True

    @classmethod
    def zeros(cls, layout: TensorLayout, mu=0.9, eta=0.8, nesterov=True) -> "OuterState":
        return cls(ParamVector.zeros(layout), mu, eta, nesterov)

    @classmethod
    def from_config(cls, layout: TensorLayout, cfg: OuterConfig) -> "OuterState":
        return cls.zeros(layout, cfg.mu, cfg.eta, cfg.nesterov)


def _mean(vectors: Sequence[ParamVector]) -> np.ndarray:
    # Ascending worker order, left to right.
    total = vectors[0].values.copy()
    for d in vectors[1:]:
        total += d.values
    return total / len(vectors)


def outer_step(theta: ParamVector, deltas: Sequence[ParamVector], outer: OuterState):
    """Average the deltas and apply one momentum-SGD step to ``theta``.

    Heavy-ball (``nesterov=False``)::

        v' = mu v + mean(deltas);   theta' = theta + eta v'

    Nesterov uses the same ``v'`` and ``theta' = theta + eta (mu v' + mean)``.
    """
    if not deltas:
        raise OptimError("outer_step needs at least one delta")
    _same_layout(theta, outer.v, *deltas)
    avg = _mean(deltas)
    v = outer.mu * outer.v.values + avg
    step = outer.mu * v + avg if outer.nesterov else v
    new_theta = ParamVector(theta.layout, theta.values + outer.eta * step)
    return new_theta, replace(outer, v=ParamVector(theta.layout, v))


def outer_step_from_replicas(
    theta: ParamVector, replicas: Sequence[ParamVector], outer: OuterState
):
    """Same update as :func:`outer_step`, fed with end-of-round replicas.

    The parameter update is evaluated as a weighted combination of ``theta``,
    the replica mean and the old momentum::

        theta' = (1 - eta s) theta + eta s mean(replicas) + eta mu^j v

    with ``s = 1 + mu, j = 2`` for Nesterov and ``s = 1, j = 1`` otherwise.
    This is algebraically identical to ``theta + eta * step`` but does not
    round-trip through ``theta + (replica - theta)``, so with ``mu = 0`` and
    ``eta = 1`` it returns the replica mean exactly.
    Returns ``(theta', outer', deltas)``.
    """
    if not replicas:
        raise OptimError("outer_step_from_replicas needs at least one replica")
    _same_layout(theta, outer.v, *replicas)
    deltas = [r - theta for r in replicas]
    avg = _mean(deltas)
    v = outer.mu * outer.v.values + avg
    mu, eta = outer.mu, outer.eta
    s, j = (1.0 + mu, 2) if outer.nesterov else (1.0, 1)
    mean_rep = _mean(replicas)
    new = (1.0 - eta * s) * theta.values + (eta * s) * mean_rep + (eta * mu ** j) * outer.v.values
    return (
        ParamVector(theta.layout, new),
        replace(outer, v=ParamVector(theta.layout, v)),
        deltas,
    )
