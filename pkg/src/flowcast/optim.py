"""Adam optimizer, gradient utilities, and the finite-difference checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Param, Tensor, backward


@dataclass
class AdamState:
    """Adam accumulators keyed by parameter name."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    slots: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def zero_gradients(params: Sequence[Param]) -> None:
    for p in params:
        p.grad[...] = 0.0


def global_grad_norm(params: Sequence[Param]) -> float:
    total = 0.0
    for p in params:
        total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))


def clip_global_norm(params: Sequence[Param], max_norm: float) -> float:
    """Scale all gradients so their joint 2-norm is at most max_norm.

    Returns the pre-clip norm.
    """
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params:
            p.grad *= factor
    return norm


def adam_step(state: AdamState, params: Sequence[Param]) -> None:
    """One Adam update with bias correction; gradients are zeroed after use."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for p in params:
        if p.name not in state.slots:
            state.slots[p.name] = (
                np.zeros_like(p.data),
                np.zeros_like(p.data),
            )
        m, v = state.slots[p.name]
        if m.shape != p.data.shape:
            raise ContractError(f"adam slot shape {m.shape} does not match param {p.name}")
        g = p.grad
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        p.grad[...] = 0.0


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], name: str) -> Param:
    """Weight matrix drawn uniformly from +-sqrt(6 / (fan_in + fan_out))."""
    if len(shape) < 2:
        raise ContractError(f"glorot_uniform needs a matrix shape, got {shape}")
    fan_in, fan_out = shape[-2], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Param(rng.uniform(-limit, limit, size=shape), name)


def zeros_param(shape: tuple[int, ...], name: str) -> Param:
    return Param(np.zeros(shape), name)


def ones_param(shape: tuple[int, ...], name: str) -> Param:
    return Param(np.ones(shape), name)


def finite_diff_check(
    make_loss: Callable[[], Tensor],
    params: Sequence[Param],
    step: float = 1e-5,
    samples: int = 200,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central differences.

    make_loss must rebuild the scalar loss from scratch on every call and
    be deterministic. Returns the maximum relative error over the sampled
    coordinates: |analytic - central| / max(|analytic|, |central|, 1e-8).
    """
    loss = make_loss()
    zero_gradients(params)
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    coords: list[tuple[int, int]] = []
    for pi, p in enumerate(params):
        coords.extend((pi, k) for k in range(p.data.size))
    if len(coords) > samples:
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[int(i)] for i in picks]

    worst = 0.0
    for pi, k in coords:
        flat = params[pi].data.reshape(-1)
        saved = flat[k]
        flat[k] = saved + step
        up = make_loss().item()
        flat[k] = saved - step
        down = make_loss().item()
        flat[k] = saved
        central = (up - down) / (2.0 * step)
        a = float(analytic[pi].reshape(-1)[k])
        err = abs(a - central) / max(abs(a), abs(central), 1e-8)
        worst = max(worst, err)
    return worst
