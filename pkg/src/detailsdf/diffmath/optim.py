"""Adam with bias correction, operating in place on leaf parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tape import Value


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class Adam:
    """Adam over a fixed, ordered list of parameters.

    ``grads`` may be a mapping keyed by parameter (as returned by
    :func:`~detailsdf.diffmath.backward`) or a sequence aligned with
    ``params``.
    """

    def __init__(self, params: Sequence[Value], lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
        )

    def _aligned(self, grads) -> list[np.ndarray]:
        if isinstance(grads, Mapping):
            out = [grads.get(p) for p in self.params]
            out = [np.zeros_like(p.data) if g is None else g for p, g in zip(self.params, out)]
        else:
            out = list(grads)
            if len(out) != len(self.params):
                raise ValueError(f"expected {len(self.params)} gradients, got {len(out)}")
        for p, g in zip(self.params, out):
            if np.shape(g) != p.shape:
                raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        return out

    def step(self, grads) -> None:
        grads = self._aligned(grads)
        s = self.state
        s.step += 1
        b1, b2 = s.beta1, s.beta2
        c1 = 1.0 - b1**s.step
        c2 = 1.0 - b2**s.step
        for p, g, m, v in zip(self.params, grads, s.m, s.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps)


def adam_step(state: AdamState, grads: Sequence[np.ndarray], params: Sequence[np.ndarray]):
    """Functional form: returns updated copies of ``params`` and advances ``state``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ValueError("state, gradients and parameters must align")
    for p, g, m in zip(params, grads, state.m):
        if np.shape(p) != np.shape(g) or np.shape(p) != np.shape(m):
            raise ValueError(f"shape mismatch: param {np.shape(p)}, grad {np.shape(g)}, state {np.shape(m)}")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        out.append(np.asarray(p) - state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps))
    return out
