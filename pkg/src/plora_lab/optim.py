"""AdamW with per-tensor state, plus a constant learning-rate schedule.

Both objects expose a full reset so a training stage can start from a clean
optimizer after adapter weights are merged away.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .linalg import Matrix, ShapeError


class NonFiniteGradient(ValueError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for tensor {name!r}")
        self.tensor = name


@dataclass(frozen=True)
class AdamWParams:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TensorState:
    m: Matrix
    v: Matrix
    t: int = 0

    @classmethod
    def zeros_like(cls, param: Matrix) -> "TensorState":
        return cls(np.zeros_like(param), np.zeros_like(param), 0)

    def reset(self) -> None:
        self.m[...] = 0.0
        self.v[...] = 0.0
        self.t = 0


@dataclass
class OptimState:
    tensors: dict[str, TensorState] = field(default_factory=dict)

    def for_param(self, name: str, param: Matrix) -> TensorState:
        st = self.tensors.get(name)
        if st is None:
            st = self.tensors[name] = TensorState.zeros_like(param)
        elif st.m.shape != param.shape:
            raise ShapeError(f"optimizer state for {name!r} has shape {st.m.shape}, param has {param.shape}")
        return st

    def reset(self, names=None) -> "OptimState":
        for name, st in self.tensors.items():
            if names is None or name in names:
                st.reset()
        return self


def reset_state(state: OptimState, names=None) -> OptimState:
    """Zero the moments and step counters (of ``names`` only, if given)."""
    return state.reset(names)


def adamw_step(
    params: dict[str, Matrix],
    grads: dict[str, Matrix],
    state: OptimState,
    hyper: AdamWParams,
    lr: float | None = None,
) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params`` and ``state``.

    ``lr`` overrides ``hyper.lr`` (used by the scheduler seam).  Every gradient is
    validated before any tensor is touched.
    """
    if set(grads) != set(params):
        raise ShapeError(f"gradient names {sorted(grads)} do not match parameters {sorted(params)}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {name!r} has shape {g.shape}, param has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    rate = hyper.lr if lr is None else lr
    b1, b2 = hyper.beta1, hyper.beta2
    for name, p in params.items():
        g = grads[name]
        st = state.for_param(name, p)
        st.t += 1
        st.m *= b1
        st.m += (1.0 - b1) * g
        st.v *= b2
        st.v += (1.0 - b2) * (g * g)
        m_hat = st.m / (1.0 - b1 ** st.t)
        v_hat = st.v / (1.0 - b2 ** st.t)
        p -= rate * (m_hat / (np.sqrt(v_hat) + hyper.eps) + hyper.weight_decay * p)


@dataclass
class ConstantScheduler:
    """Constant learning rate; keeps a step count so resets are observable."""

    lr: float
    step: int = 0

    def rate(self, step: int | None = None) -> float:
        return self.lr

    def advance(self) -> None:
        self.step += 1

    def reset(self) -> None:
        self.step = 0


def scheduler_rate(scheduler: ConstantScheduler, step: int) -> float:
    return scheduler.rate(step)

