"""Periodic unloading of low-rank adapters into the backbone.

Training is cut into stages of ``unload_interval_steps`` optimizer steps.  At
the end of each stage every adapter's ``b @ a`` is merged into its layer's
weight (fully, or a ``1 - m`` share when momentum is used), the adapter is
re-initialised or shrunk, and the adapter optimizer state is cleared.  Over
``T`` stages the backbone accumulates ``T`` rank-``r`` updates.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .linalg import DEFAULT_RANK_TOL, Matrix, SeededRng, ShapeError, frobenius_norm, numerical_rank
from .model import LinearLayer, Network, init_adapter
from .optim import ConstantScheduler, OptimState


class MomentumMode(str, Enum):
    # keep a, scale b by m: effective weight unchanged by the unload
    FORWARD_PRESERVING = "forward_preserving"
    # scale both a and b by m: residual adapter holds m^2 * b @ a
    PAPER_LITERAL = "paper_literal"


@dataclass(frozen=True)
class PloraConfig:
    unload_interval_steps: int
    momentum: float = 0.0
    mode: MomentumMode = MomentumMode.FORWARD_PRESERVING
    total_stages_hint: int | None = None

    def __post_init__(self):
        if self.unload_interval_steps < 1:
            raise ValueError(f"unload_interval_steps must be >= 1, got {self.unload_interval_steps}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {self.momentum}")
        object.__setattr__(self, "mode", MomentumMode(self.mode))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        if d["total_stages_hint"] is None:
            del d["total_stages_hint"]
        return d


@dataclass
class StageRecord:
    stage_index: int
    step: int
    steps_in_stage: int
    ba_norm_per_layer: list[float]
    delta_rank_per_layer: list[int]

    def to_dict(self) -> dict:
        return asdict(self)


def should_unload(step: int, interval: int) -> bool:
    return step > 0 and step % interval == 0


def unload(
    layer: LinearLayer,
    momentum: float,
    mode: MomentumMode | str = MomentumMode.FORWARD_PRESERVING,
    rng: SeededRng | None = None,
) -> LinearLayer:
    """Merge the adapter of ``layer`` into its weight, in place.

    With ``momentum == 0`` the whole product is merged and the adapter is
    re-initialised (zero ``b``, fresh Gaussian ``a`` drawn from ``rng``).
    With ``momentum > 0`` only ``(1 - m) * b @ a`` is merged and the adapter is
    kept, shrunk according to ``mode``.
    """
    if layer.adapter is None:
        raise ValueError("cannot unload a layer without an adapter")
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
    mode = MomentumMode(mode)
    ad = layer.adapter
    if momentum == 0.0:
        if rng is None:
            raise ValueError("an rng is required to re-initialise the adapter")
        layer.w += ad.product()
        d, k = layer.w.shape
        fresh = init_adapter(d, k, ad.rank, ad.init_std, rng)
        # in place, so optimizer/parameter references stay valid
        ad.b[...] = fresh.b
        ad.a[...] = fresh.a
        return layer
    if momentum < 1.0:
        layer.w += (1.0 - momentum) * ad.product()
        ad.b *= momentum
        if mode is MomentumMode.PAPER_LITERAL:
            ad.a *= momentum
    return layer


def cumulative_update(net_now: Network, net_at_start: Network) -> list[Matrix]:
    """Per-layer difference of effective weights ``(w + b a)_now - (w + b a)_start``."""
    if len(net_now.layers) != len(net_at_start.layers):
        raise ShapeError(
            f"networks differ in depth: {len(net_now.layers)} vs {len(net_at_start.layers)}"
        )
    deltas = []
    for i, (now, start) in enumerate(zip(net_now.layers, net_at_start.layers)):
        if now.w.shape != start.w.shape:
            raise ShapeError(f"layer {i} shapes differ: {now.w.shape} vs {start.w.shape}")
        deltas.append(now.effective_weight() - start.effective_weight())
    return deltas


def adapter_tensor_names(net: Network) -> list[str]:
    names = []
    for i in net.layer_selection:
        names += [f"layers.{i}.b", f"layers.{i}.a"]
    return names


@dataclass
class PloraController:
    """Owns the unload schedule and stage bookkeeping of one training run.

    ``stage`` counts completed stages; the stage in progress is ``stage + 1``.
    """

    config: PloraConfig
    reference: Network  # effective weights at step 0, for rank probes
    rank_tol: float = DEFAULT_RANK_TOL
    stage: int = 0
    last_unload_step: int = 0
    records: list[StageRecord] = field(default_factory=list)

    def should_unload(self, step: int) -> bool:
        return should_unload(step, self.config.unload_interval_steps)

    def unload(self, net: Network, rng: SeededRng) -> list[float]:
        """Unload every adapted layer; returns ``||b a||_F`` per layer before the merge."""
        norms = []
        for layer in net.layers:
            if layer.adapter is None:
                norms.append(0.0)
                continue
            norms.append(frobenius_norm(layer.adapter.product()))
            unload(layer, self.config.momentum, self.config.mode, rng)
        return norms

    def reinit_after_unload(
        self,
        net: Network,
        optim_state: OptimState,
        scheduler: ConstantScheduler,
        step: int,
        ba_norms: list[float],
    ) -> StageRecord:
        """Clear adapter optimizer and scheduler state and close the current stage."""
        optim_state.reset(adapter_tensor_names(net))
        scheduler.reset()
        self.stage += 1
        ranks = [numerical_rank(dw, self.rank_tol) for dw in cumulative_update(net, self.reference)]
        record = StageRecord(
            stage_index=self.stage,
            step=step,
            steps_in_stage=step - self.last_unload_step,
            ba_norm_per_layer=ba_norms,
            delta_rank_per_layer=ranks,
        )
        self.last_unload_step = step
        self.records.append(record)
        return record

    def step_end(
        self,
        step: int,
        net: Network,
        optim_state: OptimState,
        scheduler: ConstantScheduler,
        rng: SeededRng,
    ) -> StageRecord | None:
        if not self.should_unload(step):
            return None
        norms = self.unload(net, rng)
        return self.reinit_after_unload(net, optim_state, scheduler, step, norms)

    def unload_schedule(self, total_steps: int) -> list[int]:
        u = self.config.unload_interval_steps
        return list(np.arange(u, total_steps + 1, u).tolist())
