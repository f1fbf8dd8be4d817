"""Small tanh MLPs whose dense layers can carry low-rank adapters.

Inputs are carried as columns: ``x`` has shape ``(in_dim, batch)``.  A layer
computes ``w @ x + b @ (a @ x)``; the ``d x k`` product ``b @ a`` is never formed
on the forward path.  Parameters are addressed by flat names such as
``"layers.1.b"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .linalg import Matrix, SeededRng, ShapeError, gaussian_matrix

DEFAULT_INIT_STD = 0.02


class Regime(str, Enum):
    FULL_FT = "full_ft"
    LORA = "lora"
    PLORA = "plora"

    @property
    def uses_adapters(self) -> bool:
        return self is not Regime.FULL_FT


@dataclass
class LoraAdapter:
    b: Matrix  # d x r
    a: Matrix  # r x k
    init_std: float = DEFAULT_INIT_STD

    def __post_init__(self):
        if self.b.shape[1] != self.a.shape[0]:
            raise ShapeError(f"adapter factors disagree on rank: b {self.b.shape}, a {self.a.shape}")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def product(self) -> Matrix:
        """``b @ a``; only for unload and analysis, never the forward pass."""
        return self.b @ self.a

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.b.copy(), self.a.copy(), self.init_std)


def init_adapter(d: int, k: int, rank: int, init_std: float, rng: SeededRng) -> LoraAdapter:
    """Zero ``b`` and Gaussian ``a``, so the adapter is silent until trained."""
    if not 1 <= rank <= min(d, k):
        raise ValueError(f"adapter rank must be in [1, {min(d, k)}], got {rank}")
    a = gaussian_matrix(rank, k, init_std, rng)
    return LoraAdapter(b=np.zeros((d, rank)), a=a, init_std=init_std)


@dataclass
class LinearLayer:
    w: Matrix  # d x k
    adapter: LoraAdapter | None = None
    trainable_backbone: bool = False

    def __post_init__(self):
        if self.adapter is not None:
            if self.trainable_backbone:
                raise ValueError("a layer cannot train its backbone and carry an adapter")
            d, k = self.w.shape
            if self.adapter.b.shape[0] != d or self.adapter.a.shape[1] != k:
                raise ShapeError(
                    f"adapter {self.adapter.b.shape}x{self.adapter.a.shape} does not fit weight {self.w.shape}"
                )

    @property
    def in_dim(self) -> int:
        return self.w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w.shape[0]

    def effective_weight(self) -> Matrix:
        if self.adapter is None:
            return self.w.copy()
        return self.w + self.adapter.product()

    def copy(self) -> "LinearLayer":
        return LinearLayer(
            self.w.copy(),
            None if self.adapter is None else self.adapter.copy(),
            self.trainable_backbone,
        )


def layer_forward(layer: LinearLayer, x: Matrix) -> Matrix:
    if x.ndim != 2 or x.shape[0] != layer.in_dim:
        raise ShapeError(f"layer expects input with {layer.in_dim} rows, got {x.shape}")
    h = layer.w @ x
    if layer.adapter is not None:
        h = h + layer.adapter.b @ (layer.adapter.a @ x)
    return h


@dataclass
class Network:
    """Stack of linear layers with tanh between them (none after the last)."""

    layers: list[LinearLayer]

    def __post_init__(self):
        for i in range(len(self.layers) - 1):
            if self.layers[i].out_dim != self.layers[i + 1].in_dim:
                raise ShapeError(
                    f"layer {i} outputs {self.layers[i].out_dim} but layer {i + 1} takes {self.layers[i + 1].in_dim}"
                )

    @property
    def layer_selection(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.adapter is not None]

    def parameters(self) -> dict[str, Matrix]:
        """Trainable tensors of the active regime, by name (live references)."""
        params = {}
        for i, layer in enumerate(self.layers):
            if layer.trainable_backbone:
                params[f"layers.{i}.w"] = layer.w
            if layer.adapter is not None:
                params[f"layers.{i}.b"] = layer.adapter.b
                params[f"layers.{i}.a"] = layer.adapter.a
        return params

    def all_tensors(self) -> dict[str, Matrix]:
        tensors = {}
        for i, layer in enumerate(self.layers):
            tensors[f"layers.{i}.w"] = layer.w
            if layer.adapter is not None:
                tensors[f"layers.{i}.b"] = layer.adapter.b
                tensors[f"layers.{i}.a"] = layer.adapter.a
        return tensors

    def copy(self) -> "Network":
        return Network([layer.copy() for layer in self.layers])

    def backbone_only(self) -> "Network":
        return Network([LinearLayer(layer.w.copy()) for layer in self.layers])


def build_network(
    weights: list[Matrix],
    regime: Regime | str,
    rank: int = 1,
    layer_selection: list[int] | None = None,
    init_std: float = DEFAULT_INIT_STD,
    rng: SeededRng | None = None,
) -> Network:
    """Wrap backbone weights for a training regime.

    Adapters are initialised in ascending layer order, each drawing its ``a``
    from ``rng``.  ``layer_selection`` defaults to every layer.
    """
    regime = Regime(regime)
    selection = range(len(weights)) if layer_selection is None else sorted(set(layer_selection))
    for i in selection:
        if not 0 <= i < len(weights):
            raise ValueError(f"layer index {i} out of range for {len(weights)} layers")
    layers = []
    for i, w in enumerate(weights):
        w = np.array(w, dtype=np.float64)
        if regime is Regime.FULL_FT:
            layers.append(LinearLayer(w, trainable_backbone=True))
        elif i in selection:
            if rng is None:
                raise ValueError("an rng is required to initialise adapters")
            d, k = w.shape
            layers.append(LinearLayer(w, init_adapter(d, k, rank, init_std, rng)))
        else:
            layers.append(LinearLayer(w))
    return Network(layers)


@dataclass
class ForwardCache:
    inputs: list[Matrix] = field(default_factory=list)  # input to each layer
    pre_activations: list[Matrix] = field(default_factory=list)  # output of each linear map


def network_forward(net: Network, x: Matrix) -> tuple[Matrix, ForwardCache]:
    cache = ForwardCache()
    h = x
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        cache.inputs.append(h)
        z = layer_forward(layer, h)
        cache.pre_activations.append(z)
        h = np.tanh(z) if i < last else z
    return h, cache


def network_backward(net: Network, cache: ForwardCache, loss_grad: Matrix) -> dict[str, Matrix]:
    """Gradients of the loss w.r.t. the trainable tensors of ``net``.

    For an adapted layer with upstream gradient ``g`` and input ``x``:
    ``grad_b = g (a x)^T`` and ``grad_a = (b^T g) x^T``.
    """
    if len(cache.inputs) != len(net.layers):
        raise ShapeError(f"cache holds {len(cache.inputs)} layers, network has {len(net.layers)}")
    out = cache.pre_activations[-1]
    if loss_grad.shape != out.shape:
        raise ShapeError(f"loss gradient {loss_grad.shape} does not match output {out.shape}")
    grads: dict[str, Matrix] = {}
    g = loss_grad
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        x = cache.inputs[i]
        if x.shape[0] != layer.in_dim or cache.pre_activations[i].shape[0] != layer.out_dim:
            raise ShapeError(f"cache entry {i} does not match layer shape {layer.w.shape}")
        if layer.trainable_backbone:
            grads[f"layers.{i}.w"] = g @ x.T
        if layer.adapter is not None:
            b, a = layer.adapter.b, layer.adapter.a
            bt_g = b.T @ g
            grads[f"layers.{i}.b"] = g @ (a @ x).T
            grads[f"layers.{i}.a"] = bt_g @ x.T
        if i == 0:
            break
        gx = layer.w.T @ g
        if layer.adapter is not None:
            gx = gx + layer.adapter.a.T @ bt_g
        t = np.tanh(cache.pre_activations[i - 1])
        g = gx * (1.0 - t * t)
    return grads


def mse_loss(pred: Matrix, target: Matrix) -> tuple[float, Matrix]:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    count = diff.size
    return float(np.sum(diff * diff) / count), 2.0 * diff / count
