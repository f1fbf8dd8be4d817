import numpy as np
import pytest

from plora_lab.harness.config import AdapterSpec, RunConfig, TaskSpec
from plora_lab.model import mse_loss, network_forward
from plora_lab.optim import AdamWParams
from plora_lab.plora import PloraConfig


def small_config(regime="plora", **overrides) -> RunConfig:
    """Tiny fast config: 8x8 two-layer task, 200 steps."""
    base = dict(
        seed=3,
        task=TaskSpec(d=8, k=8, depth=2, target_update_rank=8, n_train=256, n_val=64, noise_std=0.0),
        regime=regime,
        adapter=None if regime == "full_ft" else AdapterSpec(rank=1),
        optim=AdamWParams(lr=1e-3),
        batch_size=16,
        total_steps=200,
        plora=PloraConfig(unload_interval_steps=50) if regime == "plora" else None,
        eval_every=20,
        checkpoint_every=60,
    )
    base.update(overrides)
    return RunConfig(**base)


def fd_gradients(net, x, target, step=1e-5) -> dict:
    """Central finite differences of the MSE loss w.r.t. every trainable entry."""
    grads = {}
    for name, p in net.parameters().items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            lp = mse_loss(network_forward(net, x)[0], target)[0]
            p[idx] = orig - step
            lm = mse_loss(network_forward(net, x)[0], target)[0]
            p[idx] = orig
            g[idx] = (lp - lm) / (2 * step)
        grads[name] = g
    return grads


def grad_rel_error(analytic, numeric, floor=1e-4):
    """Entrywise |a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries meaningful."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


@pytest.fixture
def nprng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
