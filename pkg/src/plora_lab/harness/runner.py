"""Training loop binding model, optimizer and unload controller.

A run writes into its output directory::

    config.json           the config as run
    metrics.ndjson        one JSON event per line
    checkpoints/          step_XXXXXXXX.plck files

Every byte of ``metrics.ndjson`` is a function of the config alone.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..linalg import SeededRng, frobenius_norm, numerical_rank
from ..model import Network, Regime, build_network, mse_loss, network_backward, network_forward
from ..optim import ConstantScheduler, OptimState, adamw_step
from ..plora import PloraController, StageRecord, cumulative_update
from .checkpoint import Checkpoint, CheckpointError
from .config import RunConfig
from .task import (
    DATA_ORDER_STREAM_BASE,
    INIT_STREAM,
    TASK_STREAM,
    TeacherStudentTask,
    make_teacher_student_task,
    weights_digest,
)

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.ndjson"
CONFIG_FILE = "config.json"
CHECKPOINT_DIR = "checkpoints"


class RunAborted(RuntimeError):
    """The run stopped on an I/O failure; the metrics written so far are kept."""


def checkpoint_name(step: int) -> str:
    return f"{CHECKPOINT_DIR}/step_{step:08d}.plck"


def latest_checkpoint(run_dir) -> Path:
    if not Path(run_dir).is_dir():
        raise FileNotFoundError(2, "no such run directory", str(run_dir))
    ckpts = sorted(Path(run_dir, CHECKPOINT_DIR).glob("step_*.plck"))
    if not ckpts:
        raise CheckpointError(f"no checkpoints under {run_dir}")
    return ckpts[-1]


def read_events(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / METRICS_FILE
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


class MetricsStream:
    """Append-only NDJSON writer; flushes on request and reports byte offsets."""

    def __init__(self, path: Path, truncate_at: int | None = 0):
        self.path = path
        mode = "r+b" if truncate_at and path.exists() else "wb"
        self._fh = open(path, mode)
        if mode == "r+b":
            self._fh.truncate(truncate_at)
            self._fh.seek(truncate_at)

    def emit(self, event: dict) -> None:
        self._fh.write(json.dumps(event, separators=(",", ":")).encode("utf-8") + b"\n")

    def flush(self) -> int:
        self._fh.flush()
        return self._fh.tell()

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()


@dataclass
class RunResult:
    status: str  # "completed" or "diverged"
    step: int
    out_dir: Path
    trainer: "Trainer"


class Trainer:
    """Mutable state of one run.  Build with ``Trainer(cfg)``; drive with ``advance``."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.task: TeacherStudentTask = make_teacher_student_task(cfg.task, SeededRng(cfg.seed, TASK_STREAM))
        self.digest = weights_digest(self.task.student_weights)
        self.rng = SeededRng(cfg.seed, INIT_STREAM)
        adapter = cfg.adapter
        self.net: Network = build_network(
            self.task.student_weights,
            cfg.regime,
            rank=adapter.rank if adapter else 1,
            layer_selection=None if adapter is None or adapter.layer_selection is None else list(adapter.layer_selection),
            init_std=adapter.init_std if adapter else 0.0,
            rng=self.rng,
        )
        self.reference: Network = self.task.student()
        self.optim = OptimState()
        for name, p in self.net.parameters().items():
            self.optim.for_param(name, p)
        self.scheduler = ConstantScheduler(cfg.optim.lr)
        self.controller: PloraController | None = None
        if cfg.regime is Regime.PLORA:
            self.controller = PloraController(cfg.plora, self.reference, rank_tol=cfg.rank_tol)
        self.step = 0
        self.batches_per_epoch = cfg.task.n_train // cfg.batch_size
        self._perm_epoch = -1
        self._perm: np.ndarray | None = None
        self.stream: MetricsStream | None = None
        self.out_dir: Path | None = None
        # callables(trainer, phase, step), phase in {"before", "after"}
        self.unload_listeners: list = []

    # -- data ---------------------------------------------------------------

    def epoch_of(self, step: int) -> int:
        return (step - 1) // self.batches_per_epoch

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        """Minibatch for 1-based ``step``; each epoch reshuffles from its own RNG stream."""
        i = step - 1
        epoch, pos = divmod(i, self.batches_per_epoch)
        if epoch != self._perm_epoch:
            self._perm = SeededRng(self.cfg.seed, DATA_ORDER_STREAM_BASE + epoch).permutation(self.cfg.task.n_train)
            self._perm_epoch = epoch
        bs = self.cfg.batch_size
        idx = self._perm[pos * bs:(pos + 1) * bs]
        return self.task.x_train[:, idx], self.task.y_train[:, idx]

    # -- measurements -------------------------------------------------------

    def eval_loss(self) -> float:
        pred, _ = network_forward(self.net, self.task.x_val)
        return mse_loss(pred, self.task.y_val)[0]

    def delta_weights(self) -> list[np.ndarray]:
        return cumulative_update(self.net, self.reference)

    def current_stage(self) -> int:
        return 1 if self.controller is None else self.controller.stage + 1

    # -- events -------------------------------------------------------------

    def _emit(self, event: dict) -> None:
        if self.stream is not None:
            self.stream.emit(event)

    def _rank_probe(self, final: bool) -> None:
        deltas = self.delta_weights()
        self._emit({
            "event": "rank_probe",
            "step": self.step,
            "final": final,
            "rank_per_layer": [numerical_rank(dw, self.cfg.rank_tol) for dw in deltas],
            "frobenius_per_layer": [frobenius_norm(dw) for dw in deltas],
        })

    def _emit_eval(self) -> None:
        self._emit({"event": "eval_loss", "step": self.step, "loss": self.eval_loss()})
        if self.stream is not None:
            self.stream.flush()

    def _emit_unload(self, rec: StageRecord) -> None:
        pc = self.cfg.plora
        self._emit({
            "event": "unload",
            "step": rec.step,
            "stage": rec.stage_index,
            "momentum": pc.momentum,
            "mode": pc.mode.value,
            "delta_rank_per_layer": rec.delta_rank_per_layer,
            "ba_norm_per_layer": rec.ba_norm_per_layer,
            "steps_in_stage": rec.steps_in_stage,
        })

    # -- training -----------------------------------------------------------

    def advance(self) -> bool:
        """Run one optimizer step plus any unload/eval/checkpoint due; False on divergence."""
        s = self.step + 1
        x, y = self.batch(s)
        # overflow is caught below and reported as divergence
        with np.errstate(over="ignore", invalid="ignore"):
            pred, cache = network_forward(self.net, x)
            loss, grad = mse_loss(pred, y)
        if not np.isfinite(loss):
            self.step = s
            self._diverged("non-finite train loss")
            return False
        grads = network_backward(self.net, cache, grad)
        params = self.net.parameters()
        adamw_step(params, grads, self.optim, self.cfg.optim, lr=self.scheduler.rate(s))
        self.scheduler.advance()
        self.step = s
        if not all(np.all(np.isfinite(p)) for p in params.values()):
            self._diverged("non-finite parameter after update")
            return False
        self._emit({
            "event": "train_loss",
            "step": s,
            "loss": loss,
            "stage": self.current_stage(),
            "epoch": self.epoch_of(s),
        })
        if self.controller is not None and self.controller.should_unload(s):
            for fn in self.unload_listeners:
                fn(self, "before", s)
            rec = self.controller.step_end(s, self.net, self.optim, self.scheduler, self.rng)
            for fn in self.unload_listeners:
                fn(self, "after", s)
            self._emit_unload(rec)
            self._rank_probe(final=False)
        if s % self.cfg.eval_every == 0 or s == self.cfg.total_steps:
            self._emit_eval()
        if s % self.cfg.checkpoint_every == 0 or s == self.cfg.total_steps:
            self.save_checkpoint()
        return True

    def _diverged(self, reason: str) -> None:
        log.warning("run diverged at step %d: %s", self.step, reason)
        self._emit({"event": "diverged", "step": self.step, "reason": reason})

    def train(self) -> str:
        while self.step < self.cfg.total_steps:
            if not self.advance():
                return "diverged"
        if self.cfg.total_steps > 0:
            self._rank_probe(final=True)
        return "completed"

    # -- checkpoints --------------------------------------------------------

    def to_checkpoint(self, metrics_offset: int = 0) -> Checkpoint:
        tensors = {}
        for name, t in self.net.all_tensors().items():
            tensors[f"param/{name}"] = t
        for name, st in self.optim.tensors.items():
            tensors[f"optim/{name}/m"] = st.m
            tensors[f"optim/{name}/v"] = st.v
        ctrl = None
        if self.controller is not None:
            ctrl = {
                "stage": self.controller.stage,
                "last_unload_step": self.controller.last_unload_step,
                "records": [r.to_dict() for r in self.controller.records],
            }
        manifest = {
            "config": self.cfg.to_dict(),
            "step": self.step,
            "stage": self.current_stage(),
            "initial_weights_digest": self.digest,
            "rng_state": self.rng.get_state(),
            "optim_steps": {name: st.t for name, st in self.optim.tensors.items()},
            "scheduler": {"lr": self.scheduler.lr, "step": self.scheduler.step},
            "controller": ctrl,
            "metrics_offset": metrics_offset,
        }
        return Checkpoint(manifest=manifest, tensors=tensors)

    def save_checkpoint(self) -> None:
        rel = checkpoint_name(self.step)
        offset = 0
        if self.stream is not None:
            self._emit({"event": "checkpoint", "step": self.step, "stage": self.current_stage(), "file": rel})
            offset = self.stream.flush()
        if self.out_dir is not None:
            self.to_checkpoint(offset).save(self.out_dir / rel)

    def load_state(self, ck: Checkpoint) -> None:
        man = ck.manifest
        if man.get("initial_weights_digest") != self.digest:
            raise CheckpointError("initial-weights digest does not match the regenerated task")
        for name, t in self.net.all_tensors().items():
            _restore(ck, f"param/{name}", t)
        for name, st in self.optim.tensors.items():
            _restore(ck, f"optim/{name}/m", st.m)
            _restore(ck, f"optim/{name}/v", st.v)
            st.t = int(man["optim_steps"][name])
        self.rng.set_state(man["rng_state"])
        self.scheduler.step = int(man["scheduler"]["step"])
        if self.controller is not None:
            c = man["controller"]
            self.controller.stage = c["stage"]
            self.controller.last_unload_step = c["last_unload_step"]
            self.controller.records = [StageRecord(**r) for r in c["records"]]
        self.step = int(man["step"])


def _restore(ck: Checkpoint, key: str, target: np.ndarray) -> None:
    src = ck.tensors.get(key)
    if src is None:
        raise CheckpointError(f"tensor {key!r} missing from checkpoint")
    if src.shape != target.shape:
        raise CheckpointError(f"tensor {key!r} has shape {src.shape}, expected {target.shape}")
    target[...] = src


def _open_run(trainer: Trainer, out_dir: Path, truncate_at: int | None) -> None:
    (out_dir / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
    trainer.out_dir = out_dir
    trainer.stream = MetricsStream(out_dir / METRICS_FILE, truncate_at=truncate_at)


def _drive(trainer: Trainer) -> str:
    try:
        return trainer.train()
    except OSError as exc:
        try:
            trainer._emit({"event": "aborted", "step": trainer.step, "reason": f"I/O error: {exc.strerror or exc}"})
            trainer.stream.flush()
        except OSError:
            pass
        raise RunAborted(f"run aborted at step {trainer.step}: {exc}") from exc
    finally:
        trainer.stream.close()


def run(cfg: RunConfig, out_dir=None) -> RunResult:
    """Train from scratch, streaming metrics and checkpoints into ``out_dir``."""
    out = Path(out_dir) if out_dir is not None else cfg.resolve_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(cfg.to_json())
    trainer = Trainer(cfg)
    _open_run(trainer, out, truncate_at=0)
    trainer._emit_eval()
    if cfg.total_steps == 0:
        trainer.to_checkpoint(trainer.stream.flush()).save(out / checkpoint_name(0))
    status = _drive(trainer)
    return RunResult(status, trainer.step, out, trainer)


def resume(checkpoint_path, out_dir=None, total_steps: int | None = None) -> RunResult:
    """Continue a run from a checkpoint.

    Resuming into the checkpoint's own run directory truncates its metrics
    stream back to the checkpoint, so the finished file matches an
    uninterrupted run byte for byte.  Any other ``out_dir`` receives only the
    continuation.
    """
    checkpoint_path = Path(checkpoint_path)
    ck = Checkpoint.load(checkpoint_path)
    cfg = RunConfig.from_dict(ck.manifest["config"])
    if total_steps is not None:
        cfg = cfg.replace(total_steps=total_steps)
    if cfg.total_steps < ck.manifest["step"]:
        raise CheckpointError(f"checkpoint is at step {ck.manifest['step']}, past total_steps {cfg.total_steps}")
    home = checkpoint_path.resolve().parent.parent
    out = Path(out_dir) if out_dir is not None else home
    trainer = Trainer(cfg)
    trainer.load_state(ck)
    same_dir = out.resolve() == home
    _open_run(trainer, out, truncate_at=ck.manifest["metrics_offset"] if same_dir else 0)
    status = _drive(trainer)
    return RunResult(status, trainer.step, out, trainer)


def load_trainer(checkpoint_path) -> Trainer:
    """Rebuild a trainer from a checkpoint without opening any output files."""
    ck = Checkpoint.load(checkpoint_path)
    trainer = Trainer(RunConfig.from_dict(ck.manifest["config"]))
    trainer.load_state(ck)
    return trainer
