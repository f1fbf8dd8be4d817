"""Run configuration: dataclasses, JSON file form and schema validation."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema

from ..linalg import DEFAULT_RANK_TOL
from ..model import DEFAULT_INIT_STD, Regime
from ..optim import AdamWParams
from ..plora import PloraConfig

OUT_DIR_ENV = "PLORA_OUT_DIR"


class ConfigError(ValueError):
    """Config violates the schema or the cross-field rules."""


class ConfigReadError(ConfigError):
    """Config file cannot be read."""


@lru_cache(maxsize=1)
def config_schema() -> dict:
    text = resources.files("plora_lab.harness").joinpath("config_schema.json").read_text()
    return json.loads(text)


@dataclass(frozen=True)
class TaskSpec:
    d: int = 16
    k: int = 16
    depth: int = 2
    target_update_rank: int = 16
    n_train: int = 4096
    n_val: int = 512
    noise_std: float = 0.0

    def layer_shapes(self) -> list[tuple[int, int]]:
        """Input width ``k``, every later width ``d``."""
        return [(self.d, self.k if i == 0 else self.d) for i in range(self.depth)]


@dataclass(frozen=True)
class AdapterSpec:
    rank: int = 1
    layer_selection: tuple[int, ...] | None = None
    init_std: float = DEFAULT_INIT_STD

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "layer_selection": None if self.layer_selection is None else list(self.layer_selection),
            "init_std": self.init_std,
        }


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    task: TaskSpec = field(default_factory=TaskSpec)
    regime: Regime = Regime.PLORA
    adapter: AdapterSpec | None = None
    optim: AdamWParams = field(default_factory=AdamWParams)
    batch_size: int = 32
    total_steps: int = 4000
    plora: PloraConfig | None = None
    eval_every: int = 100
    checkpoint_every: int = 1000
    rank_tol: float = DEFAULT_RANK_TOL
    name: str | None = None
    output_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        # regime-specific blocks default in when omitted programmatically
        if self.regime.uses_adapters and self.adapter is None:
            object.__setattr__(self, "adapter", AdapterSpec())
        if self.regime is Regime.PLORA and self.plora is None:
            object.__setattr__(self, "plora", PloraConfig(unload_interval_steps=500))
        # full validation goes through the schema; this catches programmatic misuse
        if self.regime is not Regime.PLORA and self.plora is not None:
            raise ConfigError("a plora block is only valid for the plora regime")
        if self.regime is Regime.FULL_FT and self.adapter is not None:
            raise ConfigError("full_ft takes no adapter block")
        if self.adapter is not None:
            top = min(min(s) for s in self.task.layer_shapes())
            if self.adapter.rank > top:
                raise ConfigError(f"adapter rank {self.adapter.rank} exceeds smallest layer dim {top}")
            for i in self.adapter.layer_selection or ():
                if i >= self.task.depth:
                    raise ConfigError(f"layer_selection index {i} out of range for depth {self.task.depth}")
        if self.task.target_update_rank > min(self.task.d, self.task.k):
            raise ConfigError(
                f"target_update_rank {self.task.target_update_rank} exceeds min(d, k) = {min(self.task.d, self.task.k)}"
            )
        if self.batch_size > self.task.n_train:
            raise ConfigError(f"batch_size {self.batch_size} exceeds n_train {self.task.n_train}")

    @property
    def run_name(self) -> str:
        if self.name:
            return self.name
        return f"{self.regime.value}-seed{self.seed}"

    def resolve_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        root = os.environ.get(OUT_DIR_ENV, "runs")
        return Path(root) / self.run_name

    def to_dict(self) -> dict:
        d = {}
        if self.name is not None:
            d["name"] = self.name
        d["seed"] = self.seed
        d["task"] = asdict(self.task)
        d["regime"] = self.regime.value
        if self.adapter is not None:
            d["adapter"] = self.adapter.to_dict()
        d["optim"] = self.optim.to_dict()
        d["batch_size"] = self.batch_size
        d["total_steps"] = self.total_steps
        if self.plora is not None:
            d["plora"] = self.plora.to_dict()
        d["eval_every"] = self.eval_every
        d["checkpoint_every"] = self.checkpoint_every
        d["rank_tol"] = self.rank_tol
        if self.output_dir is not None:
            d["output_dir"] = self.output_dir
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        try:
            jsonschema.validate(raw, config_schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"{where}: {exc.message}") from None
        adapter = None
        if "adapter" in raw:
            a = raw["adapter"]
            sel = a.get("layer_selection")
            adapter = AdapterSpec(
                rank=a["rank"],
                layer_selection=None if sel is None else tuple(sel),
                init_std=a.get("init_std", DEFAULT_INIT_STD),
            )
        try:
            return cls(
                seed=raw["seed"],
                task=TaskSpec(**raw["task"]),
                regime=Regime(raw["regime"]),
                adapter=adapter,
                optim=AdamWParams(**raw["optim"]),
                batch_size=raw["batch_size"],
                total_steps=raw["total_steps"],
                plora=PloraConfig(**raw["plora"]) if "plora" in raw else None,
                eval_every=raw["eval_every"],
                checkpoint_every=raw["checkpoint_every"],
                rank_tol=raw.get("rank_tol", DEFAULT_RANK_TOL),
                name=raw.get("name"),
                output_dir=raw.get("output_dir"),
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        return cls.from_dict(raw)

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **changes)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigReadError(f"cannot read config {path}: {exc.strerror}") from None
    return RunConfig.from_json(text)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_json())
