"""Spectra of weight updates, loss smoothing and run comparison."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .linalg import DEFAULT_RANK_TOL, Matrix, frobenius_norm, svd

CSV_COLUMNS = ("step", "raw_loss", "smoothed_loss", "stage")


@dataclass
class SpectrumReport:
    layer: int
    singular_values: np.ndarray
    rank: int
    frobenius: float

    def dominant(self) -> np.ndarray:
        return self.singular_values[: self.rank]

    def energy_fraction(self, top: int) -> float:
        """Share of squared Frobenius mass carried by the ``top`` largest singular values."""
        total = float(np.sum(self.singular_values ** 2))
        if total == 0.0:
            return 1.0
        return float(np.sum(self.singular_values[:top] ** 2)) / total

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "rank": self.rank,
            "frobenius": self.frobenius,
            "singular_values": [float(s) for s in self.singular_values],
        }


def spectrum_report(delta_w: Matrix, rel_tol: float = DEFAULT_RANK_TOL, layer: int = 0) -> SpectrumReport:
    if not 0.0 < rel_tol < 1.0:
        raise ValueError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    s = svd(delta_w).s
    rank = 0 if s.size == 0 or s[0] == 0.0 else int(np.sum(s > rel_tol * s[0]))
    return SpectrumReport(layer=layer, singular_values=s, rank=rank, frobenius=frobenius_norm(delta_w))


@dataclass
class SmoothedSeries:
    window: int
    values: np.ndarray


def smooth(series, window: int) -> SmoothedSeries:
    """Trailing moving average; the first ``window - 1`` points average the available prefix."""
    if window < 1:
        raise ValueError(f"smoothing window must be >= 1, got {window}")
    x = np.asarray(series, dtype=np.float64)
    if window == 1 or x.size == 0:
        return SmoothedSeries(window, x.copy())
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    values = (csum[idx] - csum[lo]) / (idx - lo)
    return SmoothedSeries(window, values)


def loss_series(events: list[dict], kind: str = "train_loss") -> tuple[list[int], list[float], list[int]]:
    steps, losses, stages = [], [], []
    for ev in events:
        if ev.get("event") == kind:
            steps.append(int(ev["step"]))
            losses.append(float(ev["loss"]))
            stages.append(int(ev.get("stage", 0)))
    return steps, losses, stages


class GridMismatch(ValueError):
    def __init__(self, grid_a: list[int], grid_b: list[int]):
        super().__init__(f"step grids differ: a={_grid_summary(grid_a)} b={_grid_summary(grid_b)}")
        self.grid_a = grid_a
        self.grid_b = grid_b


def _grid_summary(grid: list[int]) -> str:
    if len(grid) <= 6:
        return str(grid)
    return f"[{grid[0]}, {grid[1]}, ..., {grid[-1]}] (n={len(grid)})"


@dataclass
class Comparison:
    steps: list[int]
    smoothed_a: np.ndarray
    smoothed_b: np.ndarray
    delta: np.ndarray  # b - a; negative means b is better
    final_eval_a: float | None
    final_eval_b: float | None
    first_hit_a: int | None = None
    first_hit_b: int | None = None
    target: float | None = None

    def better(self) -> list[str]:
        return ["b" if d < 0 else "a" if d > 0 else "tie" for d in self.delta]

    @property
    def final_eval_delta(self) -> float | None:
        if self.final_eval_a is None or self.final_eval_b is None:
            return None
        return self.final_eval_b - self.final_eval_a


def _first_hit(steps: list[int], values: np.ndarray, target: float) -> int | None:
    hits = np.nonzero(values <= target)[0]
    return int(steps[hits[0]]) if hits.size else None


def compare_runs(
    metrics_a: list[dict],
    metrics_b: list[dict],
    window: int = 150,
    target: float | None = None,
) -> Comparison:
    """Align two metrics streams by step and compare smoothed training losses."""
    steps_a, loss_a, _ = loss_series(metrics_a)
    steps_b, loss_b, _ = loss_series(metrics_b)
    if steps_a != steps_b:
        raise GridMismatch(steps_a, steps_b)
    sa = smooth(loss_a, window).values
    sb = smooth(loss_b, window).values
    eval_a = loss_series(metrics_a, "eval_loss")[1]
    eval_b = loss_series(metrics_b, "eval_loss")[1]
    comp = Comparison(
        steps=steps_a,
        smoothed_a=sa,
        smoothed_b=sb,
        delta=sb - sa,
        final_eval_a=eval_a[-1] if eval_a else None,
        final_eval_b=eval_b[-1] if eval_b else None,
        target=target,
    )
    if target is not None:
        comp.first_hit_a = _first_hit(steps_a, sa, target)
        comp.first_hit_b = _first_hit(steps_b, sb, target)
    return comp


def write_loss_csv(events: list[dict], path, window: int = 1) -> int:
    """Write ``step,raw_loss,smoothed_loss,stage`` rows for every train-loss event."""
    steps, losses, stages = loss_series(events)
    smoothed = smooth(losses, window).values
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in zip(steps, losses, smoothed, stages):
            writer.writerow([row[0], repr(float(row[1])), repr(float(row[2])), row[3]])
    return len(steps)


def reports_to_ndjson(reports: list[SpectrumReport], fh) -> None:
    for rep in reports:
        fh.write(json.dumps(rep.to_dict(), sort_keys=True) + "\n")
