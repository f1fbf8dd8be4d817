import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_config
from plora_lab.analysis import (
    CSV_COLUMNS,
    GridMismatch,
    compare_runs,
    smooth,
    spectrum_report,
    write_loss_csv,
)
from plora_lab.harness.runner import latest_checkpoint, load_trainer, read_events, run
from plora_lab.linalg import SeededRng, gaussian_matrix, numerical_rank
from plora_lab.plora import PloraConfig


def fake_stream(losses, evals=None, start=1):
    events = [{"event": "train_loss", "step": start + i, "loss": v, "stage": 1} for i, v in enumerate(losses)]
    for step, v in evals or []:
        events.append({"event": "eval_loss", "step": step, "loss": v})
    return events


# -- spectrum ----------------------------------------------------------------

def test_spectrum_zero():
    rep = spectrum_report(np.zeros((5, 5)))
    assert rep.rank == 0 and rep.dominant().size == 0 and rep.frobenius == 0.0


def test_spectrum_single_stage_product(nprng):
    r = 2
    dw = nprng.standard_normal((9, r)) @ nprng.standard_normal((r, 7))
    rep = spectrum_report(dw)
    assert rep.rank <= r
    assert rep.energy_fraction(r) >= 0.99999
    assert np.all(np.diff(rep.singular_values) <= 0) and np.all(rep.singular_values >= 0)


def test_spectrum_three_stage_run_matches_offline_svd(tmp_path):
    cfg = small_config(total_steps=150, plora=PloraConfig(50), checkpoint_every=1000)
    run(cfg, tmp_path)
    trainer = load_trainer(latest_checkpoint(tmp_path))
    for i, dw in enumerate(trainer.delta_weights()):
        rep = spectrum_report(dw, 1e-8, layer=i)
        ref = np.linalg.svd(dw, compute_uv=False)
        assert rep.rank == 3 == int(np.sum(ref > 1e-8 * ref[0]))
        assert np.allclose(rep.singular_values, ref, rtol=0, atol=1e-12 * ref[0])


@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 5), st.integers(0, 2 ** 31))
@settings(max_examples=60, deadline=None)
def test_spectrum_rank_agrees_with_numerical_rank(d, k, r, seed):
    rng = SeededRng(seed)
    m = gaussian_matrix(d, r, 1.0, rng) @ gaussian_matrix(r, k, 1.0, rng) if r else np.zeros((d, k))
    assert spectrum_report(m).rank == numerical_rank(m)


def test_spectrum_tol_validation():
    with pytest.raises(ValueError):
        spectrum_report(np.eye(2), 0.0)


# -- smoothing ---------------------------------------------------------------

def test_smooth_window_one_identity(nprng):
    x = nprng.standard_normal(20)
    assert np.array_equal(smooth(x, 1).values, x)


def test_smooth_constant():
    assert np.allclose(smooth([0.7] * 30, 4).values, 0.7, rtol=0, atol=1e-15)


def test_smooth_hand_case():
    assert smooth([1, 2, 3, 4], 2).values.tolist() == [1.0, 1.5, 2.5, 3.5]


def test_smooth_rejects_zero_window():
    with pytest.raises(ValueError):
        smooth([1.0], 0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=60), st.integers(1, 12), st.floats(-50, 50))
@settings(max_examples=100, deadline=None)
def test_smooth_properties(xs, window, shift):
    x = np.array(xs)
    s = smooth(x, window).values
    assert s.shape == x.shape
    for i in range(len(x)):
        ref = x[max(0, i - window + 1):i + 1].mean()
        assert abs(s[i] - ref) <= 1e-9 * (1 + np.abs(x).max())
    assert np.all(s >= x.min() - 1e-9) and np.all(s <= x.max() + 1e-9)
    shifted = smooth(x + shift, window).values
    assert np.allclose(shifted, s + shift, rtol=0, atol=1e-9 * (1 + np.abs(x).max() + abs(shift)))


# -- comparison --------------------------------------------------------------

def test_compare_with_itself(nprng):
    ev = fake_stream(nprng.random(50).tolist(), evals=[(50, 0.3)])
    comp = compare_runs(ev, ev, window=5)
    assert not comp.delta.any() and comp.final_eval_delta == 0.0


def test_compare_constant_runs():
    comp = compare_runs(fake_stream([1.0] * 20), fake_stream([0.5] * 20), window=3)
    assert comp.better() == ["b"] * 20


def test_compare_antisymmetric(nprng):
    a = fake_stream(nprng.random(40).tolist(), evals=[(40, 0.2)])
    b = fake_stream(nprng.random(40).tolist(), evals=[(40, 0.1)])
    ab, ba = compare_runs(a, b, window=7), compare_runs(b, a, window=7)
    assert np.array_equal(ab.delta, -ba.delta)
    assert ab.final_eval_delta == -ba.final_eval_delta


def test_compare_first_hit():
    comp = compare_runs(fake_stream([1.0, 0.8, 0.6, 0.4]), fake_stream([1.0, 0.5, 0.3, 0.2]), window=1, target=0.55)
    assert comp.first_hit_a == 4 and comp.first_hit_b == 2


def test_compare_grid_mismatch():
    with pytest.raises(GridMismatch) as info:
        compare_runs(fake_stream([1.0] * 5), fake_stream([1.0] * 6))
    assert info.value.grid_a == [1, 2, 3, 4, 5] and len(info.value.grid_b) == 6


# -- csv ---------------------------------------------------------------------

def test_csv_columns_and_values(tmp_path):
    events = fake_stream([4.0, 2.0, 0.0]) + [{"event": "eval_loss", "step": 3, "loss": 9.0}]
    path = tmp_path / "loss.csv"
    assert write_loss_csv(events, path, window=2) == 3
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == CSV_COLUMNS == ("step", "raw_loss", "smoothed_loss", "stage")
    assert rows[1:] == [["1", "4.0", "4.0", "1"], ["2", "2.0", "3.0", "1"], ["3", "0.0", "1.0", "1"]]


def test_csv_from_real_run(tmp_path):
    run(small_config(total_steps=60), tmp_path / "r")
    events = read_events(tmp_path / "r")
    write_loss_csv(events, tmp_path / "x.csv", window=1)
    rows = list(csv.DictReader(open(tmp_path / "x.csv")))
    raw = [e["loss"] for e in events if e["event"] == "train_loss"]
    assert [float(r["raw_loss"]) for r in rows] == raw
    assert [float(r["smoothed_loss"]) for r in rows] == raw
    assert [int(r["stage"]) for r in rows][-1] == 2  # unload at step 50
