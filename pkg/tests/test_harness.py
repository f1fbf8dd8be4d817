import json
import struct

import numpy as np
import pytest

from conftest import small_config
from plora_lab.harness import checkpoint as ckmod
from plora_lab.harness.checkpoint import Checkpoint, CheckpointError
from plora_lab.harness.config import AdapterSpec, ConfigError, RunConfig, TaskSpec, load_config
from plora_lab.harness.runner import RunAborted, Trainer, latest_checkpoint, read_events, resume, run
from plora_lab.harness.task import make_teacher_student_task
from plora_lab.linalg import SeededRng, numerical_rank
from plora_lab.model import mse_loss, network_forward
from plora_lab.optim import AdamWParams
from plora_lab.plora import PloraConfig


# -- config ------------------------------------------------------------------

@pytest.mark.parametrize("regime", ["full_ft", "lora", "plora"])
def test_config_roundtrip(regime):
    cfg = small_config(regime, name="x", output_dir="somewhere")
    again = RunConfig.from_json(cfg.to_json())
    assert again == cfg
    assert again.to_json() == cfg.to_json()


def test_config_defaults_follow_desk_scale():
    cfg = RunConfig()
    assert (cfg.task.d, cfg.task.k, cfg.task.depth, cfg.task.n_train) == (16, 16, 2, 4096)
    assert (cfg.batch_size, cfg.total_steps, cfg.plora.unload_interval_steps, cfg.adapter.rank) == (32, 4000, 500, 1)
    assert cfg.optim.lr == 1e-4 and cfg.optim.beta2 == 0.99


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.update(regime="lora"),  # lora with a plora block
        lambda d: d.pop("plora"),  # plora without one
        lambda d: d.update(regime="full_ft"),  # adapter block on full_ft
        lambda d: d.update(batch_size=0),
        lambda d: d.update(unknown=1),
        lambda d: d["task"].update(target_update_rank=99),
        lambda d: d["adapter"].update(rank=9),
        lambda d: d["plora"].update(momentum=1.5),
        lambda d: d["plora"].update(mode="sideways"),
        lambda d: d["optim"].update(lr=-1),
    ],
)
def test_config_rejections(mutate):
    raw = small_config().to_dict()
    mutate(raw)
    with pytest.raises(ConfigError):
        RunConfig.from_dict(raw)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_output_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv("PLORA_OUT_DIR", str(tmp_path))
    assert small_config(name="abc").resolve_output_dir() == tmp_path / "abc"
    assert small_config(output_dir="/x/y").resolve_output_dir().as_posix() == "/x/y"


# -- task --------------------------------------------------------------------

def test_task_rank_zero_teacher_equals_student():
    spec = TaskSpec(d=6, k=5, depth=2, target_update_rank=0, n_train=64, n_val=4000, noise_std=0.1)
    task = make_teacher_student_task(spec, SeededRng(0))
    for w, t in zip(task.student_weights, task.teacher_weights):
        assert np.array_equal(w, t)
    loss = mse_loss(network_forward(task.student(), task.x_val)[0], task.y_val)[0]
    assert abs(loss - 0.1 ** 2) < 0.05 * 0.1 ** 2


def test_task_update_rank_by_svd():
    rng = np.random.default_rng(4)
    for _ in range(10):
        d, k = rng.integers(2, 12, 2)
        r = int(rng.integers(0, min(d, k) + 1))
        spec = TaskSpec(d=int(d), k=int(k), depth=3, target_update_rank=r, n_train=8, n_val=8)
        task = make_teacher_student_task(spec, SeededRng(int(rng.integers(2 ** 31))))
        for dw in task.target_updates:
            assert numerical_rank(dw) == r
            assert r == 0 or abs(np.linalg.norm(dw) - 1.0) < 1e-12


def test_task_rank_out_of_range():
    with pytest.raises(ValueError):
        make_teacher_student_task(TaskSpec(d=3, k=4, target_update_rank=4), SeededRng(0))


def test_task_deterministic():
    spec = TaskSpec(d=4, k=4, target_update_rank=2, n_train=16, n_val=8, noise_std=0.2)
    a = make_teacher_student_task(spec, SeededRng(9))
    b = make_teacher_student_task(spec, SeededRng(9))
    assert np.array_equal(a.y_train, b.y_train) and np.array_equal(a.student_weights[1], b.student_weights[1])


def test_task_realizable_by_full_finetuning():
    cfg = RunConfig(seed=0, regime="full_ft", optim=AdamWParams(lr=5e-4), total_steps=4000)
    tr = Trainer(cfg)
    tr.train()
    train_loss = mse_loss(network_forward(tr.net, tr.task.x_train)[0], tr.task.y_train)[0]
    assert train_loss < 1e-6


# -- runs --------------------------------------------------------------------

def test_zero_steps(tmp_path):
    res = run(small_config(total_steps=0), tmp_path)
    events = read_events(tmp_path)
    assert [e["event"] for e in events] == ["eval_loss"] and events[0]["step"] == 0
    assert all(not dw.any() for dw in res.trainer.delta_weights())
    assert latest_checkpoint(tmp_path).name == "step_00000000.plck"


def test_same_config_byte_identical(tmp_path):
    cfg = small_config()
    run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b")
    assert (tmp_path / "a/metrics.ndjson").read_bytes() == (tmp_path / "b/metrics.ndjson").read_bytes()
    ca, cb = latest_checkpoint(tmp_path / "a"), latest_checkpoint(tmp_path / "b")
    assert ca.read_bytes() == cb.read_bytes()


def test_stream_invariants(tmp_path):
    cfg = small_config(total_steps=230)
    run(cfg, tmp_path / "p")
    run(cfg.replace(regime="lora", plora=None), tmp_path / "l")
    p_events, l_events = read_events(tmp_path / "p"), read_events(tmp_path / "l")
    for events in (p_events, l_events):
        steps = [e["step"] for e in events]
        assert steps == sorted(steps)
        assert [e["step"] for e in events if e["event"] == "train_loss"] == list(range(1, 231))
    unloads = [e for e in p_events if e["event"] == "unload"]
    assert [u["stage"] for u in unloads] == [1, 2, 3, 4]
    assert [u["step"] for u in unloads] == [50, 100, 150, 200]
    assert not [e for e in l_events if e["event"] == "unload"]
    probes = [e for e in p_events if e["event"] == "rank_probe"]
    assert len(probes) == 5 and probes[-1]["final"]
    assert [e["step"] for e in p_events if e["event"] == "eval_loss"][-1] == 230


def test_divergence_is_reported(tmp_path):
    cfg = small_config(optim=AdamWParams(lr=1e200))
    res = run(cfg, tmp_path)
    events = read_events(tmp_path)
    assert res.status == "diverged"
    assert events[-1]["event"] == "diverged"
    assert res.step < cfg.total_steps


def test_disk_failure_keeps_partial_stream(tmp_path, monkeypatch):
    def boom(self, path):
        raise OSError(28, "No space left on device")

    monkeypatch.setattr(Checkpoint, "save", boom)
    with pytest.raises(RunAborted):
        run(small_config(), tmp_path)
    events = read_events(tmp_path)
    assert events[-1]["event"] == "aborted"
    assert [e for e in events if e["event"] == "train_loss"][-1]["step"] == 60


# -- checkpoints -------------------------------------------------------------

def _ckpt_bytes(tmp_path):
    run(small_config(total_steps=60), tmp_path)
    return latest_checkpoint(tmp_path).read_bytes()


def test_checkpoint_layout(tmp_path):
    data = _ckpt_bytes(tmp_path)
    assert data[:4] == b"PLCK"
    assert struct.unpack_from("<I", data, 4)[0] == 1
    mlen = struct.unpack_from("<Q", data, 8)[0]
    manifest = json.loads(data[16:16 + mlen])
    first = manifest["tensors"][0]
    blob = data[16 + mlen:]
    n = first["shape"][0] * first["shape"][1]
    arr = np.frombuffer(blob[:n * 8], dtype="<f8").reshape(first["shape"])
    ck = Checkpoint.from_bytes(data)
    assert np.array_equal(arr, ck.tensors[first["name"]])


def test_checkpoint_roundtrip_bytes(tmp_path):
    data = _ckpt_bytes(tmp_path)
    assert Checkpoint.from_bytes(data).to_bytes() == data


def test_checkpoint_version_mismatch(tmp_path):
    data = bytearray(_ckpt_bytes(tmp_path))
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(bytes(data))


def test_checkpoint_bad_magic(tmp_path):
    data = b"XXXX" + _ckpt_bytes(tmp_path)[4:]
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(data)


def test_checkpoint_corrupt_tensor_length(tmp_path):
    ck = Checkpoint.from_bytes(_ckpt_bytes(tmp_path))
    data = ck.to_bytes()
    last = list(ck.tensors)[-1]
    with pytest.raises(CheckpointError, match=last.replace(".", r"\.")):
        Checkpoint.from_bytes(data[:-8])


def test_checkpoint_corrupt_shape_names_tensor(tmp_path):
    data = _ckpt_bytes(tmp_path)
    mlen = struct.unpack_from("<Q", data, 8)[0]
    manifest = json.loads(data[16:16 + mlen])
    manifest["tensors"][0]["shape"] = [8, 9]
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    forged = data[:8] + struct.pack("<Q", len(text)) + text + data[16 + mlen:]
    with pytest.raises(CheckpointError, match=manifest["tensors"][0]["name"].replace(".", r"\.")):
        Checkpoint.from_bytes(forged)


def test_resume_rejects_digest_mismatch(tmp_path):
    _ckpt_bytes(tmp_path)
    path = latest_checkpoint(tmp_path)
    ck = Checkpoint.load(path)
    ck.manifest["initial_weights_digest"] = "0" * 64
    ck.save(path)
    with pytest.raises(CheckpointError, match="digest"):
        resume(path)


def test_resume_at_end_is_noop(tmp_path):
    cfg = small_config()
    run(cfg, tmp_path)
    before = (tmp_path / "metrics.ndjson").read_bytes()
    res = resume(latest_checkpoint(tmp_path))
    assert res.step == cfg.total_steps
    assert (tmp_path / "metrics.ndjson").read_bytes() == before


@pytest.mark.parametrize("regime,momentum", [("plora", 0.0), ("plora", 0.3), ("lora", None), ("full_ft", None)])
def test_split_and_resume_identical(tmp_path, regime, momentum):
    overrides = {"checkpoint_every": 70}
    if regime == "plora":
        overrides["plora"] = PloraConfig(50, momentum=momentum)
    cfg = small_config(regime, **overrides)
    run(cfg, tmp_path / "straight")
    straight = (tmp_path / "straight/metrics.ndjson").read_bytes()

    # interrupted copy: stop at 140, then resume from the checkpoint there
    run(cfg.replace(total_steps=140), tmp_path / "split")
    res = resume(tmp_path / "split/checkpoints/step_00000140.plck", total_steps=cfg.total_steps)
    assert res.status == "completed"
    split_events = read_events(tmp_path / "split")
    straight_events = read_events(tmp_path / "straight")
    assert split_events == straight_events
    assert (tmp_path / "split/metrics.ndjson").read_bytes() == straight


def test_resume_into_other_dir_writes_continuation(tmp_path):
    cfg = small_config(checkpoint_every=70)
    run(cfg, tmp_path / "a")
    full = (tmp_path / "a/metrics.ndjson").read_bytes()
    ckpt = tmp_path / "a/checkpoints/step_00000070.plck"
    offset = Checkpoint.load(ckpt).manifest["metrics_offset"]
    resume(ckpt, out_dir=tmp_path / "b")
    assert (tmp_path / "b/metrics.ndjson").read_bytes() == full[offset:]
    assert (tmp_path / "a/metrics.ndjson").read_bytes() == full


def test_adapter_layer_selection_respected(tmp_path):
    cfg = small_config(adapter=AdapterSpec(rank=1, layer_selection=(1,)))
    res = run(cfg, tmp_path)
    dws = res.trainer.delta_weights()
    assert not dws[0].any() and dws[1].any()
