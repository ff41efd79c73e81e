import json

import pytest
import torch

from segvote.config import config_from_dict
from segvote.errors import CheckpointError
from segvote.experiment import evaluate_checkpoint, load_datasets, read_checkpoint, run_experiment

TINY = {"count": 24, "labelled": 4, "val": 4, "test": 4, "size": 16, "seed": 2}


def tiny_cfg(tmp_path, method="diversehead-df", name="run", **sched):
    schedule = {"epochs": 4, "sup_warmup_epochs": 1}
    schedule.update(sched)
    return config_from_dict({
        "method": method, "seed": 5, "data": {"synth": TINY},
        "optim": {"batch_size": 4}, "schedule": schedule,
        "output_dir": str(tmp_path / name),
    })


def test_hundred_step_loss_logs_bitwise_identical(tmp_path):
    logs = []
    for name in ("a", "b"):
        cfg = tiny_cfg(tmp_path, name=name, epochs=20, eval_every=20)
        rep = run_experiment(cfg)
        assert rep.iterations == 100
        logs.append((tmp_path / name / "losses.jsonl").read_bytes())
    assert logs[0] == logs[1]
    assert len(logs[0].splitlines()) == 100


@pytest.mark.parametrize("method", ["diversehead-dt", "diversemodel"])
def test_resume_matches_uninterrupted(tmp_path, method):
    full = run_experiment(tiny_cfg(tmp_path, method, "full"))
    part_cfg = tiny_cfg(tmp_path, method, "part")
    half = run_experiment(part_cfg, stop_after=2)
    assert half.epochs_completed == 2
    resumed = run_experiment(part_cfg, resume=tmp_path / "part" / "checkpoints" / "last.pt")
    assert resumed.test == full.test
    assert resumed.val_history == full.val_history
    assert (tmp_path / "part" / "losses.jsonl").read_text() == (tmp_path / "full" / "losses.jsonl").read_text()
    a = torch.load(tmp_path / "full" / "checkpoints" / "last.pt", weights_only=False)["models"]
    b = torch.load(tmp_path / "part" / "checkpoints" / "last.pt", weights_only=False)["models"]
    assert all(torch.equal(a[i][k], b[i][k]) for i in range(len(a)) for k in a[i])


def test_zero_epochs_reports_initial_metrics(tmp_path):
    rep = run_experiment(tiny_cfg(tmp_path, "base", epochs=0))
    assert rep.iterations == 0 and [h["epoch"] for h in rep.val_history] == [0]
    assert rep.test is not None


def test_report_is_self_contained(tmp_path):
    cfg = tiny_cfg(tmp_path, "shs", epochs=2)
    rep = run_experiment(cfg)
    saved = json.loads((tmp_path / "run" / "report.json").read_text())
    again = config_from_dict(saved["config"])
    assert again.hash() == saved["config_hash"] == cfg.hash()
    assert saved["seconds_per_100_iters"] > 0
    assert saved["best"]["path"].endswith("best.pt")
    assert rep.parameters["total_params"] > 0


def test_checkpoint_guards(tmp_path):
    cfg = tiny_cfg(tmp_path, "base", epochs=1)
    run_experiment(cfg)
    last = tmp_path / "run" / "checkpoints" / "last.pt"
    other = tiny_cfg(tmp_path, "base", epochs=2)
    with pytest.raises(CheckpointError):
        run_experiment(other, resume=last)
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "junk.pt")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "missing.pt")
    assert not list((tmp_path / "run" / "checkpoints").glob("*.tmp"))


def test_evaluate_checkpoint(tmp_path):
    cfg = tiny_cfg(tmp_path, "base", epochs=1)
    rep = run_experiment(cfg)
    m = evaluate_checkpoint(tmp_path / "run" / "checkpoints" / "last.pt", tmp_path / "run" / "data" / "manifest.json")
    assert m.to_dict() == rep.test


def test_member_arch_single_model(tmp_path):
    cfg = config_from_dict({"method": "shs", "data": {"synth": TINY}, "model": {"arch": "segnet"},
                            "schedule": {"epochs": 1}, "output_dir": str(tmp_path / "m")})
    rep = run_experiment(cfg)
    assert rep.iterations > 0


def test_labelled_fraction_resplits_pool(tmp_path):
    cfg = config_from_dict({"method": "base", "data": {"synth": TINY, "labelled_fraction": 0.5},
                            "output_dir": str(tmp_path / "f")})
    data = load_datasets(cfg)
    assert data.x_lab.shape[0] == 12 and data.u.shape[0] == 12
