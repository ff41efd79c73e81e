"""Experiment orchestration: data, state construction, epoch loop, evaluation, checkpoints."""
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import MULTIHEAD_METHODS
from .data import (
    SynthParams,
    load_split,
    read_manifest,
    split_dataset,
    synth_segmentation_set,
)
from .errors import CheckpointError, ConfigSchemaError, DataResolutionError, ManifestSchemaError
from .members import build_member
from .metrics import MetricReport, accumulate_confusion, derive_metrics, new_confusion
from .seeding import make_streams
from .segmodel import ModelSpec, build_multihead_model, parameter_footprint
from .trainers import (
    DF,
    DT,
    OptimState,
    TrainerState,
    baseline_step,
    diversehead_step,
    diversemodel_step,
    epoch_batches,
    make_optimizer,
    predict,
    predict_members,
    steps_per_epoch,
)
from .voting import VoteWeight

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class Datasets:
    x_lab: torch.Tensor
    y_lab: torch.Tensor
    u: torch.Tensor
    x_val: torch.Tensor
    y_val: torch.Tensor
    x_test: torch.Tensor
    y_test: torch.Tensor
    classes: int
    bands: int
    ignore_index: int


def _pool_training(manifest):
    """All training records, in manifest order; unlabelled ones carry their label in a sidecar."""
    return [r for r in manifest.records if r.split in ("train-labelled", "train-unlabelled")]


def load_datasets(cfg):
    d = cfg.data
    if d.synth is not None:
        try:
            params = SynthParams(**d.synth)
        except TypeError as e:
            raise ConfigSchemaError("data.synth", str(e)) from e
        root = Path(cfg.output_dir) / "data"
        manifest_path = root / "manifest.json"
        manifest = None
        if manifest_path.exists():
            try:
                manifest = read_manifest(manifest_path)
            except (ManifestSchemaError, DataResolutionError):
                manifest = None
            if manifest is not None and manifest.provenance.get("params") != vars(params):
                manifest = None
        if manifest is None:
            manifest = synth_segmentation_set(params, root)
    else:
        manifest = read_manifest(d.manifest)

    x_val, y_val = load_split(manifest, "val")
    x_test, y_test = load_split(manifest, "test")
    if d.labelled_fraction is None:
        x_lab, y_lab = load_split(manifest, "train-labelled")
        u, _ = load_split(manifest, "train-unlabelled")
    else:
        recs = _pool_training(manifest)
        lab, unl = split_dataset(range(len(recs)), d.labelled_fraction, d.seed)
        if not unl:
            raise ConfigSchemaError("data.labelled_fraction", "leaves no unlabelled data")

        def stack(ids, with_label):
            imgs = np.stack([np.load(manifest.resolve(recs[i].image)) for i in ids]).astype(np.float32)
            if not with_label:
                return torch.from_numpy(imgs), None
            lbls = np.stack([np.load(manifest.resolve(recs[i].label or recs[i].sidecar_label)) for i in ids])
            return torch.from_numpy(imgs), torch.from_numpy(lbls.astype(np.int64))

        x_lab, y_lab = stack(lab, True)
        u, _ = stack(unl, False)
    return Datasets(x_lab, y_lab, u, x_val, y_val, x_test, y_test,
                    manifest.classes, manifest.bands, manifest.ignore_index)


def build_state(cfg, bands, classes, max_iter, warmup_iters=0):
    m = cfg.model
    if cfg.method == "diversemodel":
        models = [build_member(arch, bands, classes, cfg.seed, i) for i, arch in enumerate(m.members)]
    elif m.arch is not None:
        index = m.members.index(m.arch) if m.arch in m.members else 0
        models = [build_member(m.arch, bands, classes, cfg.seed, index)]
    else:
        spec = ModelSpec(classes=classes, heads=m.heads, bands=bands, trunk=m.trunk,
                         width=m.width, dropout=m.dropout, seed=cfg.seed)
        models = [build_multihead_model(spec)]
    optim = OptimState(cfg.optim.base_lr, cfg.optim.power, cfg.optim.momentum,
                       cfg.optim.weight_decay, 0, max(1, max_iter))
    return TrainerState(
        method=cfg.method,
        models=models,
        optimizers=[make_optimizer(net, optim, cfg.optim.branch_lr_mult) for net in models],
        streams=make_streams(cfg.seed),
        optim=optim,
        vote=VoteWeight(cfg.loss.phi, cfg.loss.phi_mode),
        lam=cfg.loss.lam,
        freeze_count=cfg.perturb.freeze_count,
        noise_sd=cfg.perturb.noise_sd,
        ignore_index=cfg.loss.ignore_index,
        warmup_iters=warmup_iters,
    )


def run_step(state, labelled, unlabelled):
    method = state.method
    if method == "diversehead-df":
        return diversehead_step(state, labelled, unlabelled, DF)
    if method == "diversehead-dt":
        return diversehead_step(state, labelled, unlabelled, DT)
    if method == "diversemodel":
        return diversemodel_step(state, labelled, unlabelled)
    return baseline_step(state, labelled, unlabelled, method)


def evaluate(state, images, labels, classes, ignore_index):
    pred = predict(state, images)
    cm = accumulate_confusion(new_confusion(classes), pred.numpy(), labels.numpy(), ignore_index)
    return derive_metrics(cm)


# ------------------------------------------------------------- checkpoints

def save_checkpoint(state, path, config_hash, extra=None):
    """Write atomically: a failed write leaves any previous checkpoint intact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "method": state.method,
        "iteration": state.optim.iter,
        "epoch": state.epoch,
        "max_iter": state.optim.max_iter,
        "phi": state.vote.phi,
        "models": [m.state_dict() for m in state.models],
        "optimizers": [o.state_dict() for o in state.optimizers],
        "rng": {name: g.get_state() for name, g in state.streams.items()},
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise CheckpointError(f"could not write checkpoint {path}: {e}") from e
    return path


def read_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("schema_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint schema")
    return payload


def load_checkpoint(state, path, config_hash=None):
    payload = read_checkpoint(path)
    if config_hash is not None and payload["config_hash"] != config_hash:
        raise CheckpointError(f"{path}: written by a different configuration ({payload['config_hash']} != {config_hash})")
    if len(payload["models"]) != len(state.models):
        raise CheckpointError(f"{path}: holds {len(payload['models'])} models, state has {len(state.models)}")
    try:
        for m, sd in zip(state.models, payload["models"]):
            m.load_state_dict(sd)
        for o, sd in zip(state.optimizers, payload["optimizers"]):
            o.load_state_dict(sd)
        for name, g in state.streams.items():
            g.set_state(payload["rng"][name])
    except (RuntimeError, KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: does not match the model layout ({e})") from e
    state.optim.iter = payload["iteration"]
    state.optim.max_iter = payload["max_iter"]
    state.epoch = payload["epoch"]
    state.vote.phi = payload["phi"]
    return payload.get("extra", {})


# ------------------------------------------------------------------ report

@dataclass
class RunReport:
    method: str
    config: dict
    config_hash: str
    overrides: list = field(default_factory=list)
    val_history: list = field(default_factory=list)   # [{"epoch": e, "metrics": MetricReport dict}]
    test: dict | None = None
    best: dict | None = None
    seconds_per_100_iters: float | None = None
    iterations: int = 0
    epochs_completed: int = 0
    parameters: dict = field(default_factory=dict)
    members_test: dict | None = None
    phi: float | None = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def test_metrics(self):
        return MetricReport.from_dict(self.test)


def _footprint(state):
    if len(state.models) == 1 and hasattr(state.models[0], "heads"):
        return parameter_footprint(state.models[0])
    return {"total_params": sum(p.numel() for m in state.models for p in m.parameters())}


def _truncate_log(path, iteration):
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line and json.loads(line)["iteration"] <= iteration]
    path.write_text("".join(line + "\n" for line in keep))


def run_experiment(cfg, resume=None, stop_after=None, data=None):
    """Train and evaluate one configured method; returns a ``RunReport``.

    ``resume`` continues from a checkpoint written by the same configuration.
    ``stop_after`` ends the session once that many epochs are complete (the LR
    horizon still covers the full configured schedule).
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = data or load_datasets(cfg)
    n_unlab = data.u.shape[0]
    bs = cfg.optim.batch_size
    max_iter = cfg.schedule.epochs * steps_per_epoch(n_unlab, bs)
    warmup = cfg.schedule.sup_warmup_epochs * steps_per_epoch(n_unlab, bs)
    state = build_state(cfg, data.bands, data.classes, max_iter, warmup)
    chash = cfg.hash()
    ckpt_dir = out / "checkpoints"
    log_path = out / "losses.jsonl"

    report = RunReport(method=cfg.method, config=cfg.to_dict(), config_hash=chash,
                       overrides=list(cfg.overrides), parameters=_footprint(state))
    train_seconds = 0.0
    if resume is not None:
        extra = load_checkpoint(state, resume, chash)
        report.val_history = extra.get("val_history", [])
        report.best = extra.get("best")
        train_seconds = extra.get("train_seconds", 0.0)
        _truncate_log(log_path, state.optim.iter)
    else:
        log_path.write_text("")
        m0 = evaluate(state, data.x_val, data.y_val, data.classes, data.ignore_index)
        report.val_history.append({"epoch": 0, "metrics": m0.to_dict()})

    with open(log_path, "a") as log_file:
        while state.epoch < cfg.schedule.epochs:
            if stop_after is not None and state.epoch >= stop_after:
                break
            batches = epoch_batches(data.x_lab.shape[0], n_unlab, bs, state.streams["data-order"])
            t0 = time.perf_counter()
            for s_idx, k_idx in batches:
                labelled = (data.x_lab[s_idx], data.y_lab[s_idx])
                step = run_step(state, labelled, data.u[k_idx])
                log_file.write(json.dumps(step.to_record()) + "\n")
            log_file.flush()
            train_seconds += time.perf_counter() - t0
            state.epoch += 1

            if state.epoch % cfg.schedule.eval_every == 0 or state.epoch == cfg.schedule.epochs:
                mv = evaluate(state, data.x_val, data.y_val, data.classes, data.ignore_index)
                report.val_history.append({"epoch": state.epoch, "metrics": mv.to_dict()})
                miou = mv.macro["miou"] or 0.0
                log.info("%s epoch %d val mIoU %.4f", cfg.method, state.epoch, miou)
                if report.best is None or miou > report.best["miou"]:
                    report.best = {"epoch": state.epoch, "miou": miou, "path": str(ckpt_dir / "best.pt")}
                    save_checkpoint(state, ckpt_dir / "best.pt", chash, {"config": report.config})
            extra = {"config": report.config, "val_history": report.val_history,
                     "best": report.best, "train_seconds": train_seconds}
            save_checkpoint(state, ckpt_dir / "last.pt", chash, extra)

    report.iterations = state.optim.iter
    report.epochs_completed = state.epoch
    report.phi = state.vote.phi if cfg.method in MULTIHEAD_METHODS else None
    if state.optim.iter:
        report.seconds_per_100_iters = 100.0 * train_seconds / state.optim.iter
    report.test = evaluate(state, data.x_test, data.y_test, data.classes, data.ignore_index).to_dict()
    if cfg.method == "diversemodel":
        report.members_test = {}
        for arch, pred in zip(cfg.model.members, predict_members(state, data.x_test)):
            cm = accumulate_confusion(new_confusion(data.classes), pred.numpy(), data.y_test.numpy(), data.ignore_index)
            report.members_test[arch] = derive_metrics(cm).to_dict()
    with open(out / "report.json", "w") as f:
        json.dump(report.to_dict(), f, indent=1)
    return report


def evaluate_checkpoint(checkpoint, manifest_path, split="test"):
    """Rebuild the model(s) from a checkpoint's embedded config and score one split."""
    from .config import config_from_dict
    payload = read_checkpoint(checkpoint)
    cfg_dict = payload["extra"].get("config")
    if cfg_dict is None:
        raise CheckpointError(f"{checkpoint}: no embedded configuration")
    cfg = config_from_dict(cfg_dict)
    manifest = read_manifest(manifest_path)
    images, labels = load_split(manifest, split)
    state = build_state(cfg, manifest.bands, manifest.classes, payload["max_iter"])
    load_checkpoint(state, checkpoint)
    return evaluate(state, images, labels, manifest.classes, manifest.ignore_index)
