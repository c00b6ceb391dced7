"""Wiring an ExperimentConfig into data, a model, a training run and reports."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, parse_config, to_text
from .mil import MILHead
from .pretrain import pretrain_lite
from .synth import dataset_fingerprint, generate_dataset, read_dataset
from .trainer import CONVENTIONAL_MIL, Model, Trainer
from .vit import PromptSet, ViT

CHECKPOINT_NAME = "checkpoint.pmck"
REPORT_NAME = "report.jsonl"
METRIC_FIELDS = ("epoch", "split", "loss", "accuracy", "auroc", "n_bags")

_backbone_cache: dict[tuple, dict[str, np.ndarray]] = {}


class NumericError(FloatingPointError):
    pass


def backbone_state(cfg: ExperimentConfig) -> dict[str, np.ndarray]:
    """Frozen backbone weights for ``cfg``, memoized per process."""
    vcfg = dataclasses.replace(cfg.model, num_prompts=0)
    key = (tuple(dataclasses.astuple(vcfg)), cfg.backbone, cfg.backbone_seed,
           cfg.pretrain_steps if cfg.backbone == "pretrain_lite" else 0)
    if key not in _backbone_cache:
        if cfg.backbone == "pretrain_lite":
            vit = pretrain_lite(vcfg, seed=cfg.backbone_seed, steps=cfg.pretrain_steps)
        else:
            vit = ViT(vcfg, seed=cfg.backbone_seed)
        _backbone_cache[key] = vit.state()
    return {k: v.copy() for k, v in _backbone_cache[key].items()}


def load_data(cfg: ExperimentConfig):
    if cfg.data_path:
        return read_dataset(cfg.data_path)
    return generate_dataset(cfg.data)


def build_model(cfg: ExperimentConfig, load_backbone: bool = True) -> Model:
    vit = ViT(cfg.model, seed=cfg.backbone_seed)
    if load_backbone:
        vit.load_state(backbone_state(cfg))
    k = 0 if cfg.mode == CONVENTIONAL_MIL else cfg.model.num_prompts
    prompt = PromptSet.init(k, cfg.model.embed_dim, seed=cfg.seed) if k > 0 else None
    head = MILHead(cfg.head.kind, cfg.model.embed_dim, cfg.task, seed=cfg.seed,
                   attn_dim=cfg.head.attn_dim)
    model = Model(vit, prompt, head, cfg.task, cfg.mode)
    if cfg.train.precision == "f32":
        model.astype(np.float32)
    return model


def seed_fingerprint(cfg: ExperimentConfig) -> str:
    """Identifies the seed-controlled parts of a run other than the prompt count."""
    raw = f"seed={cfg.seed};train_seed={cfg.train.seed};backbone={cfg.backbone}:" \
          f"{cfg.backbone_seed}:{cfg.pretrain_steps}"
    return hashlib.sha256(raw.encode()).hexdigest()[:16]


def _finite_or_raise(rec: dict) -> None:
    for key in ("loss", "accuracy", "auroc"):
        v = rec.get(key)
        if v is not None and not math.isfinite(v):
            raise NumericError(f"non-finite {key} in {rec.get('split')} record")


def _metric_record(stats: dict, epoch) -> dict:
    rec = {k: stats.get(k) for k in METRIC_FIELDS}
    rec["epoch"] = epoch
    for k in ("peak_act_elems", "secs_per_bag", "lr"):
        if k in stats:
            rec[k] = stats[k]
    _finite_or_raise(rec)
    return rec


def save_model(model: Model, path, cfg: ExperimentConfig) -> None:
    state = model.state()
    trainable = {name: True for name in state if name.startswith("head.")}
    if model.prompt is not None:
        trainable["prompt"] = True
    if model.vit.trainable:
        trainable.update({n: True for n in state if n.startswith("backbone.")})
    save_checkpoint(path, state, trainable, {"experiment": to_text(cfg)})


def load_model(path) -> tuple[Model, ExperimentConfig]:
    tensors, _, block = load_checkpoint(path)
    cfg = parse_config(block["experiment"])
    model = build_model(cfg, load_backbone=False)
    model.load_state(tensors)
    if cfg.train.precision == "f32":
        model.astype(np.float32)
    return model, cfg


def run_training(cfg: ExperimentConfig, dataset=None, out_dir=None,
                 emit: Callable[[dict], None] | None = None) -> dict:
    """Train per ``cfg``, keep the best-validation weights, evaluate on test.

    With ``out_dir`` the best weights go to a checkpoint file and the test
    evaluation uses the reloaded checkpoint. Returns the final test record.
    """
    emit = emit or (lambda rec: None)
    dataset = load_data(cfg) if dataset is None else dataset
    model = build_model(cfg)
    trainer = Trainer(model, cfg.train)
    emit({"record": "config", "config": to_text(cfg),
          "data_fingerprint": dataset_fingerprint(dataset)})
    emit({"record": "census", "mode": cfg.mode, **model.census()})
    ckpt = Path(out_dir) / CHECKPOINT_NAME if out_dir is not None else None
    best_key, best_state, best_epoch = None, None, None
    for epoch in range(cfg.train.epochs):
        emit(_metric_record(trainer.train_epoch(dataset["train"], epoch), epoch))
        if dataset.get("val"):
            val = _metric_record(trainer.evaluate(dataset["val"], "val"), epoch)
            emit(val)
            key = (val["accuracy"], -val["loss"])
        else:
            key = (epoch,)
        if best_key is None or key > best_key:
            best_key, best_epoch = key, epoch
            if ckpt is not None:
                save_model(model, ckpt, cfg)
            else:
                best_state = model.state()
    if ckpt is not None:
        model, _ = load_model(ckpt)
        trainer = Trainer(model, cfg.train)
    else:
        model.load_state(best_state)
    test = _metric_record(trainer.evaluate(dataset["test"], "test"), "final")
    test["best_epoch"] = best_epoch
    emit(test)
    return test


def format_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True)
