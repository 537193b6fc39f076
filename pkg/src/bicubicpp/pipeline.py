"""Stage orchestration: train wide, prune to the target width, strip biases,
fine-tuning after each destructive step.

The canonical path trains a checkpoint, prunes it (no training during mask
selection), fine-tunes, removes all conv biases, and fine-tunes again.
Every stage evaluates validation PSNR(Y) each epoch and returns the best
checkpoint seen, *including the untrained starting point*, so a fine-tune
can never return something worse than its input on the validation set.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datapipe
from .errors import ConfigError
from .metrics import dataset_psnr_y
from .model import Checkpoint, Model, ModelConfig, load_checkpoint, load_partial, save_checkpoint
from .prune import prune_pipeline
from .tensor_ops import AdamState, LrSchedule, adam_step, lr_at


@dataclass
class TrainConfig:
    epochs: int = 1000
    patches_per_epoch: int = 800
    batch: int = 16
    patch_lr: int = 108
    lr0: float = 5e-4
    constant_epochs: int = 500
    lr_final: float = 1e-8
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "l1"
    seed: int = 0
    val_every: int = 1
    val_batch: int = 8

    def validate(self) -> "TrainConfig":
        if self.patches_per_epoch % self.batch != 0:
            raise ConfigError(
                f"patches_per_epoch ({self.patches_per_epoch}) must divide by "
                f"batch ({self.batch})"
            )
        if self.loss not in ("l1", "l2"):
            raise ConfigError(f"loss must be 'l1' or 'l2', got {self.loss!r}")
        self.schedule()  # validates the LR fields
        return self

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr0, self.epochs, self.constant_epochs, self.lr_final)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()


def _loss_and_grad(y: np.ndarray, target: np.ndarray, kind: str):
    diff = y - target
    n = diff.size
    if kind == "l1":
        return float(np.mean(np.abs(diff))), np.sign(diff) / n
    return float(np.mean(diff * diff)), (2.0 / n) * diff


@dataclass
class TrainResult:
    model: Model
    best_psnr: float
    initial_psnr: float
    log_rows: list[tuple]  # (epoch, lr, train_loss, val_psnr_y)


def train_model(model: Model, cfg: TrainConfig, trainset, valset) -> TrainResult:
    """Adam training of a model in place; returns the best-validation snapshot."""
    cfg.validate()
    trainset = list(trainset.pairs if isinstance(trainset, datapipe.MemoryCache) else trainset)
    valset = list(valset)
    if not trainset:
        raise ConfigError("training set is empty")
    if not valset:
        raise ConfigError("validation set is empty")

    rng = np.random.default_rng(cfg.seed)
    sched = cfg.schedule()
    steps = cfg.patches_per_epoch // cfg.batch

    states: dict[str, AdamState] = {}
    for name, layer in model.layers.items():
        states[f"{name}.weight"] = AdamState.zeros(layer.weight)
        if layer.bias is not None:
            states[f"{name}.bias"] = AdamState.zeros(layer.bias)

    initial_psnr = dataset_psnr_y(model, valset, batch=cfg.val_batch)
    best_psnr = initial_psnr
    best_layers = {n: p.copy() for n, p in model.layers.items()}
    rows: list[tuple] = []

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, sched)
        losses = []
        for _ in range(steps):
            pb = datapipe.sample_batch(trainset, cfg.batch, cfg.patch_lr, rng)
            y, cache = model.forward(pb.lr, train_mode=True)
            loss, dy = _loss_and_grad(y, pb.hr, cfg.loss)
            grads = model.backward(cache, dy)
            for name, (gw, gb) in grads.items():
                layer = model.layers[name]
                layer.weight, states[f"{name}.weight"] = adam_step(
                    layer.weight, gw, states[f"{name}.weight"], lr,
                    cfg.beta1, cfg.beta2, cfg.eps,
                )
                if layer.bias is not None:
                    layer.bias, states[f"{name}.bias"] = adam_step(
                        layer.bias, gb, states[f"{name}.bias"], lr,
                        cfg.beta1, cfg.beta2, cfg.eps,
                    )
            losses.append(loss)

        val_psnr = float("nan")
        if epoch % cfg.val_every == 0 or epoch == cfg.epochs - 1:
            val_psnr = dataset_psnr_y(model, valset, batch=cfg.val_batch)
            if val_psnr > best_psnr:
                best_psnr = val_psnr
                best_layers = {n: p.copy() for n, p in model.layers.items()}
        rows.append((epoch, lr, float(np.mean(losses)), val_psnr))

    best = Model(dataclasses.replace(model.config), best_layers)
    return TrainResult(best, best_psnr, initial_psnr, rows)


def _meta(stage: str, cfg: TrainConfig, result: TrainResult | None, input_id=None, **extra) -> dict:
    meta = {
        "stage": stage,
        "seed": cfg.seed,
        "epochs_trained": cfg.epochs if result is not None else 0,
        "loss": cfg.loss,
        "input": input_id,
    }
    if result is not None:
        meta["best_val_psnr_y"] = result.best_psnr
        meta["initial_val_psnr_y"] = result.initial_psnr
    meta.update(extra)
    return meta


def stage1_train(model_config: ModelConfig, cfg: TrainConfig, trainset, valset) -> Checkpoint:
    """Stage 1: train from scratch at the wide channel count."""
    model = Model.build(model_config.validate(), cfg.seed)
    result = train_model(model, cfg, trainset, valset)
    ckpt = result.model.to_checkpoint(_meta("stage1", cfg, result))
    ckpt.log_rows = result.log_rows
    return ckpt


def prune_checkpoint(ckpt: Checkpoint, valset, target_ch: int, joint_pairs: bool = False):
    """Stage 2 selection step only: prune to target_ch, no training.

    Returns (pruned checkpoint, report); meta records the post-prune PSNR.
    """
    if ckpt.config.ch <= target_ch:
        if ckpt.config.ch < target_ch:
            raise ConfigError(f"checkpoint ch {ckpt.config.ch} below target {target_ch}")
    model = Model.from_checkpoint(ckpt)
    masks, compacted, report = prune_pipeline(model, valset, target_ch, joint_pairs)
    post = dataset_psnr_y(compacted, list(valset)) if list(valset) else float("nan")
    meta = {
        "stage": "pruned",
        "seed": ckpt.meta.get("seed"),
        "epochs_trained": 0,
        "input": ckpt.meta.get("id"),
        "best_val_psnr_y": post,
        "masks": [{"site_id": m.site_id, "drop": list(m.drop)} for m in masks],
    }
    return compacted.to_checkpoint(meta), report


def finetune(ckpt: Checkpoint, cfg: TrainConfig, trainset, valset) -> Checkpoint:
    """Re-train an existing checkpoint on the full schedule (fresh optimizer)."""
    model = Model.from_checkpoint(ckpt)
    result = train_model(model, cfg, trainset, valset)
    out = result.model.to_checkpoint(
        _meta("finetuned", cfg, result, input_id=ckpt.meta.get("id"))
    )
    out.log_rows = result.log_rows
    return out


def stage2(ckpt: Checkpoint, trainset, valset, target_ch: int, cfg: TrainConfig) -> Checkpoint:
    """Stage 2: global structured pruning followed by a full fine-tune."""
    pruned, _report = prune_checkpoint(ckpt, valset, target_ch)
    out = finetune(pruned, cfg, trainset, valset)
    out.meta["stage"] = "pruned→finetuned"
    out.meta["pre_finetune_psnr_y"] = pruned.meta["best_val_psnr_y"]
    return out


def debias_model(model: Model) -> Model:
    """Drop every conv bias vector, keeping weights; clears the config flag."""
    out = model.copy()
    out.config.bias = False
    for layer in out.layers.values():
        layer.bias = None
    return out


def stage3_debias(ckpt: Checkpoint, trainset, valset, cfg: TrainConfig) -> Checkpoint:
    """Stage 3: remove all conv biases, then fine-tune."""
    if not ckpt.config.bias:
        raise ConfigError("checkpoint is already bias-free")
    stripped = debias_model(Model.from_checkpoint(ckpt))
    pre_psnr = dataset_psnr_y(stripped, list(valset)) if list(valset) else float("nan")
    result = train_model(stripped, cfg, trainset, valset)
    out = result.model.to_checkpoint(
        _meta(
            "debias→finetuned",
            cfg,
            result,
            input_id=ckpt.meta.get("id"),
            pre_finetune_psnr_y=pre_psnr,
        )
    )
    out.log_rows = result.log_rows
    return out


@dataclass
class StageRecord:
    tag: str
    op: str
    input_id: str | None
    output_id: str
    output_path: str
    best_val_psnr_y: float
    pre_psnr_y: float | None
    epochs: int
    wall_time_s: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


_RECIPE_OPS = ("train", "prune", "finetune", "debias", "partial_load")


def _step_seed(master_seed: int, index: int) -> int:
    """Deterministic per-stage seed derived from the master seed and index."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(index,))
    return int(ss.generate_state(1)[0])


def _safe_filename(tag: str) -> str:
    return "".join(c if (c.isalnum() or c in "-_.+") else "_" for c in tag)


def run_recipe(recipe: dict, trainset, valset, out_dir) -> list[StageRecord]:
    """Execute a chain of {train, prune, finetune, debias, partial_load} steps.

    Every step writes checkpoints/<tag>.bpp plus a per-epoch CSV log; prune
    steps also write their candidate-PSNR report. Steps default to consuming
    the previous step's output; "load" selects an earlier tag explicitly.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    log_dir = out_dir / "logs"
    report_dir = out_dir / "reports"
    for d in (ckpt_dir, log_dir, report_dir):
        d.mkdir(parents=True, exist_ok=True)

    master_seed = int(recipe.get("master_seed", 0))
    base_model = ModelConfig.from_dict(recipe.get("model", {}))
    base_train = dict(recipe.get("train", {}))
    steps = recipe.get("steps")
    if not steps:
        raise ConfigError("recipe has no steps")

    by_tag: dict[str, Checkpoint] = {}
    prev_tag: str | None = None
    records: list[StageRecord] = []

    for idx, step in enumerate(steps):
        op = step.get("op")
        if op not in _RECIPE_OPS:
            raise ConfigError(f"step {idx} ({step.get('tag', '?')}): unknown op {op!r}")
        tag = step.get("tag") or f"step{idx}"
        cfg = TrainConfig.from_dict({**base_train, **step.get("train", {})})
        cfg.seed = _step_seed(master_seed, idx)

        input_tag = step.get("load", prev_tag)
        if op != "train" and input_tag is None:
            raise ConfigError(f"step {idx} ({tag}): no input checkpoint to load")
        if input_tag is not None and op != "train" and input_tag not in by_tag:
            raise ConfigError(f"step {idx} ({tag}): unknown input tag {input_tag!r}")

        t0 = time.perf_counter()
        pre_psnr = None
        if op == "train":
            mc = dataclasses.replace(base_model, **step.get("model", {}))
            ckpt = stage1_train(mc, cfg, trainset, valset)
        elif op == "prune":
            target = step.get("target_ch", recipe.get("target_ch"))
            if target is None:
                raise ConfigError(f"step {idx} ({tag}): prune needs target_ch")
            ckpt, report = prune_checkpoint(
                by_tag[input_tag], valset, int(target), bool(step.get("joint_pairs", False))
            )
            with open(report_dir / f"{_safe_filename(tag)}_prune.json", "w") as f:
                json.dump(report.to_dict(), f, indent=2)
        elif op == "finetune":
            src = by_tag[input_tag]
            pre_psnr = src.meta.get("best_val_psnr_y")
            ckpt = finetune(src, cfg, trainset, valset)
        elif op == "debias":
            ckpt = stage3_debias(by_tag[input_tag], trainset, valset, cfg)
            pre_psnr = ckpt.meta.get("pre_finetune_psnr_y")
        else:  # partial_load
            mc = dataclasses.replace(base_model, **step.get("model", {}))
            model, pl_report = load_partial(by_tag[input_tag], mc.validate(), cfg.seed)
            with open(report_dir / f"{_safe_filename(tag)}_partial.json", "w") as f:
                json.dump(dataclasses.asdict(pl_report), f, indent=2)
            partial = model.to_checkpoint(
                {"stage": "partial_load", "input": input_tag, "seed": cfg.seed}
            )
            partial.meta["id"] = f"{tag}:pre_ft"
            pre_psnr = dataset_psnr_y(model, list(valset))
            ckpt = finetune(partial, cfg, trainset, valset)
            ckpt.meta["stage"] = "partial_load→finetuned"
        wall = time.perf_counter() - t0

        ckpt.meta["id"] = tag
        ckpt.meta["input"] = input_tag if op != "train" else None
        path = ckpt_dir / f"{_safe_filename(tag)}.bpp"
        save_checkpoint(ckpt, path)

        log_rows = getattr(ckpt, "log_rows", None)
        if log_rows:
            with open(log_dir / f"{_safe_filename(tag)}.csv", "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["epoch", "lr", "train_loss", "val_psnr_y"])
                writer.writerows(log_rows)

        records.append(
            StageRecord(
                tag=tag,
                op=op,
                input_id=ckpt.meta["input"],
                output_id=tag,
                output_path=str(path),
                best_val_psnr_y=float(ckpt.meta.get("best_val_psnr_y", float("nan"))),
                pre_psnr_y=None if pre_psnr is None else float(pre_psnr),
                epochs=int(ckpt.meta.get("epochs_trained", 0)),
                wall_time_s=wall,
            )
        )
        by_tag[tag] = ckpt
        prev_tag = tag

    with open(out_dir / "records.json", "w") as f:
        json.dump([r.to_dict() for r in records], f, indent=2)
    return records


def load_recipe(path) -> dict:
    with open(path) as f:
        recipe = json.load(f)
    known = {"master_seed", "model", "train", "data", "prune", "target_ch", "steps", "bench"}
    unknown = set(recipe) - known
    if unknown:
        raise ConfigError(f"unknown recipe keys: {sorted(unknown)}")
    return recipe
