"""Training loop: per-epoch shuffled passes, polynomial LR, hybrid loss,
L2 + Adam steps, per-epoch validation dice, logging, and checkpointing.

Every random draw comes from a stream derived from (seed, role, epoch,
case-or-batch key), never from a sequentially threaded generator, so a run
resumed from a mid-training checkpoint replays exactly the draws the
uninterrupted run would have made — resume is bitwise, and determinism
holds regardless of data-loading order.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from zlib import crc32

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, TrainingDiverged
from .inference import pad_for_model, unpad
from .losses import LossConfig, hybrid_loss
from .metrics import dice_metric
from .native_io import read_case, read_index
from .network import ModelConfig, Model, build_model, forward, model_config_from_dict, model_config_to_dict
from .nifti import read_brats_case
from .optim import AdamState, ScheduleConfig, adam_step, apply_l2, poly_lr
from .rngstream import ROLE_AUGMENT, ROLE_CROP, ROLE_DROPOUT, ROLE_SHUFFLE, derive_rng
from .volume import CLASS_NAMES, Case, augment, labels_to_channels, normalize_nonzero, random_crop

DATA_FORMATS = ("native", "brats")


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run needs. The epoch count is the schedule's
    total_epochs; the two are deliberately a single field."""

    data_dir: str
    run_dir: str
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data_format: str = "native"
    batch_size: int = 1
    crop: tuple[int, int, int] = (160, 192, 128)
    seed: int = 0
    checkpoint_every: int = 50
    val_fraction: float = 0.2

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.schedule.validate()
        if self.data_format not in DATA_FORMATS:
            raise ConfigError(f"data_format must be one of {DATA_FORMATS}, got {self.data_format!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if len(self.crop) != 3 or any(c < 1 for c in self.crop):
            raise ConfigError(f"crop must be 3 positive extents, got {self.crop}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")


def _plain_from_dict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = d.keys() - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = dict(d)
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list):
            kwargs[f.name] = tuple(kwargs[f.name])
    return cls(**kwargs)


def train_config_to_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["model"] = model_config_to_dict(cfg.model)
    d["loss"] = dataclasses.asdict(cfg.loss)
    d["schedule"] = dataclasses.asdict(cfg.schedule)
    for key in ("crop",):
        d[key] = list(d[key])
    d["loss"]["term_weights"] = list(cfg.loss.term_weights)
    return d


def train_config_from_dict(d: dict) -> TrainConfig:
    if not isinstance(d, dict):
        raise ConfigError("train config must be a JSON object")
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = d.keys() - known
    if unknown:
        raise ConfigError(f"train config: unknown keys {sorted(unknown)}")
    kwargs = dict(d)
    if "model" in kwargs:
        kwargs["model"] = model_config_from_dict(kwargs["model"])
    if "loss" in kwargs:
        kwargs["loss"] = _plain_from_dict(LossConfig, kwargs["loss"], "loss")
    if "schedule" in kwargs:
        kwargs["schedule"] = _plain_from_dict(ScheduleConfig, kwargs["schedule"], "schedule")
    if "crop" in kwargs:
        kwargs["crop"] = tuple(kwargs["crop"])
    cfg = TrainConfig(**kwargs)
    cfg.validate()
    return cfg


def split_ids(ids: list[str], val_fraction: float) -> tuple[list[str], list[str]]:
    """Stable hash-ordered split: the first round(frac*N) ids in
    (crc32(id), id) order validate, the rest train."""
    if len(set(ids)) != len(ids):
        raise DataError("dataset contains duplicate case ids")
    ranked = sorted(ids, key=lambda i: (crc32(i.encode()), i))
    n_val = int(round(val_fraction * len(ids)))
    if len(ids) - n_val < 1:
        raise DataError(f"val_fraction {val_fraction} leaves no training cases for {len(ids)} ids")
    return ranked[n_val:], ranked[:n_val]


def _load_cases(cfg: TrainConfig) -> dict[str, Case]:
    """Load and normalize every case up front (desk-scale datasets)."""
    root = Path(cfg.data_dir)
    if cfg.data_format == "native":
        ids = read_index(root)
        cases = [read_case(root / cid) for cid in ids]
    else:
        case_dirs = sorted(p for p in root.iterdir() if p.is_dir())
        if not case_dirs:
            raise DataError(f"{root}: no case directories")
        cases = [read_brats_case(p) for p in case_dirs]
    out = {}
    for case in cases:
        if case.label is None:
            raise DataError(f"case {case.id!r} has no label; cannot train on it")
        out[case.id] = Case(id=case.id, image=normalize_nonzero(case.image), label=case.label)
    return out


def _finite(x: float) -> bool:
    return bool(np.isfinite(x))


def validation_dice(model: Model, cases: list[Case], threshold: float = 0.5) -> dict[str, float]:
    """Mean per-class dice of thresholded full-volume predictions."""
    sums = {name: 0.0 for name in CLASS_NAMES}
    for case in cases:
        padded, original = pad_for_model(case.image.data, model.config)
        with T.no_grad():
            probs = forward(model, T.tensor(padded[None]), training=False).data[0]
        probs = unpad(probs, original)
        pred = probs >= threshold
        truth = labels_to_channels(case.label).data.astype(bool)
        for c, name in enumerate(CLASS_NAMES):
            sums[name] += dice_metric(pred[c], truth[c])
    n = max(1, len(cases))
    return {name: sums[name] / n for name in CLASS_NAMES}


@dataclass
class TrainResult:
    epochs_run: int
    final_checkpoint: str
    val_dice: dict[str, float]
    history: list[dict]


def train(cfg: TrainConfig, resume: str | None = None, echo=None) -> TrainResult:
    cfg.validate()
    run_dir = Path(cfg.run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(train_config_to_dict(cfg), indent=2, sort_keys=True) + "\n"
    )

    cases = _load_cases(cfg)
    train_ids, val_ids = split_ids(sorted(cases), cfg.val_fraction)
    val_cases = [cases[i] for i in val_ids]

    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.model.config != cfg.model:
            raise ConfigError("checkpoint model config does not match the train config")
        if ckpt.adam is None:
            raise ConfigError(f"{resume}: checkpoint has no optimizer state, cannot resume")
        model, adam = ckpt.model, ckpt.adam
        start_epoch = int(ckpt.extra.get("epoch", 0))
    else:
        model = build_model(cfg.model, seed=cfg.seed)
        adam = AdamState.create(model.store)
        start_epoch = 0

    total_epochs = cfg.schedule.total_epochs
    history = []
    with open(run_dir / "train.log", "a") as log, open(run_dir / "sampling.log", "a") as samples:

        def emit(line: str) -> None:
            log.write(line + "\n")
            log.flush()
            if echo is not None:
                echo(line)

        for epoch in range(start_epoch, total_epochs):
            t0 = time.perf_counter()
            lr = poly_lr(epoch, cfg.schedule)
            order = list(train_ids)
            derive_rng(cfg.seed, ROLE_SHUFFLE, epoch).shuffle(order)

            terms = {"total": 0.0, "dice": 0.0, "focal": 0.0, "acl_volume": 0.0, "acl_length": 0.0}
            batches = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
            for batch_idx, batch in enumerate(batches):
                xs, ys = [], []
                for cid in batch:
                    samples.write(f"epoch={epoch} case={cid}\n")
                    augmented = augment(cases[cid], derive_rng(cfg.seed, ROLE_AUGMENT, epoch, cid))
                    cropped = random_crop(augmented, cfg.crop, derive_rng(cfg.seed, ROLE_CROP, epoch, cid))
                    xs.append(cropped.image.data)
                    ys.append(labels_to_channels(cropped.label).data)
                x = T.tensor(np.stack(xs))
                y = T.tensor(np.stack(ys))
                out = forward(
                    model,
                    x,
                    training=True,
                    dropout_rng=derive_rng(cfg.seed, ROLE_DROPOUT, epoch, batch_idx),
                )
                report = hybrid_loss(out, y, cfg.loss)
                if not _finite(report.total):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} batch {batch_idx}: "
                        f"total={report.total} dice={report.dice} focal={report.focal} "
                        f"acl_volume={report.acl_volume} acl_length={report.acl_length}"
                    )
                model.store.zero_grads()
                T.backward(report.loss)
                apply_l2(model.store, cfg.schedule.l2_weight)
                adam_step(model.store, adam, lr)
                for key in terms:
                    terms[key] += getattr(report, key)

            n_batches = max(1, len(batches))
            means = {k: v / n_batches for k, v in terms.items()}
            val = validation_dice(model, val_cases) if val_cases else {n: float("nan") for n in CLASS_NAMES}
            row = {"epoch": epoch, "lr": lr, **means, "val_wt": val["WT"], "val_tc": val["TC"], "val_et": val["ET"]}
            history.append(row)
            emit(
                f"epoch={epoch} lr={lr!r} total={means['total']!r} dice={means['dice']!r} "
                f"focal={means['focal']!r} acl_volume={means['acl_volume']!r} "
                f"acl_length={means['acl_length']!r} val_wt={val['WT']!r} val_tc={val['TC']!r} "
                f"val_et={val['ET']!r} time_s={time.perf_counter() - t0:.2f}"
            )
            samples.flush()

            extra = {"epoch": epoch + 1, "seed": cfg.seed}
            if (epoch + 1) % cfg.checkpoint_every == 0 and (epoch + 1) < total_epochs:
                save_checkpoint(ckpt_dir / f"epoch_{epoch + 1:04d}.ckpt", model, adam=adam, extra=extra)

        final_path = ckpt_dir / "final.ckpt"
        save_checkpoint(final_path, model, adam=adam, extra={"epoch": total_epochs, "seed": cfg.seed})

    final_val = history[-1] if history else None
    val_dice = (
        {"WT": final_val["val_wt"], "TC": final_val["val_tc"], "ET": final_val["val_et"]}
        if final_val
        else {}
    )
    return TrainResult(
        epochs_run=total_epochs - start_epoch,
        final_checkpoint=str(final_path),
        val_dice=val_dice,
        history=history,
    )
