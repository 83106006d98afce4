"""Losses, Adam, step schedules, samplers and the training loop."""

from __future__ import annotations

import csv
import enum
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import ptnsr
from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .model import FineTuneMode, PUNet, RaterTag, UNetConfig, load_checkpoint, param_partition, save_checkpoint
from .synth import MultiRaterDataset, MultiRaterSample
from .tensor import ParamStore, Tape, Tensor, backward

log = logging.getLogger(__name__)


class TrainingStrategy(str, enum.Enum):
    INDIVIDUAL = "individual"
    FUSION = "fusion"
    MIX = "mix"


# --------------------------------------------------------------------------
# Loss


def dice_loss(logits: Tensor, target, smooth: float = 1.0) -> Tensor:
    """Soft Dice loss on per-channel sigmoids, averaged over classes.

    Sums run over the two spatial axes of each sample; a leading batch axis is
    averaged as well.
    """
    if smooth <= 0:
        raise ContractError("dice_loss: smooth must be positive")
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=logits.dtype))
    if t.shape != logits.shape:
        raise DimensionError(f"dice_loss: logits {logits.shape} vs target {t.shape}")
    p = T.sigmoid(logits)
    axes = (-3, -2)
    inter = T.tsum(p * t, axis=axes)
    denom = T.tsum(p, axis=axes) + T.tsum(t, axis=axes)
    score = (inter * 2.0 + smooth) / (denom + smooth)
    return T.mean(1.0 - score)


# --------------------------------------------------------------------------
# Optimizer and schedule


@dataclass
class Schedule:
    base_lr: float = 0.01
    drops: tuple[int, ...] = (10, 20, 30)
    factor: float = 10.0
    epochs: int = 60

    @classmethod
    def desk(cls, base_lr: float = 0.01) -> "Schedule":
        return cls(base_lr, (8, 13, 17), 10.0, 20)


def lr_at(schedule: Schedule, epoch: int) -> float:
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    n = sum(1 for d in schedule.drops if epoch >= d)
    return schedule.base_lr / schedule.factor**n


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def save(self, directory: str | os.PathLike) -> dict:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in self.m:
            ptnsr.save(d / f"m.{name}.ptnsr", self.m[name])
            ptnsr.save(d / f"v.{name}.ptnsr", self.v[name])
        return {"t": self.t, "names": sorted(self.m)}

    @classmethod
    def load(cls, directory: str | os.PathLike, meta: dict) -> "AdamState":
        d = Path(directory)
        st = cls(t=int(meta["t"]))
        for name in meta["names"]:
            st.m[name] = ptnsr.load(d / f"m.{name}.ptnsr")
            st.v[name] = ptnsr.load(d / f"v.{name}.ptnsr")
        return st


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update of every trainable parameter, in place."""
    for name in grads:
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if params.is_frozen(name):
            raise ContractError(f"gradient supplied for frozen parameter {name!r}")
    trainable = params.trainable()
    missing = [n for n in trainable if n not in grads]
    if missing:
        raise ContractError(f"missing gradients for trainable parameters: {missing[:5]}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name in trainable:
        p = params[name]
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.dtype, copy=False)


# --------------------------------------------------------------------------
# Sampling


@dataclass(frozen=True)
class PlanItem:
    """One training example: scene, label source, prompt slot and head."""

    scene: int
    label: RaterTag
    prompt: RaterTag | None
    head: int = 0


def strategy_tags(strategy: TrainingStrategy | str, n_raters: int) -> list[RaterTag]:
    strategy = TrainingStrategy(strategy)
    tags = []
    if strategy in (TrainingStrategy.FUSION, TrainingStrategy.MIX):
        tags.append(RaterTag.aggregate())
    if strategy in (TrainingStrategy.INDIVIDUAL, TrainingStrategy.MIX):
        tags += [RaterTag.rater(j) for j in range(1, n_raters + 1)]
    return tags


def _epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def mix_plan(n_scenes: int, tags: list[RaterTag], seed: int, epoch: int) -> list[PlanItem]:
    if n_scenes == 0 or not tags:
        raise ConfigError("empty training subset for the requested strategy")
    pairs = [(k, t) for k in range(n_scenes) for t in tags]
    order = _epoch_rng(seed, epoch, 0).permutation(len(pairs))
    return [PlanItem(pairs[i][0], pairs[i][1], pairs[i][1]) for i in order]


def mix_sampler(
    dataset: MultiRaterDataset, strategy: TrainingStrategy | str, seed: int, epoch: int
) -> Iterable[MultiRaterSample]:
    """Every (scene, tag) pair allowed by ``strategy``, in seeded shuffled order."""
    tags = strategy_tags(strategy, dataset.n_raters)
    for item in mix_plan(dataset.n_scenes, tags, seed, epoch):
        yield dataset.sample(item.scene, item.label)


def label_sampling_draws(n_steps: int, n_raters: int, seed: int, epoch: int = 0) -> np.ndarray:
    """Rater index (1..R) drawn uniformly for each step of an epoch."""
    return _epoch_rng(seed, epoch, 1).integers(1, n_raters + 1, size=n_steps)


# --------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    adam: AdamState = field(default_factory=AdamState)

    def write_csv(self, path: str | os.PathLike) -> None:
        write_log_csv(self.log, path)


def write_log_csv(rows: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "step", "tag", "loss", "lr"])
        for r in rows:
            w.writerow([r["epoch"], r["step"], r["tag"], f"{r['loss']:.8f}", f"{r['lr']:.8g}"])


PlanFn = Callable[[int], list[PlanItem]]


def _batches(items: list[PlanItem], size: int) -> list[list[PlanItem]]:
    return [items[i : i + size] for i in range(0, len(items), size)]


def run_epochs(
    model: PUNet,
    dataset: MultiRaterDataset,
    plan: PlanFn,
    schedule: Schedule,
    batch_size: int = 4,
    smooth: float = 1.0,
    start_epoch: int = 0,
    adam: AdamState | None = None,
    result: TrainResult | None = None,
    stop_epoch: int | None = None,
    on_epoch: Callable[[int, TrainResult], None] | None = None,
) -> TrainResult:
    """Generic loop: plan -> batched forward -> Dice -> backward -> Adam."""
    res = result or TrainResult(adam=adam or AdamState())
    if adam is not None:
        res.adam = adam
    params = model.params
    end = schedule.epochs if stop_epoch is None else min(stop_epoch, schedule.epochs)
    for epoch in range(start_epoch, end):
        lr = lr_at(schedule, epoch)
        losses = []
        for step, batch in enumerate(_batches(plan(epoch), batch_size)):
            x = Tensor(dataset.images[[it.scene for it in batch]])
            y = np.stack([dataset.mask(it.scene, it.label) for it in batch]).astype(x.dtype)
            prompts = [it.prompt for it in batch] if model.config.use_prompts else None
            heads = [it.head for it in batch]
            with Tape() as tape:
                logits = model.forward(x, prompts, head=heads if len(set(heads)) > 1 else heads[0])
                loss = dice_loss(logits, y, smooth)
            value = float(loss.data)
            tag = "|".join(str(it.prompt if it.prompt is not None else it.label) for it in batch)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, step {step}, tags {tag}, lr {lr:g}")
            grads = backward(loss, tape, params)
            adam_step(params, grads, res.adam, lr)
            res.log.append({"epoch": epoch, "step": step, "tag": tag, "loss": value, "lr": lr})
            losses.append(value)
        res.epoch_loss.append(float(np.mean(losses)))
        log.info("epoch %d lr %.2g loss %.4f", epoch, lr, res.epoch_loss[-1])
        if on_epoch is not None:
            on_epoch(epoch, res)
    return res


def train(
    model: PUNet,
    dataset: MultiRaterDataset,
    mode: FineTuneMode | str,
    strategy: TrainingStrategy | str,
    schedule: Schedule,
    seed: int = 0,
    batch_size: int = 4,
    smooth: float = 1.0,
    checkpoint_dir: str | os.PathLike | None = None,
    start_epoch: int = 0,
    adam: AdamState | None = None,
    stop_epoch: int | None = None,
    prior_log: list[dict] | None = None,
) -> TrainResult:
    """Train ``model`` under ``mode`` with the ``strategy`` sampler.

    The freeze partition for ``mode`` is applied first. When
    ``checkpoint_dir`` is given, weights, optimizer moments and the loss log
    are written there after every epoch so a run can be resumed.
    """
    param_partition(model, mode)
    tags = strategy_tags(strategy, dataset.n_raters)
    if not model.config.use_prompts:
        raise ConfigError("train() drives prompted models; use the baseline trainers otherwise")
    if dataset.n_raters != model.config.n_raters:
        raise ConfigError(f"dataset has {dataset.n_raters} raters, model expects {model.config.n_raters}")

    def plan(epoch: int) -> list[PlanItem]:
        return mix_plan(dataset.n_scenes, tags, seed, epoch)

    on_epoch = None
    if checkpoint_dir is not None:
        meta = {"mode": FineTuneMode(mode).value, "strategy": TrainingStrategy(strategy).value, "seed": seed}

        def on_epoch(epoch: int, res: TrainResult) -> None:
            save_training_checkpoint(model, res, checkpoint_dir, epoch + 1, meta)

    result = TrainResult(log=list(prior_log or []), adam=adam or AdamState())
    return run_epochs(
        model, dataset, plan, schedule, batch_size, smooth, start_epoch, None, result, stop_epoch, on_epoch
    )


def save_training_checkpoint(model: PUNet, res: TrainResult, directory, next_epoch: int, meta: dict) -> None:
    d = Path(directory)
    adam_meta = res.adam.save(d / "optim")
    extra = dict(meta, next_epoch=next_epoch, adam=adam_meta, epoch_loss=res.epoch_loss)
    save_checkpoint(model, d, extra)
    write_log_csv(res.log, d / "train_log.csv")


def resume_training(directory, dataset: MultiRaterDataset, schedule: Schedule, **kw) -> tuple[PUNet, TrainResult]:
    """Continue a run saved by :func:`train` with ``checkpoint_dir``."""
    model, extra = load_checkpoint(directory)
    adam = AdamState.load(Path(directory) / "optim", extra["adam"])
    rows = read_log_csv(Path(directory) / "train_log.csv")
    res = train(
        model,
        dataset,
        extra["mode"],
        extra["strategy"],
        schedule,
        seed=extra["seed"],
        checkpoint_dir=directory,
        start_epoch=extra["next_epoch"],
        adam=adam,
        prior_log=rows,
        **kw,
    )
    res.epoch_loss = list(extra.get("epoch_loss", [])) + res.epoch_loss
    return model, res


def read_log_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {"epoch": int(r["epoch"]), "step": int(r["step"]), "tag": r["tag"], "loss": float(r["loss"]), "lr": float(r["lr"])}
            for r in csv.DictReader(f)
        ]


# --------------------------------------------------------------------------
# Baselines without prompts


def baseline_config(cfg: UNetConfig, seg_heads: int = 1) -> UNetConfig:
    d = cfg.to_dict()
    d.update(use_prompts=False, seg_heads=seg_heads)
    return UNetConfig.from_dict(d)


def train_single_label(
    cfg: UNetConfig, dataset: MultiRaterDataset, label: RaterTag, schedule: Schedule, seed: int = 0, batch_size: int = 4
) -> tuple[PUNet, TrainResult]:
    """Plain (prompt-free) model trained on one label source, e.g. MV."""
    model = PUNet(baseline_config(cfg), seed=seed)
    param_partition(model, FineTuneMode.FULL)

    def plan(epoch):
        return mix_plan(dataset.n_scenes, [label], seed, epoch)

    return model, run_epochs(model, dataset, lambda e: [PlanItem(i.scene, i.label, None) for i in plan(e)], schedule, batch_size)


def baseline_multihead(
    cfg: UNetConfig, dataset: MultiRaterDataset, schedule: Schedule, seed: int = 0, batch_size: int = 4
) -> tuple[PUNet, TrainResult]:
    """Shared prompt-free backbone with R heads; head j sees rater j only."""
    R = dataset.n_raters
    if R < 2:
        raise ConfigError("multi-head baseline needs R >= 2")
    model = PUNet(baseline_config(cfg, seg_heads=R), seed=seed)
    param_partition(model, FineTuneMode.FULL)
    tags = strategy_tags(TrainingStrategy.INDIVIDUAL, R)

    def plan(epoch):
        return [PlanItem(i.scene, i.label, None, i.label.slot - 1) for i in mix_plan(dataset.n_scenes, tags, seed, epoch)]

    return model, run_epochs(model, dataset, plan, schedule, batch_size)


def baseline_label_sampling(
    cfg: UNetConfig, dataset: MultiRaterDataset, schedule: Schedule, seed: int = 0, batch_size: int = 4
) -> tuple[PUNet, TrainResult]:
    """Single head, no prompts; every step draws one rater uniformly."""
    model = PUNet(baseline_config(cfg), seed=seed)
    param_partition(model, FineTuneMode.FULL)
    R = dataset.n_raters

    def plan(epoch):
        order = _epoch_rng(seed, epoch, 0).permutation(dataset.n_scenes)
        n_steps = math.ceil(len(order) / batch_size)
        draws = label_sampling_draws(n_steps, R, seed, epoch)
        return [
            PlanItem(int(k), RaterTag.rater(int(draws[i // batch_size])), None) for i, k in enumerate(order)
        ]

    return model, run_epochs(model, dataset, plan, schedule, batch_size)
