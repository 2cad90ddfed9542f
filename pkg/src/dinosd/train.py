"""Training loop, learning-rate schedule and checkpoint bookkeeping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import AugMixSpec, CorruptionSpec, augmix_views
from .data import MultiViewBatch, stack_batches
from .evaluate import evaluate_model
from .losses import LossWeights, total_loss
from .metrics import MetricReport
from .model import DinoSD, ModelConfig, save_checkpoint

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def lr_schedule(step: int, t0: int, t_mult: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing with warm restarts; cycle i lasts ``t0 * t_mult**i`` steps."""
    if t0 < 1 or t_mult < 1:
        raise ValueError(f"need t0 >= 1 and t_mult >= 1, got {t0}, {t_mult}")
    t_cur, t_i = step, t0
    while t_cur >= t_i:
        t_cur -= t_i
        t_i *= t_mult
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t_cur / t_i))


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    encoder_lr: float = 1e-2
    decoder_lr: float = 4e-2
    momentum: float = 0.9
    grad_clip: float | None = 1.0
    epochs: int = 5
    scenes_per_step: int = 1
    t0: int | None = None  # steps; None means one epoch
    t_mult: int = 2
    lr_min_ratio: float = 0.0
    warmup_steps: int = 20  # linear ramp multiplied into the schedule; 0 disables it
    seed: int = 0
    supervise_augmented: bool = False
    val_corruptions: list[CorruptionSpec] = field(default_factory=list)
    val_denoise: bool = False
    val_equalize: bool = False

    @property
    def attention_mode(self) -> str:
        return self.model.decoder.attention_mode

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        kw = {}
        if "model" in d:
            kw["model"] = ModelConfig.from_dict(d.pop("model"))
        if "loss" in d:
            kw["loss"] = LossWeights(**d.pop("loss"))
        if "val_corruptions" in d:
            kw["val_corruptions"] = [CorruptionSpec(**s) for s in d.pop("val_corruptions")]
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**kw, **d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def step_lr_scale(cfg: TrainConfig, step: int, t0: int) -> float:
    """Multiplier on both group lrs at ``step``: warm-restart cosine times the warmup ramp."""
    scale = lr_schedule(step, t0, cfg.t_mult, 1.0, cfg.lr_min_ratio)
    if step < cfg.warmup_steps:
        scale *= (step + 1) / cfg.warmup_steps
    return scale


@dataclass
class TrainResult:
    model: DinoSD  # weights after the last epoch
    history: list[dict]
    best_epoch: int | None
    losses: list[float]
    best_state: dict[str, np.ndarray] | None = None

    def best_model(self) -> DinoSD:
        """The lowest-validation-error epoch's weights (the final ones without validation)."""
        if self.best_state is None:
            return self.model
        model = DinoSD(self.model.cfg)
        model.load_state_dict(self.best_state)
        return model


class MomentumSGD:
    """Heavy-ball gradient descent with one base learning rate per parameter group."""

    def __init__(self, model: DinoSD, lrs: dict[str, float], momentum: float = 0.9):
        self.model = model
        self.lrs = lrs
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in model.params.items()}

    def step(self, scale: float, clip: float | None = None) -> float:
        params = self.model.params
        norm = math.sqrt(math.fsum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None))
        factor = clip / norm if clip is not None and norm > clip else 1.0
        for name, p in params.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad * factor
            p.data = p.data - self.lrs[self.model.group_of(name)] * scale * v
        return norm


def train_step(model, opt: MomentumSGD, batch: MultiViewBatch, cfg: TrainConfig, step: int, lr_scale: float) -> float:
    T.reset_tape()
    model.zero_grad()
    w = cfg.loss
    use_aug = w.beta_augmix > 0 or cfg.supervise_augmented
    images = batch.images
    n = images.shape[0]
    if use_aug:
        a1 = augmix_views(images, [cfg.seed, step, 1])
        a2 = augmix_views(images, [cfg.seed, step, 2])
        pred = model(np.concatenate([images, a1, a2]))
        clean, p1, p2 = pred[:n], pred[n : 2 * n], pred[2 * n :]
    else:
        clean, p1, p2 = model(images), None, None
    loss = total_loss(clean, p1, p2, batch.target, images, w, cfg.supervise_augmented)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {step} (scene seed {batch.seed}, lr scale {lr_scale:.3g})")
    T.backward(loss)
    opt.step(lr_scale, cfg.grad_clip)
    return value


def train(
    cfg: TrainConfig,
    train_set: list[MultiViewBatch],
    val_set: list[MultiViewBatch] | None = None,
    out_dir=None,
    max_steps: int | None = None,
) -> TrainResult:
    """Train from scratch; deterministic for a fixed config and dataset.

    When ``out_dir`` is given, each epoch is checkpointed as ``epoch_<k>``;
    ``best`` holds the epoch with the lowest validation Abs Rel and ``final``
    the last one. Weights are snapped to float32 at every epoch boundary so
    the saved files reproduce the validated model exactly.
    """
    if not train_set:
        raise ValueError("training set is empty")
    model = DinoSD(cfg.model)
    opt = MomentumSGD(model, {"encoder": cfg.encoder_lr, "decoder": cfg.decoder_lr}, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 7])
    per_step = cfg.scenes_per_step
    steps_per_epoch = math.ceil(len(train_set) / per_step)
    t0 = cfg.t0 or steps_per_epoch
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")

    history: list[dict] = []
    losses: list[float] = []
    best: tuple[float, int] | None = None
    best_state = None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        for s in range(steps_per_epoch):
            if max_steps is not None and step >= max_steps:
                break
            batch = stack_batches(train_set[i] for i in order[s * per_step : (s + 1) * per_step])
            scale = step_lr_scale(cfg, step, t0)
            losses.append(train_step(model, opt, batch, cfg, step, scale))
            step += 1
        T.reset_tape()
        model.round_to_float32()
        record = {"epoch": epoch, "step": step, "train_loss": float(np.mean(losses[-steps_per_epoch:]))}
        if val_set:
            report = evaluate_model(model, val_set, cfg.val_corruptions, cfg.val_denoise, cfg.val_equalize)
            record["val"] = report.to_dict()
            if best is None or report.abs_rel < best[0]:
                best = (report.abs_rel, epoch)
                best_state = model.state_dict()
                if out is not None:
                    save_checkpoint(model, out / "best", {"epoch": epoch})
        history.append(record)
        log.info("epoch %d: %s", epoch, record)
        if out is not None:
            save_checkpoint(model, out / f"epoch_{epoch}", {"epoch": epoch})
        if max_steps is not None and step >= max_steps:
            break
    if out is not None:
        save_checkpoint(model, out / "final", {"epoch": history[-1]["epoch"]})
        (out / "history.json").write_text(json.dumps(history, indent=2))
    return TrainResult(model, history, best[1] if best else None, losses, best_state)


def val_report(history: list[dict], epoch: int) -> MetricReport:
    v = history[epoch - 1]["val"]
    return MetricReport(**v)
