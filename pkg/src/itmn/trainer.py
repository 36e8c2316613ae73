"""SGD training loop with cosine learning-rate decay, gradient accumulation and
seeded, resumable determinism.

All randomness derives from ``TrainConfig.seed``: the epoch's sample order
from ``(seed, epoch)`` and each sample's augmentation from
``(seed, epoch, sample index)``.  Nothing else is drawn, so a run resumed
from an epoch-boundary checkpoint continues exactly as an uninterrupted run.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .anchors import build_targets, generate_default_boxes
from .checkpoint import Checkpoint, model_checkpoint, model_from_checkpoint
from .fusion import Detector, ModelConfig
from .loss import LossConfig, total_loss
from .synthdata import AugmentConfig, augment, to_model_input
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "cls_loss", "loc_loss", "total_loss", "num_positive")


class NonFiniteLossError(FloatingPointError):
    """Raised when a micro-batch produces a NaN or infinite loss."""

    def __init__(self, message: str, batch_seeds):
        super().__init__(message)
        self.batch_seeds = list(batch_seeds)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.001
    epochs: int = 200
    micro_batch: int = 8
    accumulation_steps: int = 4
    seed: int = 0
    precision: str = "float32"
    momentum: float = 0.0
    weight_decay: float = 0.0
    augment: bool = True
    gamma: float = 2.0
    alpha: float = 1.0
    match_threshold: float = 0.5

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.micro_batch < 1 or self.accumulation_steps < 1:
            raise ValueError("micro_batch and accumulation_steps must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accumulation_steps

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.gamma, self.alpha)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# Desk-scale defaults: a few epochs over a couple of thousand 64x64 pairs.
DESK_TRAIN = TrainConfig(base_lr=0.1, epochs=8, accumulation_steps=1, momentum=0.9, weight_decay=1e-4, alpha=1.0)


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """base_lr * (1 + cos(pi * epoch / epochs)) / 2, evaluated once per epoch."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))


def sample_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x0D]).permutation(n)


@dataclass
class TrainState:
    epoch: int = 0  # epochs completed
    step: int = 0  # micro-batches processed
    updates: int = 0  # optimizer updates applied
    lr: float = 0.0
    velocity: dict = field(default_factory=dict)  # parameter name -> momentum buffer
    accum: dict = field(default_factory=dict)  # parameter name -> summed gradient
    accum_count: int = 0

    def meta(self) -> dict:
        return {"epoch": self.epoch, "step": self.step, "updates": self.updates, "lr": self.lr}


def prepare_batch(pairs, priors, seeds, config: TrainConfig, aug: AugmentConfig = AugmentConfig()):
    """Augment (when enabled), stack and build per-box targets for a micro-batch."""
    if config.augment:
        pairs = [augment(p, s, aug) for p, s in zip(pairs, seeds)]
    dtype = np.float32 if config.precision == "float32" else np.float64
    visual, thermal = to_model_input(pairs, dtype)
    labels, targets = [], []
    for p in pairs:
        lab, tgt, _ = build_targets(priors, p.boxes, config.match_threshold)
        labels.append(lab)
        targets.append(tgt)
    return visual, thermal, np.stack(labels), np.stack(targets).astype(dtype)


class Trainer:
    """Owns a model, its optimizer state and the data schedule."""

    def __init__(self, model: Detector, config: TrainConfig, aug: AugmentConfig = AugmentConfig()):
        self.model = model
        self.config = config
        self.aug = aug
        self.priors = generate_default_boxes(model.config.box)
        self.state = TrainState()
        self.params = dict(model.named_parameters())
        self.trainable = set(self.params)
        self.frozen_modules = []

    def freeze(self, prefixes):
        """Exclude the sub-modules named by ``prefixes`` (dotted paths) from updates.

        Frozen modules also stay in inference mode, so their batch-norm
        statistics are neither used from the batch nor updated.
        """
        prefixes = tuple(p.rstrip(".") for p in prefixes)
        self.trainable = {n for n in self.params if not any(n == p or n.startswith(p + ".") for p in prefixes)}
        for n, t in self.params.items():
            t.requires_grad = n in self.trainable
        self.frozen_modules = []
        for p in prefixes:
            module = self.model
            for part in p.split("."):
                module = getattr(module, part)
            self.frozen_modules.append(module)

    # -- one micro-batch -------------------------------------------------
    def train_step(self, pairs, seeds) -> dict:
        """Forward/backward one micro-batch; update every ``accumulation_steps`` micro-batches."""
        cfg = self.config
        self.model.train()
        for module in self.frozen_modules:
            module.eval()
        visual, thermal, labels, targets = prepare_batch(pairs, self.priors, seeds, cfg, self.aug)
        out = self.model(Tensor(visual), Tensor(thermal))
        report = total_loss(out.loc, out.cls, labels, targets, cfg.loss)
        value = report.total.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss {value} at step {self.state.step}; batch seeds {list(seeds)}", seeds)
        for t in self.params.values():
            t.grad = None
        report.total.backward()
        st = self.state
        for name in sorted(self.trainable):
            g = self.params[name].grad
            if g is None:
                continue
            st.accum[name] = g.copy() if name not in st.accum else st.accum[name] + g
        st.accum_count += 1
        st.step += 1
        if st.accum_count == cfg.accumulation_steps:
            self.apply_update()
        return report.as_floats()

    def apply_update(self):
        """SGD (optionally with momentum and weight decay) on the mean accumulated gradient."""
        st, cfg = self.state, self.config
        if st.accum_count == 0:
            return
        for name in sorted(st.accum):
            p = self.params[name]
            g = st.accum[name] / p.dtype.type(st.accum_count)
            if cfg.weight_decay and p.ndim > 1:
                g = g + p.dtype.type(cfg.weight_decay) * p.data
            if cfg.momentum:
                v = st.velocity.get(name)
                v = g if v is None else p.dtype.type(cfg.momentum) * v + g
                st.velocity[name] = v
                g = v
            p.data = p.data - p.dtype.type(st.lr) * g
        st.accum.clear()
        st.accum_count = 0
        st.updates += 1

    # -- epochs ----------------------------------------------------------
    def run_epoch(self, dataset) -> dict:
        cfg, st = self.config, self.state
        st.lr = cosine_lr(st.epoch, cfg)
        order = epoch_order(cfg.seed, st.epoch, len(dataset))
        sums = {"cls": 0.0, "loc": 0.0, "total": 0.0, "num_positive": 0}
        batches = 0
        for start in range(0, len(order), cfg.micro_batch):
            idx = order[start : start + cfg.micro_batch]
            seeds = [sample_seed(cfg.seed, st.epoch, int(i)) for i in idx]
            rep = self.train_step([dataset[int(i)] for i in idx], seeds)
            for k in sums:
                sums[k] += rep[k]
            batches += 1
        self.apply_update()  # a trailing partial accumulation still counts
        row = {
            "epoch": st.epoch,
            "lr": st.lr,
            "cls_loss": sums["cls"] / max(batches, 1),
            "loc_loss": sums["loc"] / max(batches, 1),
            "total_loss": sums["total"] / max(batches, 1),
            "num_positive": sums["num_positive"],
        }
        st.epoch += 1
        log.info("epoch %d lr %.3g loss %.4f (cls %.4f loc %.4f)", row["epoch"], row["lr"], row["total_loss"],
                 row["cls_loss"], row["loc_loss"])
        return row

    # -- persistence -----------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        velocity = {f"optim/{k}": v for k, v in sorted(self.state.velocity.items())}
        return model_checkpoint(self.model, {"train": self.config.to_dict(), "train_state": self.state.meta()}, velocity)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: TrainConfig | None = None) -> "Trainer":
        model = model_from_checkpoint(ckpt)
        config = config or TrainConfig.from_dict(ckpt.meta["train"])
        trainer = cls(model, config)
        meta = ckpt.meta.get("train_state", {})
        trainer.state.epoch = int(meta.get("epoch", 0))
        trainer.state.step = int(meta.get("step", 0))
        trainer.state.updates = int(meta.get("updates", 0))
        trainer.state.lr = float(meta.get("lr", 0.0))
        trainer.state.velocity = {k[len("optim/"):]: np.array(v) for k, v in ckpt.tensors.items() if k.startswith("optim/")}
        return trainer


def write_log(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k not in ("epoch", "num_positive") else int(r[k])) for k in LOG_FIELDS})
    return path


def fit(config: TrainConfig, dataset, model_config: ModelConfig | None = None, *, model: Detector | None = None,
        resume: Checkpoint | None = None, stop_after: int | None = None, log_path=None, on_epoch=None) -> tuple:
    """Train and return ``(trainer, log rows)``.

    ``resume`` continues from a checkpoint written by :meth:`Trainer.checkpoint`;
    ``stop_after`` halts once that many epochs are complete (for save/resume).
    With ``epochs=0`` the freshly initialized model is returned untouched.
    """
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, config)
    else:
        if model is None:
            model = Detector(model_config or ModelConfig(), seed=config.seed)
        trainer = Trainer(model, config)
    if len(dataset) == 0 and config.epochs:
        raise ValueError("cannot train on an empty dataset")
    rows = []
    last = config.epochs if stop_after is None else min(stop_after, config.epochs)
    while trainer.state.epoch < last:
        row = trainer.run_epoch(dataset)
        rows.append(row)
        if on_epoch is not None:
            on_epoch(trainer, row)
    if log_path is not None:
        write_log(rows, log_path)
    return trainer, rows


def prediction_head_names(model: Detector) -> list:
    """Dotted paths of the per-level box-regression and classification convs."""
    return [f"head{lv}.{part}" for lv in range(len(model.heads)) for part in ("loc", "cls")]


def fit_heads(source: Detector, box_variant: str, config: TrainConfig, dataset, seed: int = 0) -> tuple:
    """Train fresh prediction convs for ``box_variant`` on top of ``source``'s frozen network.

    Everything except the per-level ``loc``/``cls`` convs (streams, fusion
    weight network, post-fusion convs and their batch-norm statistics) is
    copied from ``source`` and frozen, so default-box variants compared this
    way share one trained feature extractor.  Returns ``(trainer, log rows)``.
    """
    from dataclasses import replace

    mc = source.config
    model = Detector(replace(mc, box=replace(mc.box, variant=box_variant)), seed=seed,
                     dtype=next(iter(source.parameters())).dtype)
    heads = prediction_head_names(model)
    keep = lambda name: not any(name.startswith(h + ".") for h in heads)
    src_params = dict(source.named_parameters())
    for name, t in model.named_parameters():
        if keep(name):
            t.data = src_params[name].data.copy()
    src_buffers = dict(source.named_buffers())
    for name, b in model.named_buffers():
        if keep(name):
            b[...] = src_buffers[name]
    trainer = Trainer(model, config)
    frozen = sorted({name.split(".")[0] for name in trainer.params if not name.startswith("head")})
    frozen += [f"head{lv}.{part}" for lv in range(len(model.heads)) for part in ("f0", "f1")]
    trainer.freeze(frozen)
    rows = []
    while trainer.state.epoch < config.epochs:
        rows.append(trainer.run_epoch(dataset))
    return trainer, rows
