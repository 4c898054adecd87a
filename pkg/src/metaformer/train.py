"""Training loop: AdamW, warmup + cosine schedule, meta masking, evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericError
from .meta import MaskSchedule, MetaBatch, collate_meta, sample_mask
from .model import MetaFormer, ModelConfig
from .nn import Parameter
from .synthetic import Dataset

log = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    warmup_epochs: int = 1
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 64
    seed: int = 0
    label_smoothing: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    schedule: str = "cosine"
    mask_r0: float = 1.0
    mask_per_sample: bool = False
    use_meta: bool = True
    augment: bool = False  # horizontal flip + padded random crop
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs must be in [0, epochs), got {self.warmup_epochs}")
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.schedule != "cosine":
            raise ConfigError(f"unknown schedule {self.schedule!r}; only 'cosine' is supported")
        if not 0 <= self.mask_r0 <= 1:
            raise ConfigError(f"mask_r0 must be in [0, 1], got {self.mask_r0}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")

    def steps_per_epoch(self, num_samples: int) -> int:
        return max(1, math.ceil(num_samples / self.batch_size))


# -- schedule ---------------------------------------------------------------
def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from 0, then cosine decay reaching 0 at the last step."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    warm = config.warmup_epochs * steps_per_epoch
    last = config.epochs * steps_per_epoch - 1
    if step < warm:
        return config.base_lr * step / warm
    span = last - warm
    progress = min(1.0, (step - warm) / span) if span > 0 else 1.0 if step > warm else 0.0
    return 0.5 * config.base_lr * (1.0 + math.cos(math.pi * progress))


# -- optimiser --------------------------------------------------------------
@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def decays(name: str, param: Parameter) -> bool:
    """Weight decay applies to matrices and kernels, not to norms, biases, tokens or bias tables."""
    if param.ndim <= 1:
        return False
    leaf = name.rsplit(".", 1)[-1]
    return not (leaf.startswith("cls_token") or leaf in ("null", "table"))


def optimizer_step(params: Dict[str, Parameter], state: AdamState, lr: float, config: TrainConfig) -> None:
    """One AdamW update with bias correction and decoupled weight decay."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if config.weight_decay and decays(name, p):
            p.data *= 1.0 - lr * config.weight_decay
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + config.adam_eps)


# -- metrics ----------------------------------------------------------------
@dataclass
class MetricsReport:
    step: List[int] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    mask_ratio: List[float] = field(default_factory=list)
    loss: List[float] = field(default_factory=list)
    acc: List[float] = field(default_factory=list)
    epoch_loss: List[float] = field(default_factory=list)
    epoch_acc: List[float] = field(default_factory=list)
    top1: Optional[float] = None
    per_class: Optional[List[float]] = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "lr", "mask_ratio", "loss", "acc"])
            for row in zip(self.step, self.lr, self.mask_ratio, self.loss, self.acc):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


@dataclass
class EvalResult:
    top1: float
    per_class: List[float]
    loss: float
    predictions: np.ndarray


def _batch_meta(model: MetaFormer, dataset: Dataset, idx, use_meta: bool, training: bool,
                rng: Optional[np.random.Generator]) -> Optional[MetaBatch]:
    schema = model.config.meta
    if not schema or not use_meta:
        return None
    return collate_meta([dataset.records[i] for i in idx], schema, training=training, rng=rng)


def check_compatible(model: MetaFormer, dataset: Dataset) -> None:
    c = model.config
    shape = dataset.images.shape[1:]
    if shape != (c.in_channels, c.image_size, c.image_size):
        raise ContractError(f"dataset images {shape} do not match model input "
                            f"{(c.in_channels, c.image_size, c.image_size)}")
    if dataset.num_classes > c.num_classes:
        raise ContractError(f"dataset has {dataset.num_classes} classes, model only {c.num_classes}")
    have = {ch.kind for ch in dataset.schema.channels}
    missing = [ch.kind for ch in c.meta.channels if ch.kind not in have]
    if missing:
        raise ContractError(f"model meta channels {missing} are absent from the dataset schema")


def _augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    flip = rng.random(len(images)) < 0.5
    out = np.where(flip[:, None, None, None], images[..., ::-1], images)
    h, w = images.shape[2:]
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    offs = rng.integers(0, 2 * pad + 1, size=(len(images), 2))
    return np.stack([padded[i, :, a:a + h, b:b + w] for i, (a, b) in enumerate(offs)])


def build_model(config: ModelConfig, seed: int = 0, dtype: str = "float64") -> MetaFormer:
    with T.default_dtype(DTYPES[dtype]):
        return MetaFormer(config, seed=seed)


def evaluate(model: MetaFormer, dataset: Dataset, use_meta: bool = True, batch_size: int = 128) -> EvalResult:
    """Top-1 and per-class accuracy.  ``use_meta=False`` feeds null meta tokens."""
    check_compatible(model, dataset)
    was_training = model.training
    model.eval()
    dtype = model.head.weight.data.dtype
    preds = np.empty(len(dataset), dtype=np.int64)
    total_loss = 0.0
    try:
        with T.no_grad(), T.default_dtype(dtype):
            for start in range(0, len(dataset), batch_size):
                idx = np.arange(start, min(start + batch_size, len(dataset)))
                meta = _batch_meta(model, dataset, idx, use_meta, False, None)
                logits = model(dataset.images[idx].astype(dtype), meta)
                total_loss += T.cross_entropy(logits, dataset.labels[idx]).item() * len(idx)
                preds[idx] = logits.data.argmax(axis=1)
    finally:
        model.train(was_training)
    correct = preds == dataset.labels
    per_class = [float(correct[dataset.labels == c].mean()) if np.any(dataset.labels == c) else float("nan")
                 for c in range(dataset.num_classes)]
    return EvalResult(float(correct.mean()), per_class, total_loss / max(1, len(dataset)), preds)


def train(model: MetaFormer, dataset: Dataset, config: TrainConfig,
          test: Optional[Dataset] = None) -> MetricsReport:
    """Run the full loop.  Deterministic for a fixed seed on a single thread."""
    check_compatible(model, dataset)
    dtype = DTYPES[config.dtype]
    params = dict(model.named_parameters())
    for name, p in params.items():
        if p.data.dtype != dtype:
            raise ContractError(f"parameter {name} is {p.data.dtype}, training dtype is {config.dtype}")
    n = len(dataset)
    spe = config.steps_per_epoch(n)
    total = config.epochs * spe
    schedule = MaskSchedule(config.mask_r0, max(1, total - 1), config.mask_per_sample)
    n_meta = model.config.meta.num_tokens if config.use_meta else 0
    shuffle_rng = np.random.default_rng([config.seed, 11])
    mask_rng = np.random.default_rng([config.seed, 12])
    model_rng = np.random.default_rng([config.seed, 13])
    text_rng = np.random.default_rng([config.seed, 14])
    aug_rng = np.random.default_rng([config.seed, 15])
    state = AdamState()
    report = MetricsReport()
    model.train()
    step = 0
    with T.default_dtype(dtype):
        for epoch in range(config.epochs):
            order = shuffle_rng.permutation(n)
            ep_loss = ep_correct = 0.0
            for b in range(spe):
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                images = dataset.images[idx].astype(dtype)
                if config.augment:
                    images = _augment(images, aug_rng)
                labels = dataset.labels[idx]
                meta = _batch_meta(model, dataset, idx, config.use_meta, True, text_rng)
                ratio = schedule.ratio(step) if n_meta else 0.0
                mask = sample_mask(len(idx), n_meta, step, schedule, mask_rng) if n_meta else None
                lr = lr_at(step, config, spe)

                model.zero_grad()
                logits = model(images, meta, mask, model_rng)
                loss = T.cross_entropy(logits, labels, config.label_smoothing)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss {value} at step {step}")
                loss.backward()
                optimizer_step(params, state, lr, config)
                for name, p in params.items():
                    if not np.all(np.isfinite(p.data)):
                        raise NumericError(f"parameter {name} became non-finite at step {step}")

                acc = float((logits.data.argmax(axis=1) == labels).mean())
                report.step.append(step)
                report.lr.append(lr)
                report.mask_ratio.append(ratio)
                report.loss.append(value)
                report.acc.append(acc)
                ep_loss += value * len(idx)
                ep_correct += acc * len(idx)
                step += 1
            report.epoch_loss.append(ep_loss / n)
            report.epoch_acc.append(ep_correct / n)
            log.info("epoch %d/%d loss %.4f acc %.4f lr %.2e", epoch + 1, config.epochs,
                     report.epoch_loss[-1], report.epoch_acc[-1], report.lr[-1])
    if test is not None:
        res = evaluate(model, test, use_meta=config.use_meta)
        report.top1, report.per_class = res.top1, res.per_class
    model.eval()
    return report


def train_eval_summary(model: MetaFormer, test: Dataset) -> Tuple[float, Optional[float]]:
    """(image-only accuracy, image+meta accuracy or None when the model has no meta channels)."""
    image_only = evaluate(model, test, use_meta=False).top1
    with_meta = evaluate(model, test, use_meta=True).top1 if model.config.meta else None
    return image_only, with_meta


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
