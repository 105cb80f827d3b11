"""Training loop: momentum SGD with a step schedule, JSON-lines loss log,
epoch-boundary checkpoints, and seeded (optionally deterministic) runs."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image

from .detector import CascadeDetector, DetectorConfig, prepare_images, save_checkpoint
from .taxonomy import ChartAnnotations, from_dataset_json

log = logging.getLogger(__name__)

SEED_ENV = "CACHED_DET_SEED"


class TrainingDivergedError(RuntimeError):
    """A non-finite loss was produced; the offending batch is dumped to disk."""


@dataclass
class TrainConfig:
    dataset: str = ""
    image_root: str | None = None  # defaults to the dataset file's directory
    out_dir: str = "run"
    epochs: int = 12
    batch_size: int = 2
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_steps: tuple[int, ...] = (8, 11)  # epochs after which lr is multiplied by lr_gamma
    lr_gamma: float = 0.1
    warmup_steps: int = 50
    grad_clip: float = 10.0
    seed: int = 0
    deterministic: bool = True
    max_steps: int | None = None
    checkpoint_every: int = 1  # epochs
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.lr > 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr must be positive and momentum in [0, 1)")
        self.lr_steps = tuple(int(s) for s in self.lr_steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detector"] = self.detector.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if "detector" in d and isinstance(d["detector"], dict):
            d["detector"] = DetectorConfig.from_dict(d["detector"])
        if "lr_steps" in d:
            d["lr_steps"] = tuple(d["lr_steps"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))


def effective_seed(seed: int) -> int:
    """``seed``, unless overridden by the ``CACHED_DET_SEED`` environment variable."""
    env = os.environ.get(SEED_ENV)
    if env is None or env.strip() == "":
        return seed
    try:
        return int(env)
    except ValueError:
        raise ValueError(f"{SEED_ENV} must be an integer, got {env!r}") from None


@contextmanager
def deterministic_mode(enabled: bool):
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled, warn_only=True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


@dataclass
class TrainSample:
    chart: ChartAnnotations
    image: np.ndarray


def load_samples(dataset: str | Path, image_root: str | Path | None = None) -> list[TrainSample]:
    dataset = Path(dataset)
    charts = from_dataset_json(dataset.read_bytes())
    root = Path(image_root) if image_root else dataset.parent
    samples = []
    for chart in charts:
        with Image.open(root / chart.file_name) as im:
            samples.append(TrainSample(chart, np.asarray(im.convert("RGB"))))
    return samples


def targets_for(samples: Sequence[TrainSample], scales: Sequence[float], dtype):
    boxes, labels = [], []
    for s, scale in zip(samples, scales):
        b = [lb.box.as_tuple() for lb in s.chart.boxes]
        boxes.append(torch.tensor(b, dtype=dtype).reshape(-1, 4) * scale)
        labels.append(torch.tensor([lb.category_id for lb in s.chart.boxes], dtype=torch.long))
    return boxes, labels


def learning_rate(cfg: TrainConfig, step: int, epoch: int) -> float:
    lr = cfg.lr * cfg.lr_gamma ** sum(epoch >= s for s in cfg.lr_steps)
    if step < cfg.warmup_steps:
        lr *= (step + 1) / cfg.warmup_steps
    return lr


@dataclass
class TrainResult:
    model: CascadeDetector
    checkpoint: Path | None
    log_path: Path
    losses: list[float]
    steps: int
    seconds: float


def train(cfg: TrainConfig, samples: Sequence[TrainSample] | None = None,
          on_epoch_end: Callable[[int, CascadeDetector], None] | None = None) -> TrainResult:
    """Train a detector; ``samples`` may be passed to skip reading ``cfg.dataset``."""
    seed = effective_seed(cfg.seed)
    if samples is None:
        samples = load_samples(cfg.dataset, cfg.image_root)
    if not samples:
        raise ValueError("training set is empty")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    (out / "train_config.json").write_text(cfg.to_json())

    with deterministic_mode(cfg.deterministic):
        torch.manual_seed(seed)
        model = CascadeDetector(cfg.detector)
        model.train()
        gen = torch.Generator().manual_seed(seed)
        order_rng = np.random.default_rng(seed)
        decay, no_decay = [], []
        for name, p in model.named_parameters():
            (no_decay if p.ndim <= 1 else decay).append(p)
        opt = torch.optim.SGD([{"params": decay, "weight_decay": cfg.weight_decay},
                               {"params": no_decay, "weight_decay": 0.0}],
                              lr=cfg.lr, momentum=cfg.momentum)
        losses, step, ckpt = [], 0, None
        start = time.perf_counter()
        with open(log_path, "w") as logf:
            for epoch in range(cfg.epochs):
                order = order_rng.permutation(len(samples))
                for b0 in range(0, len(order), cfg.batch_size):
                    if cfg.max_steps is not None and step >= cfg.max_steps:
                        break
                    chunk = [samples[i] for i in order[b0:b0 + cfg.batch_size]]
                    batch = prepare_images([s.image for s in chunk], cfg.detector.max_side)
                    gt_boxes, gt_labels = targets_for(chunk, batch.scales, batch.tensor.dtype)
                    parts = model.forward_train(batch, gt_boxes, gt_labels, gen)
                    total = parts["total"]
                    if not torch.isfinite(total):
                        dump = out / f"nan_dump_step{step}.json"
                        dump.write_text(json.dumps({
                            "step": step, "epoch": epoch,
                            "image_ids": [s.chart.id for s in chunk],
                            "file_names": [s.chart.file_name for s in chunk],
                            "losses": {k: float(v.detach()) for k, v in parts.items()},
                            "gt_boxes": [g.tolist() for g in gt_boxes]}, indent=1))
                        raise TrainingDivergedError(
                            f"non-finite loss at step {step}; batch dumped to {dump}")
                    lr = learning_rate(cfg, step, epoch)
                    for g in opt.param_groups:
                        g["lr"] = lr
                    opt.zero_grad(set_to_none=True)
                    total.backward()
                    if cfg.grad_clip:
                        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                    opt.step()
                    record = {"step": step, "epoch": epoch, "lr": lr,
                              **{k: float(v.detach()) for k, v in parts.items()}}
                    logf.write(json.dumps(record, sort_keys=True) + "\n")
                    logf.flush()
                    losses.append(record["total"])
                    step += 1
                model.mark_ready()
                if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
                    ckpt = save_checkpoint(model, out / "checkpoint.ckpt",
                                           {"epoch": epoch + 1, "step": step, "seed": seed})
                log.info("epoch %d done: step %d, last loss %.4f", epoch + 1, step,
                         losses[-1] if losses else math.nan)
                if on_epoch_end is not None:
                    on_epoch_end(epoch, model)
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
        model.mark_ready()
        return TrainResult(model, ckpt, log_path, losses, step, time.perf_counter() - start)
