"""Training, evaluation and timing for the plain and framework variants."""
from __future__ import annotations

import copy
import csv
import json
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Literal

import numpy as np
import torch

from .errors import ConfigError, TrainingDivergedError
from .influence import compute_influence_vector, framework_forward
from .losses import bce_loss, composite_loss, bernoulli_kl_with_logits
from .rasterdata import DatasetManifest, MultimodalSample, load_split, normalize, random_crop
from .segnet import NetConfig, SegNet, build_model, forward_segmentation, save_checkpoint

ModelKind = Literal["plain", "framework"]
MODEL_KINDS = ("plain", "framework")
EARLY_STOP_METRICS = ("val_iou", "val_f1", "val_loss")
INFLUENCE_LOSSES = ("mse", "kl")
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_iou", "val_acc", "val_f1", "lr")


@dataclass
class TrainConfig:
    batch_size: int = 16
    crop: int = 64
    max_lr: float = 1.0
    min_lr: float = 1e-8
    initial_lr: float = 1e-3
    cycle_steps: int | None = None  # None: four epochs' worth of batches
    adam_eps: float = 1e-8
    adam_betas: tuple[float, float] = (0.9, 0.999)
    patience_epochs: int = 6
    max_epochs: int = 100
    influence_loss_weight: float = 1.0
    influence_loss: str = "kl"  # "kl" on head logits, or "mse" on scores
    seed: int = 0
    early_stop_metric: str = "val_iou"
    occlusion_value: float = 0.0
    normalize: bool = True
    threshold: float = 0.5

    def validate(self) -> None:
        if not 0 < self.min_lr <= self.initial_lr <= self.max_lr:
            raise ConfigError("learning rates must satisfy 0 < min_lr <= initial_lr <= max_lr")
        if self.patience_epochs < 1:
            raise ConfigError("patience_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.crop < 1:
            raise ConfigError("crop must be >= 1")
        if self.cycle_steps is not None and self.cycle_steps < 2:
            raise ConfigError("cycle_steps must be >= 2")
        if self.early_stop_metric not in EARLY_STOP_METRICS:
            raise ConfigError(f"early_stop_metric must be one of {EARLY_STOP_METRICS}")
        if self.influence_loss not in INFLUENCE_LOSSES:
            raise ConfigError(f"influence_loss must be one of {INFLUENCE_LOSSES}")
        if self.influence_loss_weight < 0:
            raise ConfigError("influence_loss_weight must be >= 0")
        if not math.isfinite(self.occlusion_value):
            raise ConfigError("occlusion_value must be finite")

    @classmethod
    def fullscale(cls, **overrides) -> "TrainConfig":
        """Literal schedule bounds (upper 1, lower 1e-8), 1024 crops, batch 16."""
        return cls(**{"crop": 1024, **overrides})

    @classmethod
    def practical(cls, **overrides) -> "TrainConfig":
        """Same recipe with the cyclical upper bound lowered to 1e-2."""
        return cls(**{"max_lr": 1e-2, **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


def cyclical_lr(step: int, config: TrainConfig, steps_per_epoch: int | None = None) -> float:
    """Triangular cyclical learning rate: ``min_lr`` at step 0, ``max_lr`` half a cycle later."""
    if step < 0:
        raise ValueError("step must be >= 0")
    period = config.cycle_steps or 4 * (steps_per_epoch or 1)
    half = period / 2
    cycle = math.floor(1 + step / period)
    x = abs(step / half - 2 * cycle + 1)
    return config.min_lr + (config.max_lr - config.min_lr) * max(0.0, 1.0 - x)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def confusion(self) -> tuple[int, int, int, int]:
        return self.tp, self.fp, self.fn, self.tn

    @property
    def iou(self) -> float:
        denom = self.tp + self.fp + self.fn
        return self.tp / denom if denom else 1.0

    @property
    def accuracy(self) -> float:
        total = self.tp + self.fp + self.fn + self.tn
        return (self.tp + self.tn) / total if total else 1.0

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 1.0

    def __add__(self, other: "MetricsRecord") -> "MetricsRecord":
        return MetricsRecord(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def percent(self) -> dict[str, float]:
        return {
            "iou": round(100 * self.iou, 2),
            "accuracy": round(100 * self.accuracy, 2),
            "f1": round(100 * self.f1, 2),
        }

    def to_json(self) -> dict:
        """Metrics x100 with two decimals plus the raw confusion counts."""
        pct = self.percent()
        return {
            "iou": f"{pct['iou']:.2f}",
            "accuracy": f"{pct['accuracy']:.2f}",
            "f1": f"{pct['f1']:.2f}",
            "confusion": {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn},
        }


def _as_numpy(x) -> np.ndarray:
    return x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)


def compute_metrics(pred_mask, gt_mask) -> MetricsRecord:
    pred, gt = _as_numpy(pred_mask), _as_numpy(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    for name, a in (("prediction", pred), ("ground truth", gt)):
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"{name} mask is not binary")
    pred, gt = pred.astype(bool), gt.astype(bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return MetricsRecord(tp, fp, fn, tn)


# ---------------------------------------------------------------------------
# data


@dataclass
class TensorSplit:
    ids: list[str]
    images: np.ndarray  # float32 [S, C, H, W]
    masks: np.ndarray  # uint8 [S, H, W]

    def __len__(self) -> int:
        return len(self.ids)


def prepare_split(manifest: DatasetManifest, split: str, config: TrainConfig) -> TensorSplit:
    samples: list[MultimodalSample] = load_split(manifest, split)
    if not samples:
        raise ConfigError(f"split {split!r} is empty")
    if config.normalize:
        samples = [normalize(s, manifest.normalization_stats) for s in samples]
    return TensorSplit(
        [s.id for s in samples],
        np.stack([s.image for s in samples]),
        np.stack([s.mask for s in samples]),
    )


def iterate_batches(data: TensorSplit, config: TrainConfig, rng: np.random.Generator):
    """Shuffled, randomly cropped training batches as (image, mask) tensors."""
    order = rng.permutation(len(data))
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        imgs, masks = [], []
        for i in idx:
            crop = random_crop(MultimodalSample(data.ids[i], data.images[i], data.masks[i],
                                                [""] * data.images.shape[1]), config.crop, rng)
            imgs.append(crop.image)
            masks.append(crop.mask)
        yield torch.from_numpy(np.stack(imgs)), torch.from_numpy(np.stack(masks)).unsqueeze(1).float()


# ---------------------------------------------------------------------------
# training


def default_net_config(model_kind: ModelKind, manifest: DatasetManifest, **overrides) -> NetConfig:
    framework = model_kind == "framework"
    return NetConfig(**{
        "in_channels": manifest.scheme.total_channels,
        "base_width": 32,
        "depth": 4,
        "num_modalities": len(manifest.scheme) if framework else 0,
        "influence_head": framework,
        **overrides,
    })


def train_step(model: SegNet, model_kind: ModelKind, image: torch.Tensor, mask: torch.Tensor,
               config: TrainConfig, scheme=None) -> tuple[torch.Tensor, dict]:
    """Loss of one batch (graph attached) and detached components for logging."""
    if model_kind == "plain":
        loss = bce_loss(forward_segmentation(model, image), mask)
        return loss, {"seg_loss": float(loss.detach())}
    out = framework_forward(model, image, scheme, mask, config.occlusion_value)
    seg = bce_loss(out.probabilities, mask)
    targets = out.aux["influence_targets"]
    if config.influence_loss == "kl":
        loss = seg + config.influence_loss_weight * bernoulli_kl_with_logits(out.influence.logits, targets)
    else:
        loss = composite_loss(seg, out.influence.raw_scores, targets, config.influence_loss_weight)
    return loss, {"seg_loss": float(seg.detach()), "influence_mse": float(torch.mean(
        (out.influence.raw_scores.detach() - targets) ** 2))}


@torch.no_grad()
def predict(model: SegNet, image: torch.Tensor, scheme=None, occlusion_value: float = 0.0) -> torch.Tensor:
    """Segmentation probabilities; framework models score occluded passes first."""
    model.eval()
    if model.num_modalities:
        influence = compute_influence_vector(model, image, scheme, occlusion_value)
        return forward_segmentation(model, image, influence)
    return forward_segmentation(model, image)


@torch.no_grad()
def evaluate_tensors(model: SegNet, data: TensorSplit, config: TrainConfig, scheme=None,
                     batch_size: int | None = None) -> tuple[MetricsRecord, float]:
    """Micro-averaged metrics and mean BCE over a split."""
    record, loss_sum = MetricsRecord(), 0.0
    bs = batch_size or max(config.batch_size, 16)
    for start in range(0, len(data), bs):
        image = torch.from_numpy(data.images[start:start + bs])
        mask = torch.from_numpy(data.masks[start:start + bs]).unsqueeze(1).float()
        probs = predict(model, image, scheme, config.occlusion_value)
        loss_sum += float(bce_loss(probs, mask)) * image.shape[0]
        record = record + compute_metrics((probs >= config.threshold).to(torch.uint8), mask.to(torch.uint8))
    return record, loss_sum / len(data)


@dataclass
class TrainResult:
    model: SegNet
    history: list[dict]
    best_epoch: int
    best_metric: float
    stopped_early: bool
    train_pass_counts: Counter = field(default_factory=Counter)
    checkpoint: Path | None = None


def _improved(metric: str, value: float, best: float | None) -> bool:
    if best is None:
        return True
    return value < best if metric == "val_loss" else value > best


def train(model_kind: ModelKind, config: TrainConfig, manifest: DatasetManifest,
          net_config: NetConfig | None = None, out_dir=None, log=None) -> TrainResult:
    """Adam + cyclical LR with early stopping on ``config.early_stop_metric``; keeps the best weights.

    When ``out_dir`` is given, writes ``checkpoint.pt`` (best epoch) and ``history.csv`` there.
    """
    if model_kind not in MODEL_KINDS:
        raise ConfigError(f"model kind must be one of {MODEL_KINDS}")
    config.validate()
    net_config = net_config or default_net_config(model_kind, manifest, seed=config.seed)
    if (model_kind == "framework") != (not net_config.plain):
        raise ConfigError(f"net config does not match model kind {model_kind!r}")
    scheme = manifest.scheme
    train_data = prepare_split(manifest, "train", config)
    val_data = prepare_split(manifest, "val", config)

    model = build_model(net_config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.initial_lr, betas=tuple(config.adam_betas),
                                 eps=config.adam_eps)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(train_data) / config.batch_size)

    history: list[dict] = []
    best, best_epoch, best_state = None, 0, None
    step, since_best, lr = 0, 0, config.initial_lr
    train_counts: Counter = Counter()
    stopped_early = False
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        total, seen = 0.0, 0
        before = Counter(model.counts)
        for image, mask in iterate_batches(train_data, config, rng):
            lr = cyclical_lr(step, config, steps_per_epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            loss, _ = train_step(model, model_kind, image, mask, config, scheme)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {float(loss.detach())} at epoch {epoch}, step {step} (lr={lr:.3g}); "
                    "try a lower max_lr"
                )
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * image.shape[0]
            seen += image.shape[0]
            step += 1
        train_counts += Counter(model.counts) - before

        record, val_loss = evaluate_tensors(model, val_data, config, scheme)
        row = {
            "epoch": epoch,
            "train_loss": total / seen,
            "val_loss": val_loss,
            "val_iou": record.iou,
            "val_acc": record.accuracy,
            "val_f1": record.f1,
            "lr": lr,
        }
        history.append(row)
        if log:
            log(row)
        value = row[config.early_stop_metric]
        if _improved(config.early_stop_metric, value, best):
            best, best_epoch, since_best = value, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            since_best += 1
            if since_best >= config.patience_epochs:
                stopped_early = True
                break

    model.load_state_dict(best_state)
    model.eval()
    result = TrainResult(model, history, best_epoch, best, stopped_early, train_counts)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint = save_checkpoint(model, out_dir / "checkpoint.pt", extra={
            "model_kind": model_kind,
            "best_epoch": best_epoch,
            "train_config": asdict(config),
            "scheme": scheme.to_dict(),
        })
        write_history(history, out_dir / "history.csv")
    return result


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (row[k] if k == "epoch" else f"{row[k]:.9g}") for k in HISTORY_COLUMNS})


def evaluate(model: SegNet, manifest: DatasetManifest, split: str, config: TrainConfig | None = None
             ) -> MetricsRecord:
    """Dataset-level (micro-averaged) metrics of ``model`` on ``split``."""
    config = config or TrainConfig()
    if model.config.in_channels != manifest.scheme.total_channels:
        raise ConfigError(
            f"checkpoint expects {model.config.in_channels} channels, dataset has {manifest.scheme.total_channels}"
        )
    if model.num_modalities and model.num_modalities != len(manifest.scheme):
        raise ConfigError("checkpoint modality count differs from the dataset scheme")
    data = prepare_split(manifest, split, config)
    multiple = 2 ** model.config.depth
    if data.images.shape[-1] % multiple or data.images.shape[-2] % multiple:
        raise ConfigError(f"sample size {data.images.shape[-2:]} not divisible by {multiple}")
    record, _ = evaluate_tensors(model, data, config, manifest.scheme)
    return record


# ---------------------------------------------------------------------------
# timing


@dataclass
class TimingRecord:
    mean_epoch_s: float
    mean_batch_s: float
    mean_optimizer_step_s: float
    epoch_s: list[float] = field(default_factory=list)
    batch_s: list[list[float]] = field(default_factory=list)
    optimizer_step_s: list[list[float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "epoch_s": self.mean_epoch_s,
            "batch_s": self.mean_batch_s,
            "optimizer_step_s": self.mean_optimizer_step_s,
        }


def benchmark_timing(model_kind: ModelKind, config: TrainConfig, manifest: DatasetManifest, epochs: int = 2,
                     net_config: NetConfig | None = None, data: TensorSplit | None = None) -> TimingRecord:
    """Wall-clock means over ``epochs`` training epochs after one excluded warm-up epoch.

    Batch time spans fetching/cropping the batch through the optimizer update; optimizer-step
    time spans forward, backward and the parameter update only.
    """
    if epochs < 2:
        raise ConfigError("benchmark needs at least 2 measured epochs")
    config.validate()
    net_config = net_config or default_net_config(model_kind, manifest, seed=config.seed)
    data = data or prepare_split(manifest, "train", config)
    model = build_model(net_config)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.initial_lr, betas=tuple(config.adam_betas),
                                 eps=config.adam_eps)
    steps_per_epoch = math.ceil(len(data) / config.batch_size)
    rng = np.random.default_rng(config.seed)
    step = 0
    epoch_times, batch_times, opt_times = [], [], []
    for epoch in range(epochs + 1):
        batches, steps = [], []
        t_epoch = time.perf_counter()
        it = iterate_batches(data, config, rng)
        while True:
            t_batch = time.perf_counter()
            try:
                image, mask = next(it)
            except StopIteration:
                break
            t_step = time.perf_counter()
            for group in optimizer.param_groups:
                group["lr"] = cyclical_lr(step, config, steps_per_epoch)
            optimizer.zero_grad(set_to_none=True)
            loss, _ = train_step(model, model_kind, image, mask, config, manifest.scheme)
            loss.backward()
            optimizer.step()
            t_end = time.perf_counter()
            steps.append(t_end - t_step)
            batches.append(t_end - t_batch)
            step += 1
        elapsed = time.perf_counter() - t_epoch
        if epoch == 0:
            continue  # warm-up
        epoch_times.append(elapsed)
        batch_times.append(batches)
        opt_times.append(steps)
    flat_b = [b for e in batch_times for b in e]
    flat_s = [s for e in opt_times for s in e]
    return TimingRecord(
        float(np.mean(epoch_times)), float(np.mean(flat_b)), float(np.mean(flat_s)),
        epoch_times, batch_times, opt_times,
    )


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")
