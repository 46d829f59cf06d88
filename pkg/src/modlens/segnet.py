"""UNet-style encoder/decoder with an optional bottleneck influence head.

The final decoder block can take ``num_modalities`` extra input planes, each a constant
broadcast of one influence score. With ``num_modalities == 0`` and no head the network is a
plain UNet.

Checkpoint format (version 1): a ``torch.save`` dict with keys ``format``
(``"modlens-checkpoint"``), ``version``, ``net_config`` (JSON string of :class:`NetConfig`),
``state_dict`` and ``extra`` (free-form JSON-serialisable metadata).
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataFormatError

CHECKPOINT_FORMAT = "modlens-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class NetConfig:
    in_channels: int = 14
    base_width: int = 32
    depth: int = 4
    num_modalities: int = 0
    influence_head: bool = False
    encoder_norm: bool = True  # GroupNorm after each encoder/bottleneck conv
    seed: int = 0

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if self.base_width < 1:
            raise ConfigError("base_width must be >= 1")
        if self.depth < 2:
            raise ConfigError("depth must be >= 2")
        if self.num_modalities < 0:
            raise ConfigError("num_modalities must be >= 0")
        if self.influence_head and self.num_modalities == 0:
            raise ConfigError("an influence head needs num_modalities > 0")

    @property
    def plain(self) -> bool:
        return self.num_modalities == 0 and not self.influence_head

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown NetConfig keys: {sorted(unknown)}")
        return cls(**d)


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int, norm: bool = False):
        layers = []
        for c in (cin, cout):
            layers.append(nn.Conv2d(c, cout, 3, padding=1))
            if norm:
                # per-sample statistics only: no running state, identical in train and eval mode
                layers.append(nn.GroupNorm(math.gcd(cout, 8), cout))
            layers.append(nn.ReLU(inplace=True))
        super().__init__(*layers)


class SegNet(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        config.validate()
        self.config = config
        w, d = config.base_width, config.depth
        widths = [w * 2 ** k for k in range(d + 1)]
        self.encoder = nn.ModuleList(
            DoubleConv(config.in_channels if k == 0 else widths[k - 1], widths[k], config.encoder_norm)
            for k in range(d)
        )
        self.bottleneck = DoubleConv(widths[d - 1], widths[d], config.encoder_norm)
        # decoder[j] upsamples level d-j to level d-j-1; the last one is the final block
        self.decoder = nn.ModuleList(
            DoubleConv(widths[k + 1] + widths[k] + (config.num_modalities if k == 0 else 0), widths[k])
            for k in reversed(range(d))
        )
        self.project = nn.Conv2d(widths[0], 1, 1)
        self.head = nn.Linear(widths[d], 1) if config.influence_head else None
        self.counts: Counter = Counter()

    @property
    def num_modalities(self) -> int:
        return self.config.num_modalities

    @property
    def has_head(self) -> bool:
        return self.head is not None

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Encoder features, shallowest first; the last entry is the bottleneck."""
        self.counts["encoder"] += 1
        self.counts["encoder_samples"] += x.shape[0]
        feats = []
        for block in self.encoder:
            x = block(x)
            feats.append(x)
            x = F.max_pool2d(x, 2)
        feats.append(self.bottleneck(x))
        return feats

    def decode(self, feats: list[torch.Tensor], influence: torch.Tensor | None = None) -> torch.Tensor:
        """Segmentation logits [B,1,H,W] from encoder features."""
        self.counts["decoder"] += 1
        self.counts["decoder_samples"] += feats[0].shape[0]
        x = feats[-1]
        last = len(self.decoder) - 1
        for j, block in enumerate(self.decoder):
            skip = feats[-2 - j]
            x = torch.cat([F.interpolate(x, size=skip.shape[-2:], mode="nearest"), skip], dim=1)
            if j == last and self.num_modalities:
                x = inject_influence(x, influence)
            x = block(x)
        return self.project(x)

    def score_logit(self, bottleneck: torch.Tensor) -> torch.Tensor:
        """Pre-sigmoid head output [B]: global average pool then one dense layer."""
        self.counts["head"] += 1
        self.counts["head_samples"] += bottleneck.shape[0]
        return self.head(bottleneck.mean(dim=(2, 3))).squeeze(1)

    def score(self, bottleneck: torch.Tensor) -> torch.Tensor:
        """Influence head score in [0, 1], shape [B]."""
        return torch.sigmoid(self.score_logit(bottleneck))

    def forward(self, x: torch.Tensor, influence: torch.Tensor | None = None) -> torch.Tensor:
        return torch.sigmoid(self.decode(self.encode(x), influence))


def build_model(config: NetConfig) -> SegNet:
    """Construct a network whose initial weights depend only on ``config``."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = SegNet(config)
    return model


def _as_score_tensor(influence, batch: int, n: int, like: torch.Tensor) -> torch.Tensor:
    scores = getattr(influence, "raw_scores", influence)
    scores = torch.as_tensor(scores, dtype=like.dtype, device=like.device)
    if scores.ndim == 1:
        scores = scores.unsqueeze(0).expand(batch, -1)
    if scores.shape != (batch, n):
        raise ConfigError(f"influence vector shape {tuple(scores.shape)}, expected ({batch}, {n})")
    return scores


def inject_influence(features: torch.Tensor, influence) -> torch.Tensor:
    """Append one constant plane per influence score to ``features`` [B,F,h,w] -> [B,F+N,h,w]."""
    if influence is None:
        raise ConfigError("this network expects an influence vector")
    scores = getattr(influence, "raw_scores", influence)
    scores = torch.as_tensor(scores, dtype=features.dtype, device=features.device)
    if scores.ndim == 1:
        scores = scores.unsqueeze(0).expand(features.shape[0], -1)
    if scores.ndim != 2 or scores.shape[0] != features.shape[0] or scores.shape[1] < 1:
        raise ConfigError(f"influence shape {tuple(scores.shape)} incompatible with batch {features.shape[0]}")
    if torch.isnan(scores).any():
        raise ValueError("influence vector contains NaN")
    b, _, h, w = features.shape
    planes = scores[:, :, None, None].expand(b, scores.shape[1], h, w)
    return torch.cat([features, planes], dim=1)


def forward_segmentation(model: SegNet, image: torch.Tensor, influence=None) -> torch.Tensor:
    """Segmentation probabilities [B,1,H,W]; ``influence`` is required iff the model takes one."""
    if model.num_modalities and influence is None:
        raise ConfigError(f"model expects an influence vector of length {model.num_modalities}")
    if not model.num_modalities and influence is not None:
        raise ConfigError("plain model does not accept an influence vector")
    if influence is not None:
        influence = _as_score_tensor(influence, image.shape[0], model.num_modalities, image)
    return model(image, influence)


def forward_influence(model: SegNet, occluded_image: torch.Tensor) -> torch.Tensor:
    """Influence-head scores [B] in [0, 1]; the decoder is not evaluated."""
    if not model.has_head:
        raise ConfigError("model has no influence head")
    return model.score(model.encode(occluded_image)[-1])


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(model: SegNet, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "net_config": json.dumps(asdict(model.config), sort_keys=True),
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )
    return path


def load_checkpoint(path) -> tuple[SegNet, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatError(f"{path} is not a modlens checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {blob.get('version')}")
    model = build_model(NetConfig.from_dict(json.loads(blob["net_config"])))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("extra", {})


def neutral_influence(batch: int, n: int, like: torch.Tensor) -> torch.Tensor:
    """All-0.5 score matrix used for probe passes (sigmoid midpoint)."""
    return torch.full((batch, n), 0.5, dtype=like.dtype, device=like.device)


def receptive_multiple(config: NetConfig) -> int:
    """Spatial sizes must be divisible by this for the shape contract to hold."""
    return int(math.pow(2, config.depth))
