"""The N-pass influence scheme.

Each modality is occluded in turn and the bottleneck head scores the occluded image. A raw
score near 1 means occluding that modality barely matters (low influence); the reported
influence is ``1 - raw``. The scores are then broadcast into the final decoder block for the
segmentation pass on the unoccluded image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import torch

from .errors import ConfigError
from .losses import bce_per_sample
from .occluder import DEFAULT_FILL_VALUE, occlude, occlusion_sequence
from .rasterdata import ModalityScheme
from .segnet import SegNet, neutral_influence


@dataclass
class InfluenceVector:
    scheme_names: list[str]
    raw_scores: torch.Tensor  # [N] or [B, N]
    logits: torch.Tensor | None = None  # pre-sigmoid head outputs, same shape

    def __post_init__(self):
        if self.raw_scores.shape[-1] != len(self.scheme_names):
            raise ConfigError(f"{self.raw_scores.shape[-1]} scores for {len(self.scheme_names)} modalities")

    @property
    def reported_influence(self) -> torch.Tensor:
        return 1.0 - self.raw_scores

    def __len__(self) -> int:
        return len(self.scheme_names)

    def detach(self) -> "InfluenceVector":
        logits = None if self.logits is None else self.logits.detach()
        return InfluenceVector(list(self.scheme_names), self.raw_scores.detach(), logits)


def _check(model: SegNet, image: torch.Tensor, scheme: ModalityScheme) -> None:
    if not model.has_head:
        raise ConfigError("influence computation needs a model with an influence head")
    if image.shape[1] != scheme.total_channels:
        raise ConfigError(f"image has {image.shape[1]} channels, scheme spans {scheme.total_channels}")
    if model.num_modalities != len(scheme):
        raise ConfigError(f"model injects {model.num_modalities} scores but the scheme has {len(scheme)} groups")


def _occluded_passes(model, image, scheme, fill_value):
    logits, feats = [], []
    for plan in occlusion_sequence(scheme, fill_value):
        f = model.encode(occlude(image, scheme, plan))
        logits.append(model.score_logit(f[-1]))
        feats.append(f)
    logits = torch.stack(logits, dim=1)
    return InfluenceVector(scheme.names, torch.sigmoid(logits), logits), feats


def compute_influence_vector(model: SegNet, image: torch.Tensor, scheme: ModalityScheme,
                             fill_value: float | Mapping[int, float] = DEFAULT_FILL_VALUE) -> InfluenceVector:
    """Run one encoder+head pass per modality on ``image`` [B,C,H,W]; scores are [B, N]."""
    _check(model, image, scheme)
    vector, _ = _occluded_passes(model, image, scheme, fill_value)
    return vector


def influence_target(loss_occluded, loss_full):
    """``exp(-max(0, loss_occluded - loss_full))``: 1 when occlusion does not hurt, towards 0 as it does."""
    if isinstance(loss_occluded, torch.Tensor) or isinstance(loss_full, torch.Tensor):
        lo, lf = torch.as_tensor(loss_occluded), torch.as_tensor(loss_full)
        if torch.isnan(lo).any() or torch.isnan(lf).any():
            raise ValueError("NaN loss passed to influence_target")
        if (lo < 0).any() or (lf < 0).any():
            raise ValueError("losses must be >= 0")
        return torch.exp(-torch.clamp(lo - lf, min=0.0))
    lo, lf = float(loss_occluded), float(loss_full)
    if math.isnan(lo) or math.isnan(lf):
        raise ValueError("NaN loss passed to influence_target")
    if lo < 0 or lf < 0:
        raise ValueError("losses must be >= 0")
    return math.exp(-max(0.0, lo - lf))


@dataclass
class FrameworkOutput:
    probabilities: torch.Tensor
    influence: InfluenceVector
    aux: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.probabilities, self.influence, self.aux))


def framework_forward(model: SegNet, image: torch.Tensor, scheme: ModalityScheme, mask: torch.Tensor | None = None,
                      fill_value: float | Mapping[int, float] = DEFAULT_FILL_VALUE) -> FrameworkOutput:
    """Occluded scoring passes, optional target probes, then the injected segmentation pass.

    With ``mask`` given, ``aux`` holds ``influence_targets`` [B,N], ``loss_full`` [B] and
    ``loss_occluded`` [B,N]; the probes reuse the encoder features of the scoring passes and run
    the decoder with a neutral all-0.5 influence input, without gradient. The scores fed into
    the final pass are detached.
    """
    _check(model, image, scheme)
    vector, occluded_feats = _occluded_passes(model, image, scheme, fill_value)
    full_feats = model.encode(image)
    aux: dict = {}
    if mask is not None:
        with torch.no_grad():
            neutral = neutral_influence(image.shape[0], len(scheme), image)
            loss_full = bce_per_sample(torch.sigmoid(model.decode([f.detach() for f in full_feats], neutral)), mask)
            loss_occ = torch.stack(
                [bce_per_sample(torch.sigmoid(model.decode([f.detach() for f in feats], neutral)), mask)
                 for feats in occluded_feats],
                dim=1,
            )
            aux = {
                "influence_targets": influence_target(loss_occ, loss_full[:, None]),
                "loss_full": loss_full,
                "loss_occluded": loss_occ,
            }
    probs = torch.sigmoid(model.decode(full_feats, vector.raw_scores.detach()))
    return FrameworkOutput(probs, vector, aux)
