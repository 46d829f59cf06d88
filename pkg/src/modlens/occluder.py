"""Modality occluder: replace every channel of selected modalities with a fill value."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch

from .errors import ConfigError
from .rasterdata import ModalityScheme

DEFAULT_FILL_VALUE = 0.0


@dataclass(frozen=True)
class OcclusionPlan:
    """Modalities to occlude and the value written into their channels.

    ``fill_value`` is either one scalar for all occluded channels, or a mapping from
    channel index to value (e.g. the raw-space channel mean; in standardised space a
    scalar 0 already equals the mean).
    """

    modality_names: tuple[str, ...] = ()
    fill_value: float | Mapping[int, float] = DEFAULT_FILL_VALUE

    def __post_init__(self):
        if len(set(self.modality_names)) != len(self.modality_names):
            raise ConfigError(f"repeated modality in plan {self.modality_names}")
        values = self.fill_value.values() if isinstance(self.fill_value, Mapping) else [self.fill_value]
        if not all(math.isfinite(float(v)) for v in values):
            raise ConfigError("fill value must be finite")

    def channels(self, scheme: ModalityScheme) -> list[int]:
        out: set[int] = set()
        for name in self.modality_names:
            out.update(scheme.indices(name))
        return sorted(out)

    def union(self, other: "OcclusionPlan") -> "OcclusionPlan":
        names = self.modality_names + tuple(n for n in other.modality_names if n not in self.modality_names)
        return OcclusionPlan(names, self.fill_value)


def occlude(image, scheme: ModalityScheme, plan: OcclusionPlan):
    """Return a copy of ``image`` ([C,H,W] or [B,C,H,W], numpy or torch) with the plan's channels filled.

    Channels outside the plan are copied bit-exactly; the input is never mutated.
    """
    axis = image.ndim - 3
    if image.ndim not in (3, 4):
        raise ValueError(f"expected [C,H,W] or [B,C,H,W], got {tuple(image.shape)}")
    if image.shape[axis] != scheme.total_channels:
        raise ConfigError(
            f"image has {image.shape[axis]} channels but the scheme spans {scheme.total_channels}"
        )
    channels = plan.channels(scheme)
    out = image.clone() if isinstance(image, torch.Tensor) else np.array(image, copy=True)
    for c in channels:
        if isinstance(plan.fill_value, Mapping):
            value = float(plan.fill_value.get(c, DEFAULT_FILL_VALUE))
        else:
            value = float(plan.fill_value)
        if axis == 0:
            out[c] = value
        else:
            out[:, c] = value
    return out


def occlusion_sequence(scheme: ModalityScheme, fill_value: float | Mapping[int, float] = DEFAULT_FILL_VALUE
                       ) -> list[OcclusionPlan]:
    """One single-modality plan per group, in scheme order."""
    return [OcclusionPlan((name,), fill_value) for name in scheme.names]


def mean_fill(stats: np.ndarray) -> dict[int, float]:
    """Per-channel fill values equal to the channel means (for occluding raw, unnormalised stacks)."""
    return {i: float(m) for i, m in enumerate(np.asarray(stats)[:, 0])}
