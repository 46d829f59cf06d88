"""Multimodal raster samples, modality schemes, on-disk format and a synthetic generator.

Canonical 14-band layout (index: name)::

    0-9   Sentinel-2  B2 B3 B4 B5 B6 B7 B8 B8A B11 B12
    10-11 Sentinel-1  VV VH
    12    ESA WorldCover
    13    VIIRS night-time light

On disk every sample is three files next to a ``manifest.json``:
``<id>_image.bin`` (little-endian float32, planar [C, H, W]), ``<id>_image.json``
(header with channels/height/width/names/shape) and ``<id>_mask.bin`` (uint8 [H, W]).
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataFormatError

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")

CHANNEL_NAMES = (
    "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B11", "B12",
    "VV", "VH", "WorldCover", "NTL",
)


@dataclass
class MultimodalSample:
    id: str
    image: np.ndarray  # float32 [C, H, W]
    mask: np.ndarray  # uint8 [H, W], values in {0, 1}
    channel_names: list[str]

    def __post_init__(self):
        if self.image.ndim != 3:
            raise DataFormatError(f"{self.id}: image must be [C, H, W], got shape {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise DataFormatError(
                f"{self.id}: mask shape {self.mask.shape} does not match image {self.image.shape[1:]}"
            )
        if len(self.channel_names) != self.image.shape[0]:
            raise DataFormatError(
                f"{self.id}: {len(self.channel_names)} channel names for {self.image.shape[0]} channels"
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise DataFormatError(f"{self.id}: mask is not binary")
        if not np.isfinite(self.image).all():
            raise DataFormatError(f"{self.id}: image contains NaN or Inf")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.image.shape


@dataclass(frozen=True)
class ModalityScheme:
    """Named, possibly overlapping channel groups over a C-channel stack."""

    groups: tuple[tuple[str, tuple[int, ...]], ...]
    total_channels: int
    channel_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.groups:
            raise ConfigError("a modality scheme needs at least one group")
        names = [n for n, _ in self.groups]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate modality names in {names}")
        for name, idx in self.groups:
            if not idx:
                raise ConfigError(f"modality {name!r} has no channels")
            bad = [i for i in idx if not 0 <= i < self.total_channels]
            if bad:
                raise ConfigError(f"modality {name!r}: channel indices {bad} outside [0, {self.total_channels})")
        if self.channel_names is not None and len(self.channel_names) != self.total_channels:
            raise ConfigError("channel_names length differs from total_channels")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.groups]

    def __len__(self) -> int:
        return len(self.groups)

    def indices(self, name: str) -> tuple[int, ...]:
        for n, idx in self.groups:
            if n == name:
                return idx
        raise ConfigError(f"unknown modality {name!r}; known: {self.names}")

    def to_dict(self) -> dict:
        return {
            "total_channels": self.total_channels,
            "channel_names": list(self.channel_names) if self.channel_names else None,
            "groups": [{"name": n, "channels": list(idx)} for n, idx in self.groups],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModalityScheme":
        names = d.get("channel_names")
        return cls(
            groups=tuple((g["name"], tuple(int(i) for i in g["channels"])) for g in d["groups"]),
            total_channels=int(d["total_channels"]),
            channel_names=tuple(names) if names else None,
        )

    def permuted(self, order: Sequence[int]) -> "ModalityScheme":
        return ModalityScheme(tuple(self.groups[i] for i in order), self.total_channels, self.channel_names)


def default_scheme() -> ModalityScheme:
    """The six-modality grouping over the canonical 14-band stack."""
    return ModalityScheme(
        groups=(
            ("Sentinel-1", (10, 11)),
            ("Sentinel-2(RGB)", (2, 1, 0)),
            ("Sentinel-2(RGBNIR)", (2, 1, 0, 6)),
            ("Sentinel-2(AllBands)", tuple(range(10))),
            ("WorldCover", (12,)),
            ("NightTimeLight", (13,)),
        ),
        total_channels=14,
        channel_names=CHANNEL_NAMES,
    )


@dataclass
class DatasetManifest:
    root: Path
    samples: list[tuple[str, str]]  # (id, split)
    scheme: ModalityScheme
    normalization_stats: np.ndarray  # float64 [C, 2] of (mean, std)
    height: int = 0
    width: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        self.normalization_stats = np.asarray(self.normalization_stats, dtype=np.float64)
        if self.normalization_stats.shape != (self.scheme.total_channels, 2):
            raise DataFormatError(
                f"normalization stats shape {self.normalization_stats.shape}, "
                f"expected ({self.scheme.total_channels}, 2)"
            )
        if not (self.normalization_stats[:, 1] > 0).all():
            raise DataFormatError("normalization std must be > 0 for every channel")
        for _, split in self.samples:
            if split not in SPLITS:
                raise DataFormatError(f"unknown split {split!r}")

    def ids(self, split: str | None = None) -> list[str]:
        return [i for i, s in self.samples if split is None or s == split]

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "height": self.height,
            "width": self.width,
            "samples": [{"id": i, "split": s} for i, s in self.samples],
            "scheme": self.scheme.to_dict(),
            "normalization_stats": [{"mean": float(m), "std": float(s)} for m, s in self.normalization_stats],
            **self.extra,
        }

    def save(self) -> Path:
        path = self.root / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, root: str | os.PathLike) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.json"
        if not path.is_file():
            raise FileNotFoundError(f"no manifest.json in {root}")
        d = json.loads(path.read_text())
        known = {"format_version", "height", "width", "samples", "scheme", "normalization_stats"}
        manifest = cls(
            root=root,
            samples=[(s["id"], s["split"]) for s in d["samples"]],
            scheme=ModalityScheme.from_dict(d["scheme"]),
            normalization_stats=[(s["mean"], s["std"]) for s in d["normalization_stats"]],
            height=int(d.get("height", 0)),
            width=int(d.get("width", 0)),
            extra={k: v for k, v in d.items() if k not in known},
        )
        for sid, _ in manifest.samples:
            for suffix in ("_image.bin", "_image.json", "_mask.bin"):
                if not (root / f"{sid}{suffix}").is_file():
                    raise FileNotFoundError(f"manifest lists {sid!r} but {sid}{suffix} is missing")
        return manifest


# ---------------------------------------------------------------------------
# persistence


def save_sample(sample: MultimodalSample, root: str | os.PathLike) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    c, h, w = sample.image.shape
    header = {
        "format_version": FORMAT_VERSION,
        "id": sample.id,
        "channels": c,
        "height": h,
        "width": w,
        "shape": [c, h, w],
        "dtype": "float32",
        "byte_order": "little",
        "channel_names": list(sample.channel_names),
    }
    np.ascontiguousarray(sample.image, dtype="<f4").tofile(root / f"{sample.id}_image.bin")
    np.ascontiguousarray(sample.mask, dtype=np.uint8).tofile(root / f"{sample.id}_mask.bin")
    (root / f"{sample.id}_image.json").write_text(json.dumps(header, indent=2) + "\n")


def read_sample(root: str | os.PathLike, sample_id: str) -> MultimodalSample:
    """Load one sample from ``root`` trusting only its own header."""
    root = Path(root)
    paths = {k: root / f"{sample_id}{k}" for k in ("_image.json", "_image.bin", "_mask.bin")}
    for p in paths.values():
        if not p.is_file():
            raise FileNotFoundError(f"missing file {p}")
    header = json.loads(paths["_image.json"].read_text())
    c, h, w = int(header["channels"]), int(header["height"]), int(header["width"])
    if header.get("dtype", "float32") != "float32":
        raise DataFormatError(f"{sample_id}: unsupported dtype {header['dtype']!r}")
    image = np.fromfile(paths["_image.bin"], dtype="<f4")
    if image.size != c * h * w:
        raise DataFormatError(
            f"{sample_id}: header declares shape [{c},{h},{w}] ({c * h * w} values) "
            f"but image file holds {image.size} values"
        )
    mask = np.fromfile(paths["_mask.bin"], dtype=np.uint8)
    if mask.size != h * w:
        raise DataFormatError(f"{sample_id}: mask file holds {mask.size} values, expected {h * w}")
    return MultimodalSample(
        id=sample_id,
        image=image.astype(np.float32).reshape(c, h, w),
        mask=mask.reshape(h, w),
        channel_names=list(header["channel_names"]),
    )


def load_sample(manifest: DatasetManifest, sample_id: str) -> MultimodalSample:
    sample = read_sample(manifest.root, sample_id)
    expected = manifest.scheme.total_channels
    if sample.image.shape[0] != expected:
        raise DataFormatError(f"{sample_id}: {sample.image.shape[0]} channels, manifest scheme expects {expected}")
    names = manifest.scheme.channel_names
    if names is not None and tuple(sample.channel_names) != tuple(names):
        raise DataFormatError(f"{sample_id}: channel names {sample.channel_names} differ from manifest")
    return sample


def num_workers() -> int:
    """Data-loading parallelism, capped by ``MODLENS_NUM_WORKERS`` when set."""
    cap = os.environ.get("MODLENS_NUM_WORKERS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"MODLENS_NUM_WORKERS must be an integer, got {cap!r}") from None
    return n


def load_split(manifest: DatasetManifest, split: str | None) -> list[MultimodalSample]:
    ids = manifest.ids(split)
    workers = num_workers()
    if workers <= 1 or len(ids) < 8:
        return [load_sample(manifest, i) for i in ids]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: load_sample(manifest, i), ids))


# ---------------------------------------------------------------------------
# transforms


def random_crop(sample: MultimodalSample, size: int, rng: np.random.Generator, return_offset: bool = False):
    _, h, w = sample.image.shape
    if size > h or size > w or size < 1:
        raise ValueError(f"crop size {size} does not fit a {h}x{w} sample")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    out = MultimodalSample(
        id=sample.id,
        image=sample.image[:, top:top + size, left:left + size].copy(),
        mask=sample.mask[top:top + size, left:left + size].copy(),
        channel_names=list(sample.channel_names),
    )
    return (out, (top, left)) if return_offset else out


def normalize(sample: MultimodalSample, stats) -> MultimodalSample:
    """Per-channel standardisation ``(x - mean) / std``; the mask is passed through."""
    stats = np.asarray(stats, dtype=np.float64)
    c = sample.image.shape[0]
    if stats.shape != (c, 2):
        raise ValueError(f"stats shape {stats.shape} does not cover {c} channels")
    if not (stats[:, 1] > 0).all():
        raise ValueError("normalization std must be > 0")
    mean = stats[:, 0].reshape(c, 1, 1)
    std = stats[:, 1].reshape(c, 1, 1)
    image = ((sample.image - mean) / std).astype(np.float32)
    return MultimodalSample(sample.id, image, sample.mask, list(sample.channel_names))


def channel_stats(samples: Iterable[MultimodalSample]) -> np.ndarray:
    """Per-channel (mean, std) over all pixels of ``samples`` (population std)."""
    total = sq = None
    count = 0
    for s in samples:
        x = s.image.astype(np.float64).reshape(s.image.shape[0], -1)
        total = x.sum(1) if total is None else total + x.sum(1)
        sq = (x ** 2).sum(1) if sq is None else sq + (x ** 2).sum(1)
        count += x.shape[1]
    if not count:
        raise ValueError("cannot compute statistics of an empty sample set")
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean ** 2, 0.0))
    return np.stack([mean, std], axis=1)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    num_samples: int = 200
    height: int = 64
    width: int = 64
    seed: int = 0
    informative_groups: dict[str, float] = field(default_factory=lambda: {
        "WorldCover": 0.9,
        "NightTimeLight": 0.7,
        "Sentinel-2(RGB)": 0.3,
        "Sentinel-2(RGBNIR)": 0.3,
        "Sentinel-2(AllBands)": 0.3,
    })
    noise_groups: list[str] = field(default_factory=lambda: ["Sentinel-1"])
    val_fraction: float = 1 / 6
    test_fraction: float = 0.0
    # fraction of the area where a sensor's view of the scene disagrees with the label
    distractor_fraction: float = 0.08
    # per-sample probability that a sensor shows a plausible but unrelated scene
    stale_probability: float = 0.0
    scheme: ModalityScheme = field(default_factory=default_scheme)

    def validate(self) -> None:
        if self.num_samples < 1:
            raise ConfigError("num_samples must be >= 1")
        if self.height < 4 or self.width < 4:
            raise ConfigError("height and width must be >= 4")
        names = set(self.scheme.names)
        for key in list(self.informative_groups) + list(self.noise_groups):
            if key not in names:
                raise ConfigError(f"unknown modality group {key!r}; known: {self.scheme.names}")
        overlap = set(self.informative_groups) & set(self.noise_groups)
        if overlap:
            raise ConfigError(f"groups {sorted(overlap)} are both informative and noise")
        for key, s in self.informative_groups.items():
            if not 0.0 <= float(s) <= 1.0:
                raise ConfigError(f"strength of {key!r} must lie in [0, 1], got {s}")
        noise_ch = {i for g in self.noise_groups for i in self.scheme.indices(g)}
        inf_ch = {i for g, s in self.informative_groups.items() if s > 0 for i in self.scheme.indices(g)}
        if noise_ch & inf_ch:
            raise ConfigError(f"noise and informative groups share channels {sorted(noise_ch & inf_ch)}")
        for key in ("val_fraction", "test_fraction", "distractor_fraction", "stale_probability"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(f"{key} must lie in [0, 1]")
        if self.val_fraction + self.test_fraction > 1.0:
            raise ConfigError("val_fraction + test_fraction exceeds 1")

    def channel_strengths(self) -> np.ndarray:
        strength = np.zeros(self.scheme.total_channels)
        for g, s in self.informative_groups.items():
            for i in self.scheme.indices(g):
                strength[i] = max(strength[i], float(s))
        return strength

    def to_dict(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "height": self.height,
            "width": self.width,
            "seed": self.seed,
            "informative_groups": dict(self.informative_groups),
            "noise_groups": list(self.noise_groups),
            "val_fraction": self.val_fraction,
            "test_fraction": self.test_fraction,
            "distractor_fraction": self.distractor_fraction,
            "stale_probability": self.stale_probability,
        }


def _field(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    """Zero-mean, unit-variance low-frequency Gaussian random field."""
    f = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _standardize(x: np.ndarray) -> np.ndarray:
    s = x.std()
    return (x - x.mean()) / s if s > 1e-12 else np.zeros_like(x)


def _blob_mask(rng: np.random.Generator, h: int, w: int, sigma: float, coverage: float, k: int) -> np.ndarray:
    """Union of ``k`` thresholded smooth fields, each covering roughly ``coverage`` of the area."""
    out = np.zeros((h, w), dtype=bool)
    for _ in range(k):
        f = _field(rng, h, w, sigma)
        out |= f > np.quantile(f, 1.0 - coverage)
    return out


def _family(channel: str) -> str:
    if channel.startswith("B"):
        return "optical"
    if channel in ("VV", "VH"):
        return "radar"
    if channel == "WorldCover":
        return "landcover"
    if channel == "NTL":
        return "nightlight"
    return "generic"


_VISIBLE = ("B2", "B3", "B4")


def _clutter_group(channel: str) -> str:
    """Channels sharing one clutter field; visible and infrared optical bands differ (haze vs moisture)."""
    fam = _family(channel)
    if fam == "optical":
        return "visible" if channel in _VISIBLE else "infrared"
    return fam


# (offset, scale) bringing the unit-variance synthetic signal into a plausible value range
_PHYSICAL = {
    "optical": (0.15, 0.05),
    "radar": (-12.0, 3.0),
    "landcover": (30.0, 15.0),
    "nightlight": (5.0, 4.0),
    "generic": (0.0, 1.0),
}
# sign of the protected-area contrast per Sentinel-2 band (vegetation: dark visible, bright NIR)
_OPTICAL_GAIN = {"B2": -0.6, "B3": -0.3, "B4": -1.0, "B5": -0.2, "B6": 0.5, "B7": 0.8,
                 "B8": 1.0, "B8A": 0.9, "B11": -0.5, "B12": -0.7}


def _render_view(family: str, channel: str, view: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Mask-dependent signal of one channel given the sensor's (imperfect) view of the scene."""
    h, w = view.shape
    v = view.astype(np.float64)
    if family == "landcover":
        # tree cover (10) / grassland (30) inside, cropland (40) / built-up (50) outside
        sub = _field(rng, h, w, max(h, w) / 16) > 0
        classes = np.where(view, np.where(sub, 10.0, 30.0), np.where(sub, 40.0, 50.0))
        return _standardize(-classes)
    if family == "nightlight":
        lit = (1.0 - v) * np.exp(0.5 * _field(rng, h, w, max(h, w) / 16))
        return _standardize(ndimage.gaussian_filter(lit, 1.0, mode="wrap"))
    if family == "optical":
        gain = _OPTICAL_GAIN.get(channel, 1.0)
        return _standardize(gain * v + 0.15 * _field(rng, h, w, 2.0))
    if family == "radar":
        return _standardize(v * np.exp(0.3 * rng.standard_normal((h, w))))
    return _standardize(v)


def _make_sample(cfg: SynthConfig, index: int, seed_seq: np.random.SeedSequence) -> MultimodalSample:
    rng = np.random.default_rng(seed_seq)
    h, w = cfg.height, cfg.width
    sigma = max(h, w) / 10
    mask = _blob_mask(rng, h, w, sigma, 0.28, 2)

    names = list(cfg.scheme.channel_names or [f"C{i}" for i in range(cfg.scheme.total_channels)])
    strengths = cfg.channel_strengths()
    families = sorted({_family(n) for n in names})

    # each sensor family sees the scene with its own distractor regions, or (if stale) an unrelated scene
    views = {}
    for fam in families:
        if rng.random() < cfg.stale_probability:
            views[fam] = _blob_mask(rng, h, w, sigma, 0.28, 2)
        else:
            distractor = _blob_mask(rng, h, w, sigma / 2, cfg.distractor_fraction, 1) \
                if cfg.distractor_fraction > 0 else np.zeros((h, w), dtype=bool)
            views[fam] = mask ^ distractor

    # clutter is mostly shared by the channels of one sensor, so stacking bands does not average it
    # out; the visible and infrared optical bands see partly different clutter
    shared = {fam: _field(rng, h, w, sigma / 2) for fam in families}
    if "optical" in shared:
        for group in ("visible", "infrared"):
            shared[group] = _standardize(0.6 * shared["optical"] + 0.8 * _field(rng, h, w, sigma / 2))
    image = np.empty((len(names), h, w), dtype=np.float32)
    for c, name in enumerate(names):
        fam = _family(name)
        signal = _render_view(fam, name, views[fam], rng)
        # clutter shares the band's contrast sign so no band combination cancels it
        sign = -1.0 if _OPTICAL_GAIN.get(name, 1.0) < 0 and fam == "optical" else 1.0
        noise = _standardize(0.8 * sign * shared[_clutter_group(name)] + 0.3 * _field(rng, h, w, sigma / 2)
                             + 0.4 * rng.standard_normal((h, w)))
        s = strengths[c]
        offset, scale = _PHYSICAL[fam]
        image[c] = offset + scale * (s * signal + (1.0 - s) * noise)
    return MultimodalSample(f"s{index:05d}", image, mask.astype(np.uint8), names)


def _split_of(index: int, cfg: SynthConfig) -> str:
    n = cfg.num_samples
    n_val = int(round(n * cfg.val_fraction))
    n_test = int(round(n * cfg.test_fraction))
    n_train = n - n_val - n_test
    if index < n_train:
        return "train"
    return "val" if index < n_train + n_val else "test"


def generate_synthetic(config: SynthConfig, root: str | os.PathLike) -> DatasetManifest:
    """Write a synthetic dataset with known per-modality informativeness under ``root``.

    Output is a pure function of ``config``: the same config yields identical bytes.
    """
    config.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(config.seed).spawn(config.num_samples)
    samples, entries = [], []
    for i, ss in enumerate(children):
        sample = _make_sample(config, i, ss)
        split = _split_of(i, config)
        save_sample(sample, root)
        entries.append((sample.id, split))
        if split == "train":
            samples.append(sample)
    stats = channel_stats(samples) if samples else np.tile([0.0, 1.0], (config.scheme.total_channels, 1))
    stats[:, 1] = np.where(stats[:, 1] > 0, stats[:, 1], 1.0)
    manifest = DatasetManifest(
        root=root,
        samples=entries,
        scheme=config.scheme,
        normalization_stats=stats,
        height=config.height,
        width=config.width,
        extra={"synth_config": config.to_dict()},
    )
    manifest.save()
    return manifest
