"""Per-modality influence distributions: score collection, Silverman KDE and CSV export."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError
from .influence import compute_influence_vector
from .rasterdata import DatasetManifest, ModalityScheme
from .segnet import SegNet
from .trainer import TrainConfig, prepare_split

GRID_POINTS = 512
GRID_RANGE = (-0.1, 1.1)
FALLBACK_BANDWIDTH = 0.01


class DegenerateSampleError(ValueError):
    pass


@dataclass(frozen=True)
class InfluenceRow:
    sample_id: str
    modality: str
    raw_score: float

    @property
    def influence(self) -> float:
        return 1.0 - self.raw_score


@dataclass
class InfluenceTable:
    rows: list[InfluenceRow]
    modalities: list[str]

    def __len__(self) -> int:
        return len(self.rows)

    def values(self, modality: str, column: str = "influence") -> np.ndarray:
        return np.array([getattr(r, column) for r in self.rows if r.modality == modality], dtype=np.float64)

    def sorted_rows(self) -> list[InfluenceRow]:
        order = {m: i for i, m in enumerate(self.modalities)}
        return sorted(self.rows, key=lambda r: (order[r.modality], r.sample_id))

    def summary(self, column: str = "influence") -> list[dict]:
        out = []
        for m in self.modalities:
            v = self.values(m, column)
            q1, med, q3 = np.percentile(v, [25, 50, 75])
            out.append({"modality": m, "n": len(v), "mean": float(v.mean()), "median": float(med),
                        "iqr": float(q3 - q1)})
        return out


@dataclass
class DensityCurve:
    modality_name: str
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid)) if hasattr(np, "trapezoid") \
            else float(np.trapz(self.density, self.grid))


@torch.no_grad()
def collect_scores(model: SegNet, manifest: DatasetManifest, split: str = "val",
                   scheme: ModalityScheme | None = None, config: TrainConfig | None = None,
                   batch_size: int = 16) -> InfluenceTable:
    """Influence scores of every sample in ``split`` (N rows per sample)."""
    if not model.has_head:
        raise ConfigError("collecting influence scores needs a framework checkpoint")
    scheme = scheme or manifest.scheme
    config = config or TrainConfig()
    data = prepare_split(manifest, split, config)
    model.eval()
    rows = []
    for start in range(0, len(data), batch_size):
        image = torch.from_numpy(data.images[start:start + batch_size])
        vec = compute_influence_vector(model, image, scheme, config.occlusion_value)
        scores = vec.raw_scores.double().numpy()
        for b, sid in enumerate(data.ids[start:start + batch_size]):
            rows.extend(InfluenceRow(sid, name, float(scores[b, i])) for i, name in enumerate(scheme.names))
    return InfluenceTable(rows, list(scheme.names))


def silverman_bandwidth(samples) -> float:
    """``0.9 * min(sd, IQR / 1.34) * n**-0.2`` with sample sd (ddof=1) and linearly interpolated quartiles.

    When the IQR is zero but the sd is not, the sd alone is used.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    n = x.size
    if n < 2:
        raise DegenerateSampleError("bandwidth needs at least two samples")
    if np.ptp(x) == 0.0:  # np.std of equal values can be a rounding residual, not 0
        raise DegenerateSampleError("all samples are equal")
    sd = float(np.std(x, ddof=1))
    q1, q3 = np.percentile(x, [25, 75], method="linear")
    iqr = float(q3 - q1)
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * n ** -0.2


def kde(samples, bandwidth: float, grid, modality_name: str = "") -> DensityCurve:
    """Gaussian kernel density estimate evaluated on ``grid``."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    g = np.asarray(grid, dtype=np.float64)
    if x.size == 0:
        raise ValueError("kde of an empty sample")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be > 0")
    if np.any(np.diff(g) < 0):
        raise ValueError("grid must be sorted")
    z = (g[:, None] - x[None, :]) / bandwidth
    density = np.exp(-0.5 * z * z).sum(axis=1) / (x.size * bandwidth * math.sqrt(2 * math.pi))
    return DensityCurve(modality_name, g, density, float(bandwidth))


def default_grid(samples, bandwidth: float, points: int = GRID_POINTS) -> np.ndarray:
    """``points`` evenly spaced over [-0.1, 1.1], widened to 5 bandwidths beyond the data if needed."""
    x = np.asarray(samples, dtype=np.float64)
    lo = min(GRID_RANGE[0], float(x.min()) - 5 * bandwidth)
    hi = max(GRID_RANGE[1], float(x.max()) + 5 * bandwidth)
    return np.linspace(lo, hi, points)


def modality_density(table: InfluenceTable, modality: str, column: str = "influence") -> DensityCurve:
    v = table.values(modality, column)
    try:
        h = silverman_bandwidth(v)
    except DegenerateSampleError:
        h = FALLBACK_BANDWIDTH
    return kde(v, h, default_grid(v, h), modality)


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def export_violin_data(table: InfluenceTable, out_dir, column: str = "influence") -> dict[str, Path]:
    """Write ``influence_scores.csv``, ``kde.csv`` and ``influence_summary.csv`` into ``out_dir``.

    The densities in ``kde.csv`` are of ``column`` (reported influence by default).
    """
    if not table.rows:
        raise ValueError("cannot export an empty influence table")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{k}.csv" for k in ("influence_scores", "kde", "influence_summary")}

    with open(paths["influence_scores"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "modality", "raw_score", "influence"])
        for r in table.sorted_rows():
            w.writerow([r.sample_id, r.modality, _fmt(r.raw_score), _fmt(r.influence)])

    with open(paths["kde"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["modality", "bandwidth", "x", "density"])
        for m in table.modalities:
            curve = modality_density(table, m, column)
            for x, d in zip(curve.grid, curve.density):
                w.writerow([m, _fmt(curve.bandwidth), _fmt(x), _fmt(d)])

    with open(paths["influence_summary"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["modality", "n", "mean", "median", "iqr"])
        for s in table.summary(column):
            w.writerow([s["modality"], s["n"], _fmt(s["mean"]), _fmt(s["median"]), _fmt(s["iqr"])])
    return paths
