"""Log-resistance and difference normalization.

Resistances are mapped to ``(ln r - mu_R) / sigma_R``. The generator works
on differences of normalized resistances scaled by ``sigma_Dbar``, the
spread of one-sample (delay 1) differences across the dataset. Differences
are not centred and not scaled by delay.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class DegenerateStatsError(ValueError):
    """Raised when a dataset yields a zero or non-finite spread."""


@dataclass(frozen=True)
class NormStats:
    mu_R: float
    sigma_R: float
    mu_Dbar: float
    sigma_Dbar: float
    dataset_hash: str = ""

    def __post_init__(self):
        vals = (self.mu_R, self.sigma_R, self.mu_Dbar, self.sigma_Dbar)
        if not all(math.isfinite(v) for v in vals):
            raise DegenerateStatsError(f"non-finite normalization stats {vals}")
        if self.sigma_R <= 0 or self.sigma_Dbar <= 0:
            raise DegenerateStatsError(
                f"degenerate spread: sigma_R={self.sigma_R}, sigma_Dbar={self.sigma_Dbar}")

    def to_dict(self) -> dict:
        return asdict(self)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _as_series(data) -> list[np.ndarray]:
    if hasattr(data, "values") and not isinstance(data, np.ndarray):
        data = data.values
    if isinstance(data, np.ndarray):
        rows = [np.asarray(r, dtype=np.float64) for r in np.atleast_2d(data)]
    else:
        rows = [np.asarray(r, dtype=np.float64).ravel() for r in data]
    if not rows or any(r.size == 0 for r in rows):
        raise ValueError("dataset must contain at least one nonempty series")
    return rows


def _two_level_mean(rows: Sequence[np.ndarray]) -> float:
    # per-series mean, then mean over series; math.fsum keeps the result
    # independent of point and series order
    return math.fsum(math.fsum(r) / r.size for r in rows) / len(rows)


def compute_resistance_stats(data) -> tuple[float, float]:
    """Two-level mean and standard deviation of ``ln r``.

    ``data`` is a :class:`DriftDataset`, a 2-D array or a list of 1-D series.
    """
    rows = _as_series(data)
    if any(np.any(~(r > 0)) for r in rows):
        raise ValueError("resistances must be positive")
    logs = [np.log(r) for r in rows]
    mu = _two_level_mean(logs)
    sigma = math.sqrt(_two_level_mean([(lr - mu) ** 2 for lr in logs]))
    return mu, sigma


def compute_diff_stats(normalized) -> tuple[float, float]:
    """Two-level mean and standard deviation of consecutive differences."""
    rows = _as_series(normalized)
    if any(r.size < 2 for r in rows):
        raise ValueError("every series needs at least 2 points for differences")
    diffs = [np.diff(r) for r in rows]
    mu = _two_level_mean(diffs)
    sigma = math.sqrt(_two_level_mean([(d - mu) ** 2 for d in diffs]))
    return mu, sigma


def normalize_resistance(r, mu_R: float, sigma_R: float):
    r = np.asarray(r, dtype=np.float64)
    if np.any(~(r > 0)):
        raise ValueError("resistance must be positive")
    out = (np.log(r) - mu_R) / sigma_R
    return float(out) if out.ndim == 0 else out


def denormalize_resistance(rbar, mu_R: float, sigma_R: float):
    out = np.exp(sigma_R * np.asarray(rbar, dtype=np.float64) + mu_R)
    return float(out) if out.ndim == 0 else out


def normalize_diff(rbar_final, rbar_init, sigma_Dbar: float):
    return (np.asarray(rbar_final) - rbar_init) / sigma_Dbar


def denormalize_diff(rbar_diff, rbar_init, sigma_Dbar: float):
    return rbar_init + np.asarray(rbar_diff) * sigma_Dbar


class Normalizer:
    """Bound transforms for one set of :class:`NormStats`."""

    def __init__(self, stats: NormStats):
        self.stats = stats

    def res(self, r):
        return normalize_resistance(r, self.stats.mu_R, self.stats.sigma_R)

    def inv_res(self, rbar):
        return denormalize_resistance(rbar, self.stats.mu_R, self.stats.sigma_R)

    def diff(self, rbar_final, rbar_init):
        return normalize_diff(rbar_final, rbar_init, self.stats.sigma_Dbar)

    def inv_diff(self, rbar_diff, rbar_init):
        return denormalize_diff(rbar_diff, rbar_init, self.stats.sigma_Dbar)


def compute_stats(dataset) -> NormStats:
    """All four statistics for a dataset; raises on degenerate spread."""
    mu_R, sigma_R = compute_resistance_stats(dataset)
    if not sigma_R > 0:
        raise DegenerateStatsError("sigma_R is zero: resistances are constant")
    normalized = [(np.log(r) - mu_R) / sigma_R for r in _as_series(dataset)]
    mu_D, sigma_D = compute_diff_stats(normalized)
    if not sigma_D > 0:
        raise DegenerateStatsError("sigma_Dbar is zero: differences are constant")
    h = dataset.content_hash() if hasattr(dataset, "content_hash") else ""
    return NormStats(mu_R, sigma_R, mu_D, sigma_D, h)


def save_stats(stats: NormStats, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # json emits shortest round-trip reprs (up to 17 significant digits)
    path.write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True))
    return path


def load_stats(path: str | os.PathLike) -> NormStats:
    d = json.loads(Path(path).read_text())
    return NormStats(float(d["mu_R"]), float(d["sigma_R"]), float(d["mu_Dbar"]),
                     float(d["sigma_Dbar"]), d.get("dataset_hash", ""))
