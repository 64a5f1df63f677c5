"""Drift series generation and the on-disk dataset format.

Dataset files are a CSV ``series_id,t_seconds,resistance_ohms`` sorted by
series then time, plus a JSON sidecar ``<stem>.meta.json`` holding the seed,
device parameters and sampling metadata.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .device import (
    DeviceParams,
    METHODS,
    resistance_from_state,
    state_from_resistance,
    step_gillespie,
    step_exact,
    switch_rates,
)

CSV_HEADER = "series_id,t_seconds,resistance_ohms"


@dataclass
class DriftSeries:
    r_init: float
    t_sample: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.size == 0:
            raise ValueError("series must be nonempty")
        if np.any(self.values <= 0):
            raise ValueError("resistances must be positive")

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.values.size) * self.t_sample


@dataclass
class DriftDataset:
    """A stack of equally sampled series, ``values[i, j]`` in ohms."""

    values: np.ndarray
    t_tot: float
    t_sample: float
    seed: int | None = None
    params: DeviceParams = field(default_factory=DeviceParams)
    method: str = "tau_leap"

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.values.size == 0:
            raise ValueError("dataset is empty")
        if not np.all(self.values > 0):
            raise ValueError("resistances must be positive and finite")
        expected = round(self.t_tot / self.t_sample) + 1
        if self.values.shape[1] != expected:
            raise ValueError(
                f"series length {self.values.shape[1]} != t_tot/t_sample + 1 = {expected}")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def series(self) -> list[DriftSeries]:
        return [DriftSeries(float(v[0]), self.t_sample, v) for v in self.values]

    @property
    def r_range(self) -> tuple[float, float]:
        """Range spanned by the initial resistances."""
        return float(self.values[:, 0].min()), float(self.values[:, 0].max())

    def content_hash(self) -> str:
        return dataset_hash(self.values, self.t_sample)


def dataset_hash(values: np.ndarray, t_sample: float) -> str:
    h = hashlib.sha256()
    arr = np.ascontiguousarray(values, dtype="<f8")
    h.update(repr(arr.shape).encode())
    h.update(repr(float(t_sample)).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def series_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for one series, stable under reordering and parallelism."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _evolve_states(n0: int, steps: int, dt: float, method: str,
                   p: DeviceParams, rng: np.random.Generator) -> np.ndarray:
    states = np.empty(steps + 1, dtype=np.int64)
    states[0] = n = n0
    if method == "tau_leap":
        r_up, r_down = switch_rates(p)
        p_up = -math.expm1(-r_up * dt)
        p_down = -math.expm1(-r_down * dt)
        N = int(p.N)
        binomial = rng.binomial
        for k in range(1, steps + 1):
            n = n + binomial(N - n, p_up) - binomial(n, p_down)
            n = min(max(n, 0), N)
            states[k] = n
    elif method == "gillespie":
        for k in range(1, steps + 1):
            n = step_gillespie(n, dt, p, rng)
            states[k] = n
    elif method == "exact":
        for k in range(1, steps + 1):
            n = step_exact(n, dt, p, rng)
            states[k] = n
    else:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return states


def _num_steps(t_tot: float, t_sample: float) -> int:
    if not t_tot > 0 or not t_sample > 0:
        raise ValueError("t_tot and t_sample must be positive")
    steps = round(t_tot / t_sample)
    if abs(steps * t_sample - t_tot) > 1e-9 * max(1.0, t_tot):
        raise ValueError(f"t_tot={t_tot} is not an integer multiple of t_sample={t_sample}")
    return steps


def simulate_series(r_init: float, t_tot: float, t_sample: float,
                    method: str = "tau_leap", p: DeviceParams | None = None,
                    rng: np.random.Generator | None = None) -> DriftSeries:
    """Simulate one drift trajectory sampled every ``t_sample`` seconds.

    The initial resistance is snapped to the nearest representable switch
    count, so ``values[0]`` is the quantized ``r_init``.
    """
    p = p or DeviceParams()
    rng = rng if rng is not None else np.random.default_rng()
    steps = _num_steps(t_tot, t_sample)
    n0 = state_from_resistance(r_init, p)
    states = _evolve_states(n0, steps, t_sample, method, p, rng)
    values = resistance_from_state(states.astype(np.float64), p)
    return DriftSeries(float(values[0]), t_sample, values)


def _simulate_row(args):
    r_init, index, seed, t_tot, t_sample, method, p = args
    return simulate_series(r_init, t_tot, t_sample, method, p, series_rng(seed, index)).values


def initial_grid(count: int, r_min: float, r_max: float) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be >= 1")
    if count == 1:
        return np.array([float(r_min)])
    return np.linspace(r_min, r_max, count)


def generate_dataset(count: int = 5000, r_min: float = 100.0, r_max: float = 750e3,
                     t_tot: float = 1000.0, t_sample: float = 1.0,
                     p: DeviceParams | None = None, seed: int = 0,
                     method: str = "tau_leap", threads: int = 1) -> DriftDataset:
    p = p or DeviceParams()
    if not 0 < r_min < r_max:
        raise ValueError(f"need 0 < r_min < r_max, got [{r_min}, {r_max}]")
    if r_max >= 1.0 / p.g_parallel:
        raise ValueError(
            f"r_max={r_max} is outside the readout range (< {1.0 / p.g_parallel} ohm)")
    _num_steps(t_tot, t_sample)
    r_inits = initial_grid(count, r_min, r_max)
    jobs = [(float(r), i, seed, t_tot, t_sample, method, p) for i, r in enumerate(r_inits)]
    if threads > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            rows = list(ex.map(_simulate_row, jobs, chunksize=max(1, count // (4 * threads))))
    else:
        rows = [_simulate_row(j) for j in jobs]
    return DriftDataset(np.vstack(rows), t_tot, t_sample, seed, p, method)


def meta_path(csv_path: str | os.PathLike) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".meta.json")


def save_dataset(ds: DriftDataset, path: str | os.PathLike) -> tuple[Path, Path]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count, length = ds.values.shape
    ids = np.repeat(np.arange(count), length)
    times = np.tile(np.arange(length) * ds.t_sample, count)
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        np.savetxt(fh, np.column_stack([ids, times, ds.values.ravel()]),
                   fmt=("%d", "%.17g", "%.17g"), delimiter=",")
    meta = {
        "seed": ds.seed,
        "params": ds.params.to_dict(),
        "t_tot": ds.t_tot,
        "t_sample": ds.t_sample,
        "count": count,
        "method": ds.method,
        "dataset_hash": ds.content_hash(),
    }
    mpath = meta_path(path)
    mpath.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path, mpath


def load_dataset(path: str | os.PathLike) -> DriftDataset:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    if rows.size == 0:
        raise ValueError(f"{path}: no data rows")
    ids = rows[:, 0].astype(np.int64)
    count = int(ids.max()) + 1
    if rows.shape[0] % count:
        raise ValueError(f"{path}: series have unequal lengths")
    length = rows.shape[0] // count
    values = rows[:, 2].reshape(count, length)
    if np.any(ids.reshape(count, length) != np.arange(count)[:, None]):
        raise ValueError(f"{path}: rows not sorted by series_id")
    t = rows[:length, 1]
    t_sample = float(t[1] - t[0]) if length > 1 else 1.0
    meta = {}
    mpath = meta_path(path)
    if mpath.exists():
        meta = json.loads(mpath.read_text())
    params = DeviceParams.from_dict(meta["params"]) if "params" in meta else DeviceParams()
    t_tot = float(meta.get("t_tot", t[-1]))
    t_sample = float(meta.get("t_sample", t_sample))
    return DriftDataset(values, t_tot, t_sample, meta.get("seed"), params,
                        meta.get("method", "tau_leap"))
