"""Evaluation protocols comparing a trained generator with the device model.

Every report is a list of plain row dicts with a fixed header and can be
written as CSV. Each grid cell draws from its own rng stream derived from
``(seed, cell index)`` so results do not depend on evaluation order.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cgan import DriftModel
from .dataset import DriftDataset
from .device import DeviceParams, propagate, resistance_from_state, state_from_resistance

DEFAULT_R_INITS = (1e2, 1e3, 1e4, 1e5, 3e5, 7.5e5)
DEFAULT_DELAYS = (1, 10, 100, 500, 1000)
CONSISTENCY_CONDITIONS = (5, 10, 100, 250, 500)


def cell_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


class OracleSampler:
    """Ground-truth sampler backed by the switch model.

    ``method="exact"`` (default) propagates independent switches in closed
    form, which matches event-by-event simulation for any delay.
    """

    source = "oracle"

    def __init__(self, params: DeviceParams | None = None, method: str = "exact",
                 max_dt: float = 1.0):
        self.params = params or DeviceParams()
        self.method = method
        self.max_dt = max_dt

    def sample(self, r_init: float, delay: float, n: int, rng: np.random.Generator) -> np.ndarray:
        n0 = np.full(n, state_from_resistance(r_init, self.params), dtype=np.int64)
        states = propagate(n0, float(delay), self.params, rng, self.method, self.max_dt)
        return resistance_from_state(np.asarray(states, dtype=np.float64), self.params)


class GanSampler:
    """Samples the generator; ``steps > 1`` splits the delay into equal chained calls."""

    source = "gan"

    def __init__(self, model: DriftModel, steps: int = 1):
        self.model = model
        self.steps = steps

    def sample(self, r_init: float, delay: float, n: int, rng: np.random.Generator) -> np.ndarray:
        if delay <= 0:
            return np.full(n, float(r_init))
        return self.model.sample(np.full(n, float(r_init)), float(delay), rng, self.steps)


@dataclass
class Report:
    header: tuple
    rows: list = field(default_factory=list)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.header))
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return path

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def __len__(self) -> int:
        return len(self.rows)


class MomentReport(Report):
    HEADER = ("r_init", "delay", "source", "mean_final", "std_final", "n_samples")

    def __init__(self, rows=None):
        super().__init__(self.HEADER, list(rows or []))

    def grid(self) -> list[tuple[float, float]]:
        return [(r["r_init"], r["delay"]) for r in self.rows]


class ConsistencyReport(Report):
    HEADER = ("r_init", "delay_condition", "steps", "mean_change", "std_change", "total_delay")

    def __init__(self, rows=None):
        super().__init__(self.HEADER, list(rows or []))


def delay_consistency(model: DriftModel, r_inits, total: int = 500,
                      conditions=CONSISTENCY_CONDITIONS, n_samples: int = 100,
                      seed: int = 0) -> ConsistencyReport:
    """Mean/std of ``final - initial`` (ohms) reached via ``total/d`` chained calls at delay ``d``."""
    total = int(total)
    for d in conditions:
        if int(d) != d or d <= 0 or total % int(d):
            raise ValueError(f"delay condition {d} does not divide total {total}")
    rep = ConsistencyReport()
    idx = 0
    for r0 in r_inits:
        for d in conditions:
            d = int(d)
            steps = total // d
            rng = cell_rng(seed, idx)
            idx += 1
            rbar0 = np.full(n_samples, model.norm.res(float(r0)))
            final = model.norm.inv_res(model.sample_normalized(rbar0, total, rng, steps))
            change = final - float(r0)
            rep.rows.append({"r_init": float(r0), "delay_condition": d, "steps": steps,
                             "mean_change": float(change.mean()),
                             "std_change": float(change.std(ddof=1)) if n_samples > 1 else 0.0,
                             "total_delay": d * steps})
    return rep


def consistency_spread(report: ConsistencyReport) -> float:
    """Max-minus-min of mean change across conditions, averaged over r_init."""
    by_init: dict[float, list[float]] = {}
    for r in report.rows:
        by_init.setdefault(r["r_init"], []).append(r["mean_change"])
    return float(np.mean([max(v) - min(v) for v in by_init.values()]))


def conditioned_moments(sampler, r_inits=DEFAULT_R_INITS, delays=DEFAULT_DELAYS,
                        n: int = 100, seed: int = 0) -> MomentReport:
    if n < 2:
        raise ValueError("need at least 2 samples per condition")
    rep = MomentReport()
    idx = 0
    for r0 in r_inits:
        for d in delays:
            x = sampler.sample(float(r0), float(d), n, cell_rng(seed, idx))
            idx += 1
            rep.rows.append({"r_init": float(r0), "delay": float(d), "source": sampler.source,
                             "mean_final": float(np.mean(x)), "std_final": float(np.std(x, ddof=1)),
                             "n_samples": int(n)})
    return rep


def moment_match_score(gan: MomentReport, oracle: MomentReport,
                       min_delay: float | None = None) -> tuple[float, float]:
    """Mean |log mean ratio| and mean |log std ratio| over the shared grid.

    ``min_delay`` restricts the comparison to cells with ``delay > min_delay``.
    """
    if gan.grid() != oracle.grid():
        raise ValueError("reports do not share the same condition grid")
    mu, sd = [], []
    for g, o in zip(gan.rows, oracle.rows):
        if min_delay is not None and not g["delay"] > min_delay:
            continue
        mu.append(abs(math.log(g["mean_final"]) - math.log(o["mean_final"])))
        # a zero spread on both sides is a perfect match
        if g["std_final"] == o["std_final"]:
            sd.append(0.0)
        elif g["std_final"] <= 0 or o["std_final"] <= 0:
            sd.append(math.inf)
        else:
            sd.append(abs(math.log(g["std_final"]) - math.log(o["std_final"])))
    if not mu:
        raise ValueError("no cells left to compare")
    return float(np.mean(mu)), float(np.mean(sd))


@dataclass
class Histogram:
    delays: list
    edges: np.ndarray
    counts: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    HEADER = ("delay", "bin_lo", "bin_hi", "count")

    def rows(self) -> list[dict]:
        out = []
        for i, d in enumerate(self.delays):
            for j in range(len(self.edges) - 1):
                out.append({"delay": d, "bin_lo": float(self.edges[j]),
                            "bin_hi": float(self.edges[j + 1]), "count": int(self.counts[i, j])})
        return out

    def summary_rows(self) -> list[dict]:
        return [{"delay": d, "mean": float(m), "std": float(s), "n": int(c)}
                for d, m, s, c in zip(self.delays, self.means, self.stds, self.counts.sum(axis=1))]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        Report(self.HEADER, self.rows()).to_csv(path)
        Report(("delay", "mean", "std", "n"), self.summary_rows()).to_csv(
            path.with_name(path.stem + "_summary.csv"))
        return path


def final_value_histogram(source, delays, bins: int = 50, r_inits=None, n: int = 100,
                          seed: int = 0, edges=None, log_bins: bool = True) -> Histogram:
    """Histogram of resistances at each delay.

    ``source`` is a :class:`DriftDataset` (values read off the series at
    ``t = delay``) or a sampler, in which case ``n`` samples are drawn per
    entry of ``r_inits``.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    samples = []
    for k, d in enumerate(delays):
        if isinstance(source, DriftDataset):
            j = round(d / source.t_sample)
            if not 0 <= j < source.length:
                raise ValueError(f"delay {d} outside the dataset's time range")
            samples.append(source.values[:, j])
        else:
            if r_inits is None:
                raise ValueError("r_inits required when sampling")
            rng = cell_rng(seed, k)
            samples.append(np.concatenate([source.sample(float(r), float(d), n, rng) for r in r_inits]))
    if edges is None:
        lo = min(s.min() for s in samples)
        hi = max(s.max() for s in samples)
        if hi <= lo:
            hi = lo * (1 + 1e-9) + 1e-12
        edges = np.geomspace(lo, hi, bins + 1) if log_bins else np.linspace(lo, hi, bins + 1)
        edges[-1] = np.nextafter(edges[-1], np.inf)
    edges = np.asarray(edges, dtype=np.float64)
    counts = np.array([np.histogram(s, edges)[0] for s in samples])
    return Histogram(list(delays), edges, counts,
                     np.array([s.mean() for s in samples]), np.array([s.std() for s in samples]))


def series_steps(d: float) -> int:
    return math.ceil((1000 + d) / d)


def series_dump(model: DriftModel, r_inits, d: float, steps: int | None = None,
                per_init: int = 20, seed: int = 0) -> Report:
    """Closed-loop trajectories for plotting (no statistics)."""
    if not d > 0:
        raise ValueError("delay must be positive")
    steps = series_steps(d) if steps is None else steps
    rep = Report(("r_init", "series", "step", "t_seconds", "resistance_ohms"))
    if per_init == 0:
        return rep
    for k, r0 in enumerate(r_inits):
        rng = cell_rng(seed, k)
        for s in range(per_init):
            ser = model.generate_sequence(float(r0), float(d), steps, rng)
            for j, v in enumerate(ser.values):
                rep.rows.append({"r_init": float(r0), "series": s, "step": j,
                                 "t_seconds": float(j * d), "resistance_ohms": float(v)})
    return rep


def is_unimodal(counts, tolerance: float = 0.1) -> bool:
    """True when counts rise to a single peak and then fall.

    Wiggles smaller than ``tolerance`` times the peak count are ignored.
    """
    c = np.asarray(counts, dtype=np.float64)
    if c.sum() == 0:
        return False
    slack = tolerance * c.max()
    peak = int(np.argmax(c))
    rising = c[: peak + 1]
    falling = c[peak:]
    ok_up = np.all(np.maximum.accumulate(rising) - rising <= slack)
    ok_down = np.all(np.maximum.accumulate(falling[::-1]) - falling[::-1] <= slack)
    return bool(ok_up and ok_down)
