"""Multilevel storage quantization optimized through the drift generator.

A scheme is a list of storage levels and the interior decoding boundaries
between them, all in normalized log-resistance. Level ``i`` decodes
correctly when the drifted resistance lands in ``[B[i], B[i+1])`` with
``B[0] = -inf`` and ``B[L] = +inf``.

The loss has three squared-hinge terms with margin ``rho``:

* crossover: generator samples drawn from each level must stay at least
  ``rho`` inside that level's bin;
* ordering (weight ``lambda1``): each level must sit at least ``rho`` inside
  its own bin;
* dynamic range (weight ``lambda2``): the lowest and highest levels must stay
  ``rho`` inside ``[N_res(r_qmin), N_res(r_qmax)]``.

Noise draws are taken outside the gradient path, so gradients through the
generator are exact pathwise derivatives.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .cgan import DriftModel
from .nn import Adam
from .normalization import NormStats, Normalizer

log = logging.getLogger(__name__)

BIT_LADDER = (1, 2, 4, 8, 16)


class SchemeError(ValueError):
    """A scheme violates its ordering invariants."""


@dataclass
class QuantizerConfig:
    rho: float = 0.05
    lambda1: float = 10.0
    lambda2: float | None = None  # None -> |L| / 2
    r_qmin: float = 1e4
    r_qmax: float = 5e5
    mc_trials: int = 32
    lr: float = 1e-3
    plateau_patience: int = 25
    lr_decay: float = 0.9
    max_steps: int = 10_000
    converge_window: int = 200
    converge_tol: float = 1e-8

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not 0 < self.r_qmin < self.r_qmax:
            raise ValueError("need 0 < r_qmin < r_qmax")
        if self.mc_trials < 1 or self.max_steps < 1:
            raise ValueError("mc_trials and max_steps must be >= 1")

    def lam2(self, num_levels: int) -> float:
        return num_levels / 2 if self.lambda2 is None else self.lambda2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown quantizer config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class QuantizationScheme:
    levels: np.ndarray
    boundaries: np.ndarray
    delay: float
    stats: NormStats

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.float64).reshape(-1)
        self.boundaries = np.asarray(self.boundaries, dtype=np.float64).reshape(-1)
        if self.levels.size < 1 or self.boundaries.size != self.levels.size - 1:
            raise ValueError("need |L| >= 1 levels and |L| - 1 interior boundaries")

    @property
    def num_levels(self) -> int:
        return self.levels.size

    @property
    def full_boundaries(self) -> np.ndarray:
        return np.concatenate([[-np.inf], self.boundaries, [np.inf]])

    @property
    def levels_ohms(self) -> np.ndarray:
        return np.atleast_1d(Normalizer(self.stats).inv_res(self.levels))

    @property
    def boundaries_ohms(self) -> np.ndarray:
        return np.atleast_1d(Normalizer(self.stats).inv_res(self.boundaries))

    def violations(self) -> list[str]:
        out = []
        if np.any(np.diff(self.levels) <= 0):
            out.append("levels are not strictly increasing")
        if np.any(np.diff(self.boundaries) <= 0):
            out.append("boundaries are not strictly increasing")
        B = self.full_boundaries
        for i, l in enumerate(self.levels):
            if not B[i] < l < B[i + 1]:
                out.append(f"level {i} ({l:.4g}) outside its bin [{B[i]:.4g}, {B[i + 1]:.4g})")
        return out

    def validate(self) -> None:
        v = self.violations()
        if v:
            raise SchemeError("; ".join(v))

    def bin_midpoint_offsets(self) -> np.ndarray:
        """``level - bin midpoint`` for bins with two finite edges."""
        B = self.boundaries
        return np.array([self.levels[i] - 0.5 * (B[i - 1] + B[i])
                         for i in range(1, self.num_levels - 1)])

    def to_dict(self, config: QuantizerConfig | None = None, checkpoint_hash: str = "") -> dict:
        return {
            "delay": self.delay,
            "levels_ohms": self.levels_ohms.tolist(),
            "boundaries_ohms": self.boundaries_ohms.tolist() if self.boundaries.size else [],
            "levels_normalized": self.levels.tolist(),
            "boundaries_normalized": self.boundaries.tolist(),
            "config": config.to_dict() if config else None,
            "checkpoint_hash": checkpoint_hash,
            "stats": self.stats.to_dict(),
        }

    def save(self, path, config: QuantizerConfig | None = None, checkpoint_hash: str = "") -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(config, checkpoint_hash), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "QuantizationScheme":
        d = json.loads(Path(path).read_text())
        return cls(np.array(d["levels_normalized"]), np.array(d["boundaries_normalized"]),
                   float(d["delay"]), NormStats(**d["stats"]))


def decode_normalized(rbar, sch: QuantizationScheme):
    """Bin index of normalized resistance(s); ties go to the upper bin."""
    out = np.searchsorted(sch.boundaries, rbar, side="right")
    return int(out) if np.ndim(out) == 0 else out


def decode(r, sch: QuantizationScheme):
    return decode_normalized(Normalizer(sch.stats).res(r), sch)


def _hinge(x):
    """(min(x, 0))^2 and its derivative."""
    m = np.minimum(x, 0.0)
    return m * m, 2.0 * m


@dataclass
class LossResult:
    loss: float
    grad_levels: np.ndarray
    grad_boundaries: np.ndarray
    terms: dict = field(default_factory=dict)


def quantization_loss(levels, boundaries, d: float, model: DriftModel, cfg: QuantizerConfig,
                      rng: np.random.Generator | None = None, z: np.ndarray | None = None
                      ) -> LossResult:
    """Monte Carlo loss and exact gradients w.r.t. levels and interior boundaries.

    ``z`` of shape ``(L, mc_trials, z_dim)`` freezes the noise draws.
    """
    levels = np.asarray(levels, dtype=np.float64)
    bounds = np.asarray(boundaries, dtype=np.float64)
    L, M, rho = levels.size, cfg.mc_trials, cfg.rho
    G = model.G
    if z is None:
        z = rng.standard_normal((L, M, G.z_dim))
    z = np.asarray(z).reshape(L * M, G.z_dim)
    inputs = np.repeat(levels, M)
    samples, cache = G.forward_cached(inputs, float(d), z, model.stats.sigma_Dbar)
    if not np.all(np.isfinite(samples)):
        raise FloatingPointError("generator produced non-finite samples")
    samples = samples.reshape(L, M)

    g_samples = np.zeros((L, M))
    g_levels = np.zeros(L)
    g_bounds = np.zeros(L - 1)

    # crossover: lower edge of bin i is bounds[i-1], upper edge is bounds[i]
    cross = 0.0
    if L > 1:
        lo = samples[1:] - bounds[:, None] - rho
        v, dv = _hinge(lo)
        cross += v.sum() / M
        g_samples[1:] += dv / M
        g_bounds -= dv.sum(axis=1) / M
        hi = bounds[:, None] - samples[:-1] - rho
        v, dv = _hinge(hi)
        cross += v.sum() / M
        g_samples[:-1] -= dv / M
        g_bounds += dv.sum(axis=1) / M

    order = 0.0
    lam1 = cfg.lambda1
    if L > 1:
        v, dv = _hinge(levels[1:] - bounds - rho)
        order += v.sum()
        g_levels[1:] += lam1 * dv
        g_bounds -= lam1 * dv
        v, dv = _hinge(bounds - levels[:-1] - rho)
        order += v.sum()
        g_levels[:-1] -= lam1 * dv
        g_bounds += lam1 * dv

    norm = model.norm
    lam2 = cfg.lam2(L)
    q_lo, q_hi = norm.res(cfg.r_qmin), norm.res(cfg.r_qmax)
    v_lo, dv_lo = _hinge(levels[0] - q_lo - rho)
    v_hi, dv_hi = _hinge(q_hi - levels[-1] - rho)
    g_levels[0] += lam2 * dv_lo
    g_levels[-1] -= lam2 * dv_hi
    rng_term = float(v_lo + v_hi)

    if np.any(g_samples):
        _, g_in = G.backward(cache, g_samples.reshape(-1))
        g_levels += g_in.reshape(L, M).sum(axis=1)

    loss = float(cross + lam1 * order + lam2 * rng_term)
    return LossResult(loss, g_levels, g_bounds,
                      {"crossover": float(cross), "ordering": float(order), "range": rng_term})


def initial_scheme(num_levels: int, d: float, stats: NormStats, cfg: QuantizerConfig
                   ) -> QuantizationScheme:
    norm = Normalizer(stats)
    lo = norm.res(cfg.r_qmin) + cfg.rho
    hi = norm.res(cfg.r_qmax) - cfg.rho
    # centers of |L| equal cells, so every hinge starts strictly inactive
    levels = lo + (np.arange(num_levels) + 0.5) * (hi - lo) / num_levels
    return QuantizationScheme(levels, 0.5 * (levels[1:] + levels[:-1]), float(d), stats)


@dataclass
class OptimizeResult:
    scheme: QuantizationScheme
    best_loss: float
    trace: list  # (step, loss, lr)
    steps: int


def optimize(num_levels: int, d: float, model: DriftModel, cfg: QuantizerConfig | None = None,
             seed: int = 0, init: QuantizationScheme | None = None) -> OptimizeResult:
    """Adam over levels and boundaries with a plateau learning-rate schedule.

    Stops after ``max_steps`` or once the best loss has improved by less than
    ``converge_tol`` over ``converge_window`` steps, and returns the best
    iterate seen.
    """
    if num_levels < 1:
        raise ValueError("need at least one level")
    cfg = cfg or QuantizerConfig()
    rng = np.random.default_rng(seed)
    sch = init or initial_scheme(num_levels, d, model.stats, cfg)
    levels, bounds = sch.levels.copy(), sch.boundaries.copy()
    opt = Adam([levels, bounds], lr=cfg.lr)

    best = math.inf
    best_params = (levels.copy(), bounds.copy())
    since_best = 0
    window_ref = math.inf
    trace = []
    step = 0
    for step in range(1, cfg.max_steps + 1):
        res = quantization_loss(levels, bounds, d, model, cfg, rng)
        trace.append((step, res.loss, opt.lr))
        if res.loss < best:
            best = res.loss
            best_params = (levels.copy(), bounds.copy())
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.plateau_patience:
                opt.lr *= cfg.lr_decay
                since_best = 0
        if step % cfg.converge_window == 0:
            if window_ref - best < cfg.converge_tol:
                break
            window_ref = best
        opt.step([res.grad_levels, res.grad_boundaries])
    out = QuantizationScheme(best_params[0], best_params[1], float(d), model.stats)
    return OptimizeResult(out, best, trace, step)


def evaluate_error(sch: QuantizationScheme, d: float, sampler, trials: int = 10_000,
                   seed: int = 0) -> float:
    """Average over levels of the probability a drifted sample decodes wrongly."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if sch.num_levels == 1:
        return 0.0
    rng = np.random.default_rng(seed)
    errs = []
    for i, r in enumerate(sch.levels_ohms):
        x = sampler.sample(float(r), float(d), trials, rng)
        errs.append(np.mean(decode(x, sch) != i))
    return float(np.mean(errs))


@dataclass
class LadderEntry:
    num_levels: int
    scheme: QuantizationScheme
    error: float
    best_loss: float


def max_levels(epsilon: float, d: float, model: DriftModel, cfg: QuantizerConfig | None = None,
               seed: int = 0, trials: int = 10_000, ladder=BIT_LADDER, sampler=None
               ) -> tuple[int, list[LadderEntry]]:
    """Largest ladder entry whose optimized scheme has error <= ``epsilon``.

    Errors are measured with ``sampler`` (the generator by default).
    """
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    from .evaluation import GanSampler

    sampler = sampler or GanSampler(model)
    best = 1
    trace = []
    for k, L in enumerate(ladder):
        res = optimize(L, d, model, cfg, seed=seed + k)
        err = evaluate_error(res.scheme, d, sampler, trials, seed=seed + 1000 + k)
        trace.append(LadderEntry(L, res.scheme, err, res.best_loss))
        if err <= epsilon and not res.scheme.violations():
            best = max(best, L)
    return best, trace
