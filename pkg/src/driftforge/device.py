"""Metastable-switch model of resistive drift at rest.

A device is ``N`` independent two-state switches. ``n`` of them conduct and
the readout maps ``n`` to a resistance. Switches flip up (off -> on) at rate
``r_up`` and down at rate ``r_down``; the offset voltage ``V_off`` skews the
barrier so the stationary occupancy sits at the equilibrium point.

Three steppers are provided:

* ``tau_leap``  fixed-interval binomial leap (used for dataset generation)
* ``gillespie`` exact event-by-event simulation
* ``exact``     closed-form propagator of independent two-state switches,
                distributionally identical to ``gillespie`` for any ``dt``
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

METHODS = ("tau_leap", "gillespie", "exact")


@dataclass(frozen=True)
class DeviceParams:
    N: float = 1.8e6
    n_thresh: float = 0.0
    V_a: float = 0.256
    g_parallel: float = 1e-6
    g_step: float = 1e-2 / 1e6
    V_off: float = 0.2532
    T: float = 300.0
    k_B: float = 1.38064e-23
    q_e: float = 1.602176e-19
    nu: float = 1.0

    def __post_init__(self):
        if not self.N >= 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if not self.g_step > 0 or not self.g_parallel > 0:
            raise ValueError("g_step and g_parallel must be positive")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        # nu = 0 freezes the device; negative rates are meaningless
        if not self.nu >= 0:
            raise ValueError(f"nu must be non-negative, got {self.nu}")
        if not 0 <= self.n_thresh <= self.N:
            raise ValueError("n_thresh must lie in [0, N]")

    @property
    def thermal_voltage(self) -> float:
        """k_B T / q in volts."""
        return self.k_B * self.T / self.q_e

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceParams":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class DeviceState:
    n: int

    def check(self, p: DeviceParams) -> None:
        if not 0 <= self.n <= p.N:
            raise ValueError(f"state n={self.n} outside [0, {p.N}]")


def resistance_from_state(n, p: DeviceParams):
    """Readout resistance in ohms for ``n`` conducting switches.

    Accepts scalars or arrays; real-valued ``n`` is allowed for analysis.
    """
    return 1.0 / (p.g_step * np.maximum(n, p.n_thresh) + p.g_parallel)


def state_from_resistance(r: float, p: DeviceParams) -> int:
    r = float(r)
    if not math.isfinite(r) or r <= 0:
        raise ValueError(f"resistance must be finite and positive, got {r}")
    n = round((1.0 / r - p.g_parallel) / p.g_step)
    lo = math.ceil(p.n_thresh)
    return int(min(max(n, lo), int(p.N)))


def equilibrium_state(p: DeviceParams) -> float:
    """Stationary (real-valued) switch count for the configured ``V_off``."""
    x = p.V_off / p.thermal_voltage
    # logistic written to stay finite for large |x|
    if x >= 0:
        e = math.exp(-x)
        return p.N * e / (1.0 + e)
    return p.N / (1.0 + math.exp(x))


def v_off_for_equilibrium(n_eq: float, p: DeviceParams) -> float:
    if not 0 < n_eq < p.N:
        raise ValueError(f"n_eq must lie strictly inside (0, N), got {n_eq}")
    return math.log((p.N - n_eq) / n_eq) * p.thermal_voltage


def switch_rates(p: DeviceParams) -> tuple[float, float]:
    """Per-switch (up, down) flip rates in hertz.

    The barrier ``V_a`` is raised by ``V_off/2`` for up-flips and lowered by
    the same amount for down-flips, so ``r_up / r_down = exp(-V_off/V_T)``.
    """
    vt = p.thermal_voltage
    r_up = p.nu * math.exp(-(p.V_a + p.V_off / 2) / vt)
    r_down = p.nu * math.exp(-(p.V_a - p.V_off / 2) / vt)
    return r_up, r_down


def step_tau_leap(n, dt: float, p: DeviceParams, rng: np.random.Generator):
    """Advance one fixed binomial leap of length ``dt``.

    ``n`` may be an int or an integer array of independent devices.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    r_up, r_down = switch_rates(p)
    N = int(p.N)
    n = np.asarray(n, dtype=np.int64)
    k_up = rng.binomial(N - n, -math.expm1(-r_up * dt))
    k_down = rng.binomial(n, -math.expm1(-r_down * dt))
    out = np.asarray(np.clip(n + k_up - k_down, 0, N))
    return int(out) if out.ndim == 0 else out


def step_exact(n, dt: float, p: DeviceParams, rng: np.random.Generator):
    """Exact transition over ``dt`` for independent two-state switches."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    r_up, r_down = switch_rates(p)
    N = int(p.N)
    n = np.asarray(n, dtype=np.int64)
    lam = r_up + r_down
    if lam == 0.0:
        out = n.copy()
    else:
        pi_on = r_up / lam
        decay = math.exp(-lam * dt)
        p_stay_on = pi_on + (1.0 - pi_on) * decay
        p_turn_on = pi_on * (1.0 - decay)
        out = np.asarray(rng.binomial(n, p_stay_on) + rng.binomial(N - n, p_turn_on))
    return int(out) if out.ndim == 0 else out


def step_gillespie(n: int, dt: float, p: DeviceParams, rng: np.random.Generator) -> int:
    """Exact event-driven simulation of a single device over ``[0, dt]``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    r_up, r_down = switch_rates(p)
    N = int(p.N)
    n = int(n)
    remaining = dt
    while True:
        a_up = (N - n) * r_up
        a_down = n * r_down
        total = a_up + a_down
        if total <= 0.0:
            return n
        wait = rng.exponential(1.0 / total)
        if wait > remaining:
            return n
        remaining -= wait
        if rng.random() * total < a_up:
            n += 1
        else:
            n -= 1


_STEPPERS = {"tau_leap": step_tau_leap, "exact": step_exact}


def propagate(n, duration: float, p: DeviceParams, rng: np.random.Generator,
              method: str = "exact", max_dt: float = 1.0):
    """Evolve state(s) ``n`` for ``duration`` seconds.

    ``tau_leap`` subdivides the interval into leaps no longer than ``max_dt``;
    ``exact`` jumps in one draw; ``gillespie`` loops per device.
    """
    if duration <= 0:
        return n
    if method == "gillespie":
        arr = np.asarray(n, dtype=np.int64)
        if arr.ndim == 0:
            return step_gillespie(int(arr), duration, p, rng)
        return np.array([step_gillespie(int(v), duration, p, rng) for v in arr], dtype=np.int64)
    if method == "exact":
        return step_exact(n, duration, p, rng)
    if method != "tau_leap":
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    k = max(1, math.ceil(duration / max_dt - 1e-9))
    h = duration / k
    for _ in range(k):
        n = step_tau_leap(n, h, p, rng)
    return n
