"""Delay- and resistance-conditioned GAN for drift series.

The generator maps ``(normalized resistance, delay, noise)`` to a normalized
difference which is scaled back by ``sigma_Dbar`` and added to its input, so
one call samples the resistance after an arbitrary, continuous delay.

Two discriminators are trained against it:

* the main discriminator sees packs of ``n_pack`` sequences of ``s``
  resistances (first one real, the rest either real or rolled out closed
  loop by the generator) together with their normalized differences;
* the delay discriminator compares one generator call at delay ``d`` with
  ``q`` chained calls at ``d / q`` and pushes the two to agree.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataset import DriftDataset, DriftSeries
from .nn import (
    Adam,
    CheckpointError,
    DenseNet,
    bce,
    bce_logit_grad,
    load_checkpoint,
    save_checkpoint,
    sigmoid,
)
from .normalization import NormStats, Normalizer

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "step", "loss_D", "loss_G_main", "loss_Ddd", "loss_G_dd"]


class TrainingAborted(RuntimeError):
    """A loss or gradient went non-finite."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 1000
    steps_per_epoch: int = 500
    batch: int = 64
    s_main: int = 10
    s_dd: int = 2
    q_max: int = 20
    d_min_d: int = 1
    d_max_d: int = 90
    d_min_dd: float = 1.0
    d_max_dd: float = 500.0
    n_pack: int = 2
    z_dim: int = 20
    seed: int = 0
    delay_discriminator: bool = True
    embed_hidden: tuple = (64, 64)
    gen_hidden: tuple = (128, 128, 128)
    disc_hidden: tuple = (128, 128)
    disc_comb_hidden: tuple = (128, 128)
    gen_head_init: str = "glorot"
    delay_init_scale: float | None = None
    r_init_space: str = "ohms"
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("embed_hidden", "gen_hidden", "disc_hidden", "disc_comb_hidden"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def delay_scale(self, lo: float | None = None, hi: float | None = None) -> float:
        """Input scale used to shrink first-layer weights on raw delay inputs.

        Defaults to the rms of a uniform delay over ``[lo, hi]`` (the main
        discriminator range unless given), shared by all three networks.
        """
        if self.delay_init_scale is not None:
            return float(self.delay_init_scale)
        a = float(self.d_min_d if lo is None else lo)
        b = float(self.d_max_d if hi is None else hi)
        return math.sqrt((a * a + a * b + b * b) / 3.0)

    def validate(self) -> None:
        if self.d_max_dd < self.d_max_d:
            raise ValueError("d_max_dd must be >= d_max_d")
        if self.q_max < 2:
            raise ValueError("q_max must be >= 2")
        if self.n_pack < 1 or self.batch % self.n_pack:
            raise ValueError(f"n_pack={self.n_pack} must divide batch={self.batch}")
        if self.s_main < 2 or self.s_dd < 2:
            raise ValueError("sequence lengths must be >= 2")
        if not 1 <= self.d_min_d <= self.d_max_d:
            raise ValueError("need 1 <= d_min_d <= d_max_d")
        if not 0 < self.d_min_dd <= self.d_max_dd:
            raise ValueError("need 0 < d_min_dd <= d_max_dd")
        if self.lr <= 0 or self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError("invalid lr/epochs/steps_per_epoch")
        if self.delay_init_scale is not None and not self.delay_init_scale > 0:
            raise ValueError("delay_init_scale must be positive")
        if self.gen_head_init not in ("glorot", "zero"):
            raise ValueError("gen_head_init must be 'glorot' or 'zero'")
        if self.r_init_space not in ("ohms", "log"):
            raise ValueError("r_init_space must be 'ohms' or 'log'")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class Generator:
    """Delay processor, resistance processor and combined head."""

    def __init__(self, delay_net: DenseNet, res_net: DenseNet, comb_net: DenseNet, z_dim: int):
        if comb_net.n_in != delay_net.n_out + res_net.n_out + z_dim or comb_net.n_out != 1:
            raise ValueError("combined processor does not fit the embeddings")
        if comb_net.layers[-1].activation != "identity":
            raise ValueError("generator head must be linear")
        self.delay_net, self.res_net, self.comb_net = delay_net, res_net, comb_net
        self.z_dim = z_dim

    @classmethod
    def build(cls, cfg: TrainConfig, rng: np.random.Generator) -> "Generator":
        emb = list(cfg.embed_hidden)
        delay_net = DenseNet.build([1] + emb, ["relu"] * len(emb), rng)
        # He init assumes unit-scale input; delays are fed raw, so shrink the
        # first layer by the rms of the training delay range
        delay_net.layers[0].W /= cfg.delay_scale()
        res_net = DenseNet.build([1] + emb, ["relu"] * len(emb), rng)
        hid = list(cfg.gen_hidden)
        comb_net = DenseNet.build([2 * emb[-1] + cfg.z_dim] + hid + [1],
                                  ["relu"] * len(hid) + ["identity"], rng)
        if cfg.gen_head_init == "zero":
            comb_net.layers[-1].W[...] = 0.0
        return cls(delay_net, res_net, comb_net, cfg.z_dim)

    def nets(self) -> dict[str, DenseNet]:
        return {"gen_delay": self.delay_net, "gen_res": self.res_net, "gen_comb": self.comb_net}

    def params(self) -> list[np.ndarray]:
        return self.delay_net.params() + self.res_net.params() + self.comb_net.params()

    def forward_cached(self, rbar, d, z, sigma_Dbar: float):
        rbar = np.asarray(rbar, dtype=np.float64).reshape(-1)
        d = np.broadcast_to(np.asarray(d, dtype=np.float64), rbar.shape)
        z = np.asarray(z, dtype=np.float64).reshape(rbar.size, self.z_dim)
        e_d, c_d = self.delay_net.forward_cached(d[:, None])
        e_r, c_r = self.res_net.forward_cached(rbar[:, None])
        h = np.concatenate([e_d, e_r, z], axis=1)
        diff, c_c = self.comb_net.forward_cached(h)
        out = rbar + diff[:, 0] * sigma_Dbar
        return out, (c_d, c_r, c_c, e_d.shape[1], sigma_Dbar)

    def forward(self, rbar, d, z, sigma_Dbar: float):
        return self.forward_cached(rbar, d, z, sigma_Dbar)[0]

    def backward(self, cache, g_out):
        """Return (parameter grads, grad w.r.t. the normalized input resistance)."""
        c_d, c_r, c_c, k, sigma_Dbar = cache
        g_out = np.asarray(g_out, dtype=np.float64).reshape(-1)
        g_c, g_h = self.comb_net.backward(c_c, (g_out * sigma_Dbar)[:, None])
        g_d, _ = self.delay_net.backward(c_d, g_h[:, :k], need_input_grad=False)
        g_r, g_in = self.res_net.backward(c_r, g_h[:, k:2 * k])
        return g_d + g_r + g_c, g_out + g_in[:, 0]


_P_LO = np.finfo(np.float64).tiny
_P_HI = 1.0 - np.finfo(np.float64).epsneg


class Discriminator:
    """Condition processor + sequence processor + combined sigmoid head.

    One input row packs ``n_pack`` sequences. Per sequence the condition is
    ``(r_1, d)`` and the sequence part is ``(r_2..r_s, diff_1..diff_{s-1})``.
    """

    def __init__(self, cond_net: DenseNet, seq_net: DenseNet, comb_net: DenseNet,
                 n_pack: int, seq_len: int):
        if cond_net.n_in != 2 * n_pack or seq_net.n_in != 2 * (seq_len - 1) * n_pack:
            raise ValueError("processor inputs do not match n_pack/seq_len")
        if comb_net.n_in != cond_net.n_out + seq_net.n_out or comb_net.n_out != 1:
            raise ValueError("combined processor does not fit the embeddings")
        self.cond_net, self.seq_net, self.comb_net = cond_net, seq_net, comb_net
        self.n_pack, self.seq_len = n_pack, seq_len

    @classmethod
    def build(cls, seq_len: int, cfg: TrainConfig, rng: np.random.Generator,
              delay_scale: float = 1.0) -> "Discriminator":
        n = cfg.n_pack
        hid = list(cfg.disc_hidden)
        cond = DenseNet.build([2 * n] + hid, ["relu"] * len(hid), rng)
        # delay columns sit at odd positions of the packed condition
        cond.layers[0].W[:, 1::2] /= delay_scale
        seq = DenseNet.build([2 * (seq_len - 1) * n] + hid, ["relu"] * len(hid), rng)
        ch = list(cfg.disc_comb_hidden)
        # linear head; the sigmoid is applied on top so training can use logits
        comb = DenseNet.build([2 * hid[-1]] + ch + [1], ["relu"] * len(ch) + ["identity"], rng)
        return cls(cond, seq, comb, n, seq_len)

    def nets(self, prefix: str) -> dict[str, DenseNet]:
        return {f"{prefix}_cond": self.cond_net, f"{prefix}_seq": self.seq_net,
                f"{prefix}_comb": self.comb_net}

    def params(self) -> list[np.ndarray]:
        return self.cond_net.params() + self.seq_net.params() + self.comb_net.params()

    def features(self, rbar, d, sigma_Dbar: float):
        rbar = np.asarray(rbar, dtype=np.float64)
        B, s = rbar.shape
        if s != self.seq_len:
            raise ValueError(f"sequence length {s} != {self.seq_len}")
        if B % self.n_pack:
            raise ValueError(f"batch {B} not divisible by n_pack {self.n_pack}")
        d = np.broadcast_to(np.asarray(d, dtype=np.float64), (B,))
        diffs = np.diff(rbar, axis=1) / sigma_Dbar
        cond = np.column_stack([rbar[:, 0], d]).reshape(B // self.n_pack, -1)
        seq = np.concatenate([rbar[:, 1:], diffs], axis=1).reshape(B // self.n_pack, -1)
        return cond, seq

    def logits_cached(self, rbar, d, sigma_Dbar: float):
        cond, seq = self.features(rbar, d, sigma_Dbar)
        e_c, c_c = self.cond_net.forward_cached(cond)
        e_s, c_s = self.seq_net.forward_cached(seq)
        logit, c_m = self.comb_net.forward_cached(np.concatenate([e_c, e_s], axis=1))
        return logit[:, 0], (c_c, c_s, c_m, e_c.shape[1], np.shape(rbar), sigma_Dbar)

    def score(self, rbar, d, sigma_Dbar: float):
        # keep saturated logits strictly inside (0, 1)
        p = sigmoid(self.logits_cached(rbar, d, sigma_Dbar)[0])
        return np.clip(p, _P_LO, _P_HI)

    def backward(self, cache, g_logit, need_input_grad: bool = True):
        """Return (parameter grads, grad w.r.t. the ``(B, s)`` resistance block)."""
        c_c, c_s, c_m, k, shape, sigma_Dbar = cache
        g_m, g_e = self.comb_net.backward(c_m, np.asarray(g_logit, dtype=np.float64)[:, None])
        g_c, g_cond = self.cond_net.backward(c_c, g_e[:, :k], need_input_grad)
        g_s, g_seq = self.seq_net.backward(c_s, g_e[:, k:], need_input_grad)
        grads = g_c + g_s + g_m
        if not need_input_grad:
            return grads, None
        B, s = shape
        g_cond = g_cond.reshape(B, 2)
        g_seq = g_seq.reshape(B, 2 * (s - 1))
        g_r = np.zeros(shape)
        g_r[:, 0] += g_cond[:, 0]
        g_r[:, 1:] += g_seq[:, :s - 1]
        g_diff = g_seq[:, s - 1:] / sigma_Dbar
        g_r[:, 1:] += g_diff
        g_r[:, :-1] -= g_diff
        return grads, g_r


def generator_sample(rbar_init, d, z, g: Generator, stats: NormStats):
    """Normalized resistance after delay ``d``; ``d`` is passed unscaled."""
    return g.forward(rbar_init, d, z, stats.sigma_Dbar)


def rollout(g: Generator, rbar0, d, steps: int, stats: NormStats, rng: np.random.Generator,
            keep_cache: bool = False):
    """Closed-loop rollout; returns the ``(B, steps + 1)`` block and per-step caches."""
    rbar0 = np.asarray(rbar0, dtype=np.float64).reshape(-1)
    out = np.empty((rbar0.size, steps + 1))
    out[:, 0] = rbar0
    caches = []
    for k in range(steps):
        z = rng.standard_normal((rbar0.size, g.z_dim))
        nxt, cache = g.forward_cached(out[:, k], d, z, stats.sigma_Dbar)
        out[:, k + 1] = nxt
        if keep_cache:
            caches.append(cache)
    return out, caches


def generate_sequence(r_init: float, d: float, steps: int, g: Generator, stats: NormStats,
                      rng: np.random.Generator) -> DriftSeries:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    norm = Normalizer(stats)
    block, _ = rollout(g, [norm.res(r_init)], d, steps, stats, rng)
    return DriftSeries(float(r_init), float(d), norm.inv_res(block[0]))


def discriminator_score(D: Discriminator, rbar, d, stats: NormStats):
    """Belief (per pack) that the packed normalized sequences are real."""
    return D.score(rbar, d, stats.sigma_Dbar)


def sample_real_subsequences(normalized: np.ndarray, d, s: int, count: int,
                             rng: np.random.Generator) -> np.ndarray:
    """Stride-``d`` windows of ``s`` points from random series and offsets.

    ``normalized`` is the ``(series, length)`` block of normalized resistances
    on the unit sampling grid; ``d`` is an integer or an integer array.
    """
    S, L = normalized.shape
    d = np.broadcast_to(np.asarray(d), (count,))
    if np.any(d < 1) or np.any(d != np.round(d)):
        raise ValueError("real-data delays must be positive integers")
    d = d.astype(np.int64)
    span = d * (s - 1)
    if np.any(span > L - 1):
        raise ValueError(f"delay {int(d.max())} with s={s} spans {int(span.max())} > {L - 1} samples")
    rows = rng.integers(0, S, size=count)
    starts = rng.integers(0, L - span)
    idx = starts[:, None] + d[:, None] * np.arange(s)[None, :]
    return normalized[rows[:, None], idx]


def _add(acc, grads):
    if acc is None:
        return [g.copy() for g in grads]
    for a, g in zip(acc, grads):
        a += g
    return acc


def _finite(*arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


class Trainer:
    """Owns the three networks, their optimizers and the training rng."""

    def __init__(self, dataset: DriftDataset, stats: NormStats, cfg: TrainConfig):
        self.cfg = cfg
        self.stats = stats
        self.norm = Normalizer(stats)
        if dataset.t_sample != 1.0:
            log.warning("dataset t_sample=%s; real-data delays are in samples", dataset.t_sample)
        self.data = self.norm.res(dataset.values)
        if cfg.d_max_d * (cfg.s_main - 1) > self.data.shape[1] - 1:
            raise ValueError(
                f"d_max_d={cfg.d_max_d} with s_main={cfg.s_main} does not fit series of "
                f"{self.data.shape[1]} samples")
        self.r_min, self.r_max = dataset.r_range
        init_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
        self.rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
        self.G = Generator.build(cfg, init_rng)
        self.D = Discriminator.build(cfg.s_main, cfg, init_rng, cfg.delay_scale())
        self.Ddd = Discriminator.build(cfg.s_dd, cfg, init_rng, cfg.delay_scale())
        opt = dict(lr=cfg.lr)
        self.opt_G = Adam(self.G.params(), **opt)
        self.opt_D = Adam(self.D.params(), **opt)
        self.opt_Ddd = Adam(self.Ddd.params(), **opt)
        self.step_count = 0
        self.epoch = 0
        self.log_rows: list[dict] = []

    @property
    def sigma(self) -> float:
        return self.stats.sigma_Dbar

    # -- main adversarial game -------------------------------------------------
    def main_step(self):
        """Update D once and return ``(loss_D, loss_G, generator grads)``."""
        cfg, rng = self.cfg, self.rng
        B, s = cfg.batch, cfg.s_main
        d = rng.integers(cfg.d_min_d, cfg.d_max_d + 1, size=B)
        real = sample_real_subsequences(self.data, d, s, B, rng)
        fake, caches = rollout(self.G, real[:, 0], d.astype(np.float64), s - 1, self.stats,
                               rng, keep_cache=True)

        l_real, c_real = self.D.logits_cached(real, d, self.sigma)
        l_fake, c_fake = self.D.logits_cached(fake, d, self.sigma)
        P = l_real.size
        loss_D = float(np.mean(bce(1.0, sigmoid(l_real))) + np.mean(bce(0.0, sigmoid(l_fake))))
        g1, _ = self.D.backward(c_real, bce_logit_grad(1.0, l_real) / P, need_input_grad=False)
        g0, _ = self.D.backward(c_fake, bce_logit_grad(0.0, l_fake) / P, need_input_grad=False)
        grads_D = _add(g1, g0)
        if not (math.isfinite(loss_D) and _finite(*grads_D)):
            raise TrainingAborted(f"non-finite discriminator loss/grad at step {self.step_count}")
        self.opt_D.step(grads_D)

        # non-saturating generator objective against the updated discriminator
        l_fake, c_fake = self.D.logits_cached(fake, d, self.sigma)
        loss_G = float(np.mean(bce(1.0, sigmoid(l_fake))))
        _, g_r = self.D.backward(c_fake, bce_logit_grad(1.0, l_fake) / P)
        grads_G = None
        for k in range(s - 1, 0, -1):
            gp, g_in = self.G.backward(caches[k - 1], g_r[:, k])
            g_r[:, k - 1] += g_in
            grads_G = _add(grads_G, gp)
        return loss_D, loss_G, grads_G

    # -- delay discrimination ---------------------------------------------------
    def delay_step(self):
        """Update D_dd once and return ``(loss_Ddd, loss_G_dd, generator grads)``."""
        cfg, rng = self.cfg, self.rng
        B = cfg.batch
        q = int(rng.integers(2, cfg.q_max + 1))
        d = rng.uniform(cfg.d_min_dd, cfg.d_max_dd, size=B)
        if cfg.r_init_space == "log":
            r0 = rng.uniform(self.norm.res(self.r_min), self.norm.res(self.r_max), size=B)
        else:
            r0 = self.norm.res(rng.uniform(self.r_min, self.r_max, size=B))
        z = rng.standard_normal((B, self.G.z_dim))
        single, cache = self.G.forward_cached(r0, d, z, self.sigma)
        chained, _ = rollout(self.G, r0, d / q, q, self.stats, rng)
        pair_single = np.column_stack([r0, single])
        pair_chain = np.column_stack([r0, chained[:, -1]])

        l1, c1 = self.Ddd.logits_cached(pair_single, d, self.sigma)
        l2, c2 = self.Ddd.logits_cached(pair_chain, d, self.sigma)
        P = l1.size
        loss_Ddd = float(np.mean(bce(0.0, sigmoid(l1))) + np.mean(bce(1.0, sigmoid(l2))))
        g1, _ = self.Ddd.backward(c1, bce_logit_grad(0.0, l1) / P, need_input_grad=False)
        g2, _ = self.Ddd.backward(c2, bce_logit_grad(1.0, l2) / P, need_input_grad=False)
        grads = _add(g1, g2)
        if not (math.isfinite(loss_Ddd) and _finite(*grads)):
            raise TrainingAborted(f"non-finite delay-discriminator loss/grad at step {self.step_count}")
        self.opt_Ddd.step(grads)

        l1, c1 = self.Ddd.logits_cached(pair_single, d, self.sigma)
        loss_G = float(np.mean(bce(1.0, sigmoid(l1))))
        _, g_pair = self.Ddd.backward(c1, bce_logit_grad(1.0, l1) / P)
        grads_G, _ = self.G.backward(cache, g_pair[:, 1])
        return loss_Ddd, loss_G, grads_G

    def step(self) -> dict:
        loss_D, loss_G, grads_G = self.main_step()
        out = {"loss_D": loss_D, "loss_G_main": loss_G}
        if self.cfg.delay_discriminator:
            loss_Ddd, loss_Gdd, grads_dd = self.delay_step()
            grads_G = _add(grads_G, grads_dd)
            out.update(loss_Ddd=loss_Ddd, loss_G_dd=loss_Gdd)
        if not (all(math.isfinite(v) for v in out.values()) and _finite(*grads_G)):
            raise TrainingAborted(f"non-finite generator loss/grad at step {self.step_count}")
        self.opt_G.step(grads_G)
        self.step_count += 1
        return out

    def run(self, epochs: int | None = None, checkpoint_path=None, log_path=None) -> list[dict]:
        """Train for ``epochs`` more epochs (default: the configured count)."""
        epochs = self.cfg.epochs if epochs is None else epochs
        keys = LOG_HEADER[2:] if self.cfg.delay_discriminator else LOG_HEADER[2:4]
        for _ in range(epochs):
            sums = dict.fromkeys(keys, 0.0)
            try:
                for _ in range(self.cfg.steps_per_epoch):
                    for k, v in self.step().items():
                        sums[k] += v
            except TrainingAborted:
                if checkpoint_path is not None:
                    diag = Path(checkpoint_path)
                    self.save(diag.with_name(diag.stem + ".aborted" + diag.suffix))
                raise
            self.epoch += 1
            row = {"epoch": self.epoch, "step": self.step_count}
            row.update({k: v / self.cfg.steps_per_epoch for k, v in sums.items()})
            self.log_rows.append(row)
            log.info("epoch %d %s", self.epoch,
                     " ".join(f"{k}={v:.4f}" for k, v in row.items() if k.startswith("loss")))
            if log_path is not None:
                write_log(self.log_rows, log_path)
            if (checkpoint_path is not None and self.cfg.checkpoint_every
                    and self.epoch % self.cfg.checkpoint_every == 0):
                self.save(checkpoint_path)
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return self.log_rows

    # -- persistence ---------------------------------------------------------------
    def nets(self) -> dict[str, DenseNet]:
        out = self.G.nets()
        out.update(self.D.nets("disc"))
        out.update(self.Ddd.nets("ddisc"))
        return out

    def save(self, path, extra: dict | None = None) -> Path:
        meta = {
            "config": self.cfg.to_dict(),
            "stats": self.stats.to_dict(),
            "stats_hash": self.stats.content_hash(),
            "step": self.step_count,
            "epoch": self.epoch,
            "r_range": [self.r_min, self.r_max],
            "optimizers": {"G": self.opt_G.state_dict(), "D": self.opt_D.state_dict(),
                           "Ddd": self.opt_Ddd.state_dict()},
            "rng_state": self.rng.bit_generator.state,
            "log": self.log_rows,
        }
        meta.update(extra or {})
        return save_checkpoint(path, self.nets(), meta)

    @classmethod
    def resume(cls, path, dataset: DriftDataset, stats: NormStats,
               cfg: TrainConfig | None = None) -> "Trainer":
        nets, meta = load_checkpoint(path)
        if meta.get("stats_hash") != stats.content_hash():
            raise CheckpointError("normalization stats do not match the checkpoint")
        cfg = cfg or TrainConfig.from_dict(meta["config"])
        tr = cls(dataset, stats, cfg)
        for name, net in tr.nets().items():
            if name not in nets or nets[name].descriptor() != net.descriptor():
                raise CheckpointError(f"network {name!r} missing or has a different architecture")
            net.set_flat(nets[name].flat())
        tr.opt_G.load_state_dict(meta["optimizers"]["G"])
        tr.opt_D.load_state_dict(meta["optimizers"]["D"])
        tr.opt_Ddd.load_state_dict(meta["optimizers"]["Ddd"])
        tr.rng.bit_generator.state = meta["rng_state"]
        tr.step_count = int(meta["step"])
        tr.epoch = int(meta["epoch"])
        tr.log_rows = list(meta.get("log", []))
        return tr


def write_log(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_HEADER, restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def train(dataset: DriftDataset, cfg: TrainConfig, stats: NormStats | None = None,
          checkpoint_path=None, log_path=None) -> Trainer:
    """Train from scratch; ``cfg.epochs == 0`` just initializes."""
    from .normalization import compute_stats

    stats = stats or compute_stats(dataset)
    if stats.dataset_hash and stats.dataset_hash != dataset.content_hash():
        raise ValueError("normalization stats were computed on a different dataset")
    tr = Trainer(dataset, stats, cfg)
    tr.run(checkpoint_path=checkpoint_path, log_path=log_path)
    return tr


class DriftModel:
    """Trained generator bound to its normalization stats, in ohms."""

    def __init__(self, generator: Generator, stats: NormStats, meta: dict | None = None):
        self.G = generator
        self.stats = stats
        self.norm = Normalizer(stats)
        self.meta = meta or {}

    @classmethod
    def from_trainer(cls, tr: Trainer) -> "DriftModel":
        return cls(tr.G, tr.stats, {"config": tr.cfg.to_dict(), "step": tr.step_count})

    @classmethod
    def load(cls, path, stats: NormStats | None = None) -> "DriftModel":
        nets, meta = load_checkpoint(path)
        embedded = meta.get("stats")
        if embedded is None and stats is None:
            raise CheckpointError("checkpoint carries no normalization stats; pass them explicitly")
        if stats is not None and meta.get("stats_hash") != stats.content_hash():
            raise CheckpointError(
                f"normalization stats hash {stats.content_hash()[:12]} does not match the "
                f"checkpoint's {str(meta.get('stats_hash'))[:12]}; refusing to assemble the model")
        stats = stats or NormStats(**embedded)
        try:
            z_dim = int(meta["config"]["z_dim"])
            g = Generator(nets["gen_delay"], nets["gen_res"], nets["gen_comb"], z_dim)
        except KeyError as exc:
            raise CheckpointError(f"checkpoint lacks generator component {exc}") from None
        return cls(g, stats, meta)

    def sample_normalized(self, rbar, d, rng: np.random.Generator, steps: int = 1):
        block, _ = rollout(self.G, rbar, np.asarray(d, dtype=np.float64) / steps, steps,
                           self.stats, rng)
        return block[:, -1]

    def sample(self, r_init, d, rng: np.random.Generator, steps: int = 1) -> np.ndarray:
        """Final resistances (ohms) after total delay ``d`` using ``steps`` calls."""
        rbar = self.norm.res(np.atleast_1d(np.asarray(r_init, dtype=np.float64)))
        return self.norm.inv_res(self.sample_normalized(rbar, d, rng, steps))

    def generate_sequence(self, r_init: float, d: float, steps: int,
                          rng: np.random.Generator) -> DriftSeries:
        return generate_sequence(r_init, d, steps, self.G, self.stats, rng)
