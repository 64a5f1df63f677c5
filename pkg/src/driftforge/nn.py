"""Small dense networks with hand-written reverse mode.

Only what the three adversarial networks need: affine layers with
relu/sigmoid/identity activations, cached forward passes so one network can
be applied several times in a graph, BCE, Adam and a checkpoint format.

Batch convention: inputs are ``(batch, features)``; a weight matrix is
``(out, in)`` and a layer computes ``x @ W.T + b``.
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "identity")
BCE_EPS = 1e-7
CHECKPOINT_FORMAT = "driftforge-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def _activate(x, act):
    if act == "relu":
        return np.maximum(x, 0.0)
    if act == "sigmoid":
        return sigmoid(x)
    return x


def _activate_grad(pre, out, g, act):
    if act == "relu":
        # subgradient 0 at exactly 0
        return g * (pre > 0)
    if act == "sigmoid":
        return g * out * (1.0 - out)
    return g


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"inconsistent layer shapes W{self.W.shape} b{self.b.shape}")


class DenseNet:
    """Feed-forward stack of :class:`Layer` objects."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if b.W.shape[1] != a.W.shape[0]:
                raise ValueError(
                    f"layer dims do not chain: {a.W.shape[0]} -> {b.W.shape[1]}")
        self.layers = layers

    @classmethod
    def build(cls, sizes, activations, rng: np.random.Generator | None = None):
        """He-uniform init for relu layers, Glorot-uniform otherwise; zero biases."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        rng = rng if rng is not None else np.random.default_rng()
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            if act == "relu":
                limit = np.sqrt(6.0 / fan_in)
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            layers.append(Layer(W, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].W.shape[1]] + [l.W.shape[0] for l in self.layers]

    @property
    def activations(self) -> list[str]:
        return [l.activation for l in self.layers]

    @property
    def n_in(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def n_out(self) -> int:
        return self.layers[-1].W.shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out.extend((l.W, l.b))
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def descriptor(self) -> dict:
        return {"sizes": self.sizes, "activations": self.activations}

    def forward_cached(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.n_in:
            raise ValueError(f"input has {x.shape[1]} features, expected {self.n_in}")
        cache = [x]
        a = x
        for l in self.layers:
            pre = a @ l.W.T + l.b
            a = _activate(pre, l.activation)
            cache.append((pre, a))
        return (a[0] if single else a), (single, cache)

    def forward(self, x):
        return self.forward_cached(x)[0]

    def __call__(self, x):
        return self.forward(x)

    def backward(self, cache, upstream, need_input_grad: bool = True):
        """Reverse pass.

        Returns ``(grads, input_grad)`` where ``grads`` mirrors :meth:`params`
        and holds the contraction of the output Jacobian with ``upstream``,
        summed over the batch.
        """
        single, acts = cache
        g = np.asarray(upstream, dtype=np.float64)
        if single:
            g = g[None, :]
        if g.shape != acts[-1][1].shape:
            raise ValueError(f"upstream shape {g.shape} != output shape {acts[-1][1].shape}")
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            pre, out = acts[i + 1]
            a_prev = acts[0] if i == 0 else acts[i][1]
            g = _activate_grad(pre, out, g, layer.activation)
            grads[2 * i] = g.T @ a_prev
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0 or need_input_grad:
                g = g @ layer.W
        dx = None
        if need_input_grad:
            dx = g[0] if single else g
        return grads, dx

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_params():
            raise ValueError(f"expected {self.num_params()} parameters, got {flat.size}")
        i = 0
        for p in self.params():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    @classmethod
    def from_descriptor(cls, desc: dict, flat: np.ndarray | None = None) -> "DenseNet":
        sizes, acts = desc["sizes"], desc["activations"]
        layers = [Layer(np.zeros((o, i)), np.zeros(o), a)
                  for i, o, a in zip(sizes[:-1], sizes[1:], acts)]
        net = cls(layers)
        if flat is not None:
            net.set_flat(flat)
        return net


def bce(y, y_hat):
    """``(y - 1) ln(1 - y_hat) - y ln(y_hat)`` with ``y_hat`` clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(y_hat, BCE_EPS, 1.0 - BCE_EPS)
    return (y - 1.0) * np.log1p(-p) - y * np.log(p)


def bce_grad(y, y_hat):
    """Derivative of :func:`bce` with respect to ``y_hat`` (at the clamped point)."""
    p = np.clip(y_hat, BCE_EPS, 1.0 - BCE_EPS)
    return (1.0 - y) / (1.0 - p) - y / p


def bce_logit_grad(y, logit):
    """d BCE(y, sigmoid(logit)) / d logit, exact and saturation free."""
    return sigmoid(logit) - y


class Adam:
    """Adam with bias correction, updating parameter arrays in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameters")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps,
                "m": encode_array(np.concatenate([a.ravel() for a in self.m])),
                "v": encode_array(np.concatenate([a.ravel() for a in self.v]))}

    def load_state_dict(self, d: dict) -> None:
        self.t = int(d["t"])
        self.lr, self.beta1, self.beta2, self.eps = d["lr"], d["beta1"], d["beta2"], d["eps"]
        for name in ("m", "v"):
            flat = decode_array(d[name])
            dst = getattr(self, name)
            if flat.size != sum(a.size for a in dst):
                raise CheckpointError(f"optimizer state {name!r} has wrong size")
            i = 0
            for a in dst:
                a[...] = flat[i:i + a.size].reshape(a.shape)
                i += a.size


def adam_step(params, grads, state: Adam | None = None, **kw) -> Adam:
    """Functional wrapper: one Adam update of ``params`` (in place)."""
    state = state if state is not None else Adam(params, **kw)
    state.step(grads)
    return state


def encode_array(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def decode_array(s: str) -> np.ndarray:
    try:
        raw = base64.b64decode(s.encode("ascii"), validate=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt array payload: {exc}") from None
    if len(raw) % 8:
        raise CheckpointError("array payload length is not a multiple of 8 bytes")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def save_checkpoint(path, nets: dict[str, DenseNet], meta: dict | None = None) -> Path:
    """Write ``nets`` plus free-form ``meta`` as a versioned JSON document.

    Parameters are stored as base64 little-endian float64, so a round trip
    is bit exact. The file is written to a temporary name and renamed.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {}
    for name, net in nets.items():
        flat = net.flat()
        body[name] = {"architecture": net.descriptor(), "param_count": int(flat.size),
                      "params": encode_array(flat),
                      "sha256": hashlib.sha256(flat.astype("<f8").tobytes()).hexdigest()}
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "networks": body, "meta": meta or {}}
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, DenseNet], dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a driftforge checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {doc.get('version')} != supported {CHECKPOINT_VERSION}")
    nets = {}
    for name, entry in doc["networks"].items():
        flat = decode_array(entry["params"])
        if flat.size != entry["param_count"]:
            raise CheckpointError(f"network {name!r}: parameter count mismatch")
        if hashlib.sha256(flat.astype("<f8").tobytes()).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"network {name!r}: parameter checksum mismatch")
        try:
            nets[name] = DenseNet.from_descriptor(entry["architecture"], flat)
        except ValueError as exc:
            raise CheckpointError(f"network {name!r}: {exc}") from None
    return nets, doc.get("meta", {})


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
