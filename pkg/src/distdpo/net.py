"""Per-point conditional noise-prediction MLP with manual backprop.

Every point is processed independently. Its input row is::

    [x, y, z | offset to nearest scan point | scan summary | time embedding]

The scan summary is the scan mean, per-axis variance and log point count.
Gradients are exact reverse-mode derivatives of ``<upstream, eps_forward>``.
The nearest-point assignment is piecewise constant, so the offset is treated
as ``x - const`` when differentiating w.r.t. the point coordinates.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .pointcloud import as_cloud

CTX_WIDTH = 7
POINT_WIDTH = 6
ACTIVATIONS = ("silu", "tanh", "identity")


class NetError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    hidden: tuple = (64, 64)
    activation: str = "silu"
    time_width: int = 16
    out_width: int = 3
    time_max_freq: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation not in ACTIVATIONS:
            raise NetError(f"unknown activation {self.activation!r}")
        if self.time_width % 2:
            raise NetError("time embedding width must be even")
        if self.out_width != 3:
            raise NetError("output width must be 3")

    @property
    def in_width(self) -> int:
        return POINT_WIDTH + CTX_WIDTH + self.time_width

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.in_width, *self.hidden, self.out_width]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    def to_dict(self) -> dict:
        return {"in_width": self.in_width, "hidden": list(self.hidden),
                "out_width": self.out_width, "activation": self.activation,
                "time_width": self.time_width, "time_max_freq": self.time_max_freq}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        arch = cls(hidden=tuple(d["hidden"]), activation=d["activation"],
                   time_width=d["time_width"], out_width=d["out_width"],
                   time_max_freq=d["time_max_freq"])
        if arch.in_width != d["in_width"]:
            raise NetError("architecture descriptor has inconsistent input width")
        return arch


@dataclass(frozen=True)
class NetParams:
    arch: Architecture
    flat: np.ndarray

    def __post_init__(self):
        flat = np.asarray(self.flat, dtype=np.float64)
        if flat.ndim != 1 or flat.shape[0] != self.arch.n_params:
            raise NetError(
                f"expected {self.arch.n_params} parameters, got shape {flat.shape}")
        if not np.all(np.isfinite(flat)):
            raise NetError("parameters contain NaN or Inf")
        flat = flat.copy()
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)

    def layers(self, flat=None):
        """Yield ``(W, b)`` views into ``flat`` (defaults to the parameters)."""
        flat = self.flat if flat is None else flat
        pos = 0
        out = []
        for i, o in self.arch.layer_shapes:
            W = flat[pos:pos + i * o].reshape(i, o)
            pos += i * o
            b = flat[pos:pos + o]
            pos += o
            out.append((W, b))
        return out

    def copy(self) -> "NetParams":
        return NetParams(self.arch, self.flat)

    def replace(self, flat) -> "NetParams":
        return NetParams(self.arch, flat)

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256(self.flat.tobytes()).hexdigest()


def init_params(arch: Architecture, seed=0, out_scale: float = 0.1) -> NetParams:
    rng = np.random.default_rng(seed)
    chunks = []
    shapes = arch.layer_shapes
    for k, (i, o) in enumerate(shapes):
        std = math.sqrt(1.0 / i) * (out_scale if k == len(shapes) - 1 else 1.0)
        chunks.append(rng.normal(0.0, std, size=i * o))
        chunks.append(np.zeros(o))
    return NetParams(arch, np.concatenate(chunks))


def zero_params(arch: Architecture) -> NetParams:
    return NetParams(arch, np.zeros(arch.n_params))


# --- conditioning ------------------------------------------------------------

@dataclass(frozen=True)
class ContextEmbedding:
    summary: np.ndarray
    scan: np.ndarray = field(repr=False)


def encode_context(p) -> ContextEmbedding:
    p = as_cloud(p)
    n = p.shape[0]
    if n == 0:
        raise NetError("cannot encode an empty scan")
    # fsum keeps the summary exactly invariant to point order
    mean = np.array([math.fsum(p[:, k].tolist()) / n for k in range(3)])
    var = np.array([math.fsum(((p[:, k] - mean[k]) ** 2).tolist()) / n for k in range(3)])
    summary = np.concatenate([mean, var, [math.log(n)]])
    summary.setflags(write=False)
    scan = p.copy()
    scan.setflags(write=False)
    return ContextEmbedding(summary, scan)


def time_embedding(t: int, T: int, width: int = 16, max_freq: float = 10.0) -> np.ndarray:
    half = width // 2
    freqs = np.exp(np.linspace(0.0, math.log(max_freq), half))
    ang = (t / T) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def nearest_index(x: np.ndarray, scan: np.ndarray) -> np.ndarray:
    out = np.empty(x.shape[0], dtype=np.int64)
    for start in range(0, x.shape[0], 4096):
        diff = x[start:start + 4096, None, :] - scan[None, :, :]
        out[start:start + 4096] = np.einsum("ijk,ijk->ij", diff, diff).argmin(axis=1)
    return out


def build_features(arch: Architecture, g_t, t: int, T: int, ctx: ContextEmbedding):
    g_t = as_cloud(g_t)
    if not 1 <= t <= T:
        raise NetError(f"timestep {t} outside [1, {T}]")
    if ctx.summary.shape != (CTX_WIDTH,):
        raise NetError("context summary has the wrong width")
    n = g_t.shape[0]
    nn = nearest_index(g_t, ctx.scan)
    X = np.empty((n, arch.in_width))
    X[:, 0:3] = g_t
    X[:, 3:6] = g_t - ctx.scan[nn]
    X[:, 6:6 + CTX_WIDTH] = ctx.summary
    X[:, 6 + CTX_WIDTH:] = time_embedding(t, T, arch.time_width, arch.time_max_freq)
    return X


# --- forward / backward ------------------------------------------------------

def _act(name, z):
    if name == "silu":
        return z * expit(z)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z):
    if name == "silu":
        s = expit(z)
        return s * (1.0 + z * (1.0 - s))
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


@dataclass
class ForwardCache:
    X: np.ndarray
    pre: list
    post: list


def mlp_forward(params: NetParams, X: np.ndarray):
    if X.ndim != 2 or X.shape[1] != params.arch.in_width:
        raise NetError(f"input width {X.shape[-1]} != {params.arch.in_width}")
    layers = params.layers()
    h = X
    pre, post = [], [X]
    for k, (W, b) in enumerate(layers):
        z = h @ W + b
        if k == len(layers) - 1:
            return z, ForwardCache(X, pre, post)
        pre.append(z)
        h = _act(params.arch.activation, z)
        post.append(h)
    raise AssertionError("unreachable")


def mlp_backward(params: NetParams, cache: ForwardCache, upstream: np.ndarray):
    """Gradients of ``sum(upstream * output)`` w.r.t. parameters and inputs."""
    layers = params.layers()
    grad = np.zeros(params.arch.n_params)
    glayers = params.layers(grad)
    delta = upstream
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        gW, gb = glayers[k]
        gW[...] = cache.post[k].T @ delta
        gb[...] = delta.sum(axis=0)
        dh = delta @ W.T
        if k > 0:
            delta = dh * _act_grad(params.arch.activation, cache.pre[k - 1])
        else:
            return grad, dh
    raise AssertionError("unreachable")


def eps_forward(params: NetParams, g_t, t: int, ctx: ContextEmbedding, T: int,
                return_cache: bool = False):
    """Predict per-point noise for ``g_t`` at timestep ``t`` given scan context."""
    X = build_features(params.arch, g_t, t, T, ctx)
    out, cache = mlp_forward(params, X)
    return (out, cache) if return_cache else out


def eps_backward(params: NetParams, cache: ForwardCache, upstream):
    """Return ``(param_grad, point_grad)`` for ``<upstream, eps_forward(...)>``."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (cache.X.shape[0], 3):
        raise NetError(f"upstream shape {upstream.shape} does not match output")
    grad, gX = mlp_backward(params, cache, upstream)
    # coordinates enter directly and through the nearest-point offset
    return grad, gX[:, 0:3] + gX[:, 3:6]


def bind(params: NetParams, ctx: ContextEmbedding, T: int):
    """Close over parameters and context to get a ``model(g_t, t)`` callable."""
    def model(g_t, t):
        return eps_forward(params, g_t, t, ctx, T)
    return model


# --- optimisation ------------------------------------------------------------

def sgd_step(params: NetParams, grad, lr: float) -> NetParams:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.flat.shape:
        raise NetError(f"gradient length {grad.shape} != parameter length {params.flat.shape}")
    if not lr > 0:
        raise NetError("learning rate must be > 0")
    return params.replace(params.flat - lr * grad)


def lr_schedule(lr0: float, gamma: float, k: int) -> float:
    """Exponential decay, applied once per training iteration."""
    if not 0 < gamma <= 1:
        raise NetError("gamma must lie in (0, 1]")
    if k < 0:
        raise NetError("iteration must be >= 0")
    return lr0 * gamma ** k


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    k: int = 0


def adam_init(params: NetParams) -> AdamState:
    return AdamState(np.zeros_like(params.flat), np.zeros_like(params.flat))


def adam_step(params: NetParams, grad, state: AdamState, lr: float,
              b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> NetParams:
    state.k += 1
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    mhat = state.m / (1 - b1 ** state.k)
    vhat = state.v / (1 - b2 ** state.k)
    return params.replace(params.flat - lr * mhat / (np.sqrt(vhat) + eps))


# --- checkpoints -------------------------------------------------------------

MAGIC = b"DDPONET\x00"
VERSION = 1


def save_params(path, params: NetParams, metadata: dict | None = None) -> None:
    """Write ``MAGIC | u32 version | u32 header len | JSON header | u64 n | f8[n]``.

    All integers and floats are little-endian.
    """
    header = json.dumps({"arch": params.arch.to_dict(), "meta": metadata or {}},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", params.flat.shape[0]))
        fh.write(params.flat.astype("<f8").tobytes())


def load_params(path) -> tuple[NetParams, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:8] != MAGIC:
        raise NetError(f"{path}: not a parameter checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise NetError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (n,) = struct.unpack_from("<Q", data, pos)
    except (ValueError, struct.error) as exc:
        raise NetError(f"{path}: corrupt checkpoint header") from exc
    pos += 8
    if len(data) != pos + 8 * n:
        raise NetError(f"{path}: expected {n} parameters, file holds {(len(data) - pos) // 8}")
    flat = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64)
    arch = Architecture.from_dict(header["arch"])
    return NetParams(arch, flat), header.get("meta", {})
