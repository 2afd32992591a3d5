"""Sub-token embedding + MLP trunk producing per-token logits.

Each sub-token entry (a digit or the mask) is looked up in one shared
``(b+1, D/l)`` table, a learned offset for its position j is added, and the
``L*l`` vectors are concatenated into the MLP input. Gradients are written out
by hand per layer.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

CHECKPOINT_MAGIC = b"PRIMEMDM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    seq_len: int
    length: int
    base: int
    num_classes: int
    embed_dim: int = 48
    hidden_dim: int = 512
    num_layers: int = 4
    head: str = "joint"

    def __post_init__(self):
        for name in ("seq_len", "length", "base", "num_classes", "embed_dim",
                     "hidden_dim", "num_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.embed_dim % self.length:
            raise ValueError(f"embed_dim={self.embed_dim} not divisible by l={self.length}")
        if self.head not in ("joint", "independent"):
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def sub_dim(self) -> int:
        return self.embed_dim // self.length

    @property
    def input_dim(self) -> int:
        return self.seq_len * self.embed_dim

    @property
    def output_shape(self) -> tuple[int, ...]:
        if self.head == "joint":
            return (self.seq_len, self.num_classes)
        return (self.seq_len, self.length, self.base)

    @property
    def output_dim(self) -> int:
        return int(np.prod(self.output_shape))

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_dim] * (self.num_layers - 1) + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


class Params(OrderedDict):
    """Named parameter arrays; iteration order is the serialization order."""

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values()])

    def load_flat(self, vec) -> "Params":
        out = Params()
        i = 0
        for k, v in self.items():
            out[k] = np.asarray(vec[i:i + v.size], dtype=v.dtype).reshape(v.shape).copy()
            i += v.size
        if i != len(vec):
            raise ValueError("flat vector length mismatch")
        return out

    def copy(self) -> "Params":
        return Params((k, v.copy()) for k, v in self.items())

    def zeros_like(self) -> "Params":
        return Params((k, np.zeros_like(v)) for k, v in self.items())

    def astype(self, dtype) -> "Params":
        return Params((k, v.astype(dtype)) for k, v in self.items())

    @property
    def size(self) -> int:
        return sum(v.size for v in self.values())


def init(config: NetConfig, rng: np.random.Generator, dtype=np.float64,
         zero_head: bool = False) -> Params:
    """Uniform fan-in init (variance 1/fan_in), zero biases.

    ``zero_head`` zeroes the last layer so every logit starts at 0.
    """
    p = Params()
    p["embed"] = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), (config.base + 1, config.sub_dim))
    p["pos"] = np.zeros((config.length, config.sub_dim))
    for k, (fan_in, fan_out) in enumerate(config.layer_dims()):
        bound = np.sqrt(3.0 / fan_in)
        p[f"W{k}"] = rng.uniform(-bound, bound, (fan_in, fan_out))
        p[f"b{k}"] = np.zeros(fan_out)
    if zero_head:
        p[f"W{config.num_layers - 1}"][:] = 0.0
    return p.astype(dtype)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def swish(x):
    return x * sigmoid(x)


def swish_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def forward(params: Params, y_t, config: NetConfig, return_cache: bool = False):
    """Logits of shape ``(N,) + config.output_shape`` (batch axis kept if given)."""
    y = np.asarray(y_t)
    single = y.ndim == 2
    if single:
        y = y[None]
    if y.shape[1:] != (config.seq_len, config.length):
        raise ValueError(f"input shape {y.shape[1:]} != {(config.seq_len, config.length)}")
    if y.min() < 0 or y.max() > config.base:
        raise ValueError("entries must lie in {0..b} (b = mask)")
    n = y.shape[0]
    e = params["embed"][y] + params["pos"]            # (N, L, l, d)
    h = e.reshape(n, config.input_dim)
    pre = []
    acts = [h]
    n_layers = config.num_layers
    for k in range(n_layers):
        z = h @ params[f"W{k}"] + params[f"b{k}"]
        if k < n_layers - 1:
            pre.append(z)
            h = swish(z)
            acts.append(h)
        else:
            h = z
    logits = h.reshape((n,) + config.output_shape)
    if single:
        logits = logits[0]
    if return_cache:
        return logits, (y, acts, pre, single)
    return logits


def backward(params: Params, cache, upstream, config: NetConfig) -> Params:
    """Gradients of sum(logits * upstream) w.r.t. every parameter."""
    y, acts, pre, single = cache
    g = np.asarray(upstream)
    if single:
        g = g[None]
    n = y.shape[0]
    g = g.reshape(n, config.output_dim).astype(params["W0"].dtype, copy=False)
    grads = Params((k, None) for k in params)
    n_layers = config.num_layers
    for k in range(n_layers - 1, -1, -1):
        grads[f"W{k}"] = acts[k].T @ g
        grads[f"b{k}"] = g.sum(axis=0)
        g = g @ params[f"W{k}"].T
        if k > 0:
            g = g * swish_grad(pre[k - 1])
    de = g.reshape(n, config.seq_len, config.length, config.sub_dim)
    grads["pos"] = de.sum(axis=(0, 1))
    onehot = (y.reshape(-1)[:, None] == np.arange(config.base + 1)).astype(de.dtype)
    grads["embed"] = onehot.T @ de.reshape(-1, config.sub_dim)
    return grads


def save_checkpoint(path, params: Params, config: NetConfig, meta: dict | None = None) -> None:
    """Layout: magic(8) | version u32 | header_len u32 | header JSON |
    count u64 | count float64 little-endian values in ``params`` order."""
    header = {"net": asdict(config), "order": [[k, list(v.shape)] for k, v in params.items()]}
    if meta:
        header["meta"] = meta
    blob = json.dumps(header, sort_keys=True).encode()
    flat = params.flat().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())


def load_checkpoint(path):
    """Return (params, config, meta)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    header = json.loads(data[off:off + hlen].decode())
    off += hlen
    (count,) = struct.unpack_from("<Q", data, off)
    off += 8
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=off)
    config = NetConfig(**header["net"])
    params = Params()
    i = 0
    for name, shape in header["order"]:
        size = int(np.prod(shape))
        params[name] = flat[i:i + size].reshape(shape).astype(np.float64)
        i += size
    if i != count:
        raise ValueError(f"{path}: parameter count mismatch")
    return params, config, header.get("meta", {})
