"""Dense layers, the MLP, Adam and the flat binary checkpoint format."""
from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import autodiff as ad

MAGIC = b"GLCKPT01"


class Module:
    """Anything holding named parameter tensors."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, ad.Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{key}.")
                    elif isinstance(item, ad.Tensor) and item.requires_grad:
                        yield f"{prefix}{name}.{key}", item

    def parameters(self) -> list[ad.Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise ValueError(f"parameter names differ: {missing[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.data.shape}")
            p.data[...] = value


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.n_in, self.n_out = n_in, n_out
        self.weight = ad.tensor(glorot(rng, n_in, n_out), requires_grad=True)
        self.bias = ad.tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x):
        x = ad.constant(x)
        if x.shape[-1] != self.n_in:
            raise ad.GraphError(f"Linear expects last dim {self.n_in}, got {x.shape}")
        out = ad.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class Mlp(Module):
    """z_l = relu(W_l z_{l-1} + b_l) on hidden layers, identity on the output."""

    def __init__(self, widths: list[int], rng: np.random.Generator):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.widths = list(widths)
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def __call__(self, z):
        z = ad.constant(z)
        if z.shape[-1] != self.widths[0]:
            raise ad.GraphError(f"MLP expects input dim {self.widths[0]}, got {z.shape[-1]}")
        for i, layer in enumerate(self.layers):
            z = layer(z)
            if i < len(self.layers) - 1:
                z = ad.relu(z)
        return z


class Adam:
    """Bias-corrected Adam. Non-finite gradients skip the step and bump a counter."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, max_grad_norm=None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.skipped = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self) -> bool:
        grads = [p.grad for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            self.zero_grad()
            return False
        if self.max_grad_norm is not None:
            norm = np.sqrt(np.sum([np.sum(g * g) for g in grads]))
            if norm > self.max_grad_norm:
                grads = [g * (self.max_grad_norm / norm) for g in grads]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.zero_grad()
        return True


# ----------------------------------------------------------------- checkpoints

def save_checkpoint(module: Module, path, meta: dict | None = None) -> None:
    """Flat binary: magic, tensor count, per-tensor shape table, float64 data.

    A JSON sidecar (``<path>.json``) carries parameter names and ``meta``.
    """
    path = Path(path)
    named = list(module.named_parameters())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(named)))
        for _, p in named:
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        for _, p in named:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    sidecar = {"names": [n for n, _ in named], "meta": meta or {}}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def read_checkpoint(path) -> list[np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = 8
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    shapes = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shapes.append(struct.unpack_from(f"<{ndim}I", raw, pos))
        pos += 4 * ndim
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape, dtype=np.int64))
        arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).copy())
        pos += 8 * n
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return arrays


def load_checkpoint(module: Module, path) -> dict:
    """Load parameters into ``module``; shapes must match. Returns sidecar meta."""
    arrays = read_checkpoint(path)
    named = list(module.named_parameters())
    if len(arrays) != len(named):
        raise ValueError(f"checkpoint holds {len(arrays)} tensors, module has {len(named)}")
    for (name, p), arr in zip(named, arrays):
        if arr.shape != p.data.shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != {p.data.shape}")
    for (_, p), arr in zip(named, arrays):
        p.data[...] = arr
    sidecar = Path(str(path) + ".json")
    return json.loads(sidecar.read_text())["meta"] if sidecar.exists() else {}


@contextmanager
def frozen(module: Module):
    """Temporarily stop gradients from reaching ``module``'s parameters."""
    params = module.parameters()
    try:
        for p in params:
            p.requires_grad = False
        yield module
    finally:
        for p in params:
            p.requires_grad = True


def config_from_checkpoint(path, config_cls):
    """Rebuild the config dataclass stored in a checkpoint sidecar (defaults if absent)."""
    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        return config_cls()
    stored = json.loads(sidecar.read_text()).get("meta", {}).get("config", {})
    known = {f.name: f for f in fields(config_cls)}
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in stored.items() if k in known}
    return config_cls(**kw)
