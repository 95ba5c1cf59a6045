"""Parameter containers and transformer building blocks."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds parameters (``Tensor`` with requires_grad) and child modules.

    Parameter names are dotted attribute paths; list children use their index.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: stored shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> None:
        for p in self.parameters():
            if p.data.dtype != dtype:
                p.data = p.data.astype(dtype)


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = param(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self.bias = param(np.zeros(fan_out)) if bias else None
        self.fan_in, self.fan_out = fan_in, fan_out

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y

    def set_identity(self) -> None:
        if self.fan_in != self.fan_out:
            raise ValueError("identity needs a square projection")
        self.weight.data = np.eye(self.fan_in, dtype=self.weight.data.dtype)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def set_zero(self) -> None:
        self.weight.data = np.zeros_like(self.weight.data)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.gain = param(np.ones(width))
        self.bias = param(np.zeros(width))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    def __init__(self, width: int, rng: np.random.Generator, expansion: int = 4):
        self.up = Linear(width, expansion * width, rng)
        self.down = Linear(expansion * width, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))


class MultiHeadAttention(Module):
    """softmax(QK^T / sqrt(d_k)) V per head, with learned Q/K/V/output maps.

    ``mask`` is a boolean array broadcastable to (B, heads, Tq, Tk); False
    entries are excluded from the softmax.  When ``keep_probs`` is set, the
    last attention probabilities are kept on ``last_probs`` (B, heads, Tq, Tk).
    """

    def __init__(self, q_width: int, kv_width: int, width: int, heads: int, rng: np.random.Generator):
        if width % heads:
            raise ValueError(f"attention width {width} is not divisible by {heads} heads")
        self.wq = Linear(q_width, width, rng)
        # no key bias: it shifts each score row by a constant, which softmax ignores
        self.wk = Linear(kv_width, width, rng, bias=False)
        self.wv = Linear(kv_width, width, rng)
        self.wo = Linear(width, q_width, rng)
        self._heads = heads
        self._dk = width // heads
        self._keep = False
        self._last_probs: np.ndarray | None = None

    @property
    def heads(self) -> int:
        return self._heads

    @property
    def last_probs(self) -> np.ndarray | None:
        return self._last_probs

    def keep_probs(self, flag: bool = True) -> None:
        self._keep = flag

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return T.transpose(x.reshape(b, t, self._heads, self._dk), (0, 2, 1, 3))

    def __call__(self, xq: Tensor, xkv: Tensor, mask: np.ndarray | None = None) -> Tensor:
        b, tq, _ = xq.shape
        q = self._split(self.wq(xq))
        k = self._split(self.wk(xkv))
        v = self._split(self.wv(xkv))
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(self._dk))
        probs = T.softmax(scores, axis=-1, mask=mask)
        if self._keep:
            self._last_probs = probs.data.copy()
        ctx = T.matmul(probs, v)
        ctx = T.transpose(ctx, (0, 2, 1, 3)).reshape(b, tq, self._heads * self._dk)
        return self.wo(ctx)


class SelfAttentionBlock(Module):
    """Pre-norm block: x + Attn(LN x); x + FFN(LN x)."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        self.ln_attn = LayerNorm(width)
        self.attn = MultiHeadAttention(width, width, width, heads, rng)
        self.ln_ffn = LayerNorm(width)
        self.ffn = FeedForward(width, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self.ln_attn(x)
        x = x + self.attn(h, h, mask)
        return x + self.ffn(self.ln_ffn(x))


def sinusoidal_xyz(xyz: np.ndarray, width: int, dtype=None) -> np.ndarray:
    """Fixed sinusoidal code of each coordinate, concatenated, zero-padded to ``width``.

    Each axis gets ``width // 6`` (sin, cos) pairs with frequencies spread
    geometrically over [pi, 16 pi], sized for coordinates in [-1, 1].
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    per_axis = max(width // 6, 1)
    freqs = np.pi * 2.0 ** np.linspace(0.0, 4.0, per_axis)
    parts = []
    for axis in range(3):
        angles = xyz[..., axis:axis + 1] * freqs
        parts.append(np.sin(angles))
        parts.append(np.cos(angles))
    code = np.concatenate(parts, axis=-1)[..., :width]
    if code.shape[-1] < width:
        pad = np.zeros(code.shape[:-1] + (width - code.shape[-1],))
        code = np.concatenate([code, pad], axis=-1)
    return code.astype(dtype or T.get_dtype())
