"""Neural building blocks on top of :mod:`scape.tensor`."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    concat,
    dropout,
    layer_norm,
    matmul,
    relu,
    reshape,
    softmax_rows,
    swapaxes,
    transpose,
)


def param_rng(seed: int, name: str) -> np.random.Generator:
    # Keyed by name so adding or removing a sub-module never shifts the
    # initial values of the others.
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class Module:
    """Parameter container. Parameters are registered under dotted names."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for n, p in self._params.items():
            yield prefix + n, p
        for n, c in self._children.items():
            yield from c.named_parameters(f"{prefix}{n}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for n, p in own.items():
            if state[n].shape != p.shape:
                raise ShapeError(f"{n}: checkpoint shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, seed: int, name: str, bias: bool = True):
        super().__init__()
        s = math.sqrt(1.0 / d_in)
        self.W = self.add_param("W", param_rng(seed, name + ".W").uniform(-s, s, (d_in, d_out)))
        self.b = self.add_param("b", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.W)
        return y + self.b if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(d))
        self.beta = self.add_param("beta", np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """linear -> ReLU -> linear."""

    def __init__(self, d_in: int, hidden: int, d_out: int, seed: int, name: str):
        super().__init__()
        self.fc1 = self.add_child("fc1", Linear(d_in, hidden, seed, name + ".fc1"))
        self.fc2 = self.add_child("fc2", Linear(hidden, d_out, seed, name + ".fc2"))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.fc1.W.shape[0]:
            raise ShapeError(f"MLP expects width {self.fc1.W.shape[0]}, got {x.shape[-1]}")
        return self.fc2(relu(self.fc1(x)))


def mlp_forward(mlp: MLP, x: Tensor) -> Tensor:
    return mlp(x)


@dataclass
class AttentionConfig:
    d_model: int
    n_heads: int
    unshared_qk: bool = False
    kv_source: str = "self"
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.kv_source not in ("self", "cross"):
            raise ValueError(f"unknown kv_source {self.kv_source!r}")


LogitHook = Callable[[Tensor], Tensor]


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``[B, tokens, d]`` inputs.

    With ``unshared_qk`` the query stream is a concatenation of two segments
    split at ``split``; each segment gets its own Q and K projection while the
    value and output projections stay shared.
    """

    def __init__(self, cfg: AttentionConfig, seed: int, name: str):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.q = self.add_child("q", Linear(d, d, seed, name + ".q"))
        self.k = self.add_child("k", Linear(d, d, seed, name + ".k"))
        self.v = self.add_child("v", Linear(d, d, seed, name + ".v"))
        self.o = self.add_child("o", Linear(d, d, seed, name + ".o"))
        if cfg.unshared_qk:
            self.q2 = self.add_child("q2", Linear(d, d, seed, name + ".q2"))
            self.k2 = self.add_child("k2", Linear(d, d, seed, name + ".k2"))

    def _heads(self, x: Tensor) -> Tensor:
        B, n, d = x.shape
        h = self.cfg.n_heads
        return swapaxes(reshape(x, (B, n, h, d // h)), 1, 2)

    def _project(self, x: Tensor, first: Linear, second: Linear | None, split: int | None) -> Tensor:
        if second is None or split is None:
            return first(x)
        return concat([first(x[:, :split]), second(x[:, split:])], axis=1)

    def __call__(
        self,
        q_tokens: Tensor,
        kv_tokens: Tensor | None = None,
        split: int | None = None,
        logit_hook: LogitHook | None = None,
        mask: np.ndarray | None = None,
    ) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        if q_tokens.shape[-1] != cfg.d_model:
            raise ShapeError(f"token width {q_tokens.shape[-1]} != d_model {cfg.d_model}")
        if kv_tokens is None:
            kv_tokens = q_tokens
        if split is not None and not 0 <= split <= q_tokens.shape[1]:
            raise IndexError(f"split index {split} outside [0, {q_tokens.shape[1]}]")
        unshared = cfg.unshared_qk and cfg.kv_source == "self"
        q2 = self.q2 if unshared else None
        k2 = self.k2 if unshared else None

        Q = self._heads(self._project(q_tokens, self.q, q2, split))
        K = self._heads(self._project(kv_tokens, self.k, k2, split))
        V = self._heads(self.v(kv_tokens))
        scale = 1.0 / math.sqrt(cfg.d_model // cfg.n_heads)
        logits = matmul(Q, swapaxes(K, -1, -2)) * scale
        if logit_hook is not None:
            logits = logit_hook(logits)
        attn = softmax_rows(logits, mask)
        out = matmul(attn, V)
        B, h, a, dh = out.shape
        out = reshape(swapaxes(out, 1, 2), (B, a, h * dh))
        return self.o(out), attn


def multi_head_attention(mha: MultiHeadAttention, q_tokens, kv_tokens=None, split=None,
                         logit_hook=None, mask=None):
    return mha(q_tokens, kv_tokens, split=split, logit_hook=logit_hook, mask=mask)


def positional_encoding_2d(h: int, w: int, d: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed sinusoidal grid encoding, ``[(h*w), d]`` in row-major cell order.

    The first ``d/2`` channels encode the row index, the rest the column;
    each half interleaves sin/cos over a geometric frequency ladder.
    """
    if d % 4:
        raise ValueError(f"positional encoding width {d} must be divisible by 4")
    quarter = d // 4
    freqs = temperature ** (-np.arange(quarter) / quarter)

    def encode(pos: np.ndarray) -> np.ndarray:
        ang = pos[:, None] * freqs[None, :]
        out = np.empty((pos.size, 2 * quarter))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                             indexing="ij")
    return np.concatenate([encode(rows.ravel()), encode(cols.ravel())], axis=1)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState) -> None:
    """Bias-corrected Adam update, in place. ``None`` grads count as zero."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match parameter list")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_schedule(epoch: int, base_lr: float, total_epochs: int = 180) -> float:
    """Step decay by 0.1 at 140/180 and 170/180 of the run."""
    milestones = (140 * total_epochs / 180, 170 * total_epochs / 180)
    passed = sum(epoch >= m for m in milestones)
    return base_lr * 0.1 ** passed


def feed_forward_block(x: Tensor, ffn: MLP, norm: LayerNorm) -> Tensor:
    return norm(x + ffn(x))


__all__ = [
    "AdamState",
    "AttentionConfig",
    "LayerNorm",
    "Linear",
    "MLP",
    "Module",
    "MultiHeadAttention",
    "adam_step",
    "dropout",
    "lr_schedule",
    "mlp_forward",
    "multi_head_attention",
    "param_rng",
    "positional_encoding_2d",
    "transpose",
]
