"""The one-stage keypoint transformer and its ablation variants.

Data flow for a batch of episodes::

    support/query images -> patch embedding -> Gaussian-pooled keypoint tokens
    keypoint tokens + identifiers --GKP (cross-attn to support [+ query])-->
    [keypoints | query patches] --interactor (self-attn, KAR on kp->kp logits)-->
    keypoint tokens --MLP--> coordinates

Everything is batched along a leading episode axis and keypoint slots are
padded to ``K_max``; padded slots are masked as attention keys.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .nn import (
    MLP,
    AttentionConfig,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    param_rng,
    positional_encoding_2d,
)
from .tensor import (
    ShapeError,
    Tensor,
    add_at,
    concat,
    cross_entropy_rows,
    dropout,
    l1_loss,
    layer_norm,
    matmul,
    relu,
    reshape,
    softmax_rows,
    swapaxes,
    tsum,
)

VARIANTS = (
    "scape", "lite", "no_gkp", "no_kar", "shared_qk", "mask_kk",
    "matching_head", "map_regression_head",
)


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    d_model: int = 32
    n_heads: int = 4
    n_gkp_layers: int = 2
    n_interactor_layers: int = 4
    K_max: int = 12
    n_filters: int = 4
    af_hidden: int = 0  # 0 -> K_max // 2
    variant: str = "scape"
    d_ff: int = 0  # 0 -> 2 * d_model
    assign_dropout: float = 0.1
    sigma: float = 1.0
    gkp_query_ctx: bool = True
    use_identifier: bool = True
    support_pe: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.af_hidden <= 0:
            self.af_hidden = max(1, self.K_max // 2)
        if self.d_ff <= 0:
            self.d_ff = 2 * self.d_model
        if self.variant == "lite":
            self.n_gkp_layers, self.n_interactor_layers = 1, 2

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_query_tokens(self) -> int:
        return self.grid ** 2

    def structure(self) -> dict:
        """Resolve the variant into concrete switches."""
        v = self.variant
        blocks = self.n_gkp_layers + self.n_interactor_layers
        baseline = v in ("shared_qk", "matching_head", "map_regression_head")
        no_gkp = baseline or v == "no_gkp"
        return {
            "n_gkp": 0 if no_gkp else self.n_gkp_layers,
            "n_interactor": blocks if no_gkp else self.n_interactor_layers,
            "unshared_qk": not baseline,
            "kar": v in ("scape", "lite", "no_gkp"),
            "mask_kk": v == "mask_kk",
            "head": {"matching_head": "explicit",
                     "map_regression_head": "token_regression"}.get(v, "coordinate"),
        }

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.strip().splitlines():
            key, val = line.split("=", 1)
            kw[key] = _parse_value(val, kinds[key])
        return cls(**kw)

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _parse_value(val: str, kind):
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "bool":
        if val not in ("True", "False"):
            raise ValueError(f"not a boolean: {val!r}")
        return val == "True"
    if kind == "int":
        return int(val)
    if kind == "float":
        return float(val)
    return val


# ---------------------------------------------------------------- batches

@dataclass
class EpisodeBatch:
    support_images: np.ndarray  # [B, S, H, W]
    support_kps: np.ndarray  # [B, S, K, 2]
    support_vis: np.ndarray  # [B, S, K]
    query_image: np.ndarray  # [B, H, W]
    query_kps: np.ndarray  # [B, K, 2]
    query_vis: np.ndarray  # [B, K]
    valid: np.ndarray  # [B, K]
    normalizer: np.ndarray  # [B]
    symmetric: np.ndarray  # [B, K]

    @property
    def size(self) -> int:
        return self.query_image.shape[0]

    @classmethod
    def from_episodes(cls, episodes: Sequence, K_max: int) -> "EpisodeBatch":
        B = len(episodes)
        S = len(episodes[0].supports)
        if any(len(e.supports) != S for e in episodes):
            raise ValueError("all episodes in a batch need the same shot count")
        H, W = episodes[0].query.image.shape
        out = cls(
            np.zeros((B, S, H, W)), np.zeros((B, S, K_max, 2)), np.zeros((B, S, K_max), bool),
            np.zeros((B, H, W)), np.zeros((B, K_max, 2)), np.zeros((B, K_max), bool),
            np.zeros((B, K_max), bool), np.zeros(B), np.zeros((B, K_max), bool),
        )
        for b, e in enumerate(episodes):
            k = e.k
            if k > K_max:
                raise ShapeError(f"episode has {k} keypoints but K_max={K_max}")
            for s, inst in enumerate(e.supports):
                out.support_images[b, s] = inst.image
                out.support_kps[b, s, :k] = inst.keypoints
                out.support_vis[b, s, :k] = inst.visibility
            out.query_image[b] = e.query.image
            out.query_kps[b, :k] = e.query.keypoints
            out.query_vis[b, :k] = e.query.visibility
            out.valid[b, :k] = True
            out.normalizer[b] = e.normalizer
            if len(e.symmetric) == k:
                out.symmetric[b, :k] = e.symmetric
        return out


# ---------------------------------------------------------------- records

@dataclass
class LayerRecord:
    kind: str  # "gkp" | "interactor"
    attn: np.ndarray  # [B, h, a, b]
    kk_before: np.ndarray | None = None  # [B, h, K, K] logits
    kk_after: np.ndarray | None = None
    assign: np.ndarray | None = None  # [B, K, n_filters]


@dataclass
class AttentionRecord:
    layers: list[LayerRecord] = field(default_factory=list)
    split: int = 0  # number of keypoint slots preceding image tokens


# ---------------------------------------------------------------- pieces

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[N, H, W] -> [N, (H/p)*(W/p), p*p]`` in row-major patch order."""
    N, H, W = images.shape
    g_h, g_w = H // patch, W // patch
    x = images.reshape(N, g_h, patch, g_w, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(N, g_h * g_w, patch * patch)


def keypoint_heatmaps(keypoints: np.ndarray, grid: int, sigma: float) -> np.ndarray:
    """Normalized Gaussian pooling weights ``[..., k, grid*grid]``.

    Keypoint ``(x, y)`` in [0, 1] sits at grid position ``(x*g - 0.5, y*g - 0.5)``
    where cell ``(i, j)`` has its centre at ``(j, i)``. ``sigma == 0`` selects the
    nearest cell (lowest flat index on ties).
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    cx = keypoints[..., 0] * grid - 0.5
    cy = keypoints[..., 1] * grid - 0.5
    rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    d2 = (cols.ravel() - cx[..., None]) ** 2 + (rows.ravel() - cy[..., None]) ** 2
    if sigma == 0:
        w = np.zeros_like(d2)
        np.put_along_axis(w, np.argmin(d2, axis=-1)[..., None], 1.0, axis=-1)
        return w
    w = np.exp(-d2 / (2.0 * sigma * sigma))
    z = w.sum(axis=-1, keepdims=True)
    assert np.all(z > 0), "degenerate heatmap normalizer"
    return w / z


def extract_keypoint_tokens(support_feat: Tensor, keypoints: np.ndarray, sigma: float) -> Tensor:
    """Heatmap-weighted mean of features.

    ``support_feat`` is ``[..., g*g, d]`` (or ``[g, g, d]``), ``keypoints`` ``[..., k, 2]``.
    """
    if support_feat.ndim == 3 and keypoints.ndim == 2 and support_feat.shape[0] == support_feat.shape[1]:
        g = support_feat.shape[0]
        support_feat = reshape(support_feat, (g * g, support_feat.shape[-1]))
    g = int(round(math.sqrt(support_feat.shape[-2])))
    if not np.all((keypoints >= 0) & (keypoints <= 1)):
        raise ValueError("keypoints must lie in the unit square")
    return matmul(Tensor(keypoint_heatmaps(keypoints, g, sigma)), support_feat)


class Backbone(Module):
    """Non-overlapping patches -> shared linear projection -> layer norm."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        self.proj = self.add_child("proj", Linear(p * p, cfg.d_model, cfg.seed, "backbone.proj"))
        self.norm = self.add_child("norm", LayerNorm(cfg.d_model))

    def __call__(self, images: np.ndarray) -> Tensor:
        s = self.cfg.image_size
        if images.shape[-2:] != (s, s):
            raise ShapeError(f"expected {s}x{s} images, got {images.shape[-2:]}")
        lead = images.shape[:-2]
        flat = patchify(images.reshape((-1, s, s)), self.cfg.patch_size)
        out = self.norm(self.proj(Tensor(flat)))
        return reshape(out, lead + out.shape[-2:])


class KarLayer(Module):
    """Attention filters mixed per keypoint by the weight assigner."""

    def __init__(self, cfg: ModelConfig, name: str):
        super().__init__()
        self.cfg = cfg
        K, n = cfg.K_max, cfg.n_filters
        self.filters = [self.add_child(f"af{i}", MLP(K, cfg.af_hidden, K, cfg.seed, f"{name}.af{i}"))
                        for i in range(n)]
        s = math.sqrt(1.0 / cfg.d_model)
        self.W_assign = self.add_param(
            "W_assign", param_rng(cfg.seed, name + ".W_assign").uniform(-s, s, (cfg.d_model, n)))
        self.norm = self.add_child("norm", LayerNorm(n))

    def assign(self, F_s: Tensor, rng=None, training: bool = False) -> Tensor:
        z = dropout(matmul(F_s, self.W_assign), self.cfg.assign_dropout, rng, training)
        return softmax_rows(self.norm(z))

    def __call__(self, logits_kk: Tensor, F_s: Tensor, valid: np.ndarray, rng=None,
                 training: bool = False, weights: Tensor | None = None) -> Tensor:
        """Refined keypoint->keypoint logits, ``A + sum_i w_i * AF_i(A)``.

        ``logits_kk`` is ``[B, h, K, K]`` (or ``[K, K]``); ``valid`` is ``[B, K]``.
        """
        squeeze = logits_kk.ndim == 2
        if squeeze:
            logits_kk = reshape(logits_kk, (1, 1) + logits_kk.shape)
            F_s = reshape(F_s, (1,) + F_s.shape)
            valid = np.asarray(valid)[None]
        B, h, K, K2 = logits_kk.shape
        if valid.shape != (B, K) or K != K2:
            raise ShapeError(f"valid mask {valid.shape} does not fit logits {logits_kk.shape}")
        pair = (valid[:, None, :, None] & valid[:, None, None, :]).astype(np.float64)
        A = logits_kk * pair
        w = self.assign(F_s, rng, training) if weights is None else weights
        r = relu(A)
        total = None
        for i, af in enumerate(self.filters):
            wi = reshape(w[:, :, i], (B, 1, K, 1))
            term = af(r) * pair * wi
            total = term if total is None else total + term
        out = A + total
        return reshape(out, (K, K)) if squeeze else out


def kar_refine(logits_kk: Tensor, F_s: Tensor, layer: KarLayer, valid: np.ndarray) -> Tensor:
    return layer(logits_kk, F_s, valid)


class GkpLayer(Module):
    def __init__(self, cfg: ModelConfig, name: str):
        super().__init__()
        acfg = AttentionConfig(cfg.d_model, cfg.n_heads, kv_source="cross")
        self.attn = self.add_child("attn", MultiHeadAttention(acfg, cfg.seed, name + ".attn"))
        self.norm1 = self.add_child("norm1", LayerNorm(cfg.d_model))
        self.ffn = self.add_child("ffn", MLP(cfg.d_model, cfg.d_ff, cfg.d_model, cfg.seed, name + ".ffn"))
        self.norm2 = self.add_child("norm2", LayerNorm(cfg.d_model))

    def __call__(self, F_s: Tensor, context: Tensor) -> tuple[Tensor, Tensor]:
        out, attn = self.attn(F_s, context)
        x = self.norm1(F_s + out)
        return self.norm2(x + self.ffn(x)), attn


class InteractorLayer(Module):
    def __init__(self, cfg: ModelConfig, name: str, unshared: bool, kar: bool):
        super().__init__()
        acfg = AttentionConfig(cfg.d_model, cfg.n_heads, unshared_qk=unshared)
        self.attn = self.add_child("attn", MultiHeadAttention(acfg, cfg.seed, name + ".attn"))
        self.norm1 = self.add_child("norm1", LayerNorm(cfg.d_model))
        self.ffn = self.add_child("ffn", MLP(cfg.d_model, cfg.d_ff, cfg.d_model, cfg.seed, name + ".ffn"))
        self.norm2 = self.add_child("norm2", LayerNorm(cfg.d_model))
        self.kar = self.add_child("kar", KarLayer(cfg, name + ".kar")) if kar else None


@dataclass
class TokenSet:
    F_s: Tensor  # [B, K_max, d]
    F_q: Tensor  # [B, n_q, d]
    valid: np.ndarray  # [B, K_max]


@dataclass
class ForwardResult:
    coords: np.ndarray  # [B, K_max, 2], evaluation-ready (clamped / decoded)
    raw: Tensor  # raw head output: coordinates or map logits
    loss: Tensor | None
    record: AttentionRecord | None
    tokens: TokenSet | None = None


class ScapeModel(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        st = self.struct = cfg.structure()
        d, K, seed = cfg.d_model, cfg.K_max, cfg.seed
        self.backbone = self.add_child("backbone", Backbone(cfg))
        self.identifiers = self.add_param("identifiers", np.zeros((K, d)))
        self.gkp = [self.add_child(f"gkp{i}", GkpLayer(cfg, f"gkp{i}")) for i in range(st["n_gkp"])]
        self.interactor = [
            self.add_child(f"inter{i}", InteractorLayer(cfg, f"inter{i}", st["unshared_qk"], st["kar"]))
            for i in range(st["n_interactor"])
        ]
        if st["head"] == "coordinate":
            self.head = self.add_child("head", MLP(d, d, 2, seed, "head"))
        elif st["head"] == "explicit":
            self.p1 = self.add_child("p1", Linear(d, d, seed, "p1"))
            self.p2 = self.add_child("p2", Linear(d, d, seed, "p2"))
        else:
            self.head = self.add_child("head", MLP(d, d, cfg.n_query_tokens, seed, "maphead"))
        self.pos = positional_encoding_2d(cfg.grid, cfg.grid, d)
        self.training = False
        self.rng = np.random.default_rng(seed)

    # -- stages -------------------------------------------------------------

    def tokenize(self, batch: EpisodeBatch) -> tuple[TokenSet, Tensor]:
        """Embed images and build keypoint/query tokens plus support context."""
        cfg = self.cfg
        B, S = batch.support_images.shape[:2]
        n, d = cfg.n_query_tokens, cfg.d_model
        feat_s = self.backbone(batch.support_images)  # [B, S, n, d]
        feat_q = self.backbone(batch.query_image)  # [B, n, d]
        ctx_s = feat_s + self.pos
        heat = keypoint_heatmaps(np.clip(batch.support_kps, 0.0, 1.0), cfg.grid, cfg.sigma)
        tok = matmul(Tensor(heat), ctx_s if cfg.support_pe else feat_s)  # [B, S, K, d]
        if S == 1:
            F_s = reshape(tok, (B, cfg.K_max, d))
        else:
            # mean over the shots in which each keypoint is visible
            w = batch.support_vis.astype(np.float64)
            w = w / np.maximum(w.sum(axis=1, keepdims=True), 1.0)
            F_s = tsum(tok * w[..., None], axis=1)
        if cfg.use_identifier:
            F_s = F_s + self.identifiers
        F_s = F_s * batch.valid[..., None].astype(np.float64)
        F_q = feat_q + self.pos
        ctx = reshape(ctx_s, (B, S * n, d))
        return TokenSet(F_s, F_q, batch.valid), ctx

    def gkp_forward(self, tokens: TokenSet, support_ctx: Tensor, include_query_ctx: bool | None = None,
                    record: AttentionRecord | None = None) -> TokenSet:
        if support_ctx.shape[1] == 0:
            raise ValueError("GKP needs a non-empty context")
        if include_query_ctx is None:
            include_query_ctx = self.cfg.gkp_query_ctx
        ctx = concat([support_ctx, tokens.F_q], axis=1) if include_query_ctx else support_ctx
        vmask = tokens.valid[..., None].astype(np.float64)
        F_s = tokens.F_s
        for layer in self.gkp:
            F_s, attn = layer(F_s, ctx)
            F_s = F_s * vmask
            if record is not None:
                record.layers.append(LayerRecord("gkp", attn.data.copy()))
        return TokenSet(F_s, tokens.F_q, tokens.valid)

    def interactor_forward(self, tokens: TokenSet, record: AttentionRecord | None = None) -> TokenSet:
        F_s, F_q, valid = tokens.F_s, tokens.F_q, tokens.valid
        B, K = valid.shape
        n = F_q.shape[1]
        cols = np.concatenate([valid, np.ones((B, n), bool)], axis=1)
        mask = np.broadcast_to(cols[:, None, None, :], (B, 1, K + n, K + n)).copy()
        if self.struct["mask_kk"]:
            mask[:, :, :K, :K] = False
        vmask = valid[..., None].astype(np.float64)
        kk = (slice(None), slice(None), slice(None, K), slice(None, K))

        for layer in self.interactor:
            captured = {}

            def hook(logits: Tensor, layer=layer, F_s=F_s, captured=captured) -> Tensor:
                before = logits[kk]
                if record is not None:
                    captured["before"] = before.data.copy()
                if layer.kar is None:
                    return logits
                w = layer.kar.assign(F_s, self.rng, self.training)
                refined = layer.kar(before, F_s, valid, weights=w)
                if record is not None:
                    captured["after"] = refined.data.copy()
                    captured["assign"] = w.data.copy()
                return add_at(logits, kk, refined - before)

            X = concat([F_s, F_q], axis=1)
            out, attn = layer.attn(X, split=K, logit_hook=hook, mask=mask)
            X = layer.norm1(X + out)
            X = layer.norm2(X + layer.ffn(X))
            F_s, F_q = X[:, :K] * vmask, X[:, K:]
            if record is not None:
                before = captured["before"]
                record.layers.append(LayerRecord("interactor", attn.data.copy(), before,
                                                 captured.get("after", before),
                                                 captured.get("assign")))
        return TokenSet(F_s, F_q, valid)

    def regress_coordinates(self, F_s: Tensor) -> Tensor:
        return self.head(F_s)

    def similarity_map(self, F_s: Tensor, F_q: Tensor) -> Tensor:
        if self.struct["head"] == "explicit":
            a, b = self.p1(F_s), self.p2(F_q)
            return matmul(a, swapaxes(b, -1, -2)) * (1.0 / math.sqrt(self.cfg.d_model))
        return self.head(F_s)

    # -- full pass ----------------------------------------------------------

    def forward(self, batch: EpisodeBatch, record: bool = False, supervise_occluded: bool = True,
                with_loss: bool = True) -> ForwardResult:
        rec = AttentionRecord(split=self.cfg.K_max) if record else None
        tokens, ctx = self.tokenize(batch)
        tokens = self.gkp_forward(tokens, ctx, record=rec)
        tokens = self.interactor_forward(tokens, rec)
        sup = batch.valid & (batch.query_vis | supervise_occluded)
        if self.struct["head"] == "coordinate":
            raw = self.regress_coordinates(tokens.F_s)
            coords = np.clip(raw.data, 0.0, 1.0)
            loss = l1_loss(raw, batch.query_kps, sup) if with_loss and sup.any() else None
        else:
            raw = self.similarity_map(tokens.F_s, tokens.F_q)
            coords = decode_argmax(raw.data, self.cfg.grid)
            target = cell_index(batch.query_kps, self.cfg.grid)
            loss = cross_entropy_rows(raw, target, sup) if with_loss and sup.any() else None
        return ForwardResult(coords, raw, loss, rec, tokens)


def cell_index(keypoints: np.ndarray, grid: int) -> np.ndarray:
    col = np.clip((keypoints[..., 0] * grid).astype(int), 0, grid - 1)
    row = np.clip((keypoints[..., 1] * grid).astype(int), 0, grid - 1)
    return row * grid + col


def decode_argmax(maps: np.ndarray, grid: int) -> np.ndarray:
    """Cell-centre coordinates of each map's maximum; ties go to the lowest
    flat index. ``maps`` is ``[..., grid*grid]``, result ``[..., 2]`` as (x, y)."""
    maps = np.asarray(maps)
    if maps.shape[-1] != grid * grid:
        raise ShapeError(f"map of length {maps.shape[-1]} is not a {grid}x{grid} grid")
    idx = np.argmax(maps, axis=-1)
    row, col = np.divmod(idx, grid)
    return np.stack([(col + 0.5) / grid, (row + 0.5) / grid], axis=-1)


def model_forward(batch: EpisodeBatch, model: ScapeModel, record: bool = False) -> ForwardResult:
    return model.forward(batch, record=record)
