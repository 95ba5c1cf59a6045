"""Query-based compression of scene features into a few language-space tokens.

A stack of blocks refines ``n_queries`` learnable queries.  In each block the
queries and the instruction embeddings attend to one another (self-fuse);
the query rows are then selected and attend over the projected encoder
tokens and object queries (cross-attend).  Instruction rows re-enter every
block unchanged.  Optionally, before the first block the queries absorb the
object queries with the highest objectness (query fusion).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .encoder import ConfigError, SpatialFeatures
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, param
from .tensor import Tensor


@dataclass(frozen=True)
class CompressorConfig:
    n_queries: int = 32
    n_blocks: int = 2
    query_width: int = 64       # C_q
    text_width: int = 64        # C_t
    width: int = 64             # C, cross-attention width
    lm_width: int = 64          # C_lm
    visual_width: int = 64      # encoder feature width
    heads: int = 4
    vocab_size: int = 64
    max_text_len: int = 32
    trainable: bool = True
    query_fusion: bool = True
    literal_self_attention: bool = False

    def __post_init__(self):
        if self.n_queries < 1:
            raise ConfigError("n_queries must be >= 1")
        if self.text_width != self.width:
            raise ConfigError(f"text width {self.text_width} must equal cross-attention width {self.width}: "
                              "query rows pass between self- and cross-attention unchanged")
        for name in ("text_width", "width"):
            if getattr(self, name) % self.heads:
                raise ConfigError(f"{name}={getattr(self, name)} not divisible by {self.heads} heads")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CompressedQueries:
    f_final: Tensor     # (B, n_queries, C)
    q_final: Tensor     # (B, n_queries, C_lm)
    fusion_index: np.ndarray | None = None


def top_objectness(p_obj: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores per row, descending; ties go to the lower index."""
    p_obj = np.asarray(p_obj)
    if k > p_obj.shape[-1]:
        raise ConfigError(f"cannot select {k} queries from {p_obj.shape[-1]} object queries")
    return np.argsort(-p_obj, axis=-1, kind="stable")[..., :k]


class QueryFusion(Module):
    def __init__(self, visual_width: int, query_width: int, rng: np.random.Generator):
        self.proj = Linear(visual_width, query_width, rng)


class CompressorBlock(Module):
    def __init__(self, cfg: CompressorConfig, rng: np.random.Generator):
        self.ln_self = LayerNorm(cfg.text_width)
        self.self_attn = MultiHeadAttention(cfg.text_width, cfg.text_width, cfg.text_width, cfg.heads, rng)
        self.ln_cross = LayerNorm(cfg.width)
        self.cross_attn = MultiHeadAttention(cfg.width, cfg.width, cfg.width, cfg.heads, rng)
        self.ln_ffn = LayerNorm(cfg.width)
        self.ffn = FeedForward(cfg.width, rng)


class Compressor(Module):
    def __init__(self, cfg: CompressorConfig, rng: np.random.Generator):
        self._cfg = cfg
        self.q_l = param(rng.normal(0.0, 1.0, size=(cfg.n_queries, cfg.query_width)))
        self.fusion = QueryFusion(cfg.visual_width, cfg.query_width, rng)
        self.query_proj = Linear(cfg.query_width, cfg.text_width, rng)
        self.text_embed = param(rng.normal(0.0, 0.5, size=(cfg.vocab_size, cfg.text_width)))
        self.text_pos = param(rng.normal(0.0, 0.1, size=(cfg.max_text_len, cfg.text_width)))
        self.enc_proj = Linear(cfg.visual_width, cfg.width, rng)
        self.obj_proj = Linear(cfg.visual_width, cfg.width, rng)
        self.block = [CompressorBlock(cfg, rng) for _ in range(cfg.n_blocks)]
        self.out_proj = Linear(cfg.width, cfg.lm_width, rng)

    @property
    def config(self) -> CompressorConfig:
        return self._cfg

    def keep_attention(self, flag: bool = True) -> None:
        for blk in self.block:
            blk.self_attn.keep_probs(flag)
            blk.cross_attn.keep_probs(flag)

    # ----------------------------------------------------------------- stages
    def initial_queries(self, batch: int) -> Tensor:
        cfg = self._cfg
        return T.reshape(self.q_l, (1, cfg.n_queries, cfg.query_width)) + T.zeros((batch, cfg.n_queries, cfg.query_width))

    def query_fusion(self, q_3d: Tensor, p_obj: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Q_l + Linear(Q_3D rows of the n_queries highest objectness scores)."""
        cfg = self._cfg
        idx = top_objectness(p_obj, cfg.n_queries)
        b = q_3d.shape[0]
        picked = q_3d[(np.arange(b)[:, None], idx)]
        return self.initial_queries(b) + self.fusion.proj(picked), idx

    def embed_text(self, ids: np.ndarray) -> Tensor:
        """Instruction embeddings F_T for a (B, N_t) id array."""
        ids = np.asarray(ids, dtype=np.int64)
        n_t = ids.shape[1]
        if n_t > self._cfg.max_text_len:
            raise ValueError(f"instruction length {n_t} exceeds max_text_len={self._cfg.max_text_len}")
        return T.embedding(self.text_embed, ids) + self.text_pos[:n_t]

    def self_fuse(self, i: int, queries: Tensor, text: Tensor, text_mask: np.ndarray | None = None) -> Tensor:
        """F_s = self-attention over concat(queries, text) along the sequence axis."""
        cfg = self._cfg
        b, n_q, _ = queries.shape
        f_c = T.concat([queries, text], axis=1) if text.shape[1] else queries
        mask = None
        if text_mask is not None and text.shape[1]:
            keys = np.concatenate([np.ones((b, n_q), dtype=bool), np.asarray(text_mask, dtype=bool)], axis=1)
            mask = keys[:, None, None, :]
        blk = self.block[i]
        if cfg.literal_self_attention:
            scores = T.matmul(f_c, T.swapaxes(f_c, -1, -2)) * (1.0 / math.sqrt(cfg.text_width))
            return T.matmul(T.softmax(scores, axis=-1, mask=None if mask is None else mask[:, 0]), f_c)
        h = blk.ln_self(f_c)
        return f_c + blk.self_attn(h, h, mask)

    def visual_memory(self, spatial: SpatialFeatures) -> Tensor:
        """K = V = concat(Linear(F_enc), Linear(Q_3D)) along the sequence axis."""
        return T.concat([self.enc_proj(spatial.f_enc), self.obj_proj(spatial.q_3d)], axis=1)

    def cross_attend(self, i: int, f_s: Tensor, memory: Tensor) -> Tensor:
        """First n_queries rows of F_s attend over the visual memory, then FFN."""
        blk = self.block[i]
        q = T.slice_rows(f_s, self._cfg.n_queries)
        h = q + blk.cross_attn(blk.ln_cross(q), memory)
        return h + blk.ffn(blk.ln_ffn(h))

    def compress(self, text: Tensor, spatial: SpatialFeatures, text_mask: np.ndarray | None = None) -> CompressedQueries:
        cfg = self._cfg
        b = spatial.f_enc.shape[0]
        fusion_index = None
        if cfg.query_fusion:
            queries, fusion_index = self.query_fusion(spatial.q_3d, spatial.p_obj.data)
        else:
            queries = self.initial_queries(b)
        x = self.query_proj(queries)
        memory = self.visual_memory(spatial)
        for i in range(cfg.n_blocks):
            f_s = self.self_fuse(i, x, text, text_mask)
            x = self.cross_attend(i, f_s, memory)
        return CompressedQueries(x, self.out_proj(x), fusion_index)

    def __call__(self, text_ids: np.ndarray, spatial: SpatialFeatures,
                 text_mask: np.ndarray | None = None) -> CompressedQueries:
        return self.compress(self.embed_text(text_ids), spatial, text_mask)
