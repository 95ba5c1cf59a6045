"""Simplified 3DETR-style perception.

``encode`` turns a normalised cloud into global tokens F_enc: farthest point
sampling picks seed points, a shared two-layer perceptron max-pools over each
seed's ball neighbourhood, and pre-norm self-attention blocks mix the seeds
(with a fixed sinusoidal xyz code added).  ``decode`` runs learnable object
queries through self-attention, cross-attention to F_enc and a feed-forward
layer, then predicts objectness, box centre and box half-extent per query.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, SelfAttentionBlock, param, sinusoidal_xyz
from .pointcloud import AxisAlignedBox, PointCloud, ball_group, farthest_point_sample
from .tensor import Tensor


class ConfigError(ValueError):
    """Inconsistent model configuration."""


@dataclass(frozen=True)
class EncoderConfig:
    n_points: int = 4096
    n_enc: int = 1024
    n_3d: int = 256
    width: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    radius: float = 0.2
    group_size: int = 16
    use_color: bool = False

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"encoder width {self.width} not divisible by {self.heads} heads")
        if self.n_enc > self.n_points:
            raise ConfigError(f"n_enc={self.n_enc} exceeds sampled point count {self.n_points}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SceneGeometry:
    """Non-differentiable per-scene inputs, computed once per cloud."""
    seed_index: np.ndarray       # (n_enc,) indices into the cloud
    seed_xyz: np.ndarray         # (n_enc, 3)
    groups: np.ndarray           # (n_enc, group_size) indices into the cloud
    local: np.ndarray            # (n_enc, group_size, 3 or 6) offsets / radius (+ colours)


def prepare_geometry(pc: PointCloud, cfg: EncoderConfig, start: int = 0) -> SceneGeometry:
    if len(pc) < cfg.n_enc:
        raise ValueError(f"cloud has {len(pc)} points but n_enc={cfg.n_enc}; resample the scene "
                         f"to at least {cfg.n_enc} points")
    seeds = farthest_point_sample(pc, cfg.n_enc, start)
    groups = ball_group(pc.points, seeds, cfg.radius, cfg.group_size)
    seed_xyz = pc.points[seeds]
    local = (pc.points[groups] - seed_xyz[:, None, :]) / cfg.radius
    if cfg.use_color:
        cols = pc.colors if pc.colors is not None else np.full_like(pc.points, 0.5)
        local = np.concatenate([local, cols[groups] - 0.5], axis=-1)
    return SceneGeometry(seeds, seed_xyz, groups, local)


@dataclass
class SpatialFeatures:
    f_enc: Tensor           # (B, n_enc, C)
    q_3d: Tensor            # (B, n_3d, C)
    obj_logit: Tensor       # (B, n_3d)
    p_obj: Tensor           # (B, n_3d)
    centers: Tensor         # (B, n_3d, 3)
    half_extents: Tensor    # (B, n_3d, 3)

    def box(self, b: int, q: int) -> tuple[np.ndarray, np.ndarray]:
        return self.centers.data[b, q].copy(), self.half_extents.data[b, q].copy()


class DecoderBlock(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        self.ln_self = LayerNorm(width)
        self.self_attn = MultiHeadAttention(width, width, width, heads, rng)
        self.ln_cross = LayerNorm(width)
        self.cross_attn = MultiHeadAttention(width, width, width, heads, rng)
        self.ln_ffn = LayerNorm(width)
        self.ffn = FeedForward(width, rng)

    def __call__(self, q: Tensor, memory: Tensor) -> Tensor:
        h = self.ln_self(q)
        q = q + self.self_attn(h, h)
        q = q + self.cross_attn(self.ln_cross(q), memory)
        return q + self.ffn(self.ln_ffn(q))


class SpatialEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self._cfg = cfg
        c = cfg.width
        in_feat = 6 if cfg.use_color else 3
        self.point_mlp1 = Linear(in_feat, c, rng)
        self.point_mlp2 = Linear(c, c, rng)
        self.enc_blocks = [SelfAttentionBlock(c, cfg.heads, rng) for _ in range(cfg.enc_layers)]
        self.enc_norm = LayerNorm(c)
        self.query_embed = param(rng.normal(0.0, 1.0, size=(cfg.n_3d, c)))
        self.dec_blocks = [DecoderBlock(c, cfg.heads, rng) for _ in range(cfg.dec_layers)]
        self.dec_norm = LayerNorm(c)
        self.obj_head = Linear(c, 1, rng)
        self.center_head = Linear(c, 3, rng)
        self.size_head = Linear(c, 3, rng)
        self.size_head.bias.data[:] = np.log(0.1)

    @property
    def config(self) -> EncoderConfig:
        return self._cfg

    def encode(self, geoms: Sequence[SceneGeometry]) -> Tensor:
        """F_enc for a batch of prepared scenes, shape (B, n_enc, C)."""
        dtype = T.get_dtype()
        local = T.Tensor(np.stack([g.local for g in geoms]).astype(dtype))
        h = self.point_mlp2(T.gelu(self.point_mlp1(local)))
        feats = T.max_reduce(h, axis=2)
        pos = np.stack([sinusoidal_xyz(g.seed_xyz, self._cfg.width) for g in geoms])
        x = feats + T.Tensor(pos)
        for block in self.enc_blocks:
            x = block(x)
        return self.enc_norm(x)

    def decode(self, f_enc: Tensor) -> SpatialFeatures:
        cfg = self._cfg
        b = f_enc.shape[0]
        q = T.reshape(self.query_embed, (1, cfg.n_3d, cfg.width)) + T.zeros((b, cfg.n_3d, cfg.width))
        for block in self.dec_blocks:
            q = block(q, f_enc)
        q = self.dec_norm(q)
        obj_logit = T.reshape(self.obj_head(q), (b, cfg.n_3d))
        p_obj = T.sigmoid(obj_logit)
        centers = T.tanh(self.center_head(q))
        half = T.exp(self.size_head(q))
        return SpatialFeatures(f_enc, q, obj_logit, p_obj, centers, half)

    def __call__(self, geoms: Sequence[SceneGeometry]) -> SpatialFeatures:
        return self.decode(self.encode(geoms))


def hungarian_match(cost: np.ndarray) -> np.ndarray:
    """Min-cost injective map from ground truths (columns) to queries (rows).

    Returns an array ``match`` with ``match[j]`` the query assigned to truth j.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a q x g matrix, got shape {cost.shape}")
    q, g = cost.shape
    if q < g:
        raise ValueError(f"hungarian_match needs q >= g, got q={q}, g={g}")
    if not np.isfinite(cost).all():
        raise ValueError("hungarian_match: costs must be finite")
    if g == 0:
        return np.zeros(0, dtype=np.int64)
    rows, cols = linear_sum_assignment(cost.T)
    match = np.empty(g, dtype=np.int64)
    match[rows] = cols
    return match


def matching_cost(centers: np.ndarray, p_obj: np.ndarray, truth_centers: np.ndarray,
                  obj_weight: float = 1.0) -> np.ndarray:
    """(q, g) cost: centre L1 distance + obj_weight * (1 - P_obj)."""
    l1 = np.abs(centers[:, None, :] - truth_centers[None, :, :]).sum(-1)
    return l1 + obj_weight * (1.0 - p_obj)[:, None]


def detection_loss(preds: SpatialFeatures, truths: Sequence[Sequence[AxisAlignedBox]],
                   obj_weight: float = 1.0) -> tuple[Tensor, list[np.ndarray]]:
    """Set-prediction loss averaged over the batch; also returns each scene's matching.

    Per scene: matched centre L1 + matched half-extent L1 (summed over axes,
    averaged over truths) + objectness BCE averaged over all queries.
    """
    b, nq = preds.obj_logit.shape
    if len(truths) != b:
        raise ValueError(f"{len(truths)} truth lists for a batch of {b}")
    matches: list[np.ndarray] = []
    targets = np.zeros((b, nq))
    rows_b, rows_q, gt_center, gt_half, weights = [], [], [], [], []
    for i, boxes in enumerate(truths):
        if len(boxes) > nq:
            raise ValueError(f"scene {i} has {len(boxes)} boxes but only {nq} queries")
        if not boxes:
            matches.append(np.zeros(0, dtype=np.int64))
            continue
        tc = np.stack([bx.center for bx in boxes])
        th = np.stack([bx.half_extent for bx in boxes])
        cost = matching_cost(preds.centers.data[i], preds.p_obj.data[i], tc, obj_weight)
        match = hungarian_match(cost)
        matches.append(match)
        targets[i, match] = 1.0
        rows_b += [i] * len(boxes)
        rows_q += list(match)
        gt_center.append(tc)
        gt_half.append(th)
        weights += [1.0 / len(boxes)] * len(boxes)
    dtype = T.get_dtype()
    logits = preds.obj_logit
    bce = T.softplus(logits) - logits * T.Tensor(targets.astype(dtype))
    total = T.reduce_sum(bce) * (1.0 / nq)
    if rows_b:
        idx = (np.array(rows_b), np.array(rows_q))
        w = T.Tensor(np.array(weights, dtype=dtype)[:, None])
        dc = T.absolute(preds.centers[idx] - T.Tensor(np.concatenate(gt_center).astype(dtype)))
        dh = T.absolute(preds.half_extents[idx] - T.Tensor(np.concatenate(gt_half).astype(dtype)))
        total = total + T.reduce_sum((dc + dh) * w)
    return total * (1.0 / b), matches
