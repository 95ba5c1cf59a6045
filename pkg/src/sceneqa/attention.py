"""Project compressor cross-attention back onto scene points."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T
from .encoder import ConfigError
from .model import Example, SceneQAModel


@dataclass
class AttentionMaps:
    query_rows: np.ndarray       # compressor query rows that were exported
    object_queries: np.ndarray   # the object queries they were fused with (by objectness rank)
    scores: np.ndarray           # (k, n_points) min-max normalised per query
    composite: np.ndarray        # (n_points,) elementwise max over queries


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    return np.zeros_like(x) if hi <= lo else (x - lo) / (hi - lo)


def point_scores(weights: np.ndarray, groups: np.ndarray, points: np.ndarray, centers: np.ndarray,
                 half_extents: np.ndarray) -> np.ndarray:
    """Spread one attention row over points.

    The first ``len(groups)`` weights belong to encoder tokens and go uniformly
    to the distinct members of each token's neighbourhood; the remaining ones
    belong to object queries and go uniformly to the points inside the
    query's predicted box.
    """
    n_enc = len(groups)
    score = np.zeros(len(points))
    for j in range(n_enc):
        members = np.unique(groups[j])
        score[members] += weights[j] / len(members)
    for q in range(len(centers)):
        inside = np.flatnonzero((np.abs(points - centers[q]) <= half_extents[q]).all(axis=1))
        if len(inside):
            score[inside] += weights[n_enc + q] / len(inside)
    return score


def export_attention(model: SceneQAModel, example: Example, k: int = 10,
                     original_points: np.ndarray | None = None) -> AttentionMaps:
    """Per-query point scores from the last compressor block's cross-attention.

    Query rows are taken in objectness order (row i was fused with the object
    query of rank i).  Scores are computed on the encoder's resampled cloud and
    carried to ``original_points`` (already in the normalised frame) by
    nearest neighbour, so the output matches the input point count.
    """
    cfg = model.config
    if k > cfg.compressor.n_queries:
        raise ConfigError(f"k={k} exceeds the number of compressor queries ({cfg.compressor.n_queries})")
    comp = model.compressor
    comp.keep_attention(True)
    try:
        with T.no_grad():
            _, _, _, spatial = model.condition([example])
            probs = comp.block[-1].cross_attn.last_probs
    finally:
        comp.keep_attention(False)
    rank = np.argsort(-spatial.p_obj.data[0], kind="stable")[:k]
    rows = np.arange(k)
    mean_probs = probs[0].mean(axis=0)             # (n_queries, n_enc + n_3d)
    pts = example.scene.cloud_points
    geom = example.scene.geometry
    centers = spatial.centers.data[0].astype(np.float64)
    halves = spatial.half_extents.data[0].astype(np.float64)
    raw = np.stack([point_scores(mean_probs[r], geom.groups, pts, centers, halves) for r in rows])
    if original_points is not None:
        _, nearest = cKDTree(pts).query(original_points)
        raw = raw[:, nearest]
    scores = np.stack([_minmax(s) for s in raw])
    return AttentionMaps(rows, rank, scores, scores.max(axis=0))


def decode_throughput(model: SceneQAModel, examples: list[Example], steps: int = 8, repeats: int = 3) -> float:
    """Tokens per second of greedy decoding run for a fixed number of steps.

    EOS is ignored so that every configuration decodes the same number of
    tokens; the best of ``repeats`` timings is kept.
    """
    best = float("inf")
    with T.no_grad():
        for _ in range(repeats):
            t0 = time.perf_counter()
            comp, ids, mask, _ = model.condition(examples)
            resp = np.full((len(examples), 1), 1, dtype=np.int64)
            for _ in range(steps):
                logits = model.lm.forward(comp.q_final, ids, mask, resp).data[:, -1]
                resp = np.concatenate([resp, np.argmax(logits, axis=-1)[:, None]], axis=1)
            best = min(best, time.perf_counter() - t0)
    return len(examples) * steps / best
