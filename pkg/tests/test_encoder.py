import math

import numpy as np
import pytest

from oracles import assignment_oracle
from sceneqa import tensor as T
from sceneqa.encoder import (ConfigError, EncoderConfig, SpatialEncoder, SpatialFeatures, detection_loss,
                             hungarian_match, prepare_geometry)
from sceneqa.gradcheck import grad_check
from sceneqa.model import PreparedScene, preset
from sceneqa.pointcloud import AxisAlignedBox, PointCloud, normalize
from sceneqa.tensor import Tensor
from sceneqa.training import evaluate_detection, pretrain_detector

TINY = preset("tiny").encoder


def cloud(rng, n):
    return normalize(PointCloud(rng.uniform(-1, 1, size=(n, 3)))).cloud


def features(centers, logits, halves=None):
    centers = np.asarray(centers, dtype=float)[None]
    logits = np.asarray(logits, dtype=float)[None]
    halves = np.full_like(centers, 0.1) if halves is None else np.asarray(halves, dtype=float)[None]
    lg = Tensor(logits, requires_grad=True)
    n = logits.shape[1]
    return SpatialFeatures(Tensor(np.zeros((1, 4, 2))), Tensor(np.zeros((1, n, 2))), lg, T.sigmoid(lg),
                           Tensor(centers, requires_grad=True), Tensor(halves, requires_grad=True))


class TestConfig:
    def test_width_must_divide_heads(self):
        with pytest.raises(ConfigError):
            EncoderConfig(width=10, heads=4)

    def test_tokens_cannot_exceed_points(self):
        with pytest.raises(ConfigError):
            EncoderConfig(n_points=100, n_enc=200)

    def test_too_few_points_asks_for_resample(self, rng):
        with pytest.raises(ValueError, match="resample"):
            prepare_geometry(cloud(rng, 8), TINY)


class TestEncodeDecode:
    def test_default_shapes(self, rng):
        cfg = EncoderConfig()
        with T.precision("float32"):
            enc = SpatialEncoder(cfg, rng)
            with T.no_grad():
                out = enc([prepare_geometry(cloud(rng, 4096), cfg)])
        assert out.f_enc.shape == (1, 1024, 64)
        assert out.q_3d.shape == (1, 256, 64)
        assert out.p_obj.shape == (1, 256)

    def test_invariants(self, rng):
        enc = SpatialEncoder(TINY, rng)
        out = enc([prepare_geometry(cloud(rng, 32), TINY) for _ in range(3)])
        assert np.all((out.p_obj.data >= 0) & (out.p_obj.data <= 1))
        assert np.all(out.half_extents.data > 0)
        assert np.all(np.abs(out.centers.data) <= 1)

    def test_deterministic(self, rng):
        geom = prepare_geometry(cloud(rng, 32), TINY)
        a = SpatialEncoder(TINY, np.random.default_rng(5)).encode([geom]).data
        b = SpatialEncoder(TINY, np.random.default_rng(5)).encode([geom]).data
        assert np.array_equal(a, b)

    def test_isolated_seed_is_finite(self, rng):
        pts = np.vstack([rng.uniform(-0.1, 0.1, size=(31, 3)), [[0.95, 0.95, 0.95]]])
        geom = prepare_geometry(PointCloud(pts), TINY)
        lonely = list(geom.seed_index).index(31)
        assert set(geom.groups[lonely]) == {31}
        assert np.isfinite(SpatialEncoder(TINY, rng).encode([geom]).data).all()

    def test_zero_objectness_head_gives_half(self, rng):
        enc = SpatialEncoder(TINY, rng)
        enc.obj_head.set_zero()
        out = enc([prepare_geometry(cloud(rng, 32), TINY)])
        np.testing.assert_array_equal(out.p_obj.data, 0.5)


class TestHungarian:
    def test_diagonal_zero_is_identity(self):
        cost = np.ones((4, 4)) - np.eye(4)
        np.testing.assert_array_equal(hungarian_match(cost), [0, 1, 2, 3])

    def test_two_by_two(self):
        match = hungarian_match(np.array([[1.0, 2.0], [2.0, 1.0]]))
        np.testing.assert_array_equal(match, [0, 1])

    def test_four_by_three_integer(self, rng):
        cost = rng.integers(0, 10, size=(4, 3)).astype(float)
        match = hungarian_match(cost)
        assert len(set(match.tolist())) == 3
        assert cost[match, np.arange(3)].sum() == assignment_oracle(cost.tolist())

    @pytest.mark.parametrize("seed", range(50))
    def test_random_against_exhaustive(self, seed):
        r = np.random.default_rng(seed)
        g = int(r.integers(1, 6))
        q = int(r.integers(g, 7))
        cost = r.integers(0, 5, size=(q, g)).astype(float) if seed % 2 else r.normal(size=(q, g))
        match = hungarian_match(cost)
        assert len(set(match.tolist())) == g
        assert cost[match, np.arange(g)].sum() == pytest.approx(assignment_oracle(cost.tolist()), abs=1e-12)

    def test_more_truths_than_queries(self):
        with pytest.raises(ValueError, match="q >= g"):
            hungarian_match(np.zeros((2, 3)))


class TestDetectionLoss:
    def test_exact_prediction_is_zero(self):
        box = AxisAlignedBox([0.2, -0.1, 0.3], [0.1, 0.2, 0.3])
        preds = features([[0.2, -0.1, 0.3], [0.9, 0.9, 0.9]], [60.0, -60.0],
                         [[0.1, 0.2, 0.3], [0.5, 0.5, 0.5]])
        loss, _ = detection_loss(preds, [[box]])
        assert loss.item() == pytest.approx(0.0, abs=1e-20)

    def test_empty_scene_is_log2(self):
        loss, matches = detection_loss(features(np.zeros((5, 3)), np.zeros(5)), [[]])
        assert loss.item() == pytest.approx(math.log(2), abs=1e-15)
        assert len(matches[0]) == 0

    def test_matching_picks_lower_cost_query(self):
        box = AxisAlignedBox([0.5, 0.5, 0.5], [0.1, 0.1, 0.1])
        preds = features([[0.0, 0.0, 0.0], [0.45, 0.5, 0.5]], [0.0, 0.0])
        _, matches = detection_loss(preds, [[box]])
        assert matches[0].tolist() == [1]

    def test_too_many_boxes(self):
        boxes = [AxisAlignedBox([0, 0, 0], [1, 1, 1])] * 3
        with pytest.raises(ValueError):
            detection_loss(features(np.zeros((2, 3)), np.zeros(2)), [boxes])

    def test_gradient_through_encoder(self, rng):
        enc = SpatialEncoder(TINY, rng)
        geoms = [prepare_geometry(cloud(rng, 32), TINY) for _ in range(2)]
        boxes = [[AxisAlignedBox([0.1, 0.2, -0.3], [0.2, 0.1, 0.3])],
                 [AxisAlignedBox([-0.5, 0.0, 0.1], [0.1, 0.1, 0.1]), AxisAlignedBox([0.5, 0.4, 0.0], [0.2, 0.3, 0.1])]]
        f = lambda: detection_loss(enc(geoms), boxes)[0]
        report = grad_check(f, dict(enc.named_parameters()), max_entries=12, oracle="extended")
        assert max(report.values()) < 1e-4, report


def test_pretraining_localises_a_single_box():
    pts = np.random.default_rng(0).uniform(-1, 1, size=(32, 3))
    box = AxisAlignedBox([0.4, -0.3, 0.2], [0.2, 0.2, 0.2])
    pts[:12] = box.center + np.random.default_rng(1).uniform(-0.2, 0.2, size=(12, 3))
    scene = PreparedScene("one", prepare_geometry(PointCloud(pts), TINY), [box], np.zeros(3), 1.0, pts)
    with T.precision("float32"):
        enc = SpatialEncoder(TINY, np.random.default_rng(0))
        pretrain_detector(enc, [scene], steps=300, lr_max=1e-2, batch_size=1)
        with T.no_grad():
            out = enc([scene.geometry])
    best = int(np.argmax(out.p_obj.data[0]))
    assert box.contains(out.centers.data[0, best])[0]
    report = evaluate_detection(enc, [scene])
    assert report.frac_center_inside == 1.0
    assert report.mean_pobj_matched > report.mean_pobj_unmatched
