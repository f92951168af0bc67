import itertools
import math

import numpy as np
import pytest
from conftest import grad_check, numeric_grad, rel_error

from ctce.geometry import Box3D, FrameTag, Pose, QueryFrame
from ctce.losses import (Stage1LossConfig, assign_targets, assignment_cost, focal_loss, mse_loss,
                         regression_targets, smooth_l1_loss, stage1_loss, stage2_loss)
from ctce.mar import predict_embeddings
from ctce.model import ModelConfig, build_params
from ctce.numerics import Tensor
from ctce.vehicle import motion_encode

MC = ModelConfig(d=8, heads=2, hidden=16)
TOL = 1e-6


def param_grad_check(params, paths, loss_fn) -> float:
    """Autodiff gradients of ``loss_fn()`` against finite differences over named parameters."""
    ana = params.grads(loss_fn())
    worst = 0.0
    for p in paths:
        def f(x, p=p):
            old = params[p].data
            params.set(p, x)
            v = float(loss_fn().data)
            params.set(p, old)
            return v
        worst = max(worst, rel_error(ana[p], numeric_grad(f, params[p].data.copy())))
    return worst


def focal_reference(x, y, gamma, a):
    p = 1.0 / (1.0 + math.exp(-x))
    return -a * y * (1 - p) ** gamma * math.log(p) - (1 - a) * (1 - y) * p ** gamma * math.log(1 - p)


class TestFocal:
    def test_hand_value_at_half(self):
        # p = 0.5, gamma = 2: positive term = alpha * 0.25 * ln 2
        out = focal_loss(np.zeros((1, 1)), np.ones((1, 1)), 2.0, 0.25)
        assert float(out.data) == pytest.approx(0.25 * 0.25 * math.log(2), rel=1e-12)
        out = focal_loss(np.zeros((1, 1)), np.zeros((1, 1)), 2.0, 0.25)
        assert float(out.data) == pytest.approx(0.75 * 0.25 * math.log(2), rel=1e-12)

    def test_elementwise_reference(self, rng):
        for gamma in (0.0, 1.0, 2.0):
            x = rng.normal(scale=3, size=(4, 3))
            y = (rng.random((4, 3)) < 0.3).astype(float)
            ref = sum(focal_reference(x[i, j], y[i, j], gamma, 0.25) for i in range(4) for j in range(3)) / 4
            assert float(focal_loss(x, y, gamma, 0.25).data) == pytest.approx(ref, rel=1e-10)

    def test_gamma_zero_is_weighted_bce(self, rng):
        x = rng.normal(size=(5, 3))
        y = (rng.random((5, 3)) < 0.5).astype(float)
        p = 1 / (1 + np.exp(-x))
        bce = -(0.25 * y * np.log(p) + 0.75 * (1 - y) * np.log(1 - p)).sum() / 5
        assert float(focal_loss(x, y, 0.0, 0.25).data) == pytest.approx(bce, rel=1e-12)

    def test_large_logits_finite(self):
        out = focal_loss(np.array([[800.0, -800.0]]), np.array([[0.0, 1.0]]))
        assert np.isfinite(out.data) and float(out.data) > 100

    def test_empty(self):
        assert float(focal_loss(np.zeros((0, 3)), np.zeros((0, 3))).data) == 0.0

    def test_gradient(self, rng):
        y = (rng.random((4, 3)) < 0.3).astype(float)
        worst = max(grad_check(lambda t: focal_loss(t[0], y, 2.0, 0.25), [rng.normal(size=(4, 3))])
                    for _ in range(20))
        assert worst < TOL


class TestSmoothL1:
    def test_hand_values(self):
        out = smooth_l1_loss(np.array([[0.5, 2.0], [0.0, -3.0]]), np.zeros((2, 2)), 1.0)
        # rows: 0.125 + 1.5, 0 + 2.5 -> mean 2.0625
        assert float(out.data) == pytest.approx(2.0625)

    def test_delta_scaling(self):
        assert float(smooth_l1_loss(np.array([[0.5]]), np.zeros((1, 1)), 0.25).data) == pytest.approx(0.375)

    def test_gradient(self, rng):
        tgt = rng.normal(size=(3, 8))
        worst = max(grad_check(lambda t: smooth_l1_loss(t[0], tgt, 1.0), [rng.normal(scale=2, size=(3, 8))])
                    for _ in range(20))
        assert worst < TOL


class TestMse:
    def test_hand_value(self):
        # [1, 0] vs [0, 0] over two elements -> 1/2; over four elements -> 1/4
        assert float(mse_loss(np.array([1.0, 0.0]), np.zeros(2)).data) == pytest.approx(0.5)
        assert float(mse_loss(np.array([[1.0, 0.0], [0.0, 0.0]]), np.zeros((2, 2))).data) == pytest.approx(0.25)

    def test_stage2_is_mse(self, rng):
        a, b = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
        assert float(stage2_loss(a, b).data) == pytest.approx(((a - b) ** 2).mean())

    def test_gradient(self, rng):
        tgt = rng.normal(size=(4, 8))
        worst = max(grad_check(lambda t: mse_loss(t[0], tgt), [rng.normal(size=(4, 8))]) for _ in range(20))
        assert worst < TOL


def box(center, cls=0, dims=(4.0, 2.0, 1.5), yaw=0.3):
    return Box3D(center, dims, yaw, cls)


class TestAssignment:
    def test_cost_formula(self):
        logits = np.array([[0.0, 2.0, -1.0]])
        c = assignment_cost(logits, np.array([[1.0, 1.0, 0.0]]), [box([0.0, 0.0, 0.0], cls=1)], 2.0, 0.5)
        p = 1 / (1 + math.exp(-2.0))
        assert c[0, 0] == pytest.approx(2.0 * (1 - p) + 0.5 * 2.0)

    def test_brute_force_4x3(self, rng):
        for _ in range(50):
            logits = rng.normal(size=(4, 3))
            centers = rng.uniform(0, 2, size=(4, 3))
            gts = [box(rng.uniform(0, 2, size=3), int(rng.integers(3))) for _ in range(3)]
            pairs, _, _ = assign_targets(logits, centers, gts)
            cost = assignment_cost(logits, centers, gts)
            best = min(sum(cost[p[j], j] for j in range(3)) for p in itertools.permutations(range(4), 3))
            assert len(pairs) == 3
            assert cost[pairs[:, 0], pairs[:, 1]].sum() == pytest.approx(best)

    def test_gate_demotes_far_pairs(self):
        pairs, up, ug = assign_targets(np.zeros((2, 3)), np.array([[0.0, 0, 0], [50.0, 0, 0]]),
                                       [box([0.5, 0, 0]), box([50.0, 30.0, 0])])
        assert pairs.tolist() == [[0, 0]]
        assert up.tolist() == [1] and ug.tolist() == [1]

    def test_no_gts(self):
        pairs, up, ug = assign_targets(np.zeros((3, 3)), np.zeros((3, 3)), [])
        assert len(pairs) == 0 and up.tolist() == [0, 1, 2]


class TestStage1:
    def test_regression_targets(self):
        rt = regression_targets(np.array([[1.0, 1.0, 0.0]]), [box([2.0, 0.0, 1.0], dims=(4.0, 2.0, 1.0), yaw=0.5)])
        np.testing.assert_allclose(rt[0], [1, -1, 1, math.log(4), math.log(2), 0, math.sin(0.5), math.cos(0.5)])

    def test_linear_in_alpha(self, rng):
        logits, reg = rng.normal(size=(5, 3)), rng.normal(scale=0.1, size=(5, 8))
        ref = rng.uniform(-3, 3, size=(5, 3))
        gts = [box(ref[0] + 0.2), box(ref[3] - 0.1, cls=2)]
        vals = [float(stage1_loss(Tensor(logits), Tensor(reg), ref, gts, Stage1LossConfig(alpha=a))[0].data)
                for a in (1.0, 2.0, 3.0)]
        assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0], rel=1e-10)

    def test_perfect_boxes_have_zero_regression(self):
        ref = np.array([[0.0, 0.0, 0.0]])
        g = box([0.0, 0.0, 0.0])
        reg = regression_targets(ref, [g])
        cfg_small_beta = Stage1LossConfig(beta=1e-9)
        a = float(stage1_loss(Tensor(np.zeros((1, 3))), Tensor(reg), ref, [g])[0].data)
        b = float(stage1_loss(Tensor(np.zeros((1, 3))), Tensor(reg), ref, [g], cfg_small_beta)[0].data)
        assert a == pytest.approx(b, abs=1e-12)

    def test_gradient(self, rng):
        ref = rng.uniform(-3, 3, size=(4, 3))
        gts = [box(ref[1] + 0.3, cls=1), box(ref[2] - 0.2, cls=0)]
        worst = 0.0
        for _ in range(10):
            logits, reg = rng.normal(size=(4, 3)), rng.normal(scale=0.3, size=(4, 8))
            worst = max(worst, grad_check(lambda t: stage1_loss(t[0], t[1], ref, gts)[0], [logits, reg]))
        assert worst < TOL


class TestModelPathGradients:
    def test_motion_encoding(self, rng):
        params = build_params(MC, 1)
        f = QueryFrame(1, 0, Pose.identity(), rng.normal(size=(3, 3)), Tensor(rng.normal(size=(3, 8))),
                       np.ones(3), FrameTag.ROADSIDE_TEMPORAL)
        now, then = Pose.from_yaw(0.3, (2, 1, 0)), Pose.from_yaw(0.1, (0, 0, 0))
        tgt = rng.normal(size=(3, 8))
        loss = lambda: mse_loss(motion_encode(f, now, then, 0.2, params, MC).embeddings, tgt)
        assert param_grad_check(params, params.paths("ev.motion"), loss) < TOL

    def test_time_embedding_forecast(self, rng):
        params = build_params(MC, 2)
        hist = [[(0.1 * k, rng.normal(size=8)) for k in range(3)], [(0.2, rng.normal(size=8))]]
        tgt = rng.normal(size=(2, 8))
        loss = lambda: mse_loss(predict_embeddings(hist, 0.3, params, MC), tgt)
        assert param_grad_check(params, params.paths("mar.pred"), loss) < TOL
