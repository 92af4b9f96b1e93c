import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pupilnet.errors import ShapeMismatch
from pupilnet.losses import combined_loss, dice_loss, dice_score, l1_params


def count_dice(x, y):
    """Integer-count DSC from explicit TP/FP/FN enumeration."""
    tp = fp = fn = 0
    for a, b in zip(np.ravel(x), np.ravel(y)):
        tp += bool(a) and bool(b)
        fp += bool(a) and not b
        fn += (not a) and bool(b)
    return 2 * tp / (2 * tp + fp + fn)


class TestDice:
    def test_identical(self):
        m = np.zeros((16, 16))
        m[4:10, 3:12] = 1
        assert dice_score(m, m) == 1.0
        assert dice_loss(m, m) == 0.0

    def test_disjoint(self):
        a = np.zeros((32, 32))
        b = np.zeros((32, 32))
        a[:10, :10] = 1
        b[20:, 20:] = 1
        assert dice_score(a, b) < 1e-6
        assert dice_loss(a, b) == pytest.approx(1.0, abs=1e-6)

    def test_four_pixel_overlap_two(self):
        x = np.zeros((4, 4))
        y = np.zeros((4, 4))
        x[0, :4] = 1
        y[0, 2:4] = 1
        y[1, 0:2] = 1
        assert count_dice(x, y) == 0.5
        assert dice_score(x, y) == pytest.approx(0.5, abs=1e-8)
        assert dice_loss(x, y) == pytest.approx(0.5, abs=1e-8)

    def test_empty_vs_empty(self):
        z = np.zeros((8, 8))
        assert dice_score(z, z) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            dice_score(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_batched_is_mean_of_items(self):
        rng = np.random.default_rng(0)
        p = rng.random((3, 1, 8, 8))
        g = (rng.random((3, 1, 8, 8)) > 0.5).astype(float)
        assert dice_score(p, g) == pytest.approx(np.mean([dice_score(p[i, 0], g[i, 0]) for i in range(3)]))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.bool_, (6, 6)), arrays(np.bool_, (6, 6)))
    def test_symmetric_and_matches_counts(self, x, y):
        if not (x.any() or y.any()):
            return
        assert dice_score(x, y) == pytest.approx(dice_score(y, x), abs=1e-15)
        assert abs(dice_score(x, y) - count_dice(x, y)) < 1e-6

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (5, 5), elements=st.floats(0, 1)), arrays(np.bool_, (5, 5)))
    def test_bounded(self, p, g):
        assert 0 <= dice_score(p, g) <= 1

    def test_torch_differentiable(self):
        p = torch.rand(8, 8, dtype=torch.float64, requires_grad=True)
        g = (torch.rand(8, 8, dtype=torch.float64) > 0.5).double()
        dice_loss(p, g).backward()
        assert p.grad is not None and torch.isfinite(p.grad).all()


class TestL1:
    def test_identical(self):
        v = [0.5, 0.5, 0.3, 0.2, 0.1]
        assert l1_params(v, v) == 0

    def test_single_component(self):
        assert l1_params([0.6, 0.5, 0.3, 0.2, 0.1], [0.5, 0.5, 0.3, 0.2, 0.1]) == pytest.approx(0.1)

    def test_all_components(self):
        g = np.array([0.5, 0.5, 0.3, 0.2, 0.1])
        assert l1_params(g + 0.1, g) == pytest.approx(0.5)

    def test_batch_mean(self):
        g = np.zeros((2, 5))
        p = np.zeros((2, 5))
        p[0] = 0.1
        assert l1_params(p, g) == pytest.approx(0.25)

    def test_shape(self):
        with pytest.raises(ShapeMismatch):
            l1_params(np.zeros(4), np.zeros(4))


class TestCombined:
    def test_perfect(self):
        m = np.zeros((8, 8))
        m[2:5, 2:6] = 1
        v = np.array([0.5, 0.5, 0.3, 0.2, 0.1])
        loss = combined_loss(m, m, v, v)
        assert float(loss.total) == 0.0

    def test_perfect_mask_l1(self):
        m = np.ones((8, 8))
        g = np.array([0.5, 0.5, 0.3, 0.2, 0.1])
        loss = combined_loss(m, m, g + 0.1, g)
        assert float(loss.dice_component) == 0.0
        assert float(loss.total) == pytest.approx(0.5)

    def test_additive(self):
        x = np.zeros((4, 4))
        y = np.zeros((4, 4))
        x[0] = 1
        y[0, 2:] = 1
        y[1, :2] = 1
        g = np.array([0.5, 0.5, 0.3, 0.2, 0.1])
        p = g.copy()
        p[0] += 0.1
        loss = combined_loss(x, y, p, g)
        assert float(loss.dice_component) == pytest.approx(0.5)
        assert float(loss.l1_component) == pytest.approx(0.1)
        assert float(loss.total) == pytest.approx(0.6)

    def test_mask_only(self):
        m = np.ones((4, 4))
        assert float(combined_loss(m, m).total) == 0.0

    def test_finite_difference_gradients(self):
        torch.manual_seed(0)
        for _ in range(5):
            pm = torch.rand(1, 1, 16, 16, dtype=torch.float64, requires_grad=True)
            gm = (torch.rand(1, 1, 16, 16, dtype=torch.float64) > 0.5).double()
            pp = torch.rand(1, 5, dtype=torch.float64, requires_grad=True)
            gp = torch.rand(1, 5, dtype=torch.float64)
            combined_loss(pm, gm, pp, gp).total.backward()
            h = 1e-6
            for idx in [(0, 0, 3, 4), (0, 0, 10, 1), (0, 0, 15, 15)]:
                with torch.no_grad():
                    pm[idx] += h
                    up = combined_loss(pm, gm, pp, gp).total.item()
                    pm[idx] -= 2 * h
                    down = combined_loss(pm, gm, pp, gp).total.item()
                    pm[idx] += h
                num = (up - down) / (2 * h)
                assert pm.grad[idx].item() == pytest.approx(num, rel=1e-4)
            for j in range(5):
                with torch.no_grad():
                    pp[0, j] += h
                    up = combined_loss(pm, gm, pp, gp).total.item()
                    pp[0, j] -= 2 * h
                    down = combined_loss(pm, gm, pp, gp).total.item()
                    pp[0, j] += h
                assert pp.grad[0, j].item() == pytest.approx((up - down) / (2 * h), rel=1e-4)
