import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distlab import tensor as T
from distlab.regularize import (SCHEDULES, PredictionBuffer, ScheduleSpec, consistency_loss,
                                cr_weight, update_buffer)


class TestConsistencyLoss:
    def test_identical_predictions(self):
        p = np.array([[0.2, 0.8], [0.5, 0.5]])
        assert consistency_loss(T.Tensor(p), p, epoch=3).item() == 0.0

    def test_zero_at_epoch_zero(self):
        loss = consistency_loss(T.Tensor([[1.0, 0.0]]), np.array([[0.0, 1.0]]), epoch=0)
        assert loss.item() == 0.0

    def test_squared_distance(self):
        loss = consistency_loss(T.Tensor([[1.0, 0.0]]), np.array([[0.0, 1.0]]), epoch=1)
        assert loss.item() == 2.0

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            consistency_loss(T.Tensor([[1.0, 0.0]]), np.zeros((2, 2)), epoch=1)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 5), st.integers(0, 10_000))
    def test_gradient_closed_form(self, batch, k, seed):
        rng = np.random.default_rng(seed)
        cur = T.Parameter.from_array("p", rng.dirichlet(np.ones(k), size=batch))
        buf = rng.dirichlet(np.ones(k), size=batch)
        _, grads = T.forward_backward(lambda: consistency_loss(cur.tensor, buf, 2), [], [cur])
        np.testing.assert_allclose(grads["p"], 2 * (cur.data - buf) / batch, atol=1e-14)


class TestBuffer:
    def test_first_update(self):
        buf = PredictionBuffer.empty(3, 2)
        update_buffer(buf, [1], np.array([[0.3, 0.7]]))
        np.testing.assert_array_equal(buf.mean[1], [0.3, 0.7])
        assert buf.counts.tolist() == [0, 1, 0]

    def test_two_point_average(self):
        buf = PredictionBuffer.empty(1, 2)
        buf.update([0], np.array([[1.0, 0.0]])).update([0], np.array([[0.0, 1.0]]))
        np.testing.assert_array_equal(buf.mean[0], [0.5, 0.5])
        assert buf.counts[0] == 2

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            update_buffer(PredictionBuffer.empty(2, 2), [2], np.zeros((1, 2)))

    def test_matches_offline_mean(self):
        rng = np.random.default_rng(0)
        n, k = 5, 3
        buf = PredictionBuffer.empty(n, k)
        history = [[] for _ in range(n)]
        for _ in range(100):
            ids = rng.choice(n, size=rng.integers(1, n + 1), replace=False)
            preds = rng.dirichlet(np.ones(k), size=len(ids))
            update_buffer(buf, ids, preds)
            for i, p in zip(ids, preds):
                history[i].append(p)
        for i in range(n):
            np.testing.assert_allclose(buf.mean[i], np.mean(history[i], axis=0), atol=1e-12)
            assert buf.counts[i] == len(history[i])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        preds = rng.dirichlet(np.ones(3), size=8)
        a, b = PredictionBuffer.empty(1, 3), PredictionBuffer.empty(1, 3)
        for p in preds:
            a.update([0], p[None])
        for p in preds[rng.permutation(8)]:
            b.update([0], p[None])
        np.testing.assert_allclose(a.mean, b.mean, atol=1e-12)

    def test_array_round_trip(self):
        buf = PredictionBuffer.empty(2, 2).update([0], np.array([[0.1, 0.9]]))
        again = PredictionBuffer.from_arrays(buf.arrays())
        np.testing.assert_array_equal(again.mean, buf.mean)
        np.testing.assert_array_equal(again.counts, buf.counts)


class TestSchedules:
    def test_linear_endpoints(self):
        spec = ScheduleSpec("linear", 2.0, 10)
        assert cr_weight(spec, 0) == 0.0
        assert cr_weight(spec, 10) == 2.0

    def test_cosine_end(self):
        assert cr_weight(ScheduleSpec("cosine", 1.5, 9), 9) == 1.5

    def test_piecewise_middle(self):
        spec = ScheduleSpec("piecewise", 1.0, 30)
        assert cr_weight(spec, 15) == 0.5
        assert cr_weight(spec, 0) == 0.0
        assert cr_weight(spec, 10) == 0.0
        assert cr_weight(spec, 21) == 1.0

    def test_cyclic_shape(self):
        spec = ScheduleSpec("cyclic", 1.0, 4)
        assert cr_weight(spec, 2) == pytest.approx(np.sqrt(1 - 0.25))

    def test_outside_range(self):
        spec = ScheduleSpec("linear", 1.0, 5)
        with pytest.raises(ValueError):
            cr_weight(spec, 6)
        with pytest.raises(ValueError):
            cr_weight(spec, -1)

    @pytest.mark.parametrize("kind", SCHEDULES)
    def test_monotone_and_bounded(self, kind):
        spec = ScheduleSpec(kind, 0.7, 60)
        ts = np.linspace(0, 60, 601)
        w = np.array([cr_weight(spec, t) for t in ts])
        assert np.all(np.diff(w) >= -1e-15)
        assert w.min() >= 0 and w.max() <= 0.7 + 1e-15

    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            ScheduleSpec("gaussian", 1.0, 3)
