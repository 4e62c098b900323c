import dataclasses

import numpy as np
import pytest

from ihaudit import data as D
from ihaudit import dynamics as Dy
from ihaudit import model as M
from ihaudit import training as T
from ihaudit.errors import DivergedNumerically, InsufficientData


def cfg(**kw):
    base = dict(learning_rate=0.1, momentum=0.0, weight_decay=0.0, batch_size=1, epochs=1)
    return T.SgdConfig(**{**base, **kw})


class TestStep:
    def test_plain_sgd(self):
        s = T.sgd_step(T.SgdState.start([1.0]), [2.0], cfg())
        np.testing.assert_allclose(s.w, [0.8])
        np.testing.assert_allclose(s.h, [2.0])
        assert s.step_count == 1

    def test_momentum(self):
        s = T.SgdState(np.array([1.0]), np.array([1.0]), 4)
        out = T.sgd_step(s, [2.0], cfg(momentum=0.5))
        np.testing.assert_allclose(out.h, [2.5])
        np.testing.assert_allclose(out.w, [1.0 - 0.25])
        assert out.step_count == 5

    def test_fixed_point(self):
        s = T.SgdState.start([3.0, -1.0])
        out = T.sgd_step(s, [0.0, 0.0], cfg(momentum=0.9))
        np.testing.assert_array_equal(out.w, s.w)
        np.testing.assert_array_equal(out.h, 0.0)
        assert out.step_count == 1

    def test_zero_momentum_is_vanilla(self, rng):
        w, g = rng.normal(size=5), rng.normal(size=5)
        out = T.sgd_step(T.SgdState(w, rng.normal(size=5)), g, cfg(momentum=0.0, learning_rate=0.37))
        np.testing.assert_array_equal(out.w, w - 0.37 * g)

    def test_non_finite(self):
        with pytest.raises(DivergedNumerically):
            T.sgd_step(T.SgdState.start([0.0]), [np.inf], cfg())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            T.SgdConfig(momentum=1.0)
        with pytest.raises(ValueError):
            T.SgdConfig(sampling="bogus")
        d = T.SgdConfig().to_dict()
        assert (d["learning_rate"], d["momentum"], d["weight_decay"]) == (0.01, 0.9, 5e-4)


class TestTrain:
    def test_scalar_quadratic_converges(self):
        # one record x=1, y=3 with squared loss (w - 3)^2
        spec = M.ModelSpec.linear(1)
        ds = (np.array([[1.0]]), np.array([3.0]))
        w = T.train(spec, ds, None, cfg(epochs=200), init=np.zeros(1))
        assert abs(w[0] - 3.0) < 1e-6

    def test_deterministic(self, small_game):
        spec, ds, mask, c, w = small_game
        again = T.train(spec, ds, mask, c)
        assert w.tobytes() == again.tobytes()

    def test_seed_changes_result(self, small_game):
        spec, ds, mask, c, w = small_game
        other = T.train(spec, ds, mask, dataclasses.replace(c, seed=c.seed + 1))
        assert not np.array_equal(w, other)

    def test_regulariser_shrinks(self):
        ds = D.synth_tabular(0, 200, 6, 2)
        spec = M.ModelSpec.mlp(6, (4,), 2)
        base = T.SgdConfig(learning_rate=0.05, momentum=0.9, weight_decay=0.0, batch_size=20, epochs=20)
        w0 = T.train(spec, ds, None, base)
        w10 = T.train(spec, ds, None, dataclasses.replace(base, weight_decay=10.0, learning_rate=0.005))
        assert np.linalg.norm(w10) < np.linalg.norm(w0)

    def test_only_members_used(self):
        spec = M.ModelSpec.linear(1)
        X = np.array([[1.0], [1.0]])
        y = np.array([3.0, -100.0])
        w = T.train(spec, (X, y), np.array([True, False]), cfg(epochs=200), init=np.zeros(1))
        assert abs(w[0] - 3.0) < 1e-6

    def test_insufficient_members(self):
        ds = D.synth_tabular(0, 10, 3, 2)
        with pytest.raises(InsufficientData):
            T.train(M.ModelSpec.mlp(3, (2,), 2), ds, np.arange(10) < 3, cfg(batch_size=4))

    def test_divergence(self):
        spec = M.ModelSpec.linear(1)
        ds = (np.array([[10.0]]), np.array([1.0]))
        with pytest.raises(DivergedNumerically):
            T.train(spec, ds, None, cfg(epochs=500, learning_rate=1.0))

    def test_full_batch_monotone_contraction(self):
        inst = Dy.quadratic_instance()
        c = cfg(batch_size=len(inst.y), learning_rate=0.05)
        traj = T.capture_trajectory(inst.spec, inst.dataset, c, 0, 40, init=np.zeros(2))
        dists = np.linalg.norm(traj - inst.w_ols, axis=1)
        assert np.all(np.diff(dists) < 0)

    def test_final_metrics_keys(self, small_game):
        spec, ds, mask, _, w = small_game
        m = T.final_metrics(spec, w, ds, mask)
        assert set(m) == {"train_loss", "train_accuracy", "test_loss", "test_accuracy"}
        assert m["train_loss"] < m["test_loss"]


class TestTrajectory:
    def test_empty(self):
        inst = Dy.quadratic_instance()
        out = T.capture_trajectory(inst.spec, inst.dataset, cfg(batch_size=8), 10, 0)
        assert out.shape == (0, 2)

    def test_count(self):
        inst = Dy.quadratic_instance()
        out = T.capture_trajectory(inst.spec, inst.dataset, cfg(batch_size=8, learning_rate=0.01), 5, 17, thin=1)
        assert out.shape == (17, 2)

    def test_thinning_picks_every_kth_iterate(self):
        inst = Dy.quadratic_instance()
        c = cfg(batch_size=8, learning_rate=0.01, sampling=T.IID)
        full = T.capture_trajectory(inst.spec, inst.dataset, c, 3, 12, thin=1)
        thin = T.capture_trajectory(inst.spec, inst.dataset, c, 3, 4, thin=3)
        np.testing.assert_array_equal(thin, full[2::3])

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_divergence(self):
        inst = Dy.quadratic_instance()
        with pytest.raises(DivergedNumerically):
            T.capture_trajectory(inst.spec, inst.dataset, cfg(batch_size=8, learning_rate=1.0), 0, 2000)

    def test_stationary_mean(self):
        inst = Dy.quadratic_instance()
        c = T.SgdConfig(learning_rate=0.05, momentum=0.0, weight_decay=0.0, batch_size=64, sampling=T.IID)
        traj = T.capture_trajectory(inst.spec, inst.dataset, c, 500, 4000, thin=10, init=inst.w_ols)
        se = traj.std(axis=0, ddof=1) / np.sqrt(len(traj))
        assert np.all(np.abs(traj.mean(axis=0) - inst.w_ols) < 5 * se)
