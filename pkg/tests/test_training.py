import math

import numpy as np
import pytest

from boolnet.data import Dataset
from boolnet.models import build_network, discretized_copy, network_state
from boolnet.network import (
    RESAMPLE_ALL,
    RESAMPLE_NON_DOMINANT,
    RESAMPLE_NONE,
    softmax_weights,
    weight_entropy,
)
from boolnet.training import (
    AdamState,
    DiscretizerState,
    LayerResampler,
    NeuronController,
    TrainConfig,
    Trainer,
    TrainingAborted,
    adam_step,
    apply_resample,
    discretizer_observe,
    evaluate,
    resampler_observe,
    stability_update,
    train,
)

from conftest import random_frozen_network, random_live_dense

RHO, EPS = 0.99, 5e-4


def weights_with_top(mass, K=16):
    """w whose softmax puts ``mass`` on slot 0 and spreads the rest evenly."""
    w = np.full(K, math.log((1 - mass) / (K - 1)))
    w[0] = math.log(mass)
    return w


def first_fire_from_zero(h, T, rho=RHO, eps=EPS):
    """Closed form for a constant entropy observed from mu = 0: before step t
    the running mean is h (1 - rho^(t-1)), so step t is stable once
    h rho^(t-1) <= eps and every later step stays stable."""
    t0 = 1 + math.ceil(math.log(eps / h) / math.log(rho))
    margin = math.log(eps / h) / math.log(rho) % 1.0
    assert 1e-6 < margin < 1 - 1e-6, "oracle too close to a rounding boundary"
    return t0 + T - 1


def conv_stack(rng, n_conv=3, K=4):
    layers = []
    c, size = 2, 6
    for _ in range(n_conv):
        layers.append({"type": "conv", "in_channels": c, "out_channels": 2, "height": size,
                       "width": size, "stride": 1, "K": K})
        c = 2
    layers += [{"type": "flatten"}, {"type": "dense", "d_out": 40, "K": K},
               {"type": "groupsum", "num_classes": 2, "tau": 4.0}]
    return build_network((2, size, size), layers, rng)


class TestAdam:
    def test_first_step(self):
        params = {"w": np.zeros(1)}
        adam_step(params, {"w": np.ones(1)}, AdamState(), 0.01)
        # bias-corrected m/sqrt(v) is exactly 1 on the first step
        assert params["w"][0] == pytest.approx(-0.01 / (1 + 1e-8), abs=1e-15)

    def test_zero_gradient(self, rng):
        w = rng.standard_normal((3, 4))
        params = {"w": w.copy()}
        state = AdamState()
        for _ in range(5):
            adam_step(params, {"w": np.zeros((3, 4))}, state, 0.01)
        np.testing.assert_array_equal(params["w"], w)

    def test_matches_hand_loop(self, rng):
        grads = rng.standard_normal((10, 5))
        params = {"w": np.zeros(5)}
        state = AdamState()
        m = v = np.zeros(5)
        w = np.zeros(5)
        for t, g in enumerate(grads, start=1):
            adam_step(params, {"w": g}, state, 0.02)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 0.02 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(params["w"], w, rtol=1e-12)

    def test_nan_aborts(self):
        params = {"w": np.zeros(2)}
        with pytest.raises(TrainingAborted, match="non-finite"):
            adam_step(params, {"w": np.array([0.0, np.nan])}, AdamState(), 0.01)
        np.testing.assert_array_equal(params["w"], 0.0)

    def test_moment_shapes(self, rng):
        state = AdamState()
        adam_step({"a": np.zeros((2, 3))}, {"a": np.ones((2, 3))}, state, 0.1)
        assert state.m["a"].shape == state.v["a"].shape == (2, 3)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"rho": 1.0}, {"rho": 0.0}, {"epsilon": 0.0}, {"patience": 0}])
    def test_invariants(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_resample_end(self):
        assert TrainConfig(total_steps=50).resample_end == 50
        assert TrainConfig(total_steps=50, resample_until=20).resample_end == 20
        assert TrainConfig(total_steps=50, resample=False).resample_end == 0


def run_controller(w, state, config, steps):
    actions = []
    for _ in range(steps):
        actions.append(resampler_observe(w, state, config))
    return actions


class TestResampler:
    def test_dominated_fires_at_T(self):
        T = 100
        w = weights_with_top(0.99)
        state = NeuronController(mu=weight_entropy(w))
        actions = run_controller(w, state, TrainConfig(patience=T), T + 5)
        fired = [i + 1 for i, a in enumerate(actions) if a != RESAMPLE_NONE]
        assert fired == [T]
        assert actions[T - 1] == RESAMPLE_NON_DOMINANT
        assert state.c == 5

    def test_dispersed_fires_at_T(self):
        T = 37
        w = weights_with_top(0.3)
        state = NeuronController(mu=weight_entropy(w))
        actions = run_controller(w, state, TrainConfig(patience=T), T)
        assert actions[-1] == RESAMPLE_ALL
        assert all(a == RESAMPLE_NONE for a in actions[:-1])

    @pytest.mark.parametrize("mass, action", [(0.99, RESAMPLE_NON_DOMINANT), (0.3, RESAMPLE_ALL)])
    def test_from_zero_mean(self, mass, action):
        T = 100
        w = weights_with_top(mass)
        expected = first_fire_from_zero(weight_entropy(w), T)
        actions = run_controller(w, NeuronController(), TrainConfig(patience=T), expected + 1)
        fired = [i + 1 for i, a in enumerate(actions) if a != RESAMPLE_NONE]
        assert fired == [expected]
        assert actions[expected - 1] == action

    def test_intermediate_never_fires(self):
        w = weights_with_top(0.6)
        state = NeuronController(mu=weight_entropy(w))
        actions = run_controller(w, state, TrainConfig(patience=10), 50)
        assert set(actions) == {RESAMPLE_NONE}
        # the counter keeps growing because no resample happened
        assert state.c == 50

    def test_oscillating_never_fires(self):
        config = TrainConfig(patience=5)
        state = NeuronController()
        wa, wb = weights_with_top(0.99), weights_with_top(0.3)
        for i in range(500):
            assert resampler_observe(wa if i % 2 else wb, state, config) == RESAMPLE_NONE
            assert state.c == 0

    def test_replay_reproduces(self, rng):
        trace = [weights_with_top(m) for m in rng.choice([0.99, 0.991], size=400)]
        config = TrainConfig(patience=20, epsilon=1e-2)

        def fire_steps():
            st = NeuronController()
            return [i for i, w in enumerate(trace) if resampler_observe(w, st, config) != RESAMPLE_NONE]

        first = fire_steps()
        assert first and first == fire_steps()

    def test_stability_update_order(self):
        # the counter compares against the mean *before* it absorbs h
        mu, c = stability_update(0.0, 3, 1e-4, RHO, EPS)
        assert c == 4 and mu == pytest.approx(1e-6)
        mu, c = stability_update(0.0, 3, 1.0, RHO, EPS)
        assert c == 0 and mu == pytest.approx(0.01)

    def test_layer_matches_scalar(self, rng):
        """The vectorized per-layer controller equals one scalar controller
        per neuron on a random weight trace."""
        config = TrainConfig(patience=6, epsilon=5e-2)
        n = 12
        base = np.stack([weights_with_top(m) for m in rng.choice([0.99, 0.3, 0.6], size=n)])
        layer_ctl = LayerResampler(np.zeros(n), np.zeros(n, dtype=np.int64))
        scalars = [NeuronController() for _ in range(n)]
        for _ in range(300):
            w = base + rng.normal(scale=0.01, size=base.shape)
            got = layer_ctl.observe(w, config)
            want = [resampler_observe(w[u], scalars[u], config) for u in range(n)]
            np.testing.assert_array_equal(got, want)
            np.testing.assert_array_equal(layer_ctl.c, [s.c for s in scalars])


class TestApplyResample:
    def test_non_dominant(self, rng):
        layer = random_live_dense(rng, 20, 10, 16)
        layer.w[3] = weights_with_top(0.99)
        layer.w[3] = np.roll(layer.w[3], 5)
        keep = (layer.k[3, 5], layer.p[3, 5], layer.q[3, 5])
        actions = np.zeros(10, dtype=np.int64)
        actions[3] = RESAMPLE_NON_DOMINANT
        before = layer.w.copy()
        changed = apply_resample(layer, actions, rng)
        np.testing.assert_array_equal(changed, [3])
        s = softmax_weights(layer.w[3])
        assert abs(s[5] - 0.9) <= 1e-9
        np.testing.assert_allclose(np.delete(s, 5), 0.1 / 15, atol=1e-12)
        assert (layer.k[3, 5], layer.p[3, 5], layer.q[3, 5]) == keep
        assert weight_entropy(layer.w[3]) == pytest.approx(0.5959, abs=1e-4)
        np.testing.assert_array_equal(np.delete(layer.w, 3, axis=0), np.delete(before, 3, axis=0))

    def test_all(self, rng):
        layer = random_live_dense(rng, 20, 10, 16)
        actions = np.zeros(10, dtype=np.int64)
        actions[[0, 7]] = RESAMPLE_ALL
        apply_resample(layer, actions, rng)
        for u in (0, 7):
            assert abs(weight_entropy(layer.w[u]) - math.log(16)) <= 1e-9
        assert layer.p.max() < 20 and layer.k.min() >= 1 and layer.k.max() <= 16

    def test_seeded(self, rng):
        a = random_live_dense(np.random.default_rng(1), 20, 6, 8)
        b = random_live_dense(np.random.default_rng(1), 20, 6, 8)
        actions = np.full(6, RESAMPLE_ALL)
        apply_resample(a, actions, np.random.default_rng(5))
        apply_resample(b, actions, np.random.default_rng(5))
        for f in ("k", "p", "q", "w"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))

    def test_none_is_noop(self, rng):
        layer = random_live_dense(rng, 20, 6, 8)
        v = layer.version
        assert len(apply_resample(layer, np.zeros(6, dtype=np.int64), rng)) == 0
        assert layer.version == v


class TestDiscretizer:
    def test_eligible_are_conv(self, rng):
        net = conv_stack(rng)
        state = DiscretizerState.for_network(net)
        assert state.eligible == [0, 1, 2]

    def test_freezes_after_T_stable_steps(self, rng):
        net = conv_stack(rng)
        T = 25
        state = DiscretizerState.for_network(net)
        state.mu[0] = float(net.layers[0].entropies().mean())
        config = TrainConfig(discretize_patience=T)
        events = [discretizer_observe(net, state, config) for _ in range(T)]
        assert events[:-1] == [None] * (T - 1) and events[-1] == 0
        assert net.layers[0].frozen and not net.layers[1].frozen

    def test_in_order_with_oracle(self, rng):
        net = conv_stack(rng)
        T = 30
        config = TrainConfig(discretize_patience=T)
        state = DiscretizerState.for_network(net)
        expected, t = [], 0
        for i in state.eligible:
            t += first_fire_from_zero(float(net.layers[i].entropies().mean()), T)
            expected.append(t)
        got = {}
        for step in range(1, expected[-1] + 50):
            f = discretizer_observe(net, state, config)
            if f is not None:
                got[f] = step
        assert [got[i] for i in state.eligible] == expected
        assert state.frozen == [0, 1, 2]
        assert not net.layers[4].frozen  # dense layers stay relaxed

    def test_frozen_layers_not_updated(self, rng):
        net = conv_stack(rng)
        net.layers[0].freeze()
        choice = [a.copy() for a in net.layers[0].frozen_choice]
        trainer = Trainer(net, TrainConfig(learning_rate=0.05, resample=False))
        x = (rng.random((8, 2, 6, 6)) < 0.5).astype(float)
        y = rng.integers(0, 2, size=8)
        w1 = net.layers[1].w.copy()
        for _ in range(5):
            trainer.train_step(x, y)
        for a, b in zip(choice, net.layers[0].frozen_choice):
            np.testing.assert_array_equal(a, b)
        assert "layer0.w" not in trainer.adam.m
        assert not np.array_equal(w1, net.layers[1].w)

    def test_freeze_drops_adam_state(self, rng):
        net = conv_stack(rng)
        config = TrainConfig(learning_rate=0.0, resample=False, adaptive_discretization=True,
                             discretize_patience=1, epsilon=10.0)
        trainer = Trainer(net, config)
        x = (rng.random((4, 2, 6, 6)) < 0.5).astype(float)
        out = trainer.train_step(x, np.array([0, 1, 0, 1]))
        assert out["frozen"] == 0
        assert "layer0.w" not in trainer.adam.m


XOR_X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
XOR_Y = np.array([0, 1, 1, 0])


def xor_net(seed):
    layers = [{"type": "dense", "d_out": 4, "K": 16}, {"type": "dense", "d_out": 4, "K": 16},
              {"type": "groupsum", "num_classes": 2, "tau": 1.0}]
    return build_network((2,), layers, np.random.default_rng(seed))


def tiny_dataset(rng, n=200, classes=4):
    labels = rng.integers(0, classes, size=n)
    images = rng.random((n, 1, 4, 4)) * 0.4
    images[np.arange(n), 0, labels, labels] = 1.0
    return Dataset(images, labels)


def tiny_net(seed, classes=4):
    layers = [{"type": "dense", "d_out": 16, "K": 8}, {"type": "dense", "d_out": 16, "K": 8},
              {"type": "groupsum", "num_classes": classes, "tau": 2.0}]
    return build_network((16,), layers, np.random.default_rng(seed))


class TestTraining:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_xor_solved(self, seed):
        net = xor_net(seed)
        trainer = Trainer(net, TrainConfig(learning_rate=0.01, batch_size=4, seed=seed))
        solved = None
        for step in range(1, 2001):
            trainer.train_step(XOR_X, XOR_Y)
            if evaluate(net, XOR_X, XOR_Y, "discretized") == 1.0:
                solved = step
                break
        assert solved is not None

    def test_zero_lr_constant_loss(self, rng):
        ds = tiny_dataset(rng)
        config = TrainConfig(learning_rate=0.0, batch_size=200, total_steps=20, eval_interval=1,
                             resample=False, augment=False)
        result = train(tiny_net(0), ds, ds, config)
        losses = {r["loss"] for r in result.records}
        assert len(losses) == 1

    def test_deterministic(self, rng):
        ds = tiny_dataset(rng)
        config = TrainConfig(learning_rate=0.05, batch_size=32, total_steps=100, eval_interval=50,
                             patience=3, epsilon=0.05, augment=False, seed=4)
        a = train(tiny_net(3), ds, ds, config)
        b = train(tiny_net(3), ds, ds, config)
        assert a.records == b.records
        sa, sb = network_state(a.trainer.network), network_state(b.trainer.network)
        for k in sa:
            np.testing.assert_array_equal(sa[k], sb[k])

    def test_records(self, rng):
        ds = tiny_dataset(rng)
        config = TrainConfig(learning_rate=0.05, batch_size=32, total_steps=60, eval_interval=20,
                             augment=False)
        seen = []
        result = train(tiny_net(1), ds, ds, config, on_record=seen.append)
        assert [r["step"] for r in result.records] == [20, 40, 60]
        assert seen == result.records
        keys = {"step", "loss", "train_acc", "relaxed_acc", "discretized_acc", "gap", "entropy",
                "resampled", "frozen_layers", "phase"}
        assert set(result.records[0]) == keys
        assert result.best_accuracy == max(r["discretized_acc"] for r in result.records)

    def test_learns_tiny_task(self, rng):
        ds = tiny_dataset(rng, n=400)
        config = TrainConfig(learning_rate=0.05, batch_size=64, total_steps=400, eval_interval=100,
                             augment=False)
        result = train(tiny_net(2), ds, ds, config)
        assert result.best_accuracy > 0.5

    def test_nan_loss_aborts(self, rng):
        net = tiny_net(0)
        net.layers[0].w[0, 0] = np.nan
        trainer = Trainer(net, TrainConfig())
        with pytest.raises((TrainingAborted, ValueError)):
            trainer.train_step(rng.random((4, 16)), np.zeros(4, dtype=int))


class TestEvaluate:
    def test_frozen_network_gap_zero(self, rng):
        net = random_frozen_network(rng, 12, [24, 20], 4, tau=2.0)
        x = rng.integers(0, 2, size=(300, 12)).astype(float)
        y = rng.integers(0, 4, size=300)
        assert evaluate(net, x, y, "relaxed") == evaluate(net, x, y, "discretized")

    def test_one_hot_weights_gap_zero(self, rng):
        net = build_network((12,), [{"type": "dense", "d_out": 24, "K": 8},
                                    {"type": "groupsum", "num_classes": 4, "tau": 1.0}], rng)
        layer = net.layers[0]
        layer.w = np.full((24, 8), -60.0)
        layer.w[np.arange(24), rng.integers(0, 8, size=24)] = 60.0
        x = rng.integers(0, 2, size=(300, 12)).astype(float)
        y = rng.integers(0, 4, size=300)
        assert evaluate(net, x, y, "relaxed") == pytest.approx(evaluate(net, x, y, "discretized"), abs=1e-12)
        relaxed, _ = net.forward(x)
        discrete, _ = discretized_copy(net).forward(x)
        np.testing.assert_allclose(relaxed, discrete, atol=1e-9)

    def test_chance_level(self, rng):
        net = random_frozen_network(rng, 64, [200, 200], 10, tau=1.0)
        x = rng.integers(0, 2, size=(5000, 64)).astype(float)
        y = np.tile(np.arange(10), 500)
        assert abs(evaluate(net, x, y, "discretized") - 0.1) <= 0.03

    def test_discretized_leaves_network_live(self, rng):
        net = tiny_net(0)
        evaluate(net, rng.random((10, 16)), np.zeros(10, dtype=int), "discretized")
        assert not any(l.frozen for l in net.logic_layers)

    def test_unknown_mode(self, rng):
        with pytest.raises(ValueError):
            evaluate(tiny_net(0), rng.random((2, 16)), np.zeros(2, dtype=int), "bogus")
