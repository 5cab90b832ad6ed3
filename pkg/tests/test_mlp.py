import io
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plumeinv.errors import ParseError, ValidationError
from plumeinv.mlp import (
    TOPOLOGIES,
    ExtrapolationWarning,
    MlpNetwork,
    Scaler,
    Topology,
    TrainingConfig,
    backprop_update,
    forward_pass,
    init_network,
    invert,
    logsig,
    predict,
    read_network,
    sse_gradients,
    train,
    weight_correction,
    write_network,
)


def sigmoid(s):
    return 1.0 / (1.0 + math.exp(-s))


def sse(net, x, t):
    out, _ = forward_pass(net, x)
    return float(np.sum((np.asarray(t) - out) ** 2))


def linear_fixture(n_pairs, seed=0, n=3):
    rng = np.random.default_rng(seed)
    S = rng.uniform(0.0, 30.0, (n_pairs, n))
    C = S * np.linspace(1.0, 2.0, n)  # diagonal operator
    return C, S


class TestTopology:
    def test_canonical(self):
        assert str(Topology.parse("ANN-3")) == "6:15:30:12"
        assert set(TOPOLOGIES) == {"ANN-1", "ANN-2", "ANN-3"}

    def test_shapes(self):
        net = init_network("6:15:30:12", seed=1)
        assert [w.shape for w in net.weights] == [(15, 6), (30, 15), (12, 30)]
        assert all(np.all(b == 0) for b in net.biases)
        assert all(np.all(d == 0) for d in net.prev_dw)

    @pytest.mark.parametrize("bad", ["6:15:12", "6:0:3:12", "a:b"])
    def test_invalid(self, bad):
        with pytest.raises(ValidationError):
            Topology.parse(bad)

    def test_init_range_and_determinism(self):
        a = init_network("6:15:30:12", seed=4)
        b = init_network("6:15:30:12", seed=4)
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)
            assert np.all(np.abs(wa) <= 0.5 / math.sqrt(wa.shape[1]))


class TestForwardPass:
    def test_zero_network(self):
        net = init_network("6:6:12:12")
        for w in net.weights:
            w[:] = 0.0
        out, outs = forward_pass(net, np.arange(6.0))
        for o in outs[1:]:
            np.testing.assert_array_equal(o, 0.5)

    def test_saturation(self):
        assert logsig(0.0) == 0.5
        assert logsig(40.0) == pytest.approx(1.0)
        assert logsig(-800.0) == 0.0 and np.isfinite(logsig(800.0))

    def test_hand_computed(self):
        W1 = np.array([[1.0, -1.0], [0.5, 2.0]])
        b1 = np.array([0.0, -1.0])
        W2 = np.array([[1.5, -2.0]])
        b2 = np.array([0.25])
        W3 = np.array([[2.0]])
        b3 = np.array([-0.5])
        net = MlpNetwork([W1, W2, W3], [b1, b2, b3], ["logsig"] * 3)
        x = (1.0, 2.0)
        h1 = sigmoid(1.0 * 1.0 - 1.0 * 2.0)
        h2 = sigmoid(0.5 * 1.0 + 2.0 * 2.0 - 1.0)
        g = sigmoid(1.5 * h1 - 2.0 * h2 + 0.25)
        expected = sigmoid(2.0 * g - 0.5)
        assert forward_pass(net, x)[0][0] == pytest.approx(expected, rel=1e-14)
        assert predict(net, [x])[0, 0] == pytest.approx(expected, rel=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            forward_pass(init_network("6:6:12:12"), np.zeros(5))

    def test_batch_matches_single(self):
        net = init_network("6:7:8:12", seed=2)
        X = np.random.default_rng(0).random((5, 6))
        np.testing.assert_allclose(predict(net, X), np.vstack([forward_pass(net, x)[0] for x in X]), rtol=1e-14)


class TestGradients:
    @pytest.mark.parametrize("acts", [None, ["tansig", "tansig", "purelin"]])
    def test_finite_differences(self, acts):
        rng = np.random.default_rng(10)
        net = init_network("6:5:5:12", seed=3, activations=acts)
        for w in net.weights:
            w *= 4.0  # leave the near-linear regime
        for b in net.biases:
            b[:] = rng.normal(size=b.shape)
        x, t = rng.random(6), rng.random(12)
        _, gw, gb = sse_gradients(net, x, t)
        h = 1e-5
        for params, grads in ((net.weights, gw), (net.biases, gb)):
            for P, G in zip(params, grads):
                for idx in np.ndindex(P.shape):
                    orig = P[idx]
                    P[idx] = orig + h
                    fp = sse(net, x, t)
                    P[idx] = orig - h
                    fm = sse(net, x, t)
                    P[idx] = orig
                    fd = (fp - fm) / (2 * h)
                    assert abs(G[idx] - fd) <= 1e-5 * max(abs(G[idx]), abs(fd)) + 1e-11

    def test_correction_formula(self):
        assert weight_correction(0.1, 1.0, 2.0) == pytest.approx(0.2)
        assert weight_correction(0.1, 1.0, 2.0, alpha=0.5, prev=0.4) == pytest.approx(0.4)

    def test_steepest_descent_without_momentum(self):
        net = init_network("6:5:5:12", seed=5)
        net.prev_dw = [np.full_like(w, 7.0) for w in net.weights]
        rng = np.random.default_rng(1)
        x, t = rng.random(6), rng.random(12)
        before = [w.copy() for w in net.weights]
        bbefore = [b.copy() for b in net.biases]
        value, gw, gb = sse_gradients(net, x, t)
        returned = backprop_update(net, x, t, eta=0.1, alpha=0.0)
        assert returned == value
        for w0, w1, g in zip(before, net.weights, gw):
            np.testing.assert_allclose(w1, w0 - 0.05 * g, rtol=1e-13, atol=1e-16)
        for b0, b1, g in zip(bbefore, net.biases, gb):
            np.testing.assert_allclose(b1, b0 - 0.05 * g, rtol=1e-13, atol=1e-16)

    def test_momentum_stored(self):
        net = init_network("2:2:2:1", seed=0)
        backprop_update(net, [0.3, 0.6], [0.9], eta=0.1, alpha=0.5)
        first = [d.copy() for d in net.prev_dw]
        w = [x.copy() for x in net.weights]
        backprop_update(net, [0.3, 0.6], [0.9], eta=0.1, alpha=0.5)
        for l in range(3):
            np.testing.assert_allclose(net.weights[l] - w[l], net.prev_dw[l], rtol=1e-9, atol=1e-15)
        assert not all(np.array_equal(a, b) for a, b in zip(first, net.prev_dw))

    def test_update_reduces_error(self):
        net = init_network("6:5:5:12", seed=8)
        rng = np.random.default_rng(2)
        x, t = rng.random(6), rng.random(12)
        e0 = backprop_update(net, x, t, eta=0.1, alpha=0.0)
        assert sse(net, x, t) < e0


class TestScaler:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(0, 10, (20, 6)) * 10.0 ** rng.integers(-6, 6, 6)
        Y = rng.uniform(0, 30, (20, 12))
        sc = Scaler.fit(X, Y)
        np.testing.assert_allclose(sc.inverse_x(sc.transform_x(X)), X, rtol=1e-12, atol=1e-12 * np.abs(X).max())
        np.testing.assert_allclose(sc.inverse_y(sc.transform_y(Y)), Y, rtol=1e-12, atol=1e-12 * 30)

    def test_band(self):
        X, Y = linear_fixture(30)
        sc = Scaler.fit(X, Y)
        Xs = sc.transform_x(X)
        assert Xs.min() == pytest.approx(0.1) and Xs.max() == pytest.approx(0.9)

    def test_constant_column(self):
        sc = Scaler.fit(np.array([[1.0, 2.0], [1.0, 3.0]]), np.array([[5.0], [6.0]]))
        assert sc.x_min[0] < 1.0 < sc.x_max[0]

    def test_invalid(self):
        with pytest.raises(ValidationError):
            Scaler([1.0], [1.0], [0.0], [1.0])


class TestTraining:
    def test_epoch_accounting(self):
        X, Y = linear_fixture(5)
        with pytest.raises(ValidationError):
            TrainingConfig(max_iterations=0)
        net, hist = train(init_network("3:4:4:3"), (X, Y), config=TrainingConfig(max_iterations=1))
        assert net.epochs_trained == 1 and len(hist.train_sse) == 1

    def test_empty_set(self):
        with pytest.raises(ValidationError):
            train(init_network("3:4:4:3"), (np.zeros((0, 3)), np.zeros((0, 3))))

    def test_config_invariants(self):
        with pytest.raises(ValidationError):
            TrainingConfig(eta=0.0)
        with pytest.raises(ValidationError):
            TrainingConfig(alpha=1.0)

    def test_deterministic(self):
        X, Y = linear_fixture(10)
        cfg = TrainingConfig(max_iterations=30, seed=3)
        _, h1 = train(init_network("3:4:4:3", seed=1), (X, Y), (X, Y), cfg)
        _, h2 = train(init_network("3:4:4:3", seed=1), (X, Y), (X, Y), cfg)
        assert h1.train_sse == h2.train_sse and h1.activation_sse == h2.activation_sse

    def test_input_network_untouched(self):
        net = init_network("3:4:4:3", seed=1)
        w0 = [w.copy() for w in net.weights]
        X, Y = linear_fixture(5)
        train(net, (X, Y), config=TrainingConfig(max_iterations=3))
        for a, b in zip(w0, net.weights):
            np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("init_seed", [0, 1, 2])
    def test_diagonal_convergence(self, init_seed):
        # larger diagonal fixtures sit on the small-weight plateau past 5000 epochs
        X, Y = linear_fixture(4, seed=2, n=2)
        net, hist = train(init_network("2:8:8:2", seed=init_seed), (X, Y),
                          config=TrainingConfig(max_iterations=5000, seed=1, restore_best=False))
        assert hist.train_sse[-1] < 1e-3

    def test_restore_best(self):
        X, Y = linear_fixture(20, seed=2)
        Xa, Ya = linear_fixture(10, seed=9)
        net, hist = train(init_network("3:8:8:3", seed=0), (X, Y), (Xa, Ya), TrainingConfig(max_iterations=300))
        r = net.scaler.transform_y(Ya) - predict(net, net.scaler.transform_x(Xa))
        assert float(np.sum(r * r)) == pytest.approx(min(hist.activation_sse), rel=1e-12)
        assert hist.best_epoch == int(np.argmin(hist.activation_sse)) + 1

    def test_memorization(self):
        X, Y = linear_fixture(4, seed=2, n=2)
        net, _ = train(init_network("2:8:8:2", seed=0), (X, Y),
                       config=TrainingConfig(max_iterations=10_000, seed=1, restore_best=False))
        for x, y in zip(X, Y):
            est = invert(net, None, x)
            assert not est.extrapolated
            scaled = net.scaler.transform_y(est.rates)
            np.testing.assert_allclose(scaled, net.scaler.transform_y(y), atol=1e-2)


class TestInvert:
    def setup_method(self):
        X, Y = linear_fixture(10, seed=1)
        self.net, _ = train(init_network("3:4:4:3", seed=0), (X, Y), config=TrainingConfig(max_iterations=50))
        self.X = X

    def test_untrained(self):
        with pytest.raises(ValidationError):
            invert(init_network("3:4:4:3"), None, np.ones(3))

    def test_extrapolation_flag(self):
        with pytest.warns(ExtrapolationWarning):
            est = invert(self.net, None, self.X.max(axis=0) * 3.0)
        assert est.extrapolated

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            invert(self.net, None, np.ones(4))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3))
    def test_estimates_within_target_range(self, obs):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ExtrapolationWarning)
            est = invert(self.net, None, obs)
        sc = self.net.scaler
        assert np.all(est.rates >= 0.0)
        assert np.all(est.rates >= sc.y_min - 1e-9) and np.all(est.rates <= sc.y_max + 1e-9)


class TestSerialization:
    def test_bit_exact_roundtrip(self):
        X, Y = linear_fixture(10, seed=1)
        net, _ = train(init_network("3:4:5:3", seed=0), (X, Y), config=TrainingConfig(max_iterations=20))
        buf = io.StringIO()
        write_network(net, buf, net.scaler, header=["seed: 0"])
        text = buf.getvalue()
        back, scaler = read_network(io.StringIO(text))
        for a, b in zip(net.weights + net.biases + net.prev_dw + net.prev_db,
                        back.weights + back.biases + back.prev_dw + back.prev_db):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(scaler.x_min, net.scaler.x_min)
        assert back.epochs_trained == net.epochs_trained
        assert back.activations == net.activations
        again = io.StringIO()
        write_network(back, again, scaler, header=["seed: 0"])
        assert again.getvalue() == text
        np.testing.assert_array_equal(invert(back, scaler, X[0]).rates, invert(net, None, X[0]).rates)

    def test_untrained_without_scaler(self):
        net = init_network("6:6:12:12", seed=2)
        buf = io.StringIO()
        write_network(net, buf)
        back, scaler = read_network(io.StringIO(buf.getvalue()))
        assert scaler is None
        np.testing.assert_array_equal(back.weights[1], net.weights[1])

    def test_bad_version(self):
        with pytest.raises(ParseError):
            read_network(io.StringIO("plumeinv-mlp 99\n"))
