import json

import numpy as np
import pytest

from flmip import (DataError, NetworkFormatError, ReluNetwork, TrainConfig,
                   TrainingGrid, fit_regression, load_network, save_network)
from conftest import random_network


def manual_forward(net, y):
    """Independent layer-by-layer evaluation used as an oracle."""
    y = np.asarray(y, dtype=float)
    for k, (W, b) in enumerate(net.layers):
        z = np.array([sum(W[i, j] * y[j] for j in range(W.shape[1])) + b[i]
                      for i in range(W.shape[0])])
        y = np.maximum(z, 0.0) if k < len(net.layers) - 1 else z
    return y


class TestForward:
    def test_affine_only_identity(self, identity_net):
        assert identity_net.forward([5.0]) == pytest.approx([5.0])

    def test_relu_clamps_negative_preactivation(self):
        net = ReluNetwork([(np.array([[1.0]]), np.array([-1.0])),
                           (np.array([[1.0]]), np.zeros(1))])
        assert net.forward([0.0]) == pytest.approx([0.0])
        assert net.forward([3.0]) == pytest.approx([2.0])

    def test_matches_independent_evaluation(self, rng):
        for _ in range(100):
            dims = [rng.integers(1, 4)] + list(rng.integers(1, 5, size=2)) + [1]
            net = random_network(rng, dims)
            y0 = rng.normal(size=dims[0])
            assert np.allclose(net.forward(y0), manual_forward(net, y0),
                               atol=1e-12)

    def test_forward_batch_matches_forward(self, rng):
        net = random_network(rng, [3, 5, 5, 2])
        X = rng.normal(size=(40, 3))
        single = np.array([net.forward(x) for x in X])
        assert np.allclose(net.forward_batch(X), single, atol=1e-12)

    def test_piecewise_linear_continuity(self, rng):
        net = random_network(rng, [2, 4, 4, 1])
        lip = np.prod([np.abs(W).sum(axis=1).max() for W, _ in net.layers])
        y0, y1 = rng.normal(size=2), rng.normal(size=2)
        ts = np.linspace(0.0, 1.0, 2000)
        vals = net.forward_batch(y0 + ts[:, None] * (y1 - y0))[:, 0]
        step = np.linalg.norm(y1 - y0) / (len(ts) - 1)
        assert np.abs(np.diff(vals)).max() <= lip * step + 1e-12

    def test_bad_dim_chain_rejected(self):
        with pytest.raises(NetworkFormatError, match="layer 1"):
            ReluNetwork([(np.ones((3, 2)), np.zeros(3)),
                         (np.ones((1, 4)), np.zeros(1))])

    def test_nonfinite_weight_rejected(self):
        with pytest.raises(NetworkFormatError):
            ReluNetwork([(np.array([[np.nan]]), np.zeros(1))])


class TestTraining:
    def test_abs_function_exactly_representable(self):
        grid = TrainingGrid(box=[(-1.0, 1.0)], samples_per_axis=41,
                            target=lambda X: np.abs(X[:, 0]))
        fit = fit_regression(grid, (2, 2),
                             TrainConfig(seed=3, adam_iters=2000,
                                         lbfgs_iters=2000, restarts=3,
                                         mse_target=1e-7))
        assert fit.grid_mse <= 1e-6

    def test_zero_function(self):
        grid = TrainingGrid(box=[(-1.0, 1.0)], samples_per_axis=11,
                            target=lambda X: np.zeros(X.shape[0]))
        fit = fit_regression(grid, (2, 3),
                             TrainConfig(seed=0, adam_iters=200, lbfgs_iters=500))
        assert fit.grid_mse <= 1e-9

    def test_final_mse_not_worse_than_initial(self):
        grid = TrainingGrid(box=[(-2.0, 2.0)], samples_per_axis=21,
                            target=lambda X: np.sin(X[:, 0]))
        fit = fit_regression(grid, (3, 4),
                             TrainConfig(seed=1, adam_iters=300, lbfgs_iters=300))
        assert fit.grid_mse <= fit.initial_mse

    def test_deterministic_given_seed(self):
        grid = TrainingGrid(box=[(-1.0, 1.0)], samples_per_axis=11,
                            target=lambda X: X[:, 0] ** 2)
        cfg = TrainConfig(seed=7, adam_iters=100, lbfgs_iters=100)
        n1 = fit_regression(grid, (2, 3), cfg).network
        n2 = fit_regression(grid, (2, 3), cfg).network
        for (W1, b1), (W2, b2) in zip(n1.layers, n2.layers):
            assert np.array_equal(W1, W2) and np.array_equal(b1, b2)

    def test_nonfinite_target_names_sample(self):
        def bad(X):
            out = X[:, 0].copy()
            out[X[:, 0] > 0.5] = np.nan
            return out
        grid = TrainingGrid(box=[(0.0, 1.0)], samples_per_axis=5, target=bad)
        with pytest.raises(DataError, match="0.75"):
            grid.targets(grid.points())


class TestPersistence:
    def test_round_trip_bit_exact(self, abs_net, tmp_path):
        p = tmp_path / "net.json"
        save_network(abs_net, p)
        back = load_network(p)
        assert np.array_equal(back.forward([0.3]), abs_net.forward([0.3]))
        for (W1, b1), (W2, b2) in zip(abs_net.layers, back.layers):
            assert np.array_equal(W1, W2) and np.array_equal(b1, b2)

    def test_mismatched_dims_name_layer(self, tmp_path):
        p = tmp_path / "bad.json"
        doc = {"layers": [{"W": [[1.0, 2.0]], "b": [0.0]},
                          {"W": [[1.0, 1.0, 1.0]], "b": [0.0]}]}
        p.write_text(json.dumps(doc))
        with pytest.raises(NetworkFormatError, match="layer 1"):
            load_network(p)

    def test_nan_weight_rejected(self, tmp_path):
        p = tmp_path / "nan.json"
        p.write_text('{"layers": [{"W": [[NaN]], "b": [0.0]}]}')
        with pytest.raises(NetworkFormatError):
            load_network(p)

    def test_not_json(self, tmp_path):
        p = tmp_path / "junk.json"
        p.write_text("not json at all {")
        with pytest.raises(NetworkFormatError):
            load_network(p)
