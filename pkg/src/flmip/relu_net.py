"""Dense ReLU regression networks: evaluation, training, JSON persistence.

A network is a stack of (W, b) layers; every layer but the last is followed
by a componentwise max(0, .), the last layer is affine. Training is plain
full-data regression on a tensor grid: seeded minibatch Adam warmup followed
by an L-BFGS polish, all in numpy/scipy so runs are reproducible bit-for-bit
given the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import DataError, DimensionError, NetworkFormatError


class ReluNetwork:
    """Immutable layered ReLU network with a linear output layer."""

    def __init__(self, layers: Sequence[tuple[np.ndarray, np.ndarray]]):
        if not layers:
            raise NetworkFormatError("network needs at least one layer")
        self.layers = []
        prev = None
        for k, (W, b) in enumerate(layers):
            W = np.atleast_2d(np.asarray(W, dtype=float))
            b = np.asarray(b, dtype=float).ravel()
            if W.shape[0] != b.shape[0]:
                raise NetworkFormatError(
                    f"layer {k}: weight rows {W.shape[0]} != bias size {b.shape[0]}")
            if prev is not None and W.shape[1] != prev:
                raise NetworkFormatError(
                    f"layer {k}: expects {W.shape[1]} inputs, previous layer emits {prev}")
            if not (np.isfinite(W).all() and np.isfinite(b).all()):
                raise NetworkFormatError(f"layer {k}: non-finite weight or bias")
            prev = W.shape[0]
            self.layers.append((W.copy(), b.copy()))
            self.layers[-1][0].setflags(write=False)
            self.layers[-1][1].setflags(write=False)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def hidden_widths(self) -> list[int]:
        return [W.shape[0] for W, _ in self.layers[:-1]]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def forward(self, y0) -> np.ndarray:
        """Evaluate the network at a single input point."""
        y = np.asarray(y0, dtype=float).ravel()
        if y.shape[0] != self.input_dim:
            raise DimensionError(
                f"input has dimension {y.shape[0]}, network expects {self.input_dim}")
        for W, b in self.layers[:-1]:
            y = np.maximum(W @ y + b, 0.0)
        W, b = self.layers[-1]
        return W @ y + b

    def forward_batch(self, X) -> np.ndarray:
        """Evaluate on an (n, input_dim) batch; returns (n, output_dim)."""
        A = np.asarray(X, dtype=float)
        if A.ndim != 2 or A.shape[1] != self.input_dim:
            raise DimensionError(
                f"batch shape {A.shape} incompatible with input dim {self.input_dim}")
        for W, b in self.layers[:-1]:
            A = np.maximum(A @ W.T + b, 0.0)
        W, b = self.layers[-1]
        return A @ W.T + b

    def preactivations(self, y0) -> list[np.ndarray]:
        """Hidden-layer pre-activation vectors W y + b for one input."""
        y = np.asarray(y0, dtype=float).ravel()
        out = []
        for W, b in self.layers[:-1]:
            z = W @ y + b
            out.append(z)
            y = np.maximum(z, 0.0)
        return out


@dataclass
class TrainingGrid:
    """Uniform tensor sampling grid over a hyperbox with an exact target map."""

    box: list[tuple[float, float]]
    samples_per_axis: int
    target: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if self.samples_per_axis < 2:
            raise DataError("samples_per_axis must be >= 2")
        for lo, hi in self.box:
            if not lo < hi:
                raise DataError(f"degenerate box axis [{lo}, {hi}]")

    def points(self, samples_per_axis: int | None = None) -> np.ndarray:
        ns = samples_per_axis or self.samples_per_axis
        axes = [np.linspace(lo, hi, ns) for lo, hi in self.box]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def targets(self, pts: np.ndarray) -> np.ndarray:
        vals = np.atleast_2d(np.asarray(self.target(pts), dtype=float))
        if vals.shape[0] == 1 and pts.shape[0] != 1:
            vals = vals.T
        bad = ~np.isfinite(vals).all(axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DataError(f"non-finite target value at sample {pts[i].tolist()}")
        return vals


@dataclass
class TrainConfig:
    seed: int = 0
    adam_iters: int = 8000
    adam_lr: float = 5e-3
    batch_size: int = 8192
    lbfgs_iters: int = 2000
    restarts: int = 1
    mse_target: float = 0.0  # stop restarting once grid MSE falls below this


@dataclass
class FitResult:
    network: ReluNetwork
    grid_mse: float
    initial_mse: float
    restart_mses: list[float] = field(default_factory=list)


def _init_params(rng, dims):
    # He initialization for the ReLU stack.
    params = []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        params.append((rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in)),
                       np.zeros(n_out)))
    return params


def _pack(params):
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in params])


def _unpack(theta, dims):
    params, off = [], 0
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        W = theta[off:off + n_out * n_in].reshape(n_out, n_in)
        off += n_out * n_in
        b = theta[off:off + n_out]
        off += n_out
        params.append((W, b))
    return params


def _loss_grad(theta, dims, X, Y):
    params = _unpack(theta, dims)
    acts = [X]
    A = X
    for k, (W, b) in enumerate(params):
        Z = A @ W.T + b
        A = np.maximum(Z, 0.0) if k < len(params) - 1 else Z
        acts.append(A)
    resid = acts[-1] - Y
    n = X.shape[0]
    loss = 0.5 * np.mean(np.sum(resid ** 2, axis=1))
    grads = [None] * len(params)
    delta = resid / n
    for k in range(len(params) - 1, -1, -1):
        grads[k] = (delta.T @ acts[k], delta.sum(axis=0))
        if k > 0:
            delta = (delta @ params[k][0]) * (acts[k] > 0)
    return loss, _pack(grads)


def _full_loss_grad(theta, dims, X, Y, chunk=500_000):
    n = X.shape[0]
    if n <= chunk:
        return _loss_grad(theta, dims, X, Y)
    loss, grad = 0.0, None
    for i in range(0, n, chunk):
        l, g = _loss_grad(theta, dims, X[i:i + chunk], Y[i:i + chunk])
        w = (min(i + chunk, n) - i) / n
        loss += l * w
        grad = g * w if grad is None else grad + g * w
    return loss, grad


def _adam(theta, dims, X, Y, rng, iters, lr0, batch):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    n = X.shape[0]
    for t in range(1, iters + 1):
        lr = lr0 * 0.5 * (1.0 + np.cos(np.pi * t / iters)) + 1e-5
        idx = rng.integers(0, n, size=min(batch, n))
        _, g = _loss_grad(theta, dims, X[idx], Y[idx])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1.0 - 0.9 ** t)
        vh = v / (1.0 - 0.999 ** t)
        theta = theta - lr * mh / (np.sqrt(vh) + 1e-8)
    return theta


def fit_regression(grid: TrainingGrid, arch: tuple[int, int],
                   cfg: TrainConfig | None = None) -> FitResult:
    """Fit a (K, width) ReLU network to the grid target by seeded Adam + L-BFGS.

    arch = (K, n_bar): K-1 hidden layers of n_bar nodes each plus the affine
    output layer. Inputs and outputs are standardized for conditioning; the
    standardization is folded back into the first/last layers so the returned
    network operates on raw coordinates.
    """
    cfg = cfg or TrainConfig()
    K, width = arch
    if K < 2 or width < 1:
        raise DataError(f"architecture (K={K}, width={width}) needs K >= 2, width >= 1")
    X = grid.points()
    Y = grid.targets(X)
    n_in, n_out = X.shape[1], Y.shape[1]
    dims = [n_in] + [width] * (K - 1) + [n_out]

    xm, xs = X.mean(axis=0), X.std(axis=0)
    xs[xs == 0] = 1.0
    ym, ys = Y.mean(axis=0), Y.std(axis=0)
    ys[ys == 0] = 1.0
    Xs = (X - xm) / xs
    Yn = (Y - ym) / ys

    best_theta, best_mse = None, np.inf
    initial_mse = None
    restart_mses = []
    for r in range(max(1, cfg.restarts)):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, r]))
        theta = _pack(_init_params(rng, dims))
        if initial_mse is None:
            l0, _ = _full_loss_grad(theta, dims, Xs, Yn)
            initial_mse = 2.0 * l0 * float(np.mean(ys ** 2))
        if cfg.adam_iters > 0:
            theta = _adam(theta, dims, Xs, Yn, rng, cfg.adam_iters,
                          cfg.adam_lr, cfg.batch_size)
        if cfg.lbfgs_iters > 0:
            res = minimize(_full_loss_grad, theta, args=(dims, Xs, Yn), jac=True,
                           method="L-BFGS-B",
                           options={"maxiter": cfg.lbfgs_iters,
                                    "ftol": 1e-16, "gtol": 1e-14})
            theta = res.x
        loss, _ = _full_loss_grad(theta, dims, Xs, Yn)
        mse = 2.0 * loss * float(np.mean(ys ** 2))
        restart_mses.append(mse)
        if mse < best_mse:
            best_mse, best_theta = mse, theta
        if best_mse <= cfg.mse_target:
            break

    params = _unpack(best_theta, dims)
    # Fold standardization into the boundary layers.
    W0, b0 = params[0]
    params[0] = (W0 / xs, b0 - W0 @ (xm / xs))
    WK, bK = params[-1]
    params[-1] = (WK * ys[:, None], bK * ys + ym)
    net = ReluNetwork(params)
    return FitResult(network=net, grid_mse=best_mse, initial_mse=initial_mse,
                     restart_mses=restart_mses)


def save_network(net: ReluNetwork, path) -> None:
    """Write the network as diffable JSON; floats keep 17 significant digits."""
    doc = {"layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in net.layers]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_network(path) -> ReluNetwork:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise NetworkFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "layers" not in doc:
        raise NetworkFormatError(f"{path}: missing 'layers' key")
    layers = []
    for k, layer in enumerate(doc["layers"]):
        try:
            layers.append((np.array(layer["W"], dtype=float),
                           np.array(layer["b"], dtype=float)))
        except (KeyError, TypeError, ValueError) as exc:
            raise NetworkFormatError(f"{path}: bad layer {k} ({exc})") from exc
    return ReluNetwork(layers)
