"""From-scratch feed-forward network trained by plain SGD backpropagation.

Hidden layers use tanh, the output layer is affine, and the loss is the mean
over samples of the summed squared output error. Input features are scaled to
zero mean / unit variance on the training split; the scaling constants travel
with the weights (including through serialization) so a trained model is a
self-contained predictor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, InvalidConfigError, InvalidInputError

_MAGIC = b"GVNN"
_VERSION = 1

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
}


@dataclass
class LayerSpec:
    """Layer widths (input -> hidden... -> output) and hidden nonlinearity."""

    sizes: list
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise InvalidConfigError("need at least input and output widths")
        if any(int(s) < 1 for s in self.sizes):
            raise InvalidConfigError("all layer widths must be >= 1")
        self.sizes = [int(s) for s in self.sizes]
        if self.activation not in _ACTIVATIONS:
            raise InvalidConfigError(f"unknown activation '{self.activation}'")

    @property
    def n_inputs(self):
        return self.sizes[0]

    @property
    def n_outputs(self):
        return self.sizes[-1]


class NetworkWeights:
    """Per-layer weight matrices and bias vectors matching a LayerSpec."""

    def __init__(self, spec: LayerSpec, layers):
        self.spec = spec
        self.layers = [(np.asarray(w, dtype=float), np.asarray(b, dtype=float))
                       for w, b in layers]
        expect = list(zip(spec.sizes[1:], spec.sizes[:-1]))
        got = [w.shape for w, _ in self.layers]
        if got != expect:
            raise InvalidConfigError(f"layer shapes {got} do not match spec {expect}")
        for w, b in self.layers:
            if b.shape != (w.shape[0],):
                raise InvalidConfigError("bias shape does not match its layer")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise InvalidConfigError("weights must be finite")

    @classmethod
    def initialize(cls, spec: LayerSpec, rng: np.random.Generator):
        """Glorot-uniform initialization drawn from the given generator."""
        layers = []
        for fan_in, fan_out in zip(spec.sizes[:-1], spec.sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            layers.append((w, np.zeros(fan_out)))
        return cls(spec, layers)

    def copy(self):
        return NetworkWeights(self.spec, [(w.copy(), b.copy()) for w, b in self.layers])


@dataclass
class TrainConfig:
    """SGD hyperparameters; eta is the Eq.-style learning rate."""

    eta: float = 0.01
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    patience: int = 20

    def __post_init__(self):
        if self.eta <= 0:
            raise InvalidConfigError("eta must be positive")
        if self.epochs < 1:
            raise InvalidConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")


def forward(weights: NetworkWeights, x):
    """Forward pass; accepts one feature vector or a (batch, features) matrix."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    z = np.atleast_2d(x)
    if z.shape[1] != weights.spec.n_inputs:
        raise InvalidInputError(
            f"input width {z.shape[1]} does not match spec {weights.spec.n_inputs}")
    act, _ = _ACTIVATIONS[weights.spec.activation]
    last = len(weights.layers) - 1
    for k, (w, b) in enumerate(weights.layers):
        z = z @ w.T + b
        if k != last:
            z = act(z)
    return z[0] if single else z


def mse_loss(weights: NetworkWeights, x, y):
    """Mean over samples of the summed squared output error."""
    pred = np.atleast_2d(forward(weights, x))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    return float(np.mean(np.sum((pred - y) ** 2, axis=1)))


def gradients(weights: NetworkWeights, x, y):
    """Backpropagated gradient of the batch loss for every layer."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise InvalidInputError("batch inputs and targets must align and be nonempty")
    act, dact = _ACTIVATIONS[weights.spec.activation]
    last = len(weights.layers) - 1
    pre = []          # pre-activation per layer
    post = [x]        # layer inputs
    z = x
    for k, (w, b) in enumerate(weights.layers):
        a = z @ w.T + b
        pre.append(a)
        z = a if k == last else act(a)
        post.append(z)
    n = x.shape[0]
    delta = 2.0 * (post[-1] - y) / n
    grads = [None] * len(weights.layers)
    for k in range(last, -1, -1):
        grads[k] = (delta.T @ post[k], delta.sum(axis=0))
        if k > 0:
            delta = (delta @ weights.layers[k][0]) * dact(pre[k - 1])
    loss = float(np.mean(np.sum((post[-1] - y) ** 2, axis=1)))
    return grads, loss


def backprop_update(cfg: TrainConfig, weights: NetworkWeights, x, y):
    """One SGD step w' = w - eta * grad(MSE); returns (w', pre-update loss)."""
    grads, loss = gradients(weights, x, y)
    if not np.isfinite(loss):
        raise DivergenceError("non-finite batch loss")
    new = [(w - cfg.eta * gw, b - cfg.eta * gb)
           for (w, b), (gw, gb) in zip(weights.layers, grads)]
    return NetworkWeights(weights.spec, new), loss


@dataclass
class Normalizer:
    """Per-feature affine scaling fitted on the training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)  # constant features pass through
        return cls(mean=mean, std=std)

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std


@dataclass
class TrainedModel:
    """Weights plus the input scaling they were trained with."""

    weights: NetworkWeights
    norm: Normalizer

    def predict(self, x):
        return forward(self.weights, self.norm.apply(x))

    def mse(self, x, y):
        pred = np.atleast_2d(self.predict(x))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return float(np.mean(np.sum((pred - y) ** 2, axis=1)))


def split_dataset(n, seed):
    """Deterministic 70/15/15 train/validation/test index split."""
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(n)
    n_train = int(0.7 * n)
    n_val = int(0.15 * n)
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def train(spec: LayerSpec, cfg: TrainConfig, x, y):
    """Train a network; returns (TrainedModel at best validation loss, history).

    history is a list of per-epoch (train_mse, val_mse) measured after the
    epoch's updates with the weights of that epoch.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[0] == 0:
        raise InvalidInputError("dataset is empty")
    if x.shape[0] != y.shape[0]:
        raise InvalidInputError("inputs and targets must have equal length")
    idx_train, idx_val, _ = split_dataset(x.shape[0], cfg.seed)
    if idx_train.size == 0:
        idx_train = np.arange(x.shape[0])
    norm = Normalizer.fit(x[idx_train])
    xs = norm.apply(x)
    x_train, y_train = xs[idx_train], y[idx_train]
    x_val, y_val = xs[idx_val], y[idx_val]
    have_val = idx_val.size > 0

    rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    weights = NetworkWeights.initialize(spec, rng)
    history = []
    best_val = np.inf
    best_weights = weights.copy()
    stall = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(x_train.shape[0])
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            try:
                weights, _ = backprop_update(cfg, weights, x_train[batch], y_train[batch])
            except DivergenceError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}",
                                      epoch=epoch) from exc
        train_mse = mse_loss(weights, x_train, y_train)
        val_mse = mse_loss(weights, x_val, y_val) if have_val else train_mse
        if not (np.isfinite(train_mse) and np.isfinite(val_mse)):
            raise DivergenceError(f"non-finite loss at epoch {epoch}", epoch=epoch)
        history.append((train_mse, val_mse))
        if val_mse < best_val:
            best_val = val_mse
            best_weights = weights.copy()
            stall = 0
        else:
            stall += 1
            if stall > cfg.patience:
                break
    return TrainedModel(weights=best_weights, norm=norm), history


# ---------------------------------------------------------------------------
# serialization: little-endian "GVNN" blob
# ---------------------------------------------------------------------------

def weights_to_bytes(model: TrainedModel) -> bytes:
    spec = model.weights.spec
    out = [_MAGIC, struct.pack("<H", _VERSION)]
    act = spec.activation.encode()
    out.append(struct.pack("<H", len(act)))
    out.append(act)
    out.append(struct.pack("<I", len(spec.sizes)))
    out.append(struct.pack(f"<{len(spec.sizes)}I", *spec.sizes))
    for w, b in model.weights.layers:
        out.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    out.append(np.ascontiguousarray(model.norm.mean, dtype="<f8").tobytes())
    out.append(np.ascontiguousarray(model.norm.std, dtype="<f8").tobytes())
    return b"".join(out)


def weights_from_bytes(blob: bytes) -> TrainedModel:
    if blob[:4] != _MAGIC:
        raise InvalidInputError("not a GVNN weight blob")
    off = 4
    (version,) = struct.unpack_from("<H", blob, off)
    off += 2
    if version != _VERSION:
        raise InvalidInputError(f"unsupported GVNN version {version}")
    (act_len,) = struct.unpack_from("<H", blob, off)
    off += 2
    activation = blob[off:off + act_len].decode()
    off += act_len
    (n_sizes,) = struct.unpack_from("<I", blob, off)
    off += 4
    sizes = list(struct.unpack_from(f"<{n_sizes}I", blob, off))
    off += 4 * n_sizes
    spec = LayerSpec(sizes=sizes, activation=activation)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(blob, dtype="<f8", count=fan_out * fan_in, offset=off)
        off += 8 * fan_out * fan_in
        b = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=off)
        off += 8 * fan_out
        layers.append((w.reshape(fan_out, fan_in).copy(), b.copy()))
    mean = np.frombuffer(blob, dtype="<f8", count=sizes[0], offset=off).copy()
    off += 8 * sizes[0]
    std = np.frombuffer(blob, dtype="<f8", count=sizes[0], offset=off).copy()
    return TrainedModel(weights=NetworkWeights(spec, layers),
                        norm=Normalizer(mean=mean, std=std))
