"""Multilayer perceptron classifier (one or more hidden layers).

All weights and biases live in one flat parameter vector; per-layer matrices
are views into it, so optimizer updates are single vectorized operations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .core import N_CLASSES, Classifier, LabeledDataset, ScalerState, as_matrix, fit_scaler

HIDDEN_ACTIVATIONS = ("tanh", "relu")
OUTPUT_ACTIVATIONS = ("softmax", "sigmoid")
INITIALIZERS = ("glorot_uniform", "uniform", "normal")
OPTIMIZERS = ("adam", "adadelta")

OPTIMIZER_DEFAULTS = {
    "adam": {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "adadelta": {"lr": 1.0, "rho": 0.95, "eps": 1e-6},
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpConfig:
    hidden_layers: int = 1
    neurons_per_hidden: int = 16
    hidden_activation: str = "relu"
    output_activation: str = "softmax"
    initializer: str = "glorot_uniform"
    dropout_rate: float = 0.0
    max_norm_constraint: float = 0.0
    batch_size: int = 10
    epochs: int = 100
    optimizer: str = "adam"
    learning: dict | None = None
    seed: int = 0

    def __post_init__(self):
        if self.hidden_layers < 1 or self.neurons_per_hidden < 1:
            raise ValueError("hidden_layers and neurons_per_hidden must be positive")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"hidden_activation must be one of {HIDDEN_ACTIVATIONS}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"output_activation must be one of {OUTPUT_ACTIVATIONS}")
        if self.initializer not in INITIALIZERS:
            raise ValueError(f"initializer must be one of {INITIALIZERS}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.max_norm_constraint < 0:
            raise ValueError("max_norm_constraint must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        unknown = set(self.learning or {}) - set(OPTIMIZER_DEFAULTS[self.optimizer])
        if unknown:
            raise ValueError(f"unknown {self.optimizer} parameters {sorted(unknown)}")

    @property
    def optimizer_params(self) -> dict:
        return {**OPTIMIZER_DEFAULTS[self.optimizer], **(self.learning or {})}

    def layer_dims(self, n_inputs):
        return [n_inputs] + [self.neurons_per_hidden] * self.hidden_layers + [N_CLASSES]

    def to_dict(self) -> dict:
        return asdict(self)


def _rng(seed, stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), stream]))


def init_weights(cfg: MlpConfig, fan_in: int, fan_out: int, rng=None) -> np.ndarray:
    """One weight matrix of shape (fan_in, fan_out)."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("layer dimensions must be positive")
    rng = rng if rng is not None else _rng(cfg.seed, 0)
    if cfg.initializer == "glorot_uniform":
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))
    if cfg.initializer == "uniform":
        return rng.uniform(-0.05, 0.05, size=(fan_in, fan_out))
    return rng.normal(0.0, 0.05, size=(fan_in, fan_out))


def _layout(dims):
    """Offsets of (W, b) pairs inside the flat parameter vector."""
    slots, pos = [], 0
    for a, b in zip(dims, dims[1:]):
        slots.append((pos, pos + a * b, pos + a * b + b))
        pos += a * b + b
    return slots, pos


class Mlp:
    """Bare network: dims, activations and a flat parameter vector."""

    def __init__(self, dims, hidden_activation="relu", output_activation="softmax", params=None):
        self.dims = [int(d) for d in dims]
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self.slots, n = _layout(self.dims)
        self.params = np.zeros(n) if params is None else np.asarray(params, dtype=float).copy()
        if self.params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {self.params.shape}")

    @property
    def n_layers(self):
        return len(self.slots)

    def weights(self, params=None):
        p = self.params if params is None else params
        out = []
        for (a, b), (s, m, e) in zip(zip(self.dims, self.dims[1:]), self.slots):
            out.append((p[s:m].reshape(a, b), p[m:e]))
        return out

    def _act(self, z):
        return np.tanh(z) if self.hidden_activation == "tanh" else np.maximum(z, 0.0)

    def _act_grad(self, z, a):
        return 1.0 - a * a if self.hidden_activation == "tanh" else (z > 0).astype(float)

    def forward(self, X, training=False, dropout_rate=0.0, rng=None):
        """Return ``(probabilities, cache)``.

        Inverted dropout on hidden activations when `training` and the rate
        is positive. Sigmoid outputs are renormalized to sum to 1.
        """
        A = as_matrix(X)
        if A.shape[1] != self.dims[0]:
            raise ValueError(f"expected {self.dims[0]} inputs, got {A.shape[1]}")
        cache = {"A": [A], "Z": [], "masks": []}
        layers = self.weights()
        for W, b in layers[:-1]:
            Z = A @ W + b
            A = self._act(Z)
            mask = None
            if training and dropout_rate > 0:
                mask = (rng.random(A.shape) >= dropout_rate) / (1.0 - dropout_rate)
                A = A * mask
            cache["Z"].append(Z)
            cache["A"].append(A)
            cache["masks"].append(mask)
        W, b = layers[-1]
        logits = A @ W + b
        cache["logits"] = logits
        if self.output_activation == "softmax":
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            P = e / e.sum(axis=1, keepdims=True)
        else:
            cache["sigmoid"] = 0.5 * (1.0 + np.tanh(0.5 * logits))
            # renormalize in log space so saturated rows (all scores ~0) stay finite
            logs = -np.logaddexp(0.0, -logits)
            e = np.exp(logs - logs.max(axis=1, keepdims=True))
            P = e / e.sum(axis=1, keepdims=True)
        return P, cache

    def loss(self, cache, Y) -> float:
        """Batch-mean cross-entropy (categorical, or summed binary for sigmoid)."""
        logits = cache["logits"]
        if self.output_activation == "softmax":
            m = logits.max(axis=1, keepdims=True)
            logz = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
            return float(np.mean(logz - (Y * logits).sum(axis=1)))
        # softplus(z) - y z, the numerically stable form of binary cross-entropy
        sp = np.logaddexp(0.0, logits)
        return float(np.mean((sp - Y * logits).sum(axis=1)))

    def grad(self, cache, Y) -> np.ndarray:
        """Exact gradient of the batch-mean loss, flat like `params`."""
        B = Y.shape[0]
        if self.output_activation == "softmax":
            e = np.exp(cache["logits"] - cache["logits"].max(axis=1, keepdims=True))
            out = e / e.sum(axis=1, keepdims=True)
        else:
            out = cache["sigmoid"]
        dZ = (out - Y) / B
        g = np.empty_like(self.params)
        layers = self.weights()
        for i in range(self.n_layers - 1, -1, -1):
            s, m, e = self.slots[i]
            A_prev = cache["A"][i]
            g[s:m] = (A_prev.T @ dZ).ravel()
            g[m:e] = dZ.sum(axis=0)
            if i == 0:
                break
            dA = dZ @ layers[i][0].T
            mask = cache["masks"][i - 1]
            if mask is not None:
                dA = dA * mask
            dZ = dA * self._act_grad(cache["Z"][i - 1], self._unmasked(cache, i - 1))
        return g

    def _unmasked(self, cache, i):
        # activation before dropout, needed for the tanh derivative
        A = cache["A"][i + 1]
        mask = cache["masks"][i]
        if mask is None or self.hidden_activation != "tanh":
            return A
        return np.tanh(cache["Z"][i])


def one_hot(y, n_classes=N_CLASSES):
    Y = np.zeros((len(y), n_classes))
    Y[np.arange(len(y)), np.asarray(y, dtype=int)] = 1.0
    return Y


class _Adam:
    def __init__(self, n, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, p, g):
        self.t += 1
        self.m *= self.b1
        self.m += (1 - self.b1) * g
        self.v *= self.b2
        self.v += (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class _Adadelta:
    def __init__(self, n, lr, rho, eps):
        self.lr, self.rho, self.eps = lr, rho, eps
        self.eg2 = np.zeros(n)
        self.edx2 = np.zeros(n)

    def step(self, p, g):
        self.eg2 *= self.rho
        self.eg2 += (1 - self.rho) * g * g
        dx = -np.sqrt(self.edx2 + self.eps) / np.sqrt(self.eg2 + self.eps) * g
        self.edx2 *= self.rho
        self.edx2 += (1 - self.rho) * dx * dx
        p += self.lr * dx


def _apply_max_norm(net: Mlp, c: float):
    # hidden layers only; each column holds one unit's incoming weights
    for W, _ in net.weights()[:-1]:
        norms = np.sqrt((W * W).sum(axis=0))
        over = norms > c
        if over.any():
            W[:, over] *= c / norms[over]


class FittedMlp(Classifier):
    """Trained network plus the scaler captured from its training data."""

    def __init__(self, cfg: MlpConfig | None = None, scaling: str = "minmax"):
        self.cfg = cfg or MlpConfig()
        self.seed = self.cfg.seed
        self.scaling = scaling

    def _fit(self, d: LabeledDataset):
        self.scaler = fit_scaler(d.features, d.feature_kinds, self.scaling)
        X = self.scaler.transform(d.features)
        self.net, self.loss_trace = _train(X, d.labels, self.cfg, self.seed)

    def predict_proba(self, X) -> np.ndarray:
        return self.net.forward(self.scaler.transform(as_matrix(X)))[0]

    def to_dict(self) -> dict:
        return {
            "family": "mlp",
            "config": self.cfg.to_dict(),
            "seed": self.seed,
            "dims": self.net.dims,
            "params": self.net.params.tolist(),
            "scaler": self.scaler.to_dict(),
            "loss_trace": list(self.loss_trace),
        }

    @classmethod
    def from_dict(cls, doc) -> "FittedMlp":
        m = cls(MlpConfig(**doc["config"]), doc["scaler"]["kind"])
        m.seed = doc["seed"]
        m.net = Mlp(doc["dims"], m.cfg.hidden_activation, m.cfg.output_activation, doc["params"])
        m.scaler = ScalerState.from_dict(doc["scaler"])
        m.loss_trace = list(doc["loss_trace"])
        return m


def build_network(cfg: MlpConfig, n_inputs: int, seed=None) -> Mlp:
    seed = cfg.seed if seed is None else seed
    net = Mlp(cfg.layer_dims(n_inputs), cfg.hidden_activation, cfg.output_activation)
    rng = _rng(seed, 0)
    for W, b in net.weights():
        W[...] = init_weights(cfg, W.shape[0], W.shape[1], rng)
        b[...] = 0.0
    return net


def _train(X, y, cfg: MlpConfig, seed):
    X = np.asarray(X, dtype=float)
    n = len(X)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    net = build_network(cfg, X.shape[1], seed)
    Y = one_hot(y)
    opt_params = cfg.optimizer_params
    if cfg.optimizer == "adam":
        opt = _Adam(len(net.params), **opt_params)
    else:
        opt = _Adadelta(len(net.params), **opt_params)
    rng = _rng(seed, 1)
    trace = []
    bs = cfg.batch_size
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            _, cache = net.forward(X[idx], training=True, dropout_rate=cfg.dropout_rate, rng=rng)
            loss = net.loss(cache, Y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch + 1}, batch starting at row {start} "
                    f"(optimizer={cfg.optimizer}, params={opt_params})"
                )
            total += loss * len(idx)
            opt.step(net.params, net.grad(cache, Y[idx]))
            if cfg.max_norm_constraint > 0:
                _apply_max_norm(net, cfg.max_norm_constraint)
        trace.append(total / n)
    return net, trace


def train(d: LabeledDataset, cfg: MlpConfig | None = None) -> FittedMlp:
    return FittedMlp(cfg).fit(d)
