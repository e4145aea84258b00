"""Small classifiers over (E, T) inputs with explicit parameter and input gradients."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .layers import (
    AvgPool1d,
    ChannelGate,
    Conv1d,
    Dense,
    ELU,
    Flatten,
    Layer,
    SampleStandardize,
    SpatialConv,
)

ARCHITECTURES = ("softmax_reg", "mlp", "cnn1d")


@dataclass
class ClassifierSpec:
    architecture: str
    input_shape: tuple[int, int]
    n_classes: int
    seed: int = 0
    hidden: tuple[int, ...] = (64,)
    spatial_filters: int = 4
    channels: tuple[int, int] = (8, 16)
    kernels: tuple[int, int] = (32, 8)
    pools: tuple[int, int] = (4, 4)
    standardize_input: bool = True

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.hidden = tuple(int(v) for v in self.hidden)
        self.channels = tuple(int(v) for v in self.channels)
        self.kernels = tuple(int(v) for v in self.kernels)
        self.pools = tuple(int(v) for v in self.pools)
        if self.n_classes < 2:
            raise ValueError("need at least two classes")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierSpec":
        return cls(**d)


def build_layers(spec: ClassifierSpec) -> tuple[list[Layer], int | None]:
    """Layer stack plus the index of the prunable gate (None when absent)."""
    layers, gate = _build_body(spec)
    if spec.standardize_input:
        layers.insert(0, SampleStandardize())
        gate = None if gate is None else gate + 1
    return layers, gate


def _build_body(spec: ClassifierSpec) -> tuple[list[Layer], int | None]:
    E, T = spec.input_shape
    C = spec.n_classes
    if spec.architecture == "softmax_reg":
        return [Flatten(), Dense(E * T, C)], None
    if spec.architecture == "mlp":
        layers: list[Layer] = [Flatten()]
        n_in = E * T
        for h in spec.hidden:
            layers += [Dense(n_in, h), ELU()]
            n_in = h
        layers.append(ChannelGate(n_in))
        gate = len(layers) - 1
        layers.append(Dense(n_in, C))
        return layers, gate
    c1, c2 = spec.channels
    k1, k2 = spec.kernels
    p1, p2 = spec.pools
    L = T // p1 // p2
    if L < 1:
        raise ValueError(f"pool widths {spec.pools} too large for T={T}")
    layers = [
        SpatialConv(E, spec.spatial_filters),
        Conv1d(spec.spatial_filters, c1, k1),
        ELU(),
        AvgPool1d(p1),
        Conv1d(c1, c2, k2),
        ELU(),
        ChannelGate(c2),
        AvgPool1d(p2),
        Flatten(),
        Dense(c2 * L, C),
    ]
    return layers, 6


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(-np.mean(np.log(np.maximum(probs[np.arange(len(labels)), labels], 1e-300))))


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    # np.argmax already returns the first maximal index, i.e. the lowest class on ties
    return np.argmax(probs, axis=1)


class Classifier:
    """Layer graph plus a flat parameter vector (the classifier handle)."""

    eval_chunk = 512

    def __init__(self, spec: ClassifierSpec, params: np.ndarray | None = None):
        self.spec = spec
        self.layers, self.gate_index = build_layers(spec)
        shapes = [s for layer in self.layers for s in layer.param_shapes()]
        sizes = [int(np.prod(s)) for s in shapes]
        self.n_params = int(sum(sizes))
        if params is None:
            rng = np.random.default_rng(spec.seed)
            params = np.concatenate([p.ravel() for layer in self.layers for p in layer.init_params(rng)] or [np.zeros(0)])
        params = np.asarray(params, dtype=np.float64).copy()
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise ValueError("parameters must be finite")
        self.params = params
        self._shapes = shapes
        self._offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self._counts = [len(layer.param_shapes()) for layer in self.layers]

    # parameter views -----------------------------------------------------
    def _views(self, flat: np.ndarray) -> list[list[np.ndarray]]:
        out, i = [], 0
        for n in self._counts:
            out.append([flat[self._offsets[j] : self._offsets[j + 1]].reshape(self._shapes[j]) for j in range(i, i + n)])
            i += n
        return out

    def copy(self) -> "Classifier":
        other = Classifier(self.spec, self.params)
        if self.gate_index is not None:
            other.layers[self.gate_index].gate = self.layers[self.gate_index].gate.copy()
        return other

    @property
    def gate(self) -> np.ndarray | None:
        return None if self.gate_index is None else self.layers[self.gate_index].gate

    def set_gate(self, gate: np.ndarray) -> None:
        if self.gate_index is None:
            raise ValueError(f"{self.spec.architecture} has no prunable feature layer")
        self.layers[self.gate_index].gate = np.asarray(gate, dtype=np.float64).copy()

    # passes --------------------------------------------------------------
    def _check_input(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        if X.shape[1:] != self.spec.input_shape:
            raise ValueError(f"input shape {X.shape[1:]} does not match {self.spec.input_shape}")
        return X

    def _forward(self, X, stop: int | None = None):
        views = self._views(self.params)
        caches = []
        h = X
        for layer, p in zip(self.layers[:stop], views[:stop]):
            h, c = layer.forward(p, h)
            caches.append(c)
        return h, caches, views

    def _backward(self, caches, views, dh):
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            dh, grads[i] = self.layers[i].backward(views[i], caches[i], dh)
        return dh, grads

    def _flatten_grads(self, grads) -> np.ndarray:
        parts = [g.ravel() for layer_grads in grads for g in layer_grads]
        return np.concatenate(parts) if parts else np.zeros(0)

    def logits(self, X: np.ndarray) -> np.ndarray:
        X = self._check_input(X)
        out = [self._forward(X[i : i + self.eval_chunk])[0] for i in range(0, len(X), self.eval_chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.spec.n_classes))

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.logits(X))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return argmax_lowest(self.logits(X))

    def representation(self, X: np.ndarray) -> np.ndarray:
        """Penultimate features: the input of the final dense layer."""
        X = self._check_input(X)
        stop = len(self.layers) - 1
        out = [self._forward(X[i : i + self.eval_chunk], stop)[0] for i in range(0, len(X), self.eval_chunk)]
        return np.concatenate(out).reshape(len(X), -1)

    def feature_activations(self, X: np.ndarray) -> np.ndarray:
        """Activations entering the prunable gate, shaped (N, channels, ...)."""
        if self.gate_index is None:
            raise ValueError(f"{self.spec.architecture} has no prunable feature layer")
        X = self._check_input(X)
        out = [self._forward(X[i : i + self.eval_chunk], self.gate_index)[0] for i in range(0, len(X), self.eval_chunk)]
        return np.concatenate(out)

    def loss_and_grad(self, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean cross-entropy and its gradient with respect to the flat parameters."""
        X = self._check_input(X)
        y = np.asarray(y, dtype=int)
        if y.min() < 0 or y.max() >= self.spec.n_classes:
            raise ValueError("labels out of range")
        logits, caches, views = self._forward(X)
        p = softmax(logits)
        loss = cross_entropy(p, y)
        d = p.copy()
        d[np.arange(len(y)), y] -= 1.0
        _, grads = self._backward(caches, views, d / len(y))
        return loss, self._flatten_grads(grads)

    def input_gradient(self, X: np.ndarray, target, objective: str = "ce") -> np.ndarray:
        """Gradient of a per-sample objective with respect to the input.

        ``objective='logit'`` differentiates the target-class logit summed over
        the batch; ``'ce'`` differentiates the summed cross-entropy to ``target``
        (so each row's gradient is independent of batch size).
        """
        X = self._check_input(X)
        target = np.broadcast_to(np.asarray(target, dtype=int), (len(X),))
        logits, caches, views = self._forward(X)
        if objective == "logit":
            d = np.zeros_like(logits)
            d[np.arange(len(X)), target] = 1.0
        elif objective == "ce":
            d = softmax(logits)
            d[np.arange(len(X)), target] -= 1.0
        else:
            raise ValueError(f"unknown objective {objective!r}")
        dx, _ = self._backward(caches, views, d)
        return dx


def fresh_model(spec: ClassifierSpec, seed: int | None = None) -> Classifier:
    return Classifier(spec if seed is None else replace(spec, seed=seed))
