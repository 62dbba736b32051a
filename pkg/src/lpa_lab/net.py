"""Dense feed-forward networks with hooks for activation perturbation.

Layers are numbered 1..L; ``a[0]`` is the input batch and ``a[L]`` the logits.
A perturbation at layer ``l`` is added to the *post-activation* output of that
layer before layer ``l + 1`` consumes it.  All arithmetic is float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._rng import stream
from .exceptions import DimensionError, LPAError

CHECKPOINT_VERSION = 1


class Activation(str, Enum):
    RELU = "relu"
    IDENTITY = "identity"


@dataclass
class DenseLayer:
    weights: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)
    activation: Activation = Activation.RELU

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.activation = Activation(self.activation)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"weights {self.weights.shape} and bias {self.bias.shape} are inconsistent"
            )

    @property
    def d_in(self) -> int:
        return self.weights.shape[1]

    @property
    def d_out(self) -> int:
        return self.weights.shape[0]


@dataclass
class MlpNetwork:
    layers: list[DenseLayer]
    seed: int | None = None

    def __post_init__(self):
        if len(self.layers) < 1:
            raise LPAError("a network needs at least one layer")
        for i in range(1, len(self.layers)):
            if self.layers[i].d_in != self.layers[i - 1].d_out:
                raise DimensionError(
                    f"expects {self.layers[i].d_in} inputs but layer {i} emits "
                    f"{self.layers[i - 1].d_out}",
                    layer=i + 1,
                )
        if self.layers[-1].activation is not Activation.IDENTITY:
            raise LPAError("the output layer must use the identity activation")

    @classmethod
    def initialize(cls, dims: Sequence[int], seed: int = 0, hidden_activation="relu"):
        """He-normal init: W ~ N(0, 2 / d_in), zero biases.

        ``dims`` lists every width from the input to the logits, so a network
        with L layers needs L + 1 entries.
        """
        dims = [int(d) for d in dims]
        if len(dims) < 2 or min(dims) < 1:
            raise LPAError(f"invalid layer widths {dims}")
        rng = stream(seed, "init")
        layers = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            act = Activation.IDENTITY if i == len(dims) - 2 else Activation(hidden_activation)
            w = rng.standard_normal((d_out, d_in)) * np.sqrt(2.0 / d_in)
            layers.append(DenseLayer(w, np.zeros(d_out), act))
        return cls(layers, seed=seed)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].d_in] + [layer.d_out for layer in self.layers]

    @property
    def input_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def n_classes(self) -> int:
        return self.layers[-1].d_out

    def width(self, l: int) -> int:
        check_layer(self, l)
        return self.dims[l]

    def layer(self, l: int) -> DenseLayer:
        """Layer ``l`` in 1-based numbering."""
        if not 1 <= l <= self.depth:
            raise LPAError(f"layer index {l} outside [1, {self.depth}]")
        return self.layers[l - 1]

    def copy(self) -> "MlpNetwork":
        return MlpNetwork(
            [DenseLayer(ly.weights.copy(), ly.bias.copy(), ly.activation) for ly in self.layers],
            seed=self.seed,
        )


@dataclass
class ForwardTrace:
    """Activations of one batch, starting at layer ``start``.

    ``activations[l]`` and ``pre_activations[l]`` are indexed by absolute
    layer number; entries below ``start`` are None.  When perturbations were
    supplied, ``activations[l]`` holds the perturbed value that the next
    layer consumed.
    """

    start: int
    activations: list
    pre_activations: list

    @property
    def logits(self) -> np.ndarray:
        return self.activations[-1]

    @property
    def depth(self) -> int:
        return len(self.activations) - 1


@dataclass
class GradientBundle:
    """Gradients of the batch-mean loss.

    ``weights[l - 1]`` / ``biases[l - 1]`` hold the gradient for layer ``l``
    (None for layers at or below the trace start).  ``activation`` is the
    gradient of the mean loss w.r.t. ``a[layer]``; ``per_sample_activation``
    is the gradient of each sample's own loss (``activation * batch_size``).
    """

    weights: list
    biases: list
    layer: int
    activation: np.ndarray
    per_sample_activation: np.ndarray
    loss: float = field(default=np.nan)


def check_layer(net: MlpNetwork, l: int, lowest: int = 0) -> int:
    if not isinstance(l, (int, np.integer)) or not lowest <= l <= net.depth:
        raise LPAError(f"layer index {l} outside [{lowest}, {net.depth}]")
    return int(l)


def _as_batch(x, width, layer) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise DimensionError(f"expected batch with {width} columns, got shape {x.shape}", layer)
    return x


def _apply(act: Activation, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if act is Activation.RELU else z


def forward_trace(
    net: MlpNetwork,
    start: int,
    activations,
    perturbations: Mapping[int, np.ndarray] | None = None,
) -> ForwardTrace:
    """Run layers ``start + 1 .. L`` on ``activations`` (which play ``a[start]``).

    ``perturbations`` maps a layer index to an additive term broadcastable to
    that layer's activations; a perturbation at ``start`` itself is added to
    the supplied activations.
    """
    start = check_layer(net, start)
    perturbations = dict(perturbations or {})
    for l in perturbations:
        check_layer(net, l, lowest=start)
    a = _as_batch(activations, net.dims[start], start)
    if start in perturbations:
        a = a + perturbations[start]
    acts = [None] * (net.depth + 1)
    pres = [None] * (net.depth + 1)
    acts[start] = a
    for l in range(start + 1, net.depth + 1):
        layer = net.layers[l - 1]
        z = a @ layer.weights.T + layer.bias
        a = _apply(layer.activation, z)
        if l in perturbations:
            a = a + perturbations[l]
        pres[l] = z
        acts[l] = a
    return ForwardTrace(start, acts, pres)


def forward_full(net: MlpNetwork, batch, perturbations=None) -> ForwardTrace:
    return forward_trace(net, 0, batch, perturbations)


def forward_from(net: MlpNetwork, l: int, activations) -> np.ndarray:
    """Logits of the subnetwork ``f_{l+1:L}``; the identity when ``l == L``."""
    return forward_trace(net, l, activations).logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(labels, n_rows, n_classes) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise DimensionError(f"expected {n_rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LPAError(f"labels must lie in [0, {n_classes})")
    return labels.astype(np.intp)


def sample_losses(logits, labels) -> np.ndarray:
    """Per-row cross-entropy ``-log p_y``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    return -log_softmax(logits)[np.arange(len(labels)), labels]


def cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and the softmax probabilities (max-shifted)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    logp = log_softmax(logits)
    loss = -logp[np.arange(len(labels)), labels].mean()
    return float(loss), np.exp(logp)


def one_hot(labels, n_classes) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def backward(
    net: MlpNetwork,
    trace: ForwardTrace,
    labels,
    grad_layer: int | None = None,
    targets: np.ndarray | None = None,
) -> GradientBundle:
    """Reverse-mode gradients of the mean cross-entropy of ``trace.logits``.

    ``targets`` optionally replaces one-hot labels with soft targets (rows
    summing to one), which mixup-style training needs.  Perturbations that
    were added during the forward pass are treated as constants.
    """
    if trace.depth != net.depth:
        raise DimensionError(f"trace depth {trace.depth} does not match network depth {net.depth}")
    grad_layer = trace.start if grad_layer is None else grad_layer
    check_layer(net, grad_layer, lowest=trace.start)
    logits = trace.logits
    n = logits.shape[0]
    labels = _check_labels(labels, n, net.n_classes)
    logp = log_softmax(logits)
    if targets is None:
        targets = one_hot(labels, net.n_classes)
    loss = float(-(targets * logp).sum(axis=1).mean())

    # per-sample deltas; parameter gradients are divided by n afterwards
    delta = np.exp(logp) - targets
    w_grads = [None] * net.depth
    b_grads = [None] * net.depth
    act_grad = delta if grad_layer == net.depth else None
    for l in range(net.depth, trace.start, -1):
        layer = net.layers[l - 1]
        if layer.activation is Activation.RELU:
            dz = delta * (trace.pre_activations[l] > 0)
        else:
            dz = delta
        w_grads[l - 1] = dz.T @ trace.activations[l - 1] / n
        b_grads[l - 1] = dz.sum(axis=0) / n
        delta = dz @ layer.weights
        if l - 1 == grad_layer:
            act_grad = delta
    return GradientBundle(w_grads, b_grads, grad_layer, act_grad / n, act_grad, loss)


def spectral_norm(m, iterations: int = 100, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``m.T @ m``.

    The estimate ``||m v_k||`` is nondecreasing in ``iterations`` (exact
    arithmetic) because it is the Rayleigh quotient of successive powers.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise LPAError("spectral_norm needs a non-empty 2-D matrix")
    if iterations < 1:
        raise LPAError("iterations must be >= 1")
    v = stream(seed, "power-iteration").standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iterations):
        w = m.T @ (m @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        v = w / norm
        sigma = float(np.linalg.norm(m @ v))
    return sigma


def lipschitz_bound(net: MlpNetwork, l: int, iterations: int = 200, seed: int = 0) -> float:
    """Product of spectral norms of layers ``l + 1 .. L``; 1 for ``l == L``."""
    check_layer(net, l)
    bound = 1.0
    for j in range(l + 1, net.depth + 1):
        bound *= spectral_norm(net.layer(j).weights, iterations, seed)
    return bound


def save_checkpoint(net: MlpNetwork, path) -> Path:
    """Write ``net`` as an ``.npz`` archive; reloading is bit-exact."""
    path = Path(path)
    meta = {
        "format": "lpa-lab-checkpoint",
        "version": CHECKPOINT_VERSION,
        "dims": net.dims,
        "activations": [ly.activation.value for ly in net.layers],
        "seed": net.seed,
    }
    arrays = {"meta": np.array(json.dumps(meta))}
    for i, ly in enumerate(net.layers):
        arrays[f"W{i + 1}"] = ly.weights
        arrays[f"b{i + 1}"] = ly.bias
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> MlpNetwork:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != "lpa-lab-checkpoint":
            raise LPAError(f"{path} is not an lpa-lab checkpoint")
        if meta["version"] > CHECKPOINT_VERSION:
            raise LPAError(f"checkpoint version {meta['version']} is newer than supported")
        layers = [
            DenseLayer(data[f"W{i + 1}"], data[f"b{i + 1}"], act)
            for i, act in enumerate(meta["activations"])
        ]
    net = MlpNetwork(layers, seed=meta["seed"])
    if net.dims != meta["dims"]:
        raise DimensionError(f"stored dims {meta['dims']} disagree with arrays {net.dims}")
    return net
