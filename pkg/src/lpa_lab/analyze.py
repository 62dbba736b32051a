"""Measurements on trained networks: accuracy, activation variation,
amplification through layers, sharpness, and layer scans."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ._rng import stream
from .data import Dataset
from .exceptions import LPAError
from .net import (
    ForwardTrace,
    MlpNetwork,
    check_layer,
    cross_entropy,
    forward_from,
    forward_full,
    lipschitz_bound,
    one_hot,
)
from .perturb import PerturbationPlan, plan_matrix, solve_plan
from .schedule import LayerChoice


def per_class_accuracy(net: MlpNetwork, ds: Dataset) -> dict:
    """``{class: correct_c / N_c}`` for every class present in ``ds``."""
    if len(ds) == 0:
        raise LPAError("dataset is empty")
    pred = np.argmax(forward_full(net, ds.features).logits, axis=1)
    out = {}
    for c in np.unique(ds.labels):
        rows = ds.labels == c
        out[int(c)] = float(np.mean(pred[rows] == c))
    return out


@dataclass
class VariationReport:
    """Per-class ``E[||delta||] / E[||a||]`` plus the raw means behind it."""

    ratios: dict
    delta_norms: dict
    activation_norms: dict
    counts: dict
    method: str = ""
    epoch: int | None = None

    def rows(self):
        for c in sorted(self.ratios):
            yield {
                "method": self.method,
                "epoch": self.epoch,
                "class": c,
                "count": self.counts[c],
                "mean_delta_norm": self.delta_norms[c],
                "mean_activation_norm": self.activation_norms[c],
                "ratio": self.ratios[c],
            }


def activation_variation(activations, deltas, labels, method: str = "", epoch=None) -> VariationReport:
    """Relative activation variation per class.

    ``activations`` may be a matrix or a :class:`ForwardTrace`; ``deltas`` a
    per-row matrix or a :class:`PerturbationPlan` (then the trace's activations
    at the plan layer are used).
    """
    labels = np.asarray(labels, dtype=np.intp)
    if isinstance(deltas, PerturbationPlan):
        if isinstance(activations, ForwardTrace):
            activations = activations.activations[deltas.layer]
        activations = np.asarray(activations, dtype=np.float64)
        deltas = plan_matrix(deltas, labels, activations.shape[1])
    elif isinstance(activations, ForwardTrace):
        raise LPAError("a trace needs a plan to know which layer to read")
    a = np.asarray(activations, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64)
    if a.shape != d.shape or a.shape[0] != len(labels):
        raise LPAError(f"shapes disagree: activations {a.shape}, deltas {d.shape}, {len(labels)} labels")
    a_norm = np.linalg.norm(a, axis=1)
    d_norm = np.linalg.norm(d, axis=1)
    ratios, dn, an, counts = {}, {}, {}, {}
    for c in np.unique(labels):
        rows = labels == c
        c = int(c)
        dn[c] = float(d_norm[rows].mean())
        an[c] = float(a_norm[rows].mean())
        counts[c] = int(rows.sum())
        if an[c] > 0:
            ratios[c] = dn[c] / an[c]
        else:
            ratios[c] = 0.0 if dn[c] == 0 else np.inf
    return VariationReport(ratios, dn, an, counts, method, epoch)


def run_variation(record, ds: Dataset, stage: int = 0) -> VariationReport:
    """Variation of a finished class-level run's final plan on ``ds``."""
    perturber = record.perturber
    stages = getattr(perturber, "stages", None)
    if not stages:
        raise LPAError("variation needs a class-level (LPA/LPL) run")
    st = stages[stage]
    l = st.layers[0]
    trace = forward_full(record.network, ds.features)
    plan = solve_plan(record.network, l, trace.activations[l], ds.labels, st.part.signs(), st.bounds[l], st.method.pgd)
    return activation_variation(trace, plan, ds.labels, record.config.method.name, len(record.epochs))


@dataclass
class AmplificationEntry:
    layer: int
    max_ratio: float
    bound: float
    probes: int

    @property
    def within_bound(self) -> bool:
        return self.max_ratio <= self.bound + 1e-9


def amplification_probe(
    net: MlpNetwork,
    l: int,
    probe_activations,
    eps: float,
    trials: int = 100,
    rng=None,
    directions=None,
    bound_iterations: int = 500,
) -> AmplificationEntry:
    """Largest ``||f(a + delta) - f(a)|| / ||delta||`` over probes, ``||delta|| = eps``.

    Directions are uniform on the sphere unless ``directions`` (rows) is given.
    The bound is the product of downstream spectral norms.
    """
    l = check_layer(net, l)
    if not eps > 0:
        raise LPAError("probe radius must be positive")
    if trials < 1:
        raise LPAError("need at least one trial")
    a = np.atleast_2d(np.asarray(probe_activations, dtype=np.float64))
    if directions is None:
        rng = stream(0, "amplification", l) if rng is None else rng
        directions = rng.standard_normal((trials, a.shape[1]))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    base = forward_from(net, l, a)
    best = 0.0
    for u in directions:
        delta = eps * u
        moved = forward_from(net, l, a + delta) - base
        best = max(best, float(np.max(np.linalg.norm(moved, axis=1))) / float(np.linalg.norm(delta)))
    bound = lipschitz_bound(net, l, bound_iterations)
    return AmplificationEntry(l, best, bound, len(directions) * a.shape[0])


def amplification_report(net: MlpNetwork, inputs, eps: float = 0.1, trials: int = 100, seed: int = 0) -> list:
    """One :class:`AmplificationEntry` per layer ``1..L`` on the given inputs."""
    trace = forward_full(net, inputs)
    return [
        amplification_probe(net, l, trace.activations[l], eps, trials, stream(seed, "amplification", l))
        for l in range(1, net.depth + 1)
    ]


@dataclass
class SharpnessResult:
    mean: float
    stderr: float
    increases: np.ndarray = field(repr=False)


def _loss(net, x, y, kind):
    logits = forward_full(net, x).logits
    if kind == "cross_entropy":
        return cross_entropy(logits, y)[0]
    if kind == "squared_error":
        r = logits - one_hot(y, net.n_classes)
        return 0.5 * float(np.mean(np.sum(r * r, axis=1)))
    raise LPAError(f"unknown loss {kind!r}")


def sharpness_probe(
    net: MlpNetwork,
    features,
    labels,
    l: int,
    radius: float,
    trials: int = 200,
    rng=None,
    loss: str = "cross_entropy",
) -> SharpnessResult:
    """Mean loss increase when ``W^(l)`` moves by ``radius`` along random
    unit-Frobenius directions."""
    if trials < 1:
        raise LPAError("need at least one trial")
    if radius < 0:
        raise LPAError("radius must be non-negative")
    rng = stream(0, "sharpness", l) if rng is None else rng
    layer = net.layer(l)
    base = _loss(net, features, labels, loss)
    probe = net.copy()
    original = layer.weights
    increases = np.empty(trials)
    for t in range(trials):
        u = rng.standard_normal(original.shape)
        u /= np.linalg.norm(u)
        probe.layers[l - 1].weights = original + radius * u
        increases[t] = _loss(probe, features, labels, loss) - base
    stderr = float(increases.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    return SharpnessResult(float(increases.mean()), stderr, increases)


def layer_scan(base_config, train_set: Dataset, val_set: Dataset, layers: Sequence[int]) -> list:
    """Train one run per layer, identical except for the fixed perturbation layer.

    Returns ``[(layer, overall_val_accuracy, record), ...]`` in input order.
    """
    from .train import LPA, overall_accuracy, train

    if not isinstance(base_config.method, LPA):
        raise LPAError("layer scans need an LPA base configuration")
    if not layers:
        raise LPAError("need at least one layer to scan")
    out = []
    for l in layers:
        method = replace(base_config.method, layer_choice=LayerChoice("fixed", (int(l),)))
        rec = train(replace(base_config, method=method), train_set, val_set)
        out.append((int(l), overall_accuracy(rec.network, val_set), rec))
    return out


@dataclass
class SupersetWitness:
    delta: np.ndarray
    logit_change: np.ndarray
    eps: float
    in_row_space: bool
    outside_logit_ball: bool

    @property
    def ok(self) -> bool:
        return self.in_row_space and self.outside_logit_ball


def penultimate_superset_witness(net: MlpNetwork, eps: float = 1.0, tol: float = 1e-8) -> SupersetWitness:
    """Build a penultimate-layer perturbation whose logit effect no logit
    perturbation with the same norm budget can produce.

    The perturbation is ``eps`` times the top right singular vector of the
    output weights, so it lies in the row space (the complement of the null
    space, verified by a rank test) and its logit change has norm
    ``sigma_max * eps``, outside the ``eps`` ball whenever ``sigma_max > 1``.
    """
    w = net.layer(net.depth).weights
    _, s, vt = np.linalg.svd(w)
    delta = eps * vt[0]
    rank_w = np.linalg.matrix_rank(w.T, tol=tol * s[0])
    rank_aug = np.linalg.matrix_rank(np.column_stack([w.T, delta]), tol=tol * s[0])
    trace = forward_full(net, np.zeros((1, net.input_dim)))
    a = trace.activations[net.depth - 1]
    change = (forward_from(net, net.depth - 1, a + delta) - trace.logits)[0]
    return SupersetWitness(
        delta,
        change,
        eps,
        in_row_space=bool(rank_aug == rank_w),
        outside_logit_ball=bool(np.linalg.norm(change) > eps * (1 + tol)),
    )
