"""Activation perturbations of the form ``a_tilde = a + delta``.

Random strategies (dropout, manifold mixup) are closed-form.  The learned ones
(sample-level adversarial, class-level LPA, low-rank LPA) share one projected
gradient solver, :func:`grouped_pgd`, which optimises one perturbation per
group of rows: a group is a single sample for adversarial perturbation and a
whole class for LPA.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Mapping

import numpy as np

from .exceptions import ConfigError, DimensionError, EmptyClassError, LPAError
from .net import MlpNetwork, backward, check_layer, forward_trace, sample_losses


class Sign(IntEnum):
    """Expand maximises the class loss (positive augmentation), contract minimises it."""

    EXPAND = 1
    CONTRACT = -1


@dataclass(frozen=True)
class PgdConfig:
    steps: int = 3
    step_size: float | None = None  # None -> 2 * eps / steps
    rank: int | None = None  # None -> full dimension (unless rank_fraction)
    normalize: bool = True
    rank_fraction: float | None = None  # k = floor(fraction * d_l), at least 1

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"must be a positive integer, got {self.steps}", "steps")
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigError(f"must be positive, got {self.step_size}", "step_size")
        if self.rank is not None and (int(self.rank) != self.rank or self.rank < 1):
            raise ConfigError(f"must be a positive integer, got {self.rank}", "rank")
        if self.rank_fraction is not None and not 0 < self.rank_fraction <= 1:
            raise ConfigError(f"must lie in (0, 1], got {self.rank_fraction}", "rank_fraction")

    def rank_for(self, width: int) -> int | None:
        if self.rank is not None:
            return min(int(self.rank), width)
        if self.rank_fraction is not None:
            return max(1, int(np.floor(self.rank_fraction * width)))
        return None

    def kappa(self, eps):
        if self.step_size is not None:
            return np.full_like(np.asarray(eps, dtype=np.float64), self.step_size)
        return 2.0 * np.asarray(eps, dtype=np.float64) / self.steps


@dataclass
class PerturbationPlan:
    """Class-level perturbations for one layer.

    ``clean_losses`` / ``perturbed_losses`` hold the mean class loss measured
    by the solver at zero perturbation and at the returned perturbation.
    """

    layer: int
    deltas: dict = field(default_factory=dict)
    bounds: dict = field(default_factory=dict)
    signs: dict = field(default_factory=dict)
    clean_losses: dict = field(default_factory=dict)
    perturbed_losses: dict = field(default_factory=dict)

    def max_violation(self) -> float:
        """Largest ``||delta_c|| - eps_c`` over classes (<= 0 when feasible)."""
        if not self.deltas:
            return -np.inf
        return max(float(np.linalg.norm(d)) - self.bounds[c] for c, d in self.deltas.items())

    def direction_violation(self) -> float:
        """Largest amount by which a class loss moved against its sign."""
        worst = -np.inf
        for c, sign in self.signs.items():
            if c in self.perturbed_losses:
                moved = int(sign) * (self.perturbed_losses[c] - self.clean_losses[c])
                worst = max(worst, -moved)
        return worst


def dropout_delta(a, keep_prob: float, rng=None, mask=None) -> np.ndarray:
    """``a * (m - 1)`` with ``m_j ~ Bernoulli(keep_prob)``; no inverted rescaling.

    Pass ``mask`` to fix the Bernoulli draw instead of sampling it.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise LPAError(f"keep probability must lie in (0, 1], got {keep_prob}")
    a = np.asarray(a, dtype=np.float64)
    if mask is None:
        if rng is None:
            raise LPAError("dropout_delta needs an rng or an explicit mask")
        mask = (rng.random(a.shape) < keep_prob).astype(np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match activations {a.shape}")
    return a * (mask - 1.0)


def manifold_mixup_delta(a_i, a_j, lam: float) -> np.ndarray:
    """``lam * (a_j - a_i)`` so that ``a_i + delta`` interpolates toward ``a_j``."""
    a_i = np.asarray(a_i, dtype=np.float64)
    a_j = np.asarray(a_j, dtype=np.float64)
    if a_i.shape != a_j.shape:
        raise DimensionError(f"cannot mix shapes {a_i.shape} and {a_j.shape}")
    if not 0.0 <= lam <= 1.0:
        raise LPAError(f"mixing weight must lie in [0, 1], got {lam}")
    return lam * (a_j - a_i)


def project_l2(delta, eps: float) -> np.ndarray:
    """Euclidean projection onto the ball of radius ``eps``."""
    if eps < 0:
        raise LPAError(f"ball radius must be non-negative, got {eps}")
    delta = np.asarray(delta, dtype=np.float64)
    norm = np.linalg.norm(delta)
    if norm <= eps:
        return delta
    return delta * (eps / norm)


def _project_rows(deltas, eps):
    norms = np.linalg.norm(deltas, axis=1)
    out = deltas.copy()
    over = norms > eps
    out[over] *= (eps[over] / norms[over])[:, None]
    return out


def gradient_subspace(per_sample_grads, k: int) -> np.ndarray:
    """Top-``k`` right singular vectors (as columns) of the gradient matrix."""
    g = np.atleast_2d(np.asarray(per_sample_grads, dtype=np.float64))
    d = g.shape[1]
    if not 1 <= k <= d:
        raise LPAError(f"rank k={k} outside [1, {d}]")
    _, _, vt = np.linalg.svd(g, full_matrices=True)
    return vt[:k].T


@dataclass
class PgdResult:
    deltas: np.ndarray  # (groups, d)
    clean_losses: np.ndarray
    losses: np.ndarray
    clean_grads: np.ndarray  # per-sample gradients at zero perturbation


def _group_mean(groups, n_groups, values):
    indicator = (groups[None, :] == np.arange(n_groups)[:, None]).astype(np.float64)
    counts = indicator.sum(axis=1)
    return (indicator @ values) / counts.reshape((-1,) + (1,) * (values.ndim - 1))


def grouped_pgd(
    net: MlpNetwork,
    l: int,
    activations,
    labels,
    groups,
    signs,
    eps,
    cfg: PgdConfig,
    rank: int | None = None,
) -> PgdResult:
    """Solve one shared perturbation per group by projected gradient steps.

    Each of ``cfg.steps`` iterations evaluates the group-averaged gradient of
    the per-sample loss at the current perturbed point, moves ``kappa`` along
    it (normalised unless ``cfg.normalize`` is false) with the group's sign,
    and projects back onto the group's ball.  The iterate with the best
    signed loss, the zero start included, is returned, so an expand group
    never ends below its clean loss and a contract group never above it.

    With ``rank`` set, every gradient is first projected onto the span of the
    top-``rank`` right singular vectors of that group's per-sample gradient
    matrix at zero perturbation.
    """
    l = check_layer(net, l)
    acts = np.atleast_2d(np.asarray(activations, dtype=np.float64))
    if acts.shape[1] != net.dims[l]:
        raise DimensionError(f"expected width {net.dims[l]}, got {acts.shape[1]}", l)
    labels = np.asarray(labels, dtype=np.intp)
    groups = np.asarray(groups, dtype=np.intp)
    signs = np.asarray(signs, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    n_groups = len(signs)
    if np.bincount(groups, minlength=n_groups).min() == 0:
        raise EmptyClassError("every group needs at least one row")
    if np.any(eps < 0):
        raise LPAError("perturbation bounds must be non-negative")
    kappa = cfg.kappa(eps)

    d = acts.shape[1]
    delta = np.zeros((n_groups, d))
    best = delta.copy()
    projectors = None
    clean = best_loss = clean_grads = None
    for t in range(cfg.steps + 1):
        trace = forward_trace(net, l, acts + delta[groups])
        group_loss = _group_mean(groups, n_groups, sample_losses(trace.logits, labels))
        if t == 0:
            clean = group_loss
            best_loss = group_loss.copy()
        else:
            better = signs * (group_loss - best_loss) > 0
            best[better] = delta[better]
            best_loss[better] = group_loss[better]
        if t == cfg.steps:
            break
        grads = backward(net, trace, labels, grad_layer=l).per_sample_activation
        if t == 0:
            clean_grads = grads
            if rank is not None and rank < d:
                projectors = [gradient_subspace(grads[groups == g], rank) for g in range(n_groups)]
        g = _group_mean(groups, n_groups, grads)
        if projectors is not None:
            g = np.stack([v @ (v.T @ row) for v, row in zip(projectors, g)])
        if cfg.normalize:
            norms = np.linalg.norm(g, axis=1)
            safe = np.where(norms > 0, norms, 1.0)
            g = np.where((norms > 0)[:, None], g / safe[:, None], 0.0)
        delta = _project_rows(delta + (signs * kappa)[:, None] * g, eps)
    return PgdResult(best, clean, best_loss, clean_grads)


def adversarial_delta(net, l, a_i, y_i, eps: float, cfg: PgdConfig = PgdConfig()) -> np.ndarray:
    """Sample-level loss-maximising perturbation within the ``eps`` ball."""
    a_i = np.asarray(a_i, dtype=np.float64).reshape(1, -1)
    res = grouped_pgd(net, l, a_i, [y_i], [0], [Sign.EXPAND], [eps], cfg)
    return res.deltas[0]


def adversarial_deltas(net, l, activations, labels, eps: float, cfg: PgdConfig) -> np.ndarray:
    """Row-wise :func:`adversarial_delta` for a whole batch."""
    n = len(labels)
    res = grouped_pgd(
        net, l, activations, labels, np.arange(n), np.ones(n), np.full(n, float(eps)), cfg
    )
    return res.deltas


def _class_rows(class_batch, c):
    rows = np.atleast_2d(np.asarray(class_batch, dtype=np.float64))
    if rows.shape[0] == 0 or rows.size == 0:
        raise EmptyClassError(f"class {c} has no samples in this batch")
    return rows


def lpa_class_delta(net, l, class_batch, c: int, sign: Sign, eps: float, cfg: PgdConfig = PgdConfig()):
    """One perturbation shared by every row of ``class_batch`` (all labelled ``c``)."""
    rows = _class_rows(class_batch, c)
    n = rows.shape[0]
    res = grouped_pgd(
        net, l, rows, np.full(n, c), np.zeros(n, dtype=np.intp), [int(sign)], [eps], cfg
    )
    return res.deltas[0]


def low_rank_delta(net, l, class_batch, c: int, sign: Sign, eps: float, cfg: PgdConfig = PgdConfig(), k=None):
    """:func:`lpa_class_delta` with gradients restricted to a rank-``k`` subspace.

    ``k`` defaults to ``cfg.rank``; ``None`` in both means full rank.
    """
    rows = _class_rows(class_batch, c)
    d = rows.shape[1]
    k = cfg.rank_for(d) if k is None else k
    if k is not None and not 1 <= k <= d:
        raise LPAError(f"rank k={k} outside [1, {d}]")
    n = rows.shape[0]
    res = grouped_pgd(
        net, l, rows, np.full(n, c), np.zeros(n, dtype=np.intp), [int(sign)], [eps], cfg, rank=k
    )
    return res.deltas[0]


def solve_plan(
    net: MlpNetwork,
    l: int,
    activations,
    labels,
    signs: Mapping[int, Sign],
    bounds: Mapping[int, float],
    cfg: PgdConfig = PgdConfig(),
) -> PerturbationPlan:
    """Class-level perturbations for every class of ``signs`` present in the batch.

    Absent classes are skipped.  The rank comes from ``cfg.rank_for``.
    """
    labels = np.asarray(labels, dtype=np.intp)
    present = [c for c in np.unique(labels) if int(c) in signs]
    plan = PerturbationPlan(layer=l)
    if not present:
        return plan
    classes = np.array(present)
    keep = np.isin(labels, classes)
    acts = np.asarray(activations, dtype=np.float64)[keep]
    sub_labels = labels[keep]
    groups = np.searchsorted(classes, sub_labels)
    rank = cfg.rank_for(acts.shape[1])
    res = grouped_pgd(
        net,
        l,
        acts,
        sub_labels,
        groups,
        [int(signs[int(c)]) for c in classes],
        [bounds[int(c)] for c in classes],
        cfg,
        rank=rank,
    )
    for i, c in enumerate(int(c) for c in classes):
        plan.deltas[c] = res.deltas[i]
        plan.bounds[c] = float(bounds[c])
        plan.signs[c] = Sign(signs[c])
        plan.clean_losses[c] = float(res.clean_losses[i])
        plan.perturbed_losses[c] = float(res.losses[i])
    return plan


def plan_matrix(plan: PerturbationPlan, labels, width: int) -> np.ndarray:
    """Row ``i`` holds the plan's delta for ``labels[i]`` (zero if absent)."""
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((len(labels), width))
    for c, d in plan.deltas.items():
        d = np.asarray(d, dtype=np.float64)
        if d.shape != (width,):
            raise DimensionError(f"class {c} delta has shape {d.shape}, expected ({width},)", plan.layer)
        out[labels == c] = d
    return out


def apply_plan(activations, plan: PerturbationPlan, labels) -> np.ndarray:
    acts = np.atleast_2d(np.asarray(activations, dtype=np.float64))
    if len(labels) != acts.shape[0]:
        raise DimensionError(f"{len(labels)} labels for {acts.shape[0]} rows", plan.layer)
    return acts + plan_matrix(plan, labels, acts.shape[1])
