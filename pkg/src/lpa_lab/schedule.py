"""Class partitioning, perturbation bounds, and perturbation-layer selection."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .exceptions import ConfigError, LPAError
from .net import MlpNetwork, forward_from, forward_full, sample_losses
from .perturb import PgdConfig, Sign, apply_plan, solve_plan

LONGTAIL_TAU = 0.1
EMA_DECAY = 0.9


class Mode(str, Enum):
    BALANCED = "balanced"
    LONGTAIL = "longtail"
    DOMAINGEN = "domaingen"


@dataclass(frozen=True)
class BoundConfig:
    epsilon: float = 0.1
    delta_epsilon: float = 0.0
    tau: float | None = None  # None -> mode default
    beta: float = 0.7

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ConfigError(f"must be >= 0, got {self.epsilon}", "epsilon")
        if not self.delta_epsilon >= 0:
            raise ConfigError(f"must be >= 0, got {self.delta_epsilon}", "delta_epsilon")
        if not 0 < self.beta <= 1:
            raise ConfigError(f"must lie in (0, 1], got {self.beta}", "beta")


@dataclass(frozen=True)
class LayerChoice:
    """``fixed`` uses ``layers[0]``; ``multi`` perturbs every entry of ``layers``;
    ``adaptive`` re-picks from ``layers`` every ``eval_period`` epochs."""

    strategy: str = "fixed"
    layers: tuple = ()
    eval_period: int = 10

    def __post_init__(self):
        if self.strategy not in ("fixed", "adaptive", "multi"):
            raise ConfigError(f"unknown strategy {self.strategy!r}", "layer_strategy")
        if self.strategy == "fixed" and len(self.layers) > 1:
            raise ConfigError("a fixed layer choice takes exactly one layer", "layers")
        if self.eval_period < 1:
            raise ConfigError("must be >= 1", "eval_period")

    def resolve(self, depth: int) -> tuple:
        layers = tuple(int(l) for l in self.layers) or (depth - 1,)
        for l in layers:
            if not 1 <= l <= depth:
                raise LPAError(f"layer {l} outside [1, {depth}]")
        if self.strategy == "multi":
            return tuple(sorted(set(layers)))
        return layers


@dataclass
class ClassPartition:
    mode: Mode
    statistic: np.ndarray
    expand: frozenset  # P_a
    contract: frozenset  # N_a

    def sign(self, c: int) -> Sign:
        return Sign.EXPAND if c in self.expand else Sign.CONTRACT

    def signs(self) -> dict:
        return {c: self.sign(c) for c in range(len(self.statistic))}

    def label(self, c: int) -> str:
        return "P_a" if c in self.expand else "N_a"


def split_statistic(mode, per_class_accuracy=None, class_counts=None) -> np.ndarray:
    mode = Mode(mode)
    if mode is Mode.BALANCED:
        s = np.asarray(per_class_accuracy, dtype=np.float64)
    elif mode is Mode.LONGTAIL:
        counts = np.asarray(class_counts, dtype=np.float64)
        s = counts / counts.max()
    else:
        n = len(class_counts) if class_counts is not None else len(per_class_accuracy)
        s = np.zeros(n)
    if s.size < 2:
        raise LPAError("need at least two classes")
    return s


def update_ema(previous, accuracy, decay: float = EMA_DECAY) -> np.ndarray:
    accuracy = np.asarray(accuracy, dtype=np.float64)
    if previous is None:
        return accuracy.copy()
    return decay * np.asarray(previous) + (1.0 - decay) * accuracy


def partition(mode, statistic, tau: float | None = None) -> ClassPartition:
    """Balanced: below-mean classes expand (ties contract).  LongTail: classes
    with normalised frequency below ``tau`` expand.  DomainGen: all expand."""
    mode = Mode(mode)
    s = np.asarray(statistic, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise LPAError("splitting statistic must be finite")
    if mode is Mode.BALANCED:
        below = s < s.mean()
    elif mode is Mode.LONGTAIL:
        below = s < (LONGTAIL_TAU if tau is None else tau)
    else:
        below = np.ones(len(s), dtype=bool)
    expand = frozenset(int(c) for c in np.flatnonzero(below))
    contract = frozenset(range(len(s))) - expand
    return ClassPartition(mode, s, expand, contract)


def default_tau(mode, statistic, tau=None) -> float:
    if tau is not None:
        return float(tau)
    mode = Mode(mode)
    if mode is Mode.BALANCED:
        return float(np.mean(statistic))
    if mode is Mode.LONGTAIL:
        return LONGTAIL_TAU
    return 0.0


def class_bound(cfg: BoundConfig, s_c: float, tau: float | None = None) -> float:
    """``eps + delta_eps * |tau - s_c|``."""
    tau = cfg.tau if tau is None else tau
    if tau is None:
        raise LPAError("class_bound needs tau (set it on the config or pass it)")
    return cfg.epsilon + cfg.delta_epsilon * abs(tau - s_c)


def layer_bound(eps_c: float, beta: float, l: int, depth: int) -> float:
    """``beta ** (L - l) * eps_c``."""
    if not 1 <= l <= depth:
        raise LPAError(f"layer {l} outside [1, {depth}]")
    return beta ** (depth - l) * eps_c


def class_bounds(cfg: BoundConfig, part: ClassPartition) -> dict:
    tau = default_tau(part.mode, part.statistic, cfg.tau)
    return {c: class_bound(cfg, float(s), tau) for c, s in enumerate(part.statistic)}


def layer_bounds(cfg: BoundConfig, part: ClassPartition, l: int, depth: int) -> dict:
    return {c: layer_bound(e, cfg.beta, l, depth) for c, e in class_bounds(cfg, part).items()}


def evaluate_layers(
    net: MlpNetwork,
    features,
    labels,
    candidates: Sequence[int],
    part: ClassPartition,
    bounds: BoundConfig,
    pgd: PgdConfig = PgdConfig(),
) -> dict:
    """Score each candidate layer by the summed absolute change in mean class loss."""
    if not candidates:
        raise LPAError("need at least one candidate layer")
    labels = np.asarray(labels, dtype=np.intp)
    trace = forward_full(net, features)
    signs = part.signs()
    scores = {}
    for l in candidates:
        eps = layer_bounds(bounds, part, l, net.depth)
        plan = solve_plan(net, l, trace.activations[l], labels, signs, eps, pgd)
        clean = sample_losses(trace.logits, labels)
        perturbed = sample_losses(
            forward_from(net, l, apply_plan(trace.activations[l], plan, labels)), labels
        )
        scores[int(l)] = float(
            sum(abs(perturbed[labels == c].mean() - clean[labels == c].mean()) for c in plan.deltas)
        )
    return scores


def select_layer(scores, layers=None) -> int:
    """Arg-max over ``{layer: score}`` (or parallel ``scores``/``layers``
    sequences); ties go to the smallest layer."""
    if layers is not None:
        scores = dict(zip(layers, scores))
    if not scores:
        raise LPAError("no layer scores to select from")
    best = max(scores.values())
    return min(l for l, s in scores.items() if s == best)
