"""Mini-batch SGD training with activation-perturbation methods.

Every method runs through the same epoch loop: a *perturber* turns a clean
batch into additive activation perturbations (and, for mixup, soft targets),
then the batch is re-run with those perturbations held constant and the
parameters take one momentum-SGD step.  A perturber that produces zeros
therefore reproduces the plain cross-entropy trajectory bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._rng import stream
from .data import Dataset
from .exceptions import ConfigError, InvariantViolation
from .net import (
    GradientBundle,
    MlpNetwork,
    backward,
    cross_entropy,
    forward_full,
    one_hot,
)
from .perturb import (
    PgdConfig,
    adversarial_deltas,
    dropout_delta,
    manifold_mixup_delta,
    plan_matrix,
    solve_plan,
)
from .schedule import (
    BoundConfig,
    ClassPartition,
    LayerChoice,
    Mode,
    class_bounds,
    evaluate_layers,
    layer_bounds,
    partition,
    select_layer,
    split_statistic,
    update_ema,
)

BOUND_SLACK = 1e-9
DIRECTION_SLACK = 1e-12
ADAPTIVE_SAMPLE = 512


# -- method configurations ---------------------------------------------------


@dataclass(frozen=True)
class CE:
    name = "ce"


@dataclass(frozen=True)
class Dropout:
    keep_prob: float = 0.5
    layers: tuple = ()  # empty -> every hidden layer
    name = "dropout"

    def __post_init__(self):
        if not 0 < self.keep_prob <= 1:
            raise ConfigError("must lie in (0, 1]", "keep_prob")


@dataclass(frozen=True)
class ManifoldMixup:
    alpha: float = 2.0  # 0 disables mixing
    layers: tuple = ()  # empty -> input and every hidden layer
    name = "manifold_mixup"

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("must be >= 0", "alpha")


@dataclass(frozen=True)
class Adversarial:
    epsilon: float = 0.1
    steps: int = 3
    layer: int | None = None  # None -> penultimate
    name = "ada"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("must be >= 0", "epsilon")
        if self.steps < 1:
            raise ConfigError("must be >= 1", "steps")


@dataclass(frozen=True)
class LPA:
    mode: Mode = Mode.BALANCED
    bounds: BoundConfig = BoundConfig()
    pgd: PgdConfig = PgdConfig()
    layer_choice: LayerChoice = LayerChoice()
    name = "lpa"

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))


@dataclass(frozen=True)
class LPL:
    mode: Mode = Mode.BALANCED
    bounds: BoundConfig = BoundConfig()
    pgd: PgdConfig = PgdConfig()
    name = "lpl"

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))

    def as_lpa(self, depth: int) -> LPA:
        return LPA(self.mode, self.bounds, self.pgd, LayerChoice("fixed", (depth,)))


@dataclass(frozen=True)
class LPLPlusLPA:
    lpa: LPA = LPA()
    lpl: LPL = LPL()
    name = "lpl_lpa"


METHODS = {m.name: m for m in (CE, Dropout, ManifoldMixup, Adversarial, LPA, LPL, LPLPlusLPA)}


@dataclass(frozen=True)
class TrainConfig:
    method: object = CE()
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epochs: tuple | None = None  # None -> 50% and 75% of epochs
    lr_decay: float = 0.1
    hidden_sizes: tuple = (64, 64)
    seed: int = 0
    check_invariants: bool = False

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError("must be an integer >= 1", "epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "batch_size")
        if not self.learning_rate > 0:
            raise ConfigError("must be > 0", "learning_rate")
        if not 0 <= self.momentum < 1:
            raise ConfigError("must lie in [0, 1)", "momentum")
        if self.weight_decay < 0:
            raise ConfigError("must be >= 0", "weight_decay")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("must lie in (0, 1]", "lr_decay")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ConfigError("need at least one positive hidden width", "hidden_sizes")
        if type(self.method).__name__ not in {m.__name__ for m in METHODS.values()}:
            raise ConfigError(f"unknown method {self.method!r}", "method")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))

    def learning_rate_at(self, epoch: int) -> float:
        """Step-decayed rate for 1-based ``epoch``."""
        milestones = self.lr_decay_epochs
        if milestones is None:
            milestones = (int(0.5 * self.epochs), int(0.75 * self.epochs))
        n = sum(epoch > m for m in milestones)
        return self.learning_rate * self.lr_decay**n


# -- optimiser -------------------------------------------------------------------


@dataclass
class OptimizerState:
    weights: list
    biases: list

    @classmethod
    def zeros(cls, net: MlpNetwork):
        return cls(
            [np.zeros_like(ly.weights) for ly in net.layers],
            [np.zeros_like(ly.bias) for ly in net.layers],
        )


def sgd_step(
    net: MlpNetwork,
    grads: GradientBundle,
    state: OptimizerState | None,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
) -> tuple[MlpNetwork, OptimizerState]:
    """Classic momentum: ``v <- mu v + g + wd W``, ``W <- W - lr v``.

    Biases get no weight decay.  Returns a new network and state.
    """
    if state is None:
        state = OptimizerState.zeros(net)
    new = net.copy()
    vw, vb = [], []
    for i, ly in enumerate(new.layers):
        gw, gb = grads.weights[i], grads.biases[i]
        if gw is None:
            gw, gb = np.zeros_like(ly.weights), np.zeros_like(ly.bias)
        if gw.shape != ly.weights.shape or gb.shape != ly.bias.shape:
            raise ConfigError(f"gradient shapes do not match layer {i + 1}")
        v = momentum * state.weights[i] + gw + weight_decay * ly.weights
        u = momentum * state.biases[i] + gb
        ly.weights = ly.weights - lr * v
        ly.bias = ly.bias - lr * u
        vw.append(v)
        vb.append(u)
    return new, OptimizerState(vw, vb)


# -- metrics -----------------------------------------------------------------------


def predict(net: MlpNetwork, features) -> np.ndarray:
    return np.argmax(forward_full(net, features).logits, axis=1)


def class_accuracy(net: MlpNetwork, ds: Dataset) -> np.ndarray:
    """Per-class accuracy over all ``ds.n_classes``; NaN for absent classes."""
    pred = predict(net, ds.features)
    correct = np.bincount(ds.labels, weights=(pred == ds.labels), minlength=ds.n_classes)
    counts = ds.class_counts
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, correct / np.maximum(counts, 1), np.nan)


# -- perturbers ----------------------------------------------------------------------


@dataclass
class BatchInfo:
    plans: list = field(default_factory=list)


class _Perturber:
    snapshot: list = []
    layers: tuple = ()

    def begin_epoch(self, net, train, epoch, train_accuracy):
        pass

    def __call__(self, net, xb, yb, epoch, batch):
        return None, None, BatchInfo()


class _Dropout(_Perturber):
    def __init__(self, method: Dropout, depth: int, seed: int):
        self.p = method.keep_prob
        self.layers = tuple(sorted(method.layers or range(1, depth)))
        self.seed = seed

    def __call__(self, net, xb, yb, epoch, batch):
        rng = stream(self.seed, "dropout", epoch, batch)
        perturbations = {}
        trace = forward_full(net, xb)
        for i, l in enumerate(self.layers):
            perturbations[l] = dropout_delta(trace.activations[l], self.p, rng)
            if i + 1 < len(self.layers):
                trace = forward_full(net, xb, perturbations)
        return perturbations, None, BatchInfo()


class _Mixup(_Perturber):
    def __init__(self, method: ManifoldMixup, depth: int, seed: int):
        self.alpha = method.alpha
        self.layers = tuple(method.layers or range(0, depth))
        self.seed = seed

    def __call__(self, net, xb, yb, epoch, batch):
        rng = stream(self.seed, "mixup", epoch, batch)
        lam = float(rng.beta(self.alpha, self.alpha)) if self.alpha > 0 else 0.0
        perm = rng.permutation(len(yb))
        l = int(self.layers[rng.integers(len(self.layers))])
        a = forward_full(net, xb).activations[l]
        delta = manifold_mixup_delta(a, a[perm], lam)
        targets = (1.0 - lam) * one_hot(yb, net.n_classes) + lam * one_hot(yb[perm], net.n_classes)
        return {l: delta}, targets, BatchInfo()


class _Adversarial(_Perturber):
    def __init__(self, method: Adversarial, depth: int):
        self.eps = method.epsilon
        self.cfg = PgdConfig(steps=method.steps)
        self.layers = (depth - 1 if method.layer is None else method.layer,)

    def __call__(self, net, xb, yb, epoch, batch):
        l = self.layers[0]
        a = forward_full(net, xb).activations[l]
        return {l: adversarial_deltas(net, l, a, yb, self.eps, self.cfg)}, None, BatchInfo()


@dataclass
class _Stage:
    """One class-level perturbation source (an LPA or LPL configuration)."""

    method: LPA
    layers: tuple
    ema: np.ndarray | None = None
    part: ClassPartition | None = None
    bounds: dict = field(default_factory=dict)  # layer -> {class: eps}


class _ClassLevel(_Perturber):
    def __init__(self, stages: Sequence[LPA], depth: int, seed: int, check: bool):
        self.stages = [_Stage(m, m.layer_choice.resolve(depth)) for m in stages]
        for st in self.stages:
            if st.method.layer_choice.strategy == "adaptive":
                st.layers = st.layers[:1]
        self.depth = depth
        self.seed = seed
        self.check = check
        self.snapshot = []

    @property
    def layers(self):
        return tuple(sorted(l for st in self.stages for l in st.layers))

    def begin_epoch(self, net, train, epoch, train_accuracy):
        self.snapshot = []
        for idx, st in enumerate(self.stages):
            m = st.method
            if m.mode is Mode.BALANCED:
                st.ema = update_ema(st.ema, np.nan_to_num(train_accuracy))
            stat = split_statistic(m.mode, st.ema, train.class_counts)
            st.part = partition(m.mode, stat, m.bounds.tau)
            choice = m.layer_choice
            if choice.strategy == "adaptive" and (epoch - 1) % choice.eval_period == 0:
                candidates = choice.resolve(self.depth)
                n = min(ADAPTIVE_SAMPLE, len(train))
                rows = stream(self.seed, "adaptive-sample").choice(len(train), n, replace=False)
                scores = evaluate_layers(
                    net, train.features[rows], train.labels[rows], candidates, st.part, m.bounds, m.pgd
                )
                st.layers = (select_layer(scores),)
            st.bounds = {l: layer_bounds(m.bounds, st.part, l, self.depth) for l in st.layers}
            eps_c = class_bounds(m.bounds, st.part)
            for l in st.layers:
                for c in range(len(stat)):
                    self.snapshot.append(
                        {
                            "stage": idx,
                            "layer": l,
                            "class": c,
                            "s_bar": float(stat[c]),
                            "set": st.part.label(c),
                            "eps_c": eps_c[c],
                            "eps_c_layer": st.bounds[l][c],
                        }
                    )

    def __call__(self, net, xb, yb, epoch, batch):
        work = sorted((l, st) for st in self.stages for l in st.layers)
        info = BatchInfo()
        perturbations = {}
        trace = forward_full(net, xb)
        for i, (l, st) in enumerate(work):
            plan = solve_plan(
                net, l, trace.activations[l], yb, st.part.signs(), st.bounds[l], st.method.pgd
            )
            if self.check:
                _check_plan(plan)
            info.plans.append(plan)
            perturbations[l] = plan_matrix(plan, yb, net.dims[l])
            if i + 1 < len(work):
                trace = forward_full(net, xb, perturbations)
        return perturbations, None, info


def _check_plan(plan):
    excess = plan.max_violation()
    if excess > BOUND_SLACK:
        raise InvariantViolation(f"layer {plan.layer}: perturbation exceeds its bound by {excess:g}")
    wrong = plan.direction_violation()
    if wrong > DIRECTION_SLACK:
        raise InvariantViolation(f"layer {plan.layer}: class loss moved against its sign by {wrong:g}")


def make_perturber(cfg: TrainConfig, depth: int) -> _Perturber:
    m = cfg.method
    if isinstance(m, CE):
        return _Perturber()
    if isinstance(m, Dropout):
        return _Dropout(m, depth, cfg.seed)
    if isinstance(m, ManifoldMixup):
        return _Mixup(m, depth, cfg.seed)
    if isinstance(m, Adversarial):
        return _Adversarial(m, depth)
    if isinstance(m, LPA):
        return _ClassLevel([m], depth, cfg.seed, cfg.check_invariants)
    if isinstance(m, LPL):
        return _ClassLevel([m.as_lpa(depth)], depth, cfg.seed, cfg.check_invariants)
    if isinstance(m, LPLPlusLPA):
        return _ClassLevel([m.lpa, m.lpl.as_lpa(depth)], depth, cfg.seed, cfg.check_invariants)
    raise ConfigError(f"unknown method {m!r}", "method")


# -- training loop ---------------------------------------------------------------------


@dataclass
class EpochStats:
    loss: float
    max_bound_excess: float = -np.inf
    max_direction_violation: float = -np.inf
    plans_checked: int = 0


def run_epoch(
    net: MlpNetwork,
    state: OptimizerState | None,
    train: Dataset,
    perturber: _Perturber,
    cfg: TrainConfig,
    epoch: int,
) -> tuple[MlpNetwork, OptimizerState, EpochStats]:
    lr = cfg.learning_rate_at(epoch)
    order = stream(cfg.seed, "shuffle", epoch).permutation(len(train))
    losses, sizes = [], []
    stats = EpochStats(loss=np.nan)
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        idx = order[start : start + cfg.batch_size]
        xb, yb = train.features[idx], train.labels[idx]
        perturbations, targets, info = perturber(net, xb, yb, epoch, b)
        trace = forward_full(net, xb, perturbations)
        grads = backward(net, trace, yb, targets=targets)
        net, state = sgd_step(net, grads, state, lr, cfg.momentum, cfg.weight_decay)
        losses.append(grads.loss)
        sizes.append(len(idx))
        for plan in info.plans:
            stats.max_bound_excess = max(stats.max_bound_excess, plan.max_violation())
            stats.max_direction_violation = max(stats.max_direction_violation, plan.direction_violation())
            stats.plans_checked += 1
    stats.loss = float(np.average(losses, weights=sizes))
    return net, state, stats


def train_epoch_lpa(
    net: MlpNetwork,
    train: Dataset,
    part: ClassPartition,
    bounds: dict,
    layer: int,
    cfg: TrainConfig,
    epoch: int = 1,
    state: OptimizerState | None = None,
    pgd: PgdConfig = PgdConfig(),
):
    """One LPA epoch with a fixed partition and per-class bounds at ``layer``."""
    perturber = _ClassLevel([LPA(part.mode, pgd=pgd, layer_choice=LayerChoice("fixed", (layer,)))], net.depth, cfg.seed, cfg.check_invariants)
    st = perturber.stages[0]
    st.part = part
    st.bounds = {layer: dict(bounds)}
    return run_epoch(net, state, train, perturber, cfg, epoch)


@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    train_loss: float
    train_accuracy: np.ndarray
    val_accuracy: np.ndarray
    layers: tuple
    schedule: list
    max_bound_excess: float
    max_direction_violation: float
    plans_checked: int
    wall_clock: float

    def comparable(self) -> dict:
        """Everything but the wall-clock time."""
        return {
            "epoch": self.epoch,
            "learning_rate": self.learning_rate,
            "train_loss": self.train_loss,
            "train_accuracy": self.train_accuracy.tolist(),
            "val_accuracy": self.val_accuracy.tolist(),
            "layers": self.layers,
            "schedule": self.schedule,
            "max_bound_excess": self.max_bound_excess,
            "max_direction_violation": self.max_direction_violation,
            "plans_checked": self.plans_checked,
        }


@dataclass
class RunRecord:
    config: TrainConfig
    epochs: list
    network: MlpNetwork
    perturber: _Perturber | None = None

    @property
    def final_val_accuracy(self) -> np.ndarray:
        return self.epochs[-1].val_accuracy


def overall_accuracy(net: MlpNetwork, ds: Dataset) -> float:
    return float(np.mean(predict(net, ds.features) == ds.labels))


def train(config: TrainConfig, train_set: Dataset, val_set: Dataset | None = None, net=None) -> RunRecord:
    """Run ``config.method`` for ``config.epochs`` epochs.

    The network is initialised from ``config.seed`` unless ``net`` is given.
    Validation accuracy is recorded each epoch when ``val_set`` is given.
    """
    if not isinstance(config, TrainConfig):
        raise ConfigError("expected a TrainConfig")
    if net is None:
        dims = [train_set.n_features, *config.hidden_sizes, train_set.n_classes]
        net = MlpNetwork.initialize(dims, seed=config.seed)
    perturber = make_perturber(config, net.depth)
    state = None
    records = []
    train_acc = class_accuracy(net, train_set)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        perturber.begin_epoch(net, train_set, epoch, train_acc)
        layers = perturber.layers
        schedule = list(perturber.snapshot)
        net, state, stats = run_epoch(net, state, train_set, perturber, config, epoch)
        train_acc = class_accuracy(net, train_set)
        val_acc = class_accuracy(net, val_set) if val_set is not None else np.full(train_set.n_classes, np.nan)
        records.append(
            EpochRecord(
                epoch,
                config.learning_rate_at(epoch),
                stats.loss,
                train_acc,
                val_acc,
                layers,
                schedule,
                stats.max_bound_excess,
                stats.max_direction_violation,
                stats.plans_checked,
                time.perf_counter() - t0,
            )
        )
    return RunRecord(config, records, net, perturber)


def train_lpl(config: TrainConfig, train_set: Dataset, val_set: Dataset | None = None) -> RunRecord:
    """LPA with the perturbation fixed at the logit layer."""
    if not isinstance(config.method, LPL):
        raise ConfigError("train_lpl needs an LPL method", "method")
    return train(config, train_set, val_set)
