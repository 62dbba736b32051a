"""JSON run configurations.

A run config is one JSON object::

    {
      "seed": 0,
      "output_dir": "runs",
      "dataset": {"scenario": "longtail", "n_classes": 10, "imbalance_ratio": 100},
      "train": {"epochs": 40, "hidden_sizes": [64, 64]},
      "method": {"name": "lpa", "mode": "longtail", "epsilon": 0.3, "layers": [2]}
    }

A compare config replaces ``method`` with ``methods`` (a mapping from a row
label to a method object, at least two) and ``seed`` with ``seeds``.  Every
omitted key takes its default; unknown keys are rejected.  See README.md for
the full key list.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .data import DatasetSpec
from .exceptions import ConfigError, LPAError
from .perturb import PgdConfig
from .schedule import BoundConfig, LayerChoice, Mode
from .train import (
    CE,
    LPA,
    LPL,
    Adversarial,
    Dropout,
    LPLPlusLPA,
    ManifoldMixup,
    TrainConfig,
)

LOW_RANK_FRACTION = 0.25

_DATASET_KEYS = {f.name for f in dataclasses.fields(DatasetSpec)} - {"seed"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed", "method"}
_PERTURB_KEYS = {
    "mode",
    "epsilon",
    "delta_epsilon",
    "tau",
    "beta",
    "steps",
    "step_size",
    "rank",
    "normalize_gradient",
}
_LAYER_KEYS = {"layer_strategy", "layers", "eval_period"}
_METHOD_KEYS = {
    "ce": set(),
    "dropout": {"keep_prob", "layers"},
    "manifold_mixup": {"alpha", "layers"},
    "ada": {"epsilon", "steps", "layer"},
    "lpl": _PERTURB_KEYS,
    "lpa": _PERTURB_KEYS | _LAYER_KEYS,
    "lpa_lowrank": _PERTURB_KEYS | _LAYER_KEYS,
    "lpl_lpa": {"lpa", "lpl"},
}


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec
    train: TrainConfig
    output_dir: str = "runs"
    seed: int = 0

    @property
    def method(self):
        return self.train.method

    def run_id(self) -> str:
        blob = json.dumps(run_config_to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass(frozen=True)
class CompareSpec:
    dataset: DatasetSpec
    train: TrainConfig
    methods: dict
    seeds: tuple
    output_dir: str = "runs"

    def __post_init__(self):
        if len(self.methods) < 2:
            raise ConfigError("a comparison needs at least two methods", "methods")
        if len(self.seeds) < 1:
            raise ConfigError("a comparison needs at least one seed", "seeds")

    def cells(self):
        for label, method in self.methods.items():
            for seed in self.seeds:
                yield label, RunConfig(
                    dataclasses.replace(self.dataset, seed=seed),
                    dataclasses.replace(self.train, method=method, seed=seed),
                    self.output_dir,
                    seed,
                )


def _reject_unknown(obj, allowed, path):
    if not isinstance(obj, dict):
        raise ConfigError("expected an object", path or "<root>")
    for key in obj:
        if key not in allowed:
            raise ConfigError("unknown key", f"{path}.{key}" if path else key)


def _build(factory, kwargs, path):
    try:
        return factory(**kwargs)
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], f"{path}.{exc.key}" if exc.key else path) from None
    except (LPAError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path) from None


def _tuple(v):
    return tuple(v) if isinstance(v, (list, tuple)) else (v,)


def _perturbation_parts(obj, path, lowrank=False):
    mode = obj.get("mode", "balanced")
    try:
        mode = Mode(mode)
    except ValueError:
        raise ConfigError(f"unknown mode {mode!r}", f"{path}.mode") from None
    bounds = _build(
        BoundConfig,
        {
            "epsilon": obj.get("epsilon", 0.1),
            "delta_epsilon": obj.get("delta_epsilon", 0.0),
            "tau": obj.get("tau"),
            "beta": obj.get("beta", 0.7),
        },
        path,
    )
    rank = obj.get("rank", "quarter" if lowrank else "full")
    pgd_kwargs = {
        "steps": obj.get("steps", 3),
        "step_size": obj.get("step_size"),
        "normalize": obj.get("normalize_gradient", True),
    }
    if rank == "quarter":
        pgd_kwargs["rank_fraction"] = LOW_RANK_FRACTION
    elif rank != "full":
        if not isinstance(rank, int):
            raise ConfigError('must be an integer, "full", or "quarter"', f"{path}.rank")
        pgd_kwargs["rank"] = rank
    return mode, bounds, _build(PgdConfig, pgd_kwargs, path)


def parse_method(obj, path="method"):
    _reject_unknown(obj, {"name"} | set().union(*_METHOD_KEYS.values()), path)
    name = obj.get("name")
    if name not in _METHOD_KEYS:
        raise ConfigError(f"unknown method {name!r} (choose from {sorted(_METHOD_KEYS)})", f"{path}.name")
    _reject_unknown(obj, {"name"} | _METHOD_KEYS[name], path)
    if name == "ce":
        return CE()
    if name == "dropout":
        return _build(Dropout, {"keep_prob": obj.get("keep_prob", 0.5), "layers": _tuple(obj.get("layers", ()))}, path)
    if name == "manifold_mixup":
        return _build(ManifoldMixup, {"alpha": obj.get("alpha", 2.0), "layers": _tuple(obj.get("layers", ()))}, path)
    if name == "ada":
        return _build(
            Adversarial,
            {"epsilon": obj.get("epsilon", 0.1), "steps": obj.get("steps", 3), "layer": obj.get("layer")},
            path,
        )
    if name == "lpl":
        mode, bounds, pgd = _perturbation_parts(obj, path)
        return LPL(mode, bounds, pgd)
    if name in ("lpa", "lpa_lowrank"):
        mode, bounds, pgd = _perturbation_parts(obj, path, lowrank=name == "lpa_lowrank")
        choice = _build(
            LayerChoice,
            {
                "strategy": obj.get("layer_strategy", "fixed"),
                "layers": _tuple(obj.get("layers", ())),
                "eval_period": obj.get("eval_period", 10),
            },
            path,
        )
        return LPA(mode, bounds, pgd, choice)
    lpa = parse_method({"name": "lpa", **obj.get("lpa", {})}, f"{path}.lpa")
    lpl = parse_method({"name": "lpl", **obj.get("lpl", {})}, f"{path}.lpl")
    return LPLPlusLPA(lpa, lpl)


def _parse_common(obj):
    seed = obj.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("must be an integer", "seed")
    ds = obj.get("dataset", {})
    _reject_unknown(ds, _DATASET_KEYS, "dataset")
    tr = obj.get("train", {})
    _reject_unknown(tr, _TRAIN_KEYS, "train")
    if "train_rotations" in ds:
        ds = {**ds, "train_rotations": _tuple(ds["train_rotations"])}
    tr = dict(tr)
    for key in ("hidden_sizes", "lr_decay_epochs"):
        if tr.get(key) is not None:
            tr[key] = _tuple(tr[key])
    return seed, ds, tr


def parse_run_config(obj) -> RunConfig:
    _reject_unknown(obj, {"dataset", "train", "method", "output_dir", "seed"}, "")
    seed, ds, tr = _parse_common(obj)
    if "method" not in obj:
        raise ConfigError("missing", "method")
    method = parse_method(obj["method"])
    dataset = _build(DatasetSpec, {**ds, "seed": seed}, "dataset")
    train = _build(TrainConfig, {**tr, "seed": seed, "method": method}, "train")
    _validate_layers(method, dataset, train)
    return RunConfig(dataset, train, str(obj.get("output_dir", "runs")), seed)


def parse_compare_config(obj) -> CompareSpec:
    _reject_unknown(obj, {"dataset", "train", "methods", "output_dir", "seeds"}, "")
    _, ds, tr = _parse_common(obj)
    methods = obj.get("methods")
    if not isinstance(methods, dict):
        raise ConfigError("expected an object mapping labels to methods", "methods")
    parsed = {label: parse_method(m, f"methods.{label}") for label, m in methods.items()}
    seeds = obj.get("seeds", [0])
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("expected a list of integers", "seeds")
    dataset = _build(DatasetSpec, ds, "dataset")
    train = _build(TrainConfig, tr, "train")
    for m in parsed.values():
        _validate_layers(m, dataset, train)
    return CompareSpec(dataset, train, parsed, tuple(seeds), str(obj.get("output_dir", "runs")))


def _validate_layers(method, dataset, train):
    depth = len(train.hidden_sizes) + 1
    methods = [method.lpa, method.lpl] if isinstance(method, LPLPlusLPA) else [method]
    for m in methods:
        if isinstance(m, LPA):
            for l in m.layer_choice.layers:
                if not 1 <= l <= depth:
                    raise ConfigError(f"layer {l} outside [1, {depth}]", "method.layers")
        if isinstance(m, (Dropout, ManifoldMixup)):
            lo = 1 if isinstance(m, Dropout) else 0
            for l in m.layers:
                if not lo <= l < depth:
                    raise ConfigError(f"layer {l} outside [{lo}, {depth - 1}]", "method.layers")
        if isinstance(m, Adversarial) and m.layer is not None and not 0 <= m.layer <= depth:
            raise ConfigError(f"layer {m.layer} outside [0, {depth}]", "method.layer")


def load_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON ({exc.msg} at line {exc.lineno})", str(path)) from None


def parse_config(path) -> RunConfig:
    return parse_run_config(load_json(path))


# -- serialisation -----------------------------------------------------------


def _perturbation_dict(m):
    pgd = m.pgd
    if pgd.rank is not None:
        rank = pgd.rank
    elif pgd.rank_fraction == LOW_RANK_FRACTION:
        rank = "quarter"
    elif pgd.rank_fraction is None:
        rank = "full"
    else:
        raise LPAError(f"rank fraction {pgd.rank_fraction} has no config spelling")
    return {
        "mode": m.mode.value,
        "epsilon": m.bounds.epsilon,
        "delta_epsilon": m.bounds.delta_epsilon,
        "tau": m.bounds.tau,
        "beta": m.bounds.beta,
        "steps": pgd.steps,
        "step_size": pgd.step_size,
        "rank": rank,
        "normalize_gradient": pgd.normalize,
    }


def method_to_dict(m) -> dict:
    if isinstance(m, CE):
        return {"name": "ce"}
    if isinstance(m, Dropout):
        return {"name": "dropout", "keep_prob": m.keep_prob, "layers": list(m.layers)}
    if isinstance(m, ManifoldMixup):
        return {"name": "manifold_mixup", "alpha": m.alpha, "layers": list(m.layers)}
    if isinstance(m, Adversarial):
        return {"name": "ada", "epsilon": m.epsilon, "steps": m.steps, "layer": m.layer}
    if isinstance(m, LPL):
        return {"name": "lpl", **_perturbation_dict(m)}
    if isinstance(m, LPA):
        choice = m.layer_choice
        return {
            "name": "lpa",
            **_perturbation_dict(m),
            "layer_strategy": choice.strategy,
            "layers": list(choice.layers),
            "eval_period": choice.eval_period,
        }
    if isinstance(m, LPLPlusLPA):
        lpa = method_to_dict(m.lpa)
        lpl = method_to_dict(m.lpl)
        del lpa["name"], lpl["name"]
        return {"name": "lpl_lpa", "lpa": lpa, "lpl": lpl}
    raise LPAError(f"cannot serialise method {m!r}")


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def dataset_to_dict(spec: DatasetSpec) -> dict:
    return {k: _plain(v) for k, v in dataclasses.asdict(spec).items() if k != "seed"}


def train_to_dict(cfg: TrainConfig) -> dict:
    return {f.name: _plain(getattr(cfg, f.name)) for f in dataclasses.fields(cfg) if f.name not in ("seed", "method")}


def run_config_to_dict(cfg: RunConfig) -> dict:
    return {
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
        "dataset": dataset_to_dict(cfg.dataset),
        "train": train_to_dict(cfg.train),
        "method": method_to_dict(cfg.train.method),
    }
