import csv
import json

import numpy as np
import pytest

from lpa_lab import cli
from lpa_lab.config import (
    CompareSpec,
    parse_compare_config,
    parse_config,
    parse_method,
    parse_run_config,
    run_config_to_dict,
)
from lpa_lab.data import DatasetSpec, make_splits, save_csv
from lpa_lab.exceptions import ConfigError
from lpa_lab.net import load_checkpoint
from lpa_lab.schedule import Mode
from lpa_lab.train import CE, LPA, LPL, LPLPlusLPA

TINY = {"n_classes": 3, "n_features": 4, "n_max": 40}
TINY_LT = {**TINY, "scenario": "longtail", "imbalance_ratio": 10, "eval_per_class": 20}
TINY_TRAIN = {"epochs": 2, "hidden_sizes": [8, 8], "batch_size": 32}


def write(tmp_path, name, obj):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return path


def run_cfg(tmp_path, method, dataset=TINY, **extra):
    return {"seed": 1, "output_dir": str(tmp_path / "runs"), "dataset": dataset, "train": TINY_TRAIN, "method": method, **extra}


# -- parsing --------------------------------------------------------------------


def test_minimal_config_gets_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, "c.json", {"dataset": {"n_classes": 4}, "method": {"name": "ce"}}))
    assert isinstance(cfg.method, CE)
    assert cfg.train.momentum == 0.9 and cfg.train.weight_decay == 5e-4 and cfg.train.batch_size == 128
    assert cfg.dataset.n_classes == 4 and cfg.seed == 0


def test_perturbation_defaults():
    m = parse_method({"name": "lpa"})
    assert m.bounds.beta == 0.7 and m.pgd.steps == 3
    assert m.pgd.kappa(0.3) == pytest.approx(0.2)
    low = parse_method({"name": "lpa_lowrank"})
    assert low.pgd.rank_for(16) == 4 and low.pgd.rank_for(18) == 4
    assert parse_method({"name": "lpa", "rank": 5}).pgd.rank == 5


def test_negative_epsilon_names_key(tmp_path):
    with pytest.raises(ConfigError) as err:
        parse_config(write(tmp_path, "c.json", {"method": {"name": "lpa", "epsilon": -1}}))
    assert err.value.key == "method.epsilon"
    assert "method.epsilon" in str(err.value)


@pytest.mark.parametrize(
    "obj,key",
    [
        ({"method": {"name": "ce"}, "extra": 1}, "extra"),
        ({"method": {"name": "ce"}, "dataset": {"n_classes": 1}}, "dataset.n_classes"),
        ({"method": {"name": "ce"}, "dataset": {"colour": 1}}, "dataset.colour"),
        ({"method": {"name": "ce"}, "train": {"epochs": 0}}, "train.epochs"),
        ({"method": {"name": "lpa", "beta": 2}}, "method.beta"),
        ({"method": {"name": "lpa", "mode": "odd"}}, "method.mode"),
        ({"method": {"name": "lpa", "layers": [7]}}, "method.layers"),
        ({"method": {"name": "dropout", "keep_prob": 0}}, "method.keep_prob"),
        ({"method": {"name": "ce", "epsilon": 0.1}}, "method.epsilon"),
        ({"method": {"name": "magic"}}, "method.name"),
        ({"method": {"name": "lpl_lpa", "lpa": {"steps": 0}}}, "method.lpa.steps"),
        ({"dataset": {}}, "method"),
    ],
)
def test_invalid_configs_name_their_key(obj, key):
    with pytest.raises(ConfigError) as err:
        parse_run_config(obj)
    assert err.value.key == key


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="malformed"):
        parse_config(bad)


@pytest.mark.parametrize(
    "method",
    [
        {"name": "ce"},
        {"name": "dropout", "keep_prob": 0.8, "layers": [1]},
        {"name": "manifold_mixup", "alpha": 0.5},
        {"name": "ada", "epsilon": 0.2, "layer": 1},
        {"name": "lpl", "mode": "longtail", "epsilon": 0.2, "tau": 0.2},
        {"name": "lpa", "layer_strategy": "adaptive", "layers": [1, 2], "eval_period": 3, "delta_epsilon": 0.1},
        {"name": "lpa_lowrank", "mode": "domaingen"},
        {"name": "lpl_lpa", "lpa": {"epsilon": 0.2}, "lpl": {"epsilon": 0.05}},
    ],
)
def test_effective_config_round_trips(tmp_path, method):
    cfg = parse_run_config(run_cfg(tmp_path, method))
    echo = run_config_to_dict(cfg)
    again = parse_run_config(json.loads(json.dumps(echo)))
    assert again == cfg
    assert again.run_id() == cfg.run_id()


def test_lpl_lpa_uses_independent_bounds():
    m = parse_method({"name": "lpl_lpa", "lpa": {"epsilon": 0.2}, "lpl": {"epsilon": 0.05, "mode": "longtail"}})
    assert isinstance(m, LPLPlusLPA) and isinstance(m.lpl, LPL) and isinstance(m.lpa, LPA)
    assert m.lpa.bounds.epsilon == 0.2 and m.lpl.bounds.epsilon == 0.05 and m.lpl.mode is Mode.LONGTAIL


def test_compare_spec_rules(tmp_path):
    spec = parse_compare_config(
        {"methods": {"ce": {"name": "ce"}, "lpa": {"name": "lpa"}}, "seeds": [3, 4], "dataset": TINY}
    )
    cells = list(spec.cells())
    assert len(cells) == 4
    assert {(label, c.seed, c.dataset.seed, c.train.seed) for label, c in cells} == {
        (m, s, s, s) for m in ("ce", "lpa") for s in (3, 4)
    }
    with pytest.raises(ConfigError) as err:
        parse_compare_config({"methods": {"ce": {"name": "ce"}}})
    assert err.value.key == "methods"
    with pytest.raises(ConfigError):
        CompareSpec(DatasetSpec(), spec.train, spec.methods, ())


# -- CLI ----------------------------------------------------------------------------


def test_train_writes_complete_run_dir(tmp_path, capsys):
    path = write(tmp_path, "t.json", run_cfg(tmp_path, {"name": "lpa", "mode": "longtail", "epsilon": 0.3}, TINY_LT))
    assert cli.main(["train", "--config", str(path)]) == 0
    cfg = parse_config(path)
    out = tmp_path / "runs" / cfg.run_id()
    assert sorted(p.name for p in out.iterdir()) == [
        "checkpoint.npz",
        "config.json",
        "metrics.csv",
        "plot_data.json",
        "summary.json",
        "variation.csv",
    ]
    assert parse_run_config(json.loads((out / "config.json").read_text())) == cfg
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    summaries = [r for r in rows if r["row"] == "summary"]
    per_class = [r for r in rows if r["row"] == "class"]
    assert len(summaries) == 2 and len(per_class) == 2 * 3
    assert {r["set"] for r in per_class} <= {"P_a", "N_a"}
    assert all(float(r["eps_c_layer"]) == pytest.approx(0.7 * float(r["eps_c"])) for r in per_class)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["tail_accuracy"] is not None
    plot = json.loads((out / "plot_data.json").read_text())
    assert {s["label"] for s in plot["series"]} == {"val_accuracy", "train_loss"}
    net = load_checkpoint(out / "checkpoint.npz")
    assert net.dims == [4, 8, 8, 3]


def test_repeated_train_overwrites_identically(tmp_path):
    path = write(tmp_path, "t.json", run_cfg(tmp_path, {"name": "ce"}))
    assert cli.main(["train", "--config", str(path)]) == 0
    out = tmp_path / "runs" / parse_config(path).run_id()
    first = (out / "checkpoint.npz").read_bytes()
    metrics = [r[:-1] for r in csv.reader(open(out / "metrics.csv"))]
    assert cli.main(["train", "--config", str(path)]) == 0
    assert (out / "checkpoint.npz").read_bytes() == first
    # every column except the wall clock is reproduced
    assert [r[:-1] for r in csv.reader(open(out / "metrics.csv"))] == metrics


def test_bad_config_exit_code(tmp_path, capsys):
    path = write(tmp_path, "bad.json", {"method": {"name": "lpa", "epsilon": -1}})
    assert cli.main(["train", "--config", str(path)]) == 2
    assert "method.epsilon" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    assert cli.main(["bogus"]) == 2


def test_runtime_failure_leaves_marker(tmp_path, monkeypatch):
    path = write(tmp_path, "t.json", run_cfg(tmp_path, {"name": "ce"}))

    def explode(*args, **kwargs):
        raise RuntimeError("boom")

    monkeypatch.setattr(cli, "train", explode)
    assert cli.main(["train", "--config", str(path)]) == 3
    out = tmp_path / "runs" / parse_config(path).run_id()
    assert (out / "FAILED").exists()
    assert not (out / "metrics.csv").exists()


def test_compare_writes_summary(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("LPA_LAB_THREADS", "1")
    obj = {
        "output_dir": str(tmp_path / "runs"),
        "dataset": TINY_LT,
        "train": TINY_TRAIN,
        "methods": {"ce": {"name": "ce"}, "lpa": {"name": "lpa", "mode": "longtail"}},
        "seeds": [0],
    }
    assert cli.main(["compare", "--config", str(write(tmp_path, "c.json", obj))]) == 0
    summary = next((tmp_path / "runs").glob("compare-*/summary.csv"))
    rows = list(csv.DictReader(open(summary)))
    assert [r["method"] for r in rows] == ["ce", "lpa"]
    assert all(float(r["accuracy_std"]) == 0 for r in rows)
    assert all(r["tail_accuracy_mean"] != "" for r in rows)


def test_compare_with_one_method_rejected(tmp_path):
    obj = {"methods": {"ce": {"name": "ce"}}, "seeds": [0]}
    assert cli.main(["compare", "--config", str(write(tmp_path, "c.json", obj))]) == 2


def test_worker_cap_reads_environment(monkeypatch):
    monkeypatch.setenv("LPA_LAB_THREADS", "2")
    assert cli._workers(10) == 2
    assert cli._workers(1) == 1
    monkeypatch.setenv("LPA_LAB_THREADS", "0")
    assert cli._workers(5) == 1
    monkeypatch.setenv("LPA_LAB_THREADS", "many")
    with pytest.raises(ConfigError):
        cli._workers(5)


def test_layer_scan_table(tmp_path):
    path = write(tmp_path, "s.json", run_cfg(tmp_path, {"name": "lpa", "epsilon": 0.2}))
    assert cli.main(["layer-scan", "--config", str(path), "--layers", "1,2,3"]) == 0
    table = next((tmp_path / "runs").glob("layer-scan-*/layer_scan.csv"))
    assert [int(r["layer"]) for r in csv.DictReader(open(table))] == [1, 2, 3]
    assert (table.parent / "plot_data.json").exists()
    assert cli.main(["layer-scan", "--config", str(path), "--layers", "9"]) == 2
    assert cli.main(["layer-scan", "--config", str(path), "--layers", "a,b"]) == 2
    ce = write(tmp_path, "ce.json", run_cfg(tmp_path, {"name": "ce"}))
    assert cli.main(["layer-scan", "--config", str(ce), "--layers", "1"]) == 2


@pytest.fixture
def saved_run(tmp_path):
    path = write(tmp_path, "t.json", run_cfg(tmp_path, {"name": "ce"}))
    assert cli.main(["train", "--config", str(path)]) == 0
    ckpt = tmp_path / "runs" / parse_config(path).run_id() / "checkpoint.npz"
    data = save_csv(make_splits(parse_config(path).dataset).val, tmp_path / "val.csv")
    return ckpt, data


def test_analyze_all_probes(tmp_path, saved_run):
    ckpt, data = saved_run
    out = tmp_path / "report"
    args = ["analyze", "--checkpoint", str(ckpt), "--dataset", str(data), "--output", str(out), "--trials", "20"]
    assert cli.main(args + ["--probes", "variation,amplification,sharpness"]) == 0
    amp = list(csv.DictReader(open(out / "amplification.csv")))
    assert [int(r["layer"]) for r in amp] == [1, 2, 3]
    assert all(r["within_bound"] == "True" for r in amp)
    assert (out / "variation.csv").exists() and (out / "sharpness.csv").exists()
    method = write(tmp_path, "m.json", {"name": "lpl", "epsilon": 0.2})
    assert cli.main(args + ["--probes", "variation", "--method", str(method)]) == 0


def test_analyze_rejections(tmp_path, saved_run):
    ckpt, data = saved_run
    base = ["analyze", "--checkpoint", str(ckpt), "--dataset", str(data)]
    assert cli.main(base + ["--probes", ""]) == 2
    assert cli.main(base + ["--probes", "telepathy"]) == 2
    assert cli.main(["analyze", "--checkpoint", str(tmp_path / "x.npz"), "--dataset", str(data), "--probes", "sharpness"]) == 2
    wide = save_csv(make_splits(DatasetSpec(n_classes=3, n_features=6, n_max=10)).val, tmp_path / "wide.csv")
    assert cli.main(["analyze", "--checkpoint", str(ckpt), "--dataset", str(wide), "--probes", "sharpness"]) == 2
    ce = write(tmp_path, "m.json", {"name": "ce"})
    assert cli.main(base + ["--probes", "variation", "--method", str(ce)]) == 2


def test_tail_classes_are_rarest():
    assert cli.tail_classes(np.array([50, 20, 8, 3, 1])) == [2, 3, 4]
