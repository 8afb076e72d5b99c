import json
import statistics

import numpy as np
import pytest

from dltta.cli import main
from dltta.config import REQUIRED_KEYS, RunConfig, from_mapping, parse_config
from dltta.csvio import (ColumnError, TELEMETRY_SCHEMA, SWEEP_SUMMARY_SCHEMA, read_table, write_table)
from dltta.engine import StepTelemetry
from dltta.errors import ConfigError, FormatError
from dltta.experiments import batch_checksum, grid_std, order_study, retrieval_sweep, sweep_lr
from dltta.metrics import compute_metrics, loss_smoothness
from dltta.plots import emit_plots

SMALL = """\
seed=0
alpha=0.5
batch_size=8
retrieval_size=12
capacity_steps=4
train_samples=400
train_epochs=3
train_lr=0.5
n_segments=2
segment_length=10
seeds=0,1
lr_multipliers=0.5,1
d_values=4,40
n_orders=2
"""


@pytest.fixture
def small_cfg():
    return parse_config(SMALL)


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.cfg"
    path.write_text(SMALL)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, cfg_file):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--config", str(cfg_file), "--out", str(out)]) == 0
    return out / "model.bin"


# -- config ------------------------------------------------------------------

def test_config_round_trip():
    cfg = RunConfig(alpha=0.25, seeds=(3, 4), hidden=(8,))
    again = parse_config(cfg.dumps())
    assert again == cfg


def test_alpha_defaults_to_train_lr():
    cfg = RunConfig(train_lr=0.7)
    assert cfg.base_alpha == 0.7 and cfg.to_dict()["alpha"] == 0.7
    assert cfg.adapt_config().alpha == 0.7


def test_config_unknown_key():
    with pytest.raises(ConfigError) as exc:
        parse_config(SMALL + "learning_rate=3\n")
    assert exc.value.key == "learning_rate"


@pytest.mark.parametrize("key", REQUIRED_KEYS)
def test_config_missing_required(key):
    text = "\n".join(l for l in SMALL.splitlines() if not l.startswith(key + "="))
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.key == key and key in str(exc.value)


def test_config_bad_values():
    with pytest.raises(ConfigError) as exc:
        from_mapping({"method": "adam"})
    assert exc.value.key == "method"
    with pytest.raises(ConfigError):
        from_mapping({"batch_size": "many"})
    with pytest.raises(ConfigError):
        parse_config("seed\n", required=())
    with pytest.raises(ConfigError):
        parse_config("seed=1\nseed=2\n", required=())


def test_stream_length(small_cfg):
    assert small_cfg.stream_length == 20
    assert len(small_cfg.make_stream()) == 20
    assert small_cfg.replace(horizon=5).stream_length == 5


# -- metrics and tables ---------------------------------------------------------

def _rec(i, tag, pred, loss=0.0, lr=0.1):
    pred = np.array(pred)
    return StepTelemetry(i, -1.0, lr, loss, pred, np.eye(3)[pred], 0, tag)


def test_metrics():
    tel = [_rec(i, "a" if i < 5 else "b", [0, 1], loss=float(i % 2), lr=0.1 * i) for i in range(10)]
    labels = np.array([[0, 1]] * 5 + [[0, 0]] * 5)
    m = compute_metrics(tel, labels)
    assert m.streaming_accuracy == 15 / 20
    assert m.per_segment_accuracy == {"a": 1.0, "b": 0.5}
    assert m.final_accuracy == 0.5
    assert m.loss_smoothness == 1.0
    assert m.lr_trace_summary["max"] == pytest.approx(0.9)
    assert loss_smoothness([3.0]) == 0.0
    assert loss_smoothness([1.0, 3.0, 2.0]) == 1.5


def test_grid_std_matches_statistics():
    vals = [0.81, 0.84, 0.79, 0.9]
    mean = sum(vals) / 4
    assert grid_std(vals) == pytest.approx((sum((v - mean) ** 2 for v in vals) / 3) ** 0.5, rel=1e-12)
    assert grid_std([0.5]) == 0.0


def test_table_round_trip_and_drift(tmp_path):
    path = tmp_path / "t.csv"
    write_table(path, SWEEP_SUMMARY_SCHEMA, [dict(method="fixed", alpha=0.1, mean_final_accuracy=0.5,
                                                  std_across_grid=0.01)])
    assert read_table(path) == [dict(method="fixed", alpha="0.1", mean_final_accuracy="0.5", std_across_grid="0.01")]
    text = path.read_text().replace("std_across_grid", "std")
    path.write_text(text)
    with pytest.raises(ColumnError) as exc:
        read_table(path)
    assert exc.value.column == "std_across_grid"
    path.write_text(text.replace("sweep_lr_summary/1", "sweep_lr_summary/2"))
    with pytest.raises(FormatError):
        read_table(path)
    path.write_text("a,b\n1,2\n")
    with pytest.raises(FormatError):
        read_table(path)


# -- experiment drivers ------------------------------------------------------------

def test_sweep_single_cell(small_cfg, source_model):
    rows, summary = sweep_lr(source_model, small_cfg, multipliers=(1.0,), seeds=(0,))
    assert sorted(r["method"] for r in rows) == ["dltta", "fixed"]
    assert all(s["std_across_grid"] == 0.0 for s in summary)


def test_sweep_summary_recomputed(small_cfg, source_model):
    rows, summary = sweep_lr(source_model, small_cfg)
    for method in ("fixed", "dltta"):
        means = []
        for k in small_cfg.lr_multipliers:
            vals = [r["final_accuracy"] for r in rows if r["method"] == method and r["alpha"] == 0.5 * k]
            means.append(sum(vals) / len(vals))
        std = statistics.stdev(means)
        assert all(s["std_across_grid"] == pytest.approx(std, abs=1e-15) for s in summary if s["method"] == method)


def test_order_study(small_cfg, source_model):
    rows = order_study(source_model, small_cfg, order_seeds=(3, 3))
    assert rows[0]["final_accuracy"] == rows[1]["final_accuracy"]
    rows = order_study(source_model, small_cfg)
    assert rows[0]["batch_checksum"] == rows[1]["batch_checksum"] == batch_checksum(small_cfg.make_stream())


def test_retrieval_sweep_caps_d(small_cfg, source_model):
    rows = retrieval_sweep(source_model, small_cfg, d_values=(500,), seeds=(0,))
    assert len(rows) == 1 and rows[0]["n_seeds"] == 1
    assert 0.0 <= rows[0]["mean_final_accuracy"] <= 1.0


def test_parallel_cells_match_serial(small_cfg, source_model):
    a, _ = sweep_lr(source_model, small_cfg, jobs=1)
    b, _ = sweep_lr(source_model, small_cfg, jobs=2)
    assert a == b


# -- plots ------------------------------------------------------------------------

def test_emit_plots(tmp_path):
    paths = []
    for method in ("fixed", "dltta"):
        p = tmp_path / f"{method}.csv"
        write_table(p, TELEMETRY_SCHEMA, [dict(step=0, method=method, severity="0.1", discrepancy=-1.0,
                                               applied_lr=0.1, tta_loss=0.5, correct_count=3, bank_size=0)])
        paths.append(p)
    out = tmp_path / "plots"
    [script] = emit_plots(paths, out)
    text = open(script).read()
    assert str(paths[0]) in text and str(paths[1]) in text
    compile(text, script, "exec")
    emit_plots(paths, out)
    assert open(script).read() == text


def test_emit_plots_missing_column(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("# schema: telemetry/1\nstep,method\n0,fixed\n")
    with pytest.raises(ColumnError) as exc:
        emit_plots([p], tmp_path)
    assert exc.value.column == "severity"


# -- command line ---------------------------------------------------------------------

def test_cli_train(trained, tmp_path, cfg_file):
    out = tmp_path / "again"
    assert main(["train", "--config", str(cfg_file), "--out", str(out)]) == 0
    assert (out / "model.bin").read_bytes() == trained.read_bytes()
    metrics = json.loads((trained.parent / "train_metrics.json").read_text())
    assert metrics["validation_accuracy"] >= 0.97
    manifest = json.loads((trained.parent / "manifest.json").read_text())
    assert manifest["command"] == "train" and "model.bin" in manifest["outputs"]


def test_cli_missing_key(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(SMALL.replace("capacity_steps=4\n", ""))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "capacity_steps" in capsys.readouterr().err


def test_cli_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(SMALL + "momentum_typo=1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "momentum_typo" in capsys.readouterr().err


def test_cli_unknown_method(trained, cfg_file, tmp_path, capsys):
    code = main(["adapt", "--config", str(cfg_file), "--model", str(trained), "--method", "tent",
                 "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert all(m in err for m in ("none", "ptbn", "fixed", "dltta"))


def test_cli_bad_model_file(cfg_file, tmp_path):
    bad = tmp_path / "m.bin"
    bad.write_bytes(b"not a model")
    assert main(["adapt", "--config", str(cfg_file), "--model", str(bad), "--out", str(tmp_path / "o")]) == 3


def _adapt(method, trained, cfg_file, out):
    assert main(["adapt", "--config", str(cfg_file), "--model", str(trained), "--method", method,
                 "--out", str(out)]) == 0
    return read_table(out / "telemetry.csv")


def test_cli_adapt_columns(trained, cfg_file, tmp_path):
    none = _adapt("none", trained, cfg_file, tmp_path / "none")
    assert all(float(r["applied_lr"]) == 0.0 for r in none)
    dltta = _adapt("dltta", trained, cfg_file, tmp_path / "dltta")
    fixed = _adapt("fixed", trained, cfg_file, tmp_path / "fixed")
    for r in dltta:
        if int(r["bank_size"]) < 12:
            assert float(r["applied_lr"]) == 0.5
    assert [r["severity"] for r in dltta] == [r["severity"] for r in fixed]
    assert [r["applied_lr"] for r in dltta] != [r["applied_lr"] for r in fixed]
    metrics = json.loads((tmp_path / "dltta" / "metrics.json").read_text())
    assert metrics["flagged"] is False and 0 <= metrics["final_accuracy"] <= 1


@pytest.mark.parametrize("command", ["adapt", "compare", "sweep-lr", "order-study", "retrieval-sweep"])
def test_cli_replay_is_byte_identical(command, trained, cfg_file, tmp_path):
    first = tmp_path / "first"
    assert main([command, "--config", str(cfg_file), "--model", str(trained), "--out", str(first)]) == 0
    second = tmp_path / "second"
    assert main(["replay", str(first / "manifest.json"), "--out", str(second)]) == 0
    m1 = json.loads((first / "manifest.json").read_text())
    m2 = json.loads((second / "manifest.json").read_text())
    assert m1["outputs"] == m2["outputs"]
    for name in m1["outputs"]:
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_cli_trains_when_model_missing(cfg_file, tmp_path):
    assert main(["adapt", "--config", str(cfg_file), "--out", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["inputs"]["model"]["path"] is None


def test_cli_init_config_and_emit_plots(tmp_path, trained, cfg_file):
    cfg = tmp_path / "default.cfg"
    assert main(["init-config", "--out", str(cfg)]) == 0
    assert parse_config(cfg.read_text()) == RunConfig(alpha=RunConfig().base_alpha)
    _adapt("fixed", trained, cfg_file, tmp_path / "run")
    assert main(["emit-plots", str(tmp_path / "run" / "telemetry.csv"), "--out", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "loss_curves.py").exists()


def test_cli_seed_override(trained, cfg_file, tmp_path):
    a = _adapt("fixed", trained, cfg_file, tmp_path / "a")
    assert main(["adapt", "--config", str(cfg_file), "--model", str(trained), "--method", "fixed",
                 "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    b = read_table(tmp_path / "b" / "telemetry.csv")
    assert a != b
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["config"]["seed"] == 7
