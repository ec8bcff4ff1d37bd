import json

import pytest

from deltaplug import cli
from deltaplug.modtree import ParameterSnapshot


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_vis(capsys):
    code, out, _ = run(capsys, "vis", "--model", "A")
    assert code == 0 and "layer.[0-1]" in out
    code, out, _ = run(capsys, "vis", "--model", "A", "--delta", "lora")
    assert code == 0 and "query [d]" in out and "value [d]" in out


def test_bad_model_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["vis", "--model", "C"])
    assert e.value.code == 2


def test_runtime_failure_exit_code(capsys, tmp_path):
    code, _, err = run(capsys, "count", "--delta", str(tmp_path / "nope.json"))
    assert code == 1 and "error" in err


def count(capsys, *extra):
    code, out, _ = run(capsys, "count", "--json", *extra)
    assert code == 0
    return json.loads(out)


def test_count_values(capsys):
    rep = count(capsys, "--delta", "lora")
    assert rep["delta_params"] == 2 * 2 * (32 * 4 + 4 * 32) == 1024
    assert rep["total_params"] == 20834
    assert rep["ratio"] == pytest.approx(1024 / 20834)
    assert count(capsys, "--delta", "none")["delta_params"] == 0
    bitfit = count(capsys, "--delta", "bitfit")
    # biases of q,k,v,proj,w1,w2 plus both residual layer-norm vectors of each layer
    assert bitfit["delta_params"] == 2 * (4 * 32 + 64 + 32 + 2 * 32)


def test_count_accepts_config_file(capsys, tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"delta_type": "lora", "modified_modules": ["output.dense", "query"],
                             "hyperparams": {"rank": 2}}))
    rep = count(capsys, "--delta", str(p))
    assert rep["delta_params"] == 2 * (2 * (32 * 2 + 2 * 32) + (64 * 2 + 2 * 32))


def train(tmp_path, name, *extra):
    out = tmp_path / name
    code = cli.main(["train", "--steps", "20", "--out", str(out), *extra])
    assert code == 0
    return out, json.loads((out / "report.json").read_text())


def test_train_report_and_reproducibility(tmp_path, capsys):
    d1, r1 = train(tmp_path, "a", "--delta", "bitfit", "--task", "majority")
    d2, r2 = train(tmp_path, "b", "--delta", "bitfit", "--task", "majority")
    for key in ("task", "steps", "lr", "seed", "losses", "train_acc", "test_acc",
                "total_params", "delta_params", "ratio"):
        assert key in r1
    r1.pop("wall_time"), r2.pop("wall_time")
    assert r1 == r2
    assert r1["delta_params"] == 576
    assert (d1 / "delta.bin").read_bytes() == (d2 / "delta.bin").read_bytes()
    snap = ParameterSnapshot.load(d1 / "delta.bin")
    assert "classifier.weight" in snap and "classifier.bias" in snap


def test_train_none_and_full(tmp_path, capsys):
    d, r = train(tmp_path, "none", "--delta", "none")
    assert r["delta_params"] == 0
    assert ParameterSnapshot.load(d / "trainable.bin").keys() == ["classifier.bias", "classifier.weight"]
    d, r = train(tmp_path, "full", "--delta", "full")
    assert ParameterSnapshot.load(d / "trainable.bin").num_floats == 20834


def test_train_divergence_exits_nonzero(tmp_path, capsys):
    code = cli.main(["train", "--delta", "lora", "--steps", "50", "--lr", "1e308"])
    assert code == 1
    assert "diverged" in capsys.readouterr().err


def test_multitask(tmp_path, capsys):
    dirs = []
    for task in ("parity", "majority", "first-token"):
        d, _ = train(tmp_path, task, "--delta", "bitfit", "--task", task)
        dirs.append(str(d))
    inputs = tmp_path / "in.json"
    inputs.write_text(json.dumps([[1, 4, 5, 4], [1, 5, 5, 4], [1, 4, 4, 4]]))
    capsys.readouterr()
    argv = ["multitask", "--inputs", str(inputs)]
    for d in dirs + [dirs[0]]:
        argv += ["--delta-dir", d]
    code, out, _ = run(capsys, *argv)
    assert code == 0
    rows = [json.loads(l) for l in out.splitlines()]
    assert len(rows) == 3 * 4
    for i in range(3):
        preds = [r["prediction"] for r in rows if r["input"] == i]
        assert preds[0] == preds[3]


def test_multitask_needs_two_dirs(tmp_path, capsys):
    d, _ = train(tmp_path, "only", "--delta", "bitfit")
    inputs = tmp_path / "in.json"
    inputs.write_text("[[1, 4]]")
    code, _, err = run(capsys, "multitask", "--inputs", str(inputs), "--delta-dir", str(d))
    assert code == 1


def test_multitask_incompatible_checkpoint(tmp_path, capsys):
    d1, _ = train(tmp_path, "small", "--delta", "bitfit")
    d2, _ = train(tmp_path, "wide", "--delta", "bitfit", "--d-model", "16")
    inputs = tmp_path / "in.json"
    inputs.write_text("[[1, 4]]")
    code, _, err = run(capsys, "multitask", "--inputs", str(inputs), "--delta-dir", str(d1), "--delta-dir", str(d2))
    assert code == 1 and "shape" in err
