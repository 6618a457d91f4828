import json

import pytest

from quadranet import cli
from quadranet import train as T

TINY = {
    "network": {"base_channels": 4, "depths": [1, 0, 0, 0], "block": {"kind": "quadra", "kernel": 3, "expansion": 2},
                "num_classes": 4, "input_size": 32},
    "train": {"epochs": 2, "batch_size": 16, "lr": 0.003},
    "data": {"generator": "interaction", "n_train": 48, "n_val": 24, "seed": 1},
}


def write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return str(path)


def test_xor_default_succeeds_with_full_grid(capsys):
    assert cli.main(["xor", "--seed", "0", "--resolution", "11"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "# seed=0" and out[1] == "# quadratic_acc=1.0"
    assert out[3] == "x,y,value" and len(out) == 4 + 11 * 11


def test_xor_untrained_fails(capsys):
    assert cli.main(["xor", "--steps", "0"]) == 1


def test_count_preset_volume(capsys):
    assert cli.main(["count", "--preset", "quadranet36-t", "--input-size", "224"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert abs(doc["params"] - 23.6e6) / 23.6e6 < 0.15 and doc["seed"] == 0


def test_count_compare_ordering(capsys):
    assert cli.main(["count", "--compare", "--input-size", "14", "--channels", "64", "--bytes"]) == 0
    blocks = json.loads(capsys.readouterr().out)["blocks"]
    states = [blocks[k]["fwd_states_bytes"] for k in ("skip", "conv", "quadra", "attn")]
    assert states == sorted(states) and len(set(states)) == 4
    assert blocks["quadra"]["fwd_states_bytes"] == 8 * blocks["quadra"]["fwd_states"]
    assert cli.main(["count", "--compare", "--format", "table"]) == 0
    assert "quadra" in capsys.readouterr().out


def test_count_malformed_json(tmp_path, capsys):
    assert cli.main(["count", "--config", write(tmp_path, "{not json")]) == 2
    captured = capsys.readouterr()
    assert captured.out == "" and "error" in captured.err


def test_count_bad_key_reports_path(tmp_path, capsys):
    doc = {"network": {**TINY["network"], "block": {"kind": "quadra", "kernal": 3}}}
    assert cli.main(["count", "--config", write(tmp_path, doc)]) == 2
    assert "network.block.kernal" in capsys.readouterr().err
    assert cli.main(["count", "--config", write(tmp_path, {"netwrk": {}})]) == 2
    assert "netwrk" in capsys.readouterr().err


def test_train_evaluate_round_trip(tmp_path, capsys):
    cfg = write(tmp_path, TINY)
    assert cli.main(["train", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["train", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a.startswith(b"# seed=3\n")
    assert (tmp_path / "a" / "model.qnet").read_bytes() == (tmp_path / "b" / "model.qnet").read_bytes()
    capsys.readouterr()
    assert cli.main(["evaluate", str(tmp_path / "a" / "model.qnet")]) == 0
    out = capsys.readouterr().out
    val = float(out.split("val_acc=")[1])
    assert val == T.read_metrics_csv(a.decode())[-1]["val_acc"]
    assert "# seed=3" in out


def test_evaluate_missing_snapshot(tmp_path, capsys):
    assert cli.main(["evaluate", str(tmp_path / "nope.qnet")]) == 2


def test_search_infeasible_exit_3(tmp_path, capsys):
    assert cli.main(["search", "--config", write(tmp_path, {"network": TINY["network"]}), "--budget", "10"]) == 3
    assert "skeleton cost" in capsys.readouterr().err


def test_search_writes_result(tmp_path, capsys):
    doc = {"network": TINY["network"],
           "search": {"slots": [1, 0, 0, 0], "kernels": [3], "expansions": [2], "population": 2,
                      "generations": 1, "train_steps": 2, "n_train": 16, "n_val": 8}}
    assert cli.main(["search", "--config", write(tmp_path, doc), "--seed", "5", "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "search.json").read_text())
    assert res["seed"] == 5 and res["genome"] in ("s1.1=Q3x2", "s1.1=ID")


def test_gradcheck_seed_0(capsys):
    assert cli.main(["gradcheck", "--seed", "0", "--seeds", "1"]) == 0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert "failed=0" in last and float(last.split("max_relative_error=")[1].split()[0]) < 1e-5


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    out = capsys.readouterr().out
    for cmd in ("xor", "count", "train", "evaluate", "search", "gradcheck"):
        assert cmd in out
