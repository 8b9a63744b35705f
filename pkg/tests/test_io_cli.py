import csv
import json
import re
from pathlib import Path

import pytest

from mftlab.cli import EXIT_INVALID, EXIT_OK, EXIT_PARSE, main
from mftlab.io import ConfigError, ExperimentConfig, fmt, load_config, run_id

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _cfg(name, tmp_path, **over):
    doc = json.loads((CONFIGS / name).read_text())
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(doc.get(k), dict):
            doc[k].update(v)
        else:
            doc[k] = v
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    return p


def _summary(out):
    return json.loads((Path(out) / "summary.json").read_text())


def test_shipped_configs_parse():
    for p in sorted(CONFIGS.glob("*.json")):
        cfg = load_config(p)
        assert cfg.model_spec() is not None


def test_config_round_trip_through_summary(tmp_path):
    p = _cfg("solve_cc.json", tmp_path, grid={"T": 1.0, "steps": 10}, monte_carlo={"paths": 500})
    out = tmp_path / "out"
    assert main(["run", str(p), "--out", str(out)]) == EXIT_OK
    s = _summary(out)
    cfg = ExperimentConfig.from_dict(s["config"])
    assert cfg.to_dict() == s["config"]
    assert run_id(cfg) == s["run_id"]
    assert s["status"] == "ok"


def test_unknown_keys_rejected():
    doc = json.loads((CONFIGS / "solve_cc.json").read_text())
    doc["colour"] = "blue"
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)
    doc.pop("colour")
    doc["solver"]["damping"] = 1.5
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


def test_bad_masses_reported(tmp_path):
    doc = json.loads((CONFIGS / "equivalence.json").read_text())
    doc["model"]["diversity"]["masses"] = [0.5, 0.7]
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    out = tmp_path / "out"
    code = main(["run", str(p), "--out", str(out)])
    assert code != EXIT_OK
    s = _summary(out)
    assert s["status"] == "error"
    assert s["error"]["violations"]
    assert "mass" in json.dumps(s["error"]).lower()


def test_malformed_json_is_parse_error(tmp_path, capsys):
    p = tmp_path / "broken.json"
    p.write_text("{\"experiment\": ")
    out = tmp_path / "out"
    assert main(["run", str(p), "--out", str(out)]) == EXIT_PARSE
    assert _summary(out)["error"]["kind"] == "parse"
    doc = json.loads((CONFIGS / "solve_cc.json").read_text())
    doc.pop("experiment")
    p.write_text(json.dumps(doc))
    assert main(["describe", str(p)]) == EXIT_PARSE
    assert "experiment" in capsys.readouterr().err


def test_describe_lists_agent_paths(tmp_path, capsys):
    p = _cfg("gap_vs_n.json", tmp_path)
    assert main(["describe", str(p)]) == EXIT_OK
    text = capsys.readouterr().out
    cfg = load_config(p)
    for N in cfg.sweep:
        assert re.search(rf"N={N}: .* = {N * cfg.replications} agent paths", text)
    assert "memory" in text


def test_zero_weight_converges_fast(tmp_path):
    doc = json.loads((CONFIGS / "solve_cc.json").read_text())
    co = doc["model"]["coefficients"]
    co.update(Q=0.0, H=0.0, F=0.0, F_tilde=0.0)
    doc["grid"]["steps"] = 10
    doc["monte_carlo"]["paths"] = 500
    p = tmp_path / "q0.json"
    p.write_text(json.dumps(doc))
    out = tmp_path / "out"
    assert main(["run", str(p), "--out", str(out)]) == EXIT_OK
    assert _summary(out)["solver"]["iterations"] <= 2


def test_gap_sweep_rows(tmp_path):
    p = _cfg(
        "gap_vs_n.json",
        tmp_path,
        sweep=[2, 4, 8],
        grid={"T": 1.0, "steps": 20},
        monte_carlo={"paths": 4000, "replications": 2000},
        options={"frozen_agents": 2**18},
    )
    out = tmp_path / "out"
    assert main(["run", str(p), "--out", str(out), "--threads", "2"]) == EXIT_OK
    with open(out / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["N"]) for r in rows] == [2, 4, 8]
    gaps = [float(r["gap"]) for r in rows]
    assert gaps[0] >= gaps[1] >= gaps[2]


def test_seed_override_and_csv_format(tmp_path):
    p = _cfg("solve_cc.json", tmp_path, grid={"T": 1.0, "steps": 10}, monte_carlo={"paths": 400})
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["run", str(p), "--out", str(a)]) == EXIT_OK
    assert main(["run", str(p), "--out", str(b)]) == EXIT_OK
    assert main(["run", str(p), "--out", str(c), "--seed", "123"]) == EXIT_OK
    ta, tb, tc = ((d / "curves.csv").read_bytes() for d in (a, b, c))
    assert ta == tb and ta != tc
    assert _summary(c)["seed"] == 123
    assert b"\r" not in ta
    header, *body = ta.decode().splitlines()
    assert "," in header and body
    assert all(len(line.split(",")) == len(header.split(",")) for line in body)
    assert "elapsed" not in ta.decode()


def test_fmt():
    assert fmt(0.1) == "0.10000000000000001"
    assert fmt(3) == "3" and fmt(True) == "true" and fmt(None) == ""
    assert fmt(float("nan")) == "nan" and fmt(float("-inf")) == "-inf"
    assert float(fmt(1 / 3)) == 1 / 3


def test_model_error_exit(tmp_path):
    doc = json.loads((CONFIGS / "solve_cc.json").read_text())
    doc["model"]["T"] = 2.0
    p = tmp_path / "t.json"
    p.write_text(json.dumps(doc))
    out = tmp_path / "out"
    assert main(["run", str(p), "--out", str(out)]) == EXIT_INVALID
    assert _summary(out)["status"] == "error"


def test_bad_option_is_parse_error(tmp_path):
    p = _cfg("solve_cc.json", tmp_path, options={"y2_coupling": "sideways"})
    out = tmp_path / "out"
    assert main(["run", str(p), "--out", str(out)]) == EXIT_PARSE
    s = _summary(out)
    assert s["error"]["kind"] == "parse" and "y2_coupling" in s["error"]["message"]
    p = _cfg("equivalence.json", tmp_path, options={"control": [1.0, 2.0, 3.0]})
    assert main(["run", str(p), "--out", str(out)]) == EXIT_PARSE
