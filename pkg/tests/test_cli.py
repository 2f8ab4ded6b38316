import json
from pathlib import Path

import pytest
import yaml

from pwapass.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write_config(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return str(p)


def load(name):
    return yaml.safe_load((CONFIGS / name).read_text())


def test_approximate_example_partition(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["approximate", "--config", str(CONFIGS / "theorem2_reduced.yaml"),
                 "--out-dir", str(out)])
    assert code == 0
    report = json.loads((out / "approximation.json").read_text())
    assert len(report["cells"]) == 26
    assert all(c["eps"] > 0 for c in report["cells"])
    assert all(c["delta"] == 0 for c in report["cells"])
    text = (out / "approximation.txt").read_text()
    assert text == capsys.readouterr().out


def test_approximate_linear_system(tmp_path):
    out = tmp_path / "out"
    assert main(["approximate", "--config", str(CONFIGS / "linear_check.yaml"),
                 "--out-dir", str(out)]) == 0
    report = json.loads((out / "approximation.json").read_text())
    assert all(c["eps"] == 0 and c["delta"] == 0 for c in report["cells"])


def test_malformed_expression_exits_2(tmp_path, capsys):
    data = load("linear_check.yaml")
    data["system"]["f"] = ["0.5*x1 + * 2"]
    code = main(["approximate", "--config", write_config(tmp_path, data),
                 "--out-dir", str(tmp_path / "o")])
    assert code == 2
    err = capsys.readouterr().err
    assert "offset 9" in err or "column 10" in err


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d.pop("partition"), "partition"),
    (lambda d: d["synthesis"].update(mode="bogus"), "mode"),
    (lambda d: d["simulation"].update(x0=[5.0]), "outside"),
    (lambda d: d.update(extra=1), "unknown keys"),
    (lambda d: d["system"].update(B1=[[1, 2]]), "system"),
])
def test_config_errors_exit_2(tmp_path, capsys, mutate, message):
    data = load("linear_check.yaml")
    mutate(data)
    code = main(["run", "--config", write_config(tmp_path, data), "--out-dir", str(tmp_path / "o")])
    assert code == 2
    assert message in capsys.readouterr().err


def test_missing_file_and_usage(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.yaml")]) == 2
    assert main(["frobnicate"]) == 2


def test_networked_without_channel(tmp_path):
    data = load("theorem2_reduced.yaml")
    data["synthesis"]["mode"] = "netpassify"
    assert main(["run", "--config", write_config(tmp_path, data),
                 "--out-dir", str(tmp_path / "o")]) == 2


def test_check_run_exit_0(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(CONFIGS / "linear_check.yaml"),
                 "--out-dir", str(out)]) == 0
    cert = json.loads((out / "certificate.json").read_text())
    assert cert["certified"] and cert["kind"] == "theorem1"
    assert (out / "trace.csv").exists()
    svg = (out / "dissipation.svg").read_text()
    assert svg.startswith("<svg") and "polyline" in svg


def test_obstruction_exit_1(tmp_path):
    data = load("linear_check.yaml")
    data["system"].update(f=["x1"], h=["x1"], D2=[[0]])
    data.pop("simulation")
    assert main(["check-passivity", "--config", write_config(tmp_path, data),
                 "--out-dir", str(tmp_path / "o")]) == 1


def test_coarse_failure_names_cell(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(CONFIGS / "coarse_failure.yaml"),
                 "--out-dir", str(out)]) == 1
    assert "refinement limit reached" in capsys.readouterr().out
    cert = json.loads((out / "certificate.json").read_text())
    assert cert["certified"] is False and cert["cell"] == 0


@pytest.mark.slow
def test_theorem2_run_and_reproducible_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cfg = str(CONFIGS / "theorem2_reduced.yaml")
    assert main(["run", "--config", cfg, "--out-dir", str(a)]) == 0
    assert main(["run", "--config", cfg, "--out-dir", str(b)]) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == ["certificate.json", "dissipation.json", "dissipation.svg", "gains.json",
                     "trace.csv"]
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    gains = json.loads((a / "gains.json").read_text())
    assert len(gains["cells"]) == 26
    # simulate from the exported gains alone
    c = tmp_path / "c"
    assert main(["simulate", "--config", cfg, "--gains", str(a / "gains.json"),
                 "--out-dir", str(c)]) == 0
    assert (c / "trace.csv").read_bytes() == (a / "trace.csv").read_bytes()
