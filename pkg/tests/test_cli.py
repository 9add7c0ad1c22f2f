import json
import os

import numpy as np
import pytest

from daistab.cli import main
from daistab.config import (ConfigParseError, ConfigSchemaError, MissingDataError, PhysicsError, config_from_dict,
                            config_to_dict, load_config, preset_path, write_config)


def _filled_doc():
    return {
        "name": "three-bus",
        "network": {
            "M": [2.0, 3.0, 2.5], "D": [1.0, 1.2, 0.9], "V": [1.0, 1.0, 1.0], "Pd": [0.3, -0.1, -0.2],
            "G": [0.0, 0.0, 0.0], "wd": 0.0, "lines": [[1, 2, -2.0], [2, 3, -1.5], [1, 3, -1.0]],
        },
        "comm": {"n": 3, "topologies": [[[1, 2], [2, 3], [1, 3]], [[1, 2], [2, 3]]], "channel_model": "undirected",
                 "A": [1.0, 1.5, 0.8], "Kcal": [1.0, 1.0, 1.0], "kappa": 0.3},
        "delays": {"h": 0.3, "Ts": 0.002},
        "sim": {"dt": 0.002, "t_end": 120.0, "trials": 3, "seed": 1, "window": 5.0, "tol_kappa": 0.5},
        "certify": {"tol_kappa": 0.05},
        "operating_points": {"shifted": [0.1, 0.0, -0.1]},
    }


@pytest.fixture
def filled(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(_filled_doc(), indent=2))
    return path


def test_preset_loads_and_round_trips(tmp_path):
    cfg = load_config(preset_path("kundur"))
    assert cfg.comm.n == 4 and len(cfg.comm.topologies) == 4
    assert cfg.topology_set().n_channels == 4
    assert np.allclose(cfg.damping(), 1 / (0.05 * 2 * np.pi * 60) * np.array([700, 700, 719, 700]) / 900)
    assert not cfg.has_electrical_data()
    with pytest.raises(MissingDataError):
        cfg.power_network()
    out = tmp_path / "copy.json"
    write_config(cfg, out)
    assert config_to_dict(load_config(out)) == config_to_dict(cfg)


def test_config_errors_carry_kind_and_location(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"comm": {"n": 3,\n  "topologies": [}')
    with pytest.raises(ConfigParseError) as exc:
        load_config(bad)
    assert exc.value.line == 2
    doc = _filled_doc()
    doc["comm"]["n"] = "three"
    with pytest.raises(ConfigSchemaError, match="comm/n"):
        config_from_dict(doc)
    doc = _filled_doc()
    doc["comm"]["A"] = [1.0, -1.0, 1.0]
    with pytest.raises(PhysicsError, match="comm.A"):
        config_from_dict(doc)
    doc = _filled_doc()
    doc["comm"]["topologies"][1] = [[1, 2]]
    with pytest.raises(PhysicsError, match="connected"):
        config_from_dict(doc)
    doc = _filled_doc()
    doc["delays"]["h"] = [0.3, 0.3]
    with pytest.raises(PhysicsError, match="channels"):
        config_from_dict(doc)


@pytest.mark.parametrize("mutate, code", [
    (lambda text: text.replace('"n": 3', '"n": 3,,'), 3),
    (lambda text: text.replace('"n": 3', '"n": 1'), 4),
    (lambda text: text.replace('"A": [\n      1.0', '"A": [\n      -1.0'), 5),
])
def test_exit_codes_for_bad_configs(tmp_path, filled, mutate, code):
    path = tmp_path / "m.json"
    path.write_text(mutate(filled.read_text()))
    assert main(["certify", "--config", str(path)]) == code


def test_certify_preset_exit_codes(tmp_path, capsys):
    out = tmp_path / "w.json"
    assert main(["certify", "--config", "@kundur", "--kappa", "1.544", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["status"] == "feasible"
    assert main(["certify", "--config", "@kundur", "--kappa", "2.0"]) == 1
    assert "status=infeasible" in capsys.readouterr().out


def test_simulate_needs_electrical_data():
    assert main(["simulate", "--config", "@kundur"]) == 2


def test_simulate_writes_identical_csv_for_equal_seeds(tmp_path, filled):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["simulate", "--config", str(filled), "--seed", "4", "--out", str(a)]) == 0
    assert main(["simulate", "--config", str(filled), "--seed", "4", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = a.read_text().splitlines()
    assert rows[0].startswith("t,theta_1") and len(rows) > 10


def test_simulate_at_named_operating_point(tmp_path, filled):
    assert main(["simulate", "--config", str(filled), "--operating-point", "shifted",
                 "--out", str(tmp_path / "s.csv")]) == 0
    assert main(["simulate", "--config", str(filled), "--operating-point", "missing"]) == 2


def test_validate_nominal_reports_decrease(tmp_path, filled):
    out = tmp_path / "report.json"
    assert main(["validate-nominal", "--config", str(filled), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["hessian_min_eig"] > 0 and report["vdot_min_eig"] > 0
    assert len(report["trajectories"]) == 5 and all(t["decreasing"] for t in report["trajectories"])


def test_search_gain_on_filled_config(tmp_path, filled):
    out = tmp_path / "s.json"
    assert main(["search-gain", "--config", str(filled), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["kappa_feas"] > 0 and doc["bracket"][1] - doc["bracket"][0] <= 0.05
    assert main(["certify", "--config", str(filled), "--kappa", str(doc["kappa_feas"])]) == 0


def test_negative_inertia_is_a_physics_error(tmp_path):
    doc = _filled_doc()
    doc["network"]["M"][1] = -3.0
    path = tmp_path / "neg.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(PhysicsError, match="M"):
        load_config(path)
    assert main(["validate-nominal", "--config", str(path)]) == 5


def test_certify_runs_without_electrical_data():
    cfg = load_config(preset_path("kundur"))
    assert cfg.network.lines is None
    assert np.allclose(cfg.comm.A, np.array([700, 700, 719, 700]) / 900)
    assert cfg.certify_setup().check(1.0).feasible


@pytest.mark.skipif(not os.environ.get("DAI_KUNDUR_DATA"), reason="needs DAI_KUNDUR_DATA with electrical data")
def test_kundur_simulation_converges_at_certified_gain(tmp_path):
    assert main(["simulate", "--config", os.environ["DAI_KUNDUR_DATA"], "--kappa", "1.544", "--seed", "7",
                 "--out", str(tmp_path / "k.csv")]) == 0
