"""Command line behavior: exit codes, config handling, artifacts, overrides."""

import json

import numpy as np
import pytest

from aqualoc.cli import main
from aqualoc.environment import load_dataset
from aqualoc.forward import load_checkpoint


def write_config(tmp_path, name, doc):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


# -- parser-level behavior -------------------------------------------------------


def test_unknown_subcommand_exits_2(capsys):
    assert main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_no_subcommand_exits_2(capsys):
    assert main([]) == 2


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for name in ("gen-data", "train", "localize", "sweep-snr", "sweep-mismatch",
                 "crlb", "verify-theorem", "selftest"):
        assert name in out


def test_invalid_json_config_exits_2_with_position(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"seed": 1,\n  "trials": }\n')
    assert main(["crlb", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "line 2" in err and "column" in err


def test_missing_config_file_exits_2(tmp_path, capsys):
    assert main(["crlb", "--config", str(tmp_path / "absent.json")]) == 2
    assert "config error" in capsys.readouterr().err


def test_non_object_config_exits_2(tmp_path, capsys):
    path = write_config(tmp_path, "arr.json", [1, 2, 3])
    assert main(["crlb", "--config", path]) == 2


def test_unknown_config_key_exits_2(tmp_path, capsys):
    path = write_config(tmp_path, "extra.json", {"snr_bd_list": [20.0]})
    assert main(["crlb", "--config", path]) == 2
    assert "unknown config keys" in capsys.readouterr().err


# -- crlb ---------------------------------------------------------------------------


def test_crlb_prints_table(tmp_path, capsys):
    path = write_config(tmp_path, "crlb.json", {"snr_db_list": [10.0, 20.0]})
    assert main(["crlb", "--config", path]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "snr_db,rmse_bound_m"
    table = {float(l.split(",")[0]): float(l.split(",")[1]) for l in lines[1:]}
    assert set(table) == {10.0, 20.0}
    assert table[20.0] == pytest.approx(0.004014381764703076, rel=1e-9)
    assert table[10.0] > table[20.0]


# -- gen-data / train / localize round trip -------------------------------------------


def test_gen_train_localize_round_trip(tmp_path, capsys):
    data_dir = tmp_path / "ds"
    gen_cfg = write_config(tmp_path, "gen.json", {"count": 16, "out_dir": str(data_dir)})
    assert main(["gen-data", "--config", gen_cfg]) == 0
    ds = load_dataset(data_dir)
    assert ds.locations.shape == (16, 2)

    ck_path = tmp_path / "ck.json"
    train_cfg = write_config(
        tmp_path,
        "train.json",
        {
            "dataset": str(data_dir),
            "epochs": 32,
            "batch_size": 8,
            "out_dir": str(ck_path),
        },
    )
    assert main(["train", "--config", train_cfg, "--reduced"]) == 0
    ck = load_checkpoint(ck_path)
    assert ck.metadata["epochs"] == 32
    assert ck.model.pln.arch.hidden == (8,)

    loc_cfg = write_config(tmp_path, "loc.json", {"method": "gbl-matched", "snr_db": 30.0})
    capsys.readouterr()
    assert main(["localize", "--config", loc_cfg]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["method"] == "gbl-matched"
    assert doc["converged"] is True
    assert doc["error_m"] < 0.5


def test_train_without_dataset_exits_2(capsys):
    assert main(["train"]) == 2
    assert "dataset" in capsys.readouterr().err


def test_train_missing_dataset_dir_is_runtime_failure(tmp_path, capsys):
    cfg = write_config(tmp_path, "t.json", {"dataset": str(tmp_path / "nope")})
    assert main(["train", "--config", cfg]) == 3


def test_localize_nn_needs_checkpoint(tmp_path, capsys):
    cfg = write_config(tmp_path, "l.json", {"method": "gbl-nn"})
    assert main(["localize", "--config", cfg]) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_localize_unknown_method_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path, "l.json", {"method": "triangulate"})
    assert main(["localize", "--config", cfg]) == 2


# -- sweeps ------------------------------------------------------------------------


def sweep_config(tmp_path, sub):
    return write_config(
        tmp_path,
        f"sweep_{sub}.json",
        {
            "methods": ["crlb", "gbl-matched"],
            "snr_db_list": [20.0],
            "trials": 2,
            "out_dir": str(tmp_path / sub),
        },
    )


def test_sweep_snr_reruns_byte_identical(tmp_path, capsys):
    for sub in ("a", "b"):
        assert main(["sweep-snr", "--config", sweep_config(tmp_path, sub)]) == 0
    csv_a = (tmp_path / "a" / "snr_sweep.csv").read_bytes()
    csv_b = (tmp_path / "b" / "snr_sweep.csv").read_bytes()
    assert csv_a == csv_b
    lines = csv_a.decode().splitlines()
    assert len(lines) == 3  # header + crlb + gbl-matched


def test_sweep_trials_override(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        "s.json",
        {
            "methods": ["gbl-matched"],
            "snr_db_list": [25.0],
            "trials": 5,
            "out_dir": str(tmp_path / "o"),
        },
    )
    assert main(["sweep-snr", "--config", cfg, "--trials", "1"]) == 0
    line = (tmp_path / "o" / "snr_sweep.csv").read_text().splitlines()[1]
    assert line.split(",")[4] == "1"


def test_sweep_nn_without_checkpoint_exits_2(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        "s.json",
        {"methods": ["gbl-nn"], "snr_db_list": [20.0], "trials": 1, "out_dir": str(tmp_path)},
    )
    assert main(["sweep-snr", "--config", cfg]) == 2


def test_verify_theorem_needs_checkpoint(capsys):
    assert main(["verify-theorem"]) == 2
    assert "checkpoint" in capsys.readouterr().err


# -- data dir resolution ---------------------------------------------------------------


def test_relative_paths_resolve_under_data_dir(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("AQUALOC_DATA_DIR", str(tmp_path))
    cfg = write_config(tmp_path, "g.json", {"count": 4, "out_dir": "nested/ds"})
    assert main(["gen-data", "--config", cfg]) == 0
    assert (tmp_path / "nested" / "ds").exists()


# -- selftest ----------------------------------------------------------------------------


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "all selftests passed" in out
    assert "FAIL" not in out
