import json

import pytest

from fedmlp import cli
from fedmlp.config import ConfigError, ExperimentConfig, build_config, dump_config, parse_config

TOY_FLAGS = ["--num_classes", "4", "--d_in", "4", "--per_class", "30", "--num_clients", "2", "--tasks", "2",
             "--s", "2", "--epochs", "2", "--rounds_local", "2", "--m_active", "2", "--hidden", "8",
             "--feature_dim", "4"]


@pytest.fixture(autouse=True)
def _no_output_root(monkeypatch):
    monkeypatch.delenv(cli.OUTPUT_ROOT_ENV, raising=False)


# -- config -----------------------------------------------------------------------

def test_empty_file_gives_defaults(tmp_path):
    f = tmp_path / "empty.cfg"
    f.write_text("# nothing here\n\n")
    cfg = parse_config(f)
    assert (cfg.lr, cfg.momentum, cfg.weight_decay, cfg.batch_size) == (0.01, 0.9, 1e-5, 32)
    assert (cfg.tasks, cfg.m_active, cfg.epochs, cfg.rounds_local) == (5, 10, 50, 20)
    assert cfg == ExperimentConfig()


def test_flag_overrides_file(tmp_path):
    f = tmp_path / "a.cfg"
    f.write_text("gamma = 1.0\nloss.semantic = false  # ablation\n")
    cfg = parse_config(f, {"gamma": "0.5"})
    assert cfg.gamma == 0.5 and cfg.loss_semantic is False


def test_cross_field_error_names_both():
    with pytest.raises(ConfigError) as exc:
        build_config({"m_active": "30", "num_clients": "20"})
    assert any("m_active" in e and "num_clients" in e for e in exc.value.errors)


def test_all_errors_reported_together():
    with pytest.raises(ConfigError) as exc:
        build_config({"lr": "fast", "bogus": "1", "loss.prototype": "maybe"})
    assert len(exc.value.errors) == 3
    with pytest.raises(ConfigError) as exc:
        build_config({"lr": "-1", "momentum": "1.5", "strategy": "sgd"})
    assert len(exc.value.errors) == 3


def test_malformed_line(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("lr 0.1\n")
    with pytest.raises(ConfigError):
        parse_config(f)


def test_dump_roundtrip(tmp_path):
    cfg = ExperimentConfig(alpha=0.25, loss_intertask=False, seed=7, weight_decay=3e-7)
    f = tmp_path / "echo.cfg"
    f.write_text(dump_config(cfg))
    assert parse_config(f) == cfg


# -- cli --------------------------------------------------------------------------

def _run(tmp_path, name, *extra):
    out = tmp_path / name
    code = cli.main(["run", *TOY_FLAGS, "--output_dir", str(out), *extra])
    return code, out


def test_run_writes_outputs(tmp_path):
    code, out = _run(tmp_path, "a")
    assert code == 0
    names = {p.name for p in out.iterdir()}
    assert names == {"config.txt", "metrics.csv", "metrics.jsonl", "summary.json", "prototypes.json"}
    summary = json.loads((out / "summary.json").read_text())
    assert summary["meta"]["final_window_unit"] == "rounds"
    assert len((out / "metrics.csv").read_text().splitlines()) == 5


def test_run_twice_byte_identical(tmp_path):
    _, a = _run(tmp_path, "a")
    _, b = _run(tmp_path, "b", "--workers", "2")
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_rerun_from_echoed_config(tmp_path):
    _, a = _run(tmp_path, "a")
    assert cli.main(["run", "--config", str(a / "config.txt"), "--output_dir", str(tmp_path / "b")]) == 0
    for name in ("metrics.csv", "metrics.jsonl", "summary.json", "prototypes.json"):
        assert (a / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    assert cli.main(["run", *TOY_FLAGS, "--output_dir", "rel"]) == 0
    assert (tmp_path / "rel" / "metrics.csv").exists()


def test_sweep_three_seeds(tmp_path):
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--seeds", "1,2,3", *TOY_FLAGS, "--output_dir", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["seed_1", "seed_2", "seed_3", "sweep_summary.json"]
    summary = json.loads((out / "sweep_summary.json").read_text())
    assert summary["seeds"] == [1, 2, 3]
    assert set(summary["metrics"]["A_glo"]) == {"mean", "std"}


def test_check_grad_passes(capsys):
    assert cli.main(["check-grad", "--instances", "3"]) == 0
    assert "ok" in capsys.readouterr().out


def test_check_grad_fails_on_impossible_tolerance():
    assert cli.main(["check-grad", "--instances", "1", "--tolerance", "0"]) == 2


def test_dump_embeddings(tmp_path):
    path = tmp_path / "emb.csv"
    assert cli.main(["dump-embeddings", *TOY_FLAGS, "--out", str(path)]) == 0
    assert path.read_text().startswith("sample_id,label,z0,z1,z2,z3\n")


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["run", "--m_active", "30"]) == 1
    assert "m_active" in capsys.readouterr().err
    assert cli.main(["nonsense"]) == 1
    out = tmp_path / "broken"
    code = cli.main(["run", "--source", "csv", "--csv_path", str(tmp_path / "missing.csv"),
                     "--output_dir", str(out)])
    assert code == 2
    assert (out / cli.INCOMPLETE).exists()
