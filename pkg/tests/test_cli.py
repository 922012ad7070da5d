import csv
import shutil
from pathlib import Path

import pytest

from bqfl import database
from bqfl.analytics import read_metrics
from bqfl.chain import Ledger
from bqfl.main import main


@pytest.fixture
def run_file(tmp_path, config_text):
    def write(**overrides) -> str:
        path = tmp_path / "run.cfg"
        path.write_text(config_text(**overrides), encoding="utf-8")
        return str(path)

    return write


def _outputs(out_dir: Path, name="bqfl-avg_0"):
    return out_dir / f"{name}.csv", out_dir / f"{name}.ledger", out_dir / f"{name}.cfg"


def test_run_writes_reproducible_outputs(run_file, tmp_path, capsys):
    path = run_file()
    first_dir, second_dir = tmp_path / "first", tmp_path / "second"
    assert main(["run", "--config", path, "--out", str(first_dir)]) == 0
    assert main(["run", "--config", path, "--out", str(second_dir)]) == 0
    csv_a, ledger_a, cfg_a = _outputs(first_dir)
    csv_b, ledger_b, _ = _outputs(second_dir)
    assert csv_a.read_bytes() == csv_b.read_bytes()
    assert ledger_a.read_bytes() == ledger_b.read_bytes()
    assert "output_dir" in cfg_a.read_text(encoding="utf-8")
    assert "final global top-1 test accuracy" in capsys.readouterr().out

    rows = read_metrics(csv_a)
    # 3 workers + 2 miners + the global row per round
    assert len(rows) == 2 * 6
    ledger = Ledger.load(ledger_a)
    assert len(ledger) == 3
    assert ledger.stakes.total == rows[-1].stake


def test_seed_flag_changes_the_run(run_file, tmp_path):
    path = run_file(rounds=1)
    assert main(["run", "--config", path, "--seed", "3", "--out", str(tmp_path / "o")]) == 0
    csv, ledger, _ = _outputs(tmp_path / "o", name="bqfl-avg_3")
    assert csv.exists() and ledger.exists()


def test_inference_mode_reports_the_ensemble(run_file, tmp_path, capsys):
    path = run_file(mode="bqfl-inf", rounds=1)
    assert main(["run", "--config", path, "--out", str(tmp_path / "o")]) == 0
    assert "final ensemble top-1 test accuracy" in capsys.readouterr().out


def test_every_round_aborted_exits_one(run_file, tmp_path, capsys):
    # an untrained worker cannot classify every validation sample
    path = run_file(validation_threshold=1.0, epochs=1, rounds=1)
    assert main(["run", "--config", path, "--out", str(tmp_path / "o")]) == 1
    assert "every round aborted" in capsys.readouterr().out
    csv, ledger, _ = _outputs(tmp_path / "o")
    assert csv.read_text(encoding="utf-8").count("\n") == 1
    assert len(Ledger.load(ledger)) == 1


def test_inspect_chain_accepts_and_rejects(run_file, tmp_path, capsys):
    path = run_file()
    assert main(["run", "--config", path]) == 0
    ledger_path = tmp_path / "runs" / "bqfl-avg_0.ledger"
    capsys.readouterr()

    assert main(["inspect-chain", str(ledger_path)]) == 0
    out = capsys.readouterr().out
    assert "ledger ok: 3 block(s)" in out
    assert out.count("#") >= 3

    # the configured ledger path is used when no file is named
    assert main(["inspect-chain", "--config", path]) == 0

    data = bytearray(ledger_path.read_bytes())
    data[len(data) // 2] ^= 0x01
    tampered = tmp_path / "tampered.ledger"
    tampered.write_bytes(bytes(data))
    assert main(["inspect-chain", str(tampered)]) == 1
    assert "ledger corrupt: first bad block index" in capsys.readouterr().out


def test_inspect_chain_missing_file(tmp_path):
    assert main(["inspect-chain", str(tmp_path / "none.ledger")]) == 1


def test_bounds_report(run_file, capsys):
    path = run_file(bound_l_smooth=2.0, bound_mu=1.0, bound_sigma=0.5, bound_t_create_s=0.5)
    assert main(["bounds", "--config", path]) == 0
    out = capsys.readouterr().out
    assert "fedavg_bound" in out
    enc_line = next(line for line in out.splitlines() if line.startswith("encoding_time_s"))
    assert float(enc_line.split()[1]) == pytest.approx(6.4e-08, rel=1e-12)
    assert "expected_block_time_s" in out and "total_time_bound" in out
    sweep = [line.split() for line in out.splitlines() if line.strip() and line.split()[0].isdigit()]
    assert [int(cells[0]) for cells in sweep] == [1, 2, 5, 10, 20, 50, 100]
    bounds = [float(cells[1]) for cells in sweep]
    assert bounds == sorted(bounds, reverse=True)


def test_bounds_without_constants_is_a_usage_error(run_file):
    assert main(["bounds", "--config", run_file()]) == 2


def test_inspect_data_lists_shards(run_file, capsys):
    assert main(["inspect-data", "--config", run_file()]) == 0
    out = capsys.readouterr().out
    assert "train: 240 samples before filter" in out
    assert "train: 192 samples after removing [8, 9]" in out
    assert "worker 0: classes [0, 1, 2, 3] samples 24" in out
    assert "worker 2: classes [0, 1, 2, 3] samples 24" in out


def test_usage_and_config_errors(run_file, tmp_path):
    assert main(["explode"]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["run", "--config", run_file(n_qubits=3)]) == 2
    assert main(["run", "--config", run_file(), "--set", "no_such_key=1"]) == 2
    assert main(["run", "--config", run_file(), "--seed", "-1"]) == 2


def test_missing_dataset_is_a_failure(run_file, tmp_path):
    path = run_file(train_images=str(tmp_path / "absent"))
    assert main(["run", "--config", path]) == 1


def test_results_database_auto(run_file, tmp_path):
    path = run_file(results_db="auto", rounds=1)
    out_dir = tmp_path / "db_run"
    assert main(["run", "--config", path, "--out", str(out_dir)]) == 0
    assert (out_dir / database.RESULTS_DB_FILE).exists()
    assert database.engine is None


def test_default_run_directories_are_byte_identical(config_text, tmp_path):
    text = "\n".join(line for line in config_text(rounds=1).splitlines() if not line.startswith("results_db"))
    path = tmp_path / "default.cfg"
    path.write_text(text + "\n", encoding="utf-8")
    out_dir = tmp_path / "o"
    outputs = []
    for _ in range(2):
        shutil.rmtree(out_dir, ignore_errors=True)
        assert main(["run", "--config", str(path), "--seed", "1", "--out", str(out_dir)]) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted(out_dir.iterdir())})
    assert sorted(outputs[0]) == ["bqfl-avg_1.cfg", "bqfl-avg_1.csv", "bqfl-avg_1.ledger"]
    assert outputs[0] == outputs[1]


def test_classes_sweep_covers_every_mode(run_file, tmp_path, capsys):
    path = run_file(rounds=1, epochs=1)
    out_dir = tmp_path / "sweep"
    assert main(["sweep-classes", "--config", path, "--set", "sweep_m_classes=2,4", "--out", str(out_dir)]) == 0
    with (out_dir / "classes_sweep_0.csv").open(encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [(int(r["m_classes"]), r["mode"]) for r in rows] == [
        (m, mode) for m in (2, 4) for mode in ("bqfl-avg", "bqfl-inf", "bcfl-avg")
    ]
    assert all(0.0 <= float(r["final_acc"]) <= 1.0 and r["rounds_ok"] == "1" for r in rows)
    out = capsys.readouterr().out
    assert "bqfl-inf" in out and "sweep written to" in out


def test_classes_sweep_rejects_impossible_class_counts(run_file, tmp_path):
    path = run_file()
    assert main(["sweep-classes", "--config", path, "--set", "sweep_m_classes=2,9", "--out", str(tmp_path / "s")]) == 2
    assert not (tmp_path / "s").exists()
