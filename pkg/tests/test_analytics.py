import io

import pytest

from bqfl import analytics
from bqfl.analytics import METRICS_COLUMNS
from bqfl.chain import StakeTable
from bqfl.errors import ArgumentError, ParseError
from bqfl.schemas import BoundConstants, DeviceRole, FedMode, MetricsRow, SweepPoint


def _constants(**changes):
    base = dict(L_smooth=4.0, mu=1.0, sigma_k=[0.5, 0.5], p_k=[0.5, 0.5], Gamma=0.1, G=1.0, E_local=3, T_rounds=10, theta_gap=2.0)
    base.update(changes)
    return BoundConstants(**base)


def _row(round_index, device_id, role=DeviceRole.WORKER, acc=0.5, comm=0.1, loss=1.25):
    return MetricsRow(
        round=round_index,
        device_id=device_id,
        role=role,
        mode=FedMode.BQFL_AVG,
        train_loss=loss if role is DeviceRole.WORKER else None,
        train_acc=0.75 if role is DeviceRole.WORKER else None,
        test_acc_top1=acc,
        comm_time_s=comm,
        block_gen_time_s=0.2,
        stake=3.0,
    )


# --- Bound calculators ---
def test_bound_is_zero_without_noise_or_drift():
    c = _constants(sigma_k=[0.0, 0.0], Gamma=0.0, G=0.0, theta_gap=0.0)
    assert analytics.fedavg_bound(c) == 0.0


def test_bound_decreases_with_rounds():
    values = [analytics.fedavg_bound(_constants(T_rounds=t)) for t in (1, 10, 100)]
    assert values[0] > values[1] > values[2] > 0


def test_drift_term_vanishes_for_one_local_epoch():
    single = _constants(E_local=1, G=5.0)
    assert analytics.variance_term(single) == pytest.approx(0.5 * 0.5 * 0.25 * 2 + 6 * 4.0 * 0.1)


def test_bound_matches_closed_form():
    c = _constants()
    gamma = max(8 * 4.0, 3)
    b = 2 * 0.25 * 0.25 + 6 * 4.0 * 0.1 + 8 * 4 * 1.0
    expected = 4.0 / (gamma + 10 - 1) * (2 * b / 1.0 + 1.0 * gamma / 2 * 2.0)
    assert analytics.fedavg_bound(c) == pytest.approx(expected, rel=1e-12)


def test_step_size_decays():
    c = _constants()
    assert analytics.step_size(c, 0) == pytest.approx(2.0 / 32.0)
    assert analytics.step_size(c, 10) < analytics.step_size(c, 1)
    with pytest.raises(ArgumentError):
        analytics.step_size(c, -1)


def test_encoding_time_example():
    assert analytics.encoding_time(256, 8, 1e-9) == pytest.approx(2.048e-6, rel=1e-12)
    with pytest.raises(ArgumentError):
        analytics.encoding_time(-1, 8, 1e-9)


def test_total_time_is_the_sum_of_its_parts():
    c = _constants()
    stakes = StakeTable({3: 1.0, 4: 3.0})
    per_node = {3: 4.0, 4: 8.0}
    total = analytics.total_time_bound(c, stakes, per_node, 256, 8, 1e-9)
    assert total == analytics.fedavg_bound(c) + 7.0 + analytics.encoding_time(256, 8, 1e-9)


def test_bound_sweep_only_varies_rounds():
    c = _constants()
    sweep = analytics.bound_sweep(c, [1, 10])
    assert [t for t, _ in sweep] == [1, 10]
    assert sweep[1][1] == analytics.fedavg_bound(c)
    assert c.T_rounds == 10


def test_meta_experience():
    assert analytics.meta_experience(10.0, 0.1, 0.5) == pytest.approx(4.5)
    assert analytics.meta_experience(10.0, 1.0, 0.5) == 0.0
    with pytest.raises(ArgumentError):
        analytics.meta_experience(10.0, 1.5, 0.5)
    with pytest.raises(ArgumentError):
        analytics.meta_experience(-1.0, 0.1, 0.5)


# --- Metrics sink ---
def test_empty_metrics_is_header_only():
    buf = io.StringIO()
    assert analytics.write_metrics([], buf) == 0
    assert buf.getvalue() == ",".join(METRICS_COLUMNS) + "\n"


def test_one_row_gives_two_lines_and_blank_optionals():
    buf = io.StringIO()
    analytics.write_metrics([_row(1, 3, role=DeviceRole.MINER)], buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == 2
    assert lines[1].split(",")[:6] == ["1", "3", "miner", "bqfl-avg", "", ""]


def test_metrics_file_reparses_exactly(tmp_path):
    rows = [_row(1, 0, acc=0.1 + 0.2, comm=1 / 3), _row(1, 4, role=DeviceRole.MINER), _row(2, -1, role=DeviceRole.GLOBAL)]
    path = tmp_path / "m.csv"
    assert analytics.write_metrics(rows, path) == 3
    assert analytics.read_metrics(path) == rows


def test_parse_metrics_rejects_bad_input():
    with pytest.raises(ParseError):
        analytics.parse_metrics("round,device\n")
    header = ",".join(METRICS_COLUMNS)
    with pytest.raises(ParseError):
        analytics.parse_metrics(header + "\n1,0,worker,bqfl-avg,1.0,0.5,1.5,0.1,0.2,1.0\n")


def test_round_summary_uses_worker_rows():
    rows = [
        _row(1, 0, acc=0.2, comm=0.1),
        _row(1, 1, acc=0.6, comm=0.3),
        _row(1, 3, role=DeviceRole.MINER, acc=0.9, comm=5.0),
        _row(2, 0, acc=0.5, comm=0.2),
    ]
    summary = analytics.round_summary(rows)
    assert sorted(summary) == [1, 2]
    first = summary[1]
    assert (first.devices, first.min_acc, first.max_acc) == (2, 0.2, 0.6)
    assert first.mean_acc == pytest.approx(0.4)
    assert first.max_comm_s == 0.3
    assert summary[2].devices == 1


def test_sweep_file_leaves_aborted_cells_blank(tmp_path):
    points = [
        SweepPoint(m_classes=2, mode=FedMode.BQFL_AVG, final_acc=0.75, rounds_ok=3),
        SweepPoint(m_classes=2, mode=FedMode.BQFL_INF),
    ]
    path = tmp_path / "sweep.csv"
    assert analytics.write_sweep(points, path) == 2
    assert path.read_text(encoding="utf-8").splitlines() == [
        "m_classes,mode,final_acc,rounds_ok",
        "2,bqfl-avg,0.75,3",
        "2,bqfl-inf,,0",
    ]
