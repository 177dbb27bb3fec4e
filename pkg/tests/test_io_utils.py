"""Tests for locked atomic artefact writes."""

from pathlib import Path

import pytest

from protoprompt.exceptions import ManifestParseError
from protoprompt.io_utils import (
    CsvMetricsLog,
    atomic_write_csv,
    atomic_write_json,
    atomic_write_yaml,
    format_float,
    get_lock_file,
    locked_file,
    read_csv,
    read_yaml,
)


def test_lock_file_is_sidecar(tmp_path):
    target = tmp_path / "ckpt" / "meta.pt"
    assert get_lock_file(target) == tmp_path / "ckpt" / "meta.pt.lock"
    with locked_file(target):
        assert target.parent.is_dir()


def test_atomic_writes_leave_no_temp_files(tmp_path):
    atomic_write_csv(tmp_path / "a.csv", ["x", "y"], [{"x": 1, "y": 2}])
    atomic_write_json(tmp_path / "b.json", {"k": [1, 2]})
    atomic_write_yaml(tmp_path / "c.yaml", {"k": {"v": 1}})
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a.csv", "b.json", "c.yaml"]
    assert read_csv(tmp_path / "a.csv") == [{"x": "1", "y": "2"}]
    assert read_yaml(tmp_path / "c.yaml") == {"k": {"v": 1}}


def test_failed_write_keeps_previous_content(tmp_path):
    target = tmp_path / "rows.csv"
    atomic_write_csv(target, ["x"], [{"x": 1}])

    def rows():
        yield {"x": 2}
        raise RuntimeError("interrupted")

    with pytest.raises(RuntimeError):
        atomic_write_csv(target, ["x"], rows())
    assert read_csv(target) == [{"x": "1"}]
    assert [p.name for p in tmp_path.iterdir()] == ["rows.csv"]


def test_format_float_round_trips():
    for value in (0.1, 1 / 3, 1e-12, 12345.678):
        assert float(format_float(value)) == value
    assert format_float(float("nan")) == "nan"


def test_metrics_log_requires_all_columns(tmp_path):
    log = CsvMetricsLog(tmp_path / "losses.csv", ["iteration", "total"])
    with pytest.raises(KeyError):
        log.append({"iteration": 1})


def test_metrics_log_appends_flushed_rows(tmp_path):
    path: Path = tmp_path / "losses.csv"
    log = CsvMetricsLog(path, ["iteration", "total"])
    assert path.read_text() == "iteration,total\n"
    log.flush()
    assert path.read_text() == "iteration,total\n"
    log.append({"iteration": 1, "total": 2.5})
    log.flush()
    log.append({"iteration": 2, "total": 1.25, "extra": "ignored"})
    log.flush()
    assert read_csv(path) == [
        {"iteration": "1", "total": "2.5"},
        {"iteration": "2", "total": "1.25"},
    ]
    assert log.pending == []


def test_readers_report_missing_files(tmp_path):
    with pytest.raises(ManifestParseError, match="cannot read file"):
        read_yaml(tmp_path / "missing.yaml")
    with pytest.raises(ManifestParseError, match="cannot read file"):
        read_csv(tmp_path / "missing.csv")


def test_read_yaml_reports_syntax_errors(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("key: [unclosed\n")
    with pytest.raises(ManifestParseError, match="invalid YAML") as info:
        read_yaml(path)
    assert info.value.record == str(path)
