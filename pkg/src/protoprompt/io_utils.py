"""Helpers for run-artefact locking and atomic writes."""

import csv
import json
import math
from contextlib import contextmanager
from pathlib import Path
from tempfile import NamedTemporaryFile
from typing import IO, Any, Callable, Iterable, Iterator, Mapping, Sequence

from filelock import FileLock
from ruamel.yaml import YAML
from ruamel.yaml.error import YAMLError

from protoprompt.exceptions import ManifestParseError


def get_lock_file(target: Path) -> Path:
    """Return the sidecar lock file path for an artefact.

    Examples:
        >>> get_lock_file(Path("run/losses.csv")).name
        'losses.csv.lock'
        >>> get_lock_file(Path("run/config")).name
        'config.lock'
    """
    suffix = f"{target.suffix}.lock" if target.suffix else ".lock"
    return target.with_suffix(suffix)


@contextmanager
def locked_file(target: Path, timeout: float = 30.0) -> Iterator[None]:
    """Acquire an exclusive lock for an artefact using a sidecar lock file."""
    target.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(get_lock_file(target)), timeout=timeout):
        yield


def _atomic_write(target: Path, write: Callable[[IO[str]], None]) -> None:
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp_path: Path | None = None
    try:
        with NamedTemporaryFile(
            mode="w",
            dir=target.parent,
            delete=False,
            newline="",
            encoding="utf-8",
        ) as tmp:
            tmp_path = Path(tmp.name)
            write(tmp)
        tmp_path.replace(target)
    finally:
        if tmp_path is not None and tmp_path.exists():
            tmp_path.unlink()


def atomic_write_csv(
    target: Path,
    fieldnames: Sequence[str],
    rows: Iterable[Mapping[str, Any]],
) -> None:
    """Write CSV rows to a temp file and atomically replace the target."""

    def write(fh: IO[str]) -> None:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)

    _atomic_write(target, write)


def atomic_write_json(target: Path, data: Any) -> None:
    """Atomically write ``data`` as indented JSON."""
    _atomic_write(target, lambda fh: fh.write(json.dumps(data, indent=2) + "\n"))


def atomic_write_yaml(target: Path, data: Any) -> None:
    """Atomically write ``data`` as block-style YAML."""
    yaml = YAML(typ="safe")
    yaml.default_flow_style = False
    _atomic_write(target, lambda fh: yaml.dump(data, fh))


def read_yaml(path: Path) -> Any:
    """Load a YAML document with the safe loader.

    Raises ManifestParseError naming the path when the file cannot be read or parsed.
    """
    yaml = YAML(typ="safe")
    try:
        with open(path, encoding="utf-8") as f:
            return yaml.load(f)
    except OSError as e:
        raise ManifestParseError(f"cannot read file: {e.strerror or e}", record=str(path)) from e
    except YAMLError as e:
        raise ManifestParseError(f"invalid YAML: {e}", record=str(path)) from e


def read_csv(path: Path) -> list[dict[str, str]]:
    try:
        with open(path, newline="", encoding="utf-8") as f:
            return list(csv.DictReader(f))
    except OSError as e:
        raise ManifestParseError(f"cannot read file: {e.strerror or e}", record=str(path)) from e


def format_float(value: float) -> str:
    """Render a float so that reading it back gives the same value.

    Examples:
        >>> format_float(0.1)
        '0.1'
        >>> float(format_float(1 / 3)) == 1 / 3
        True
    """
    if math.isnan(value):
        return "nan"
    return repr(float(value))


class CsvMetricsLog:
    """Append-only CSV log.

    The header is written when the log is created. Rows are buffered by
    ``append`` and ``flush`` appends the buffered rows under the file lock.

    Examples:
        >>> import tempfile
        >>> with tempfile.TemporaryDirectory() as d:
        ...     log = CsvMetricsLog(Path(d) / "losses.csv", ["iteration", "total"])
        ...     log.append({"iteration": 1, "total": 0.5})
        ...     log.flush()
        ...     read_csv(Path(d) / "losses.csv")
        [{'iteration': '1', 'total': '0.5'}]
    """

    def __init__(self, path: Path, fieldnames: Sequence[str]):
        self.path = path
        self.fieldnames = list(fieldnames)
        self.pending: list[dict[str, str]] = []
        with locked_file(path):
            atomic_write_csv(path, self.fieldnames, [])

    def append(self, row: Mapping[str, Any]) -> None:
        missing = set(self.fieldnames) - set(row)
        if missing:
            raise KeyError(f"metrics row is missing {sorted(missing)}")
        self.pending.append(
            {
                key: format_float(row[key]) if isinstance(row[key], float) else str(row[key])
                for key in self.fieldnames
            }
        )

    def flush(self) -> None:
        if not self.pending:
            return
        with locked_file(self.path):
            with open(self.path, "a", newline="", encoding="utf-8") as fh:
                writer = csv.DictWriter(fh, fieldnames=self.fieldnames, lineterminator="\n")
                writer.writerows(self.pending)
        self.pending.clear()
