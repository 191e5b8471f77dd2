"""Artifact files: JSON documents, headed JSON lines and CSV metrics."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence, Tuple

from .errors import DataIntegrityError, DependencyError

FORMAT_VERSION = 1


def file_header(stage: str, seed: int, config_digest: str) -> Dict[str, Any]:
    return {"format_version": FORMAT_VERSION, "stage": stage, "generator_seed": seed, "config_hash": config_digest}


def write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def read_json(path: Path) -> Any:
    if not path.exists():
        raise DependencyError(f"Missing required file: {path}", missing=str(path))
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataIntegrityError(f"Failed to parse {path}: {exc}") from exc


def write_jsonl(path: Path, header: Mapping[str, Any], rows: Iterable[Mapping[str, Any]]) -> int:
    """First line {"header": ...}, then one compact sorted-key object per row."""
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        handle.write(json.dumps({"header": dict(header)}, sort_keys=True, separators=(",", ":")) + "\n")
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
            count += 1
    return count


def read_jsonl(path: Path) -> Tuple[Dict[str, Any], List[Dict[str, Any]]]:
    if not path.exists():
        raise DependencyError(f"Missing required file: {path}", missing=str(path))
    header: Dict[str, Any] = {}
    rows: List[Dict[str, Any]] = []
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                item = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataIntegrityError(f"{path}:{lineno}: {exc}") from exc
            if lineno == 1 and isinstance(item, dict) and set(item) == {"header"}:
                header = item["header"]
            else:
                rows.append(item)
    return header, rows


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _cell(row.get(key)) for key in columns})
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    if not path.exists():
        raise DependencyError(f"Missing required file: {path}", missing=str(path))
    with path.open("r", encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


def _cell(value: Any) -> Any:
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return json.dumps(value, separators=(",", ":"))
    return value
