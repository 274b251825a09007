"""Dataset JSON-lines serialization and report emission.

Dataset lines look like::

    {"actions":[3,1],"agent_id":"a0","states":[[0,0],[1,0],[1,1]]}

Keys are sorted and every line ends with a newline, so equal datasets produce
byte-identical files. ``actions`` is optional.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path

from .errors import BsdrError, SchemaError
from .gridworld import GridSpec, Trajectory, validate_trajectory
from .inference import Dataset

log = logging.getLogger(__name__)

RECORD_KEYS = {"agent_id", "states", "actions"}


def _parse_record(obj, lineno: int) -> Trajectory:
    if not isinstance(obj, dict):
        raise SchemaError("record must be a JSON object", line=lineno)
    extra = set(obj) - RECORD_KEYS
    if extra:
        raise SchemaError(f"unknown fields {sorted(extra)}", line=lineno)
    if "agent_id" not in obj or "states" not in obj:
        raise SchemaError("record needs 'agent_id' and 'states'", line=lineno)
    agent = obj["agent_id"]
    if not isinstance(agent, str):
        raise SchemaError("'agent_id' must be a string", line=lineno)
    states = obj["states"]
    if not isinstance(states, list) or not all(
        isinstance(s, list) and len(s) == 2 and all(isinstance(c, int) and not isinstance(c, bool) for c in s)
        for s in states
    ):
        raise SchemaError("'states' must be a list of [x, y] integer pairs", line=lineno)
    actions = obj.get("actions")
    if actions is not None and (
        not isinstance(actions, list) or not all(isinstance(a, int) and not isinstance(a, bool) for a in actions)
    ):
        raise SchemaError("'actions' must be a list of integers", line=lineno)
    return Trajectory(tuple(tuple(s) for s in states), None if actions is None else tuple(actions), agent)


def load_dataset(path, spec: GridSpec) -> Dataset:
    """Read and validate a JSON-lines dataset; errors name the line and step."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise BsdrError(f"dataset file not found: {path}") from None
    except OSError as e:
        raise BsdrError(f"cannot read dataset {path}: {e}") from None
    groups: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise SchemaError(f"invalid JSON: {e.msg}", line=lineno) from None
        xi = _parse_record(obj, lineno)
        try:
            validate_trajectory(xi, spec)
        except SchemaError as e:
            raise SchemaError(str(e), line=lineno, step=e.step) from None
        groups.setdefault(xi.agent_id, []).append(xi)
    if not groups:
        log.warning("dataset %s is empty", path)
    return Dataset(spec, groups)


def record_of(xi: Trajectory) -> dict:
    rec = {"agent_id": str(xi.agent_id), "states": [[s.x, s.y] for s in xi.states]}
    if xi.actions is not None:
        rec["actions"] = list(xi.actions)
    return rec


def dumps_dataset(data: Dataset) -> str:
    lines = []
    for agent, trajs in data.trajectories.items():
        for xi in trajs:
            lines.append(json.dumps(record_of(xi), sort_keys=True, separators=(",", ":")) + "\n")
    return "".join(lines)


def save_dataset(data: Dataset, path) -> None:
    path = Path(path)
    try:
        path.write_text(dumps_dataset(data), encoding="utf-8")
    except OSError as e:
        raise BsdrError(f"cannot write dataset {path}: {e}") from None


def write_json(obj, path) -> None:
    path = Path(path)
    try:
        path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise BsdrError(f"cannot write {path}: {e}") from None


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def rows_to_csv(rows: list) -> str:
    """RFC 4180 CSV with a header line; columns in first-seen order."""
    cols = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in cols])
    return buf.getvalue()


def write_csv(rows: list, path) -> None:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(rows_to_csv(rows))
    except OSError as e:
        raise BsdrError(f"cannot write {path}: {e}") from None
