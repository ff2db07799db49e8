"""Persistence: the ACTV activation container, JSON-lines trajectory logs and CSV reports.

Layout of an ACTV file (all integers little-endian)::

    b"ACTV" | u32 version | u32 header_len | header (UTF-8 JSON) | payload

The payload is ``n_steps * dim`` values, row-major, little-endian ``f32`` or ``f64``.
Multi-array files (SAE weights, coefficient oracles) use the same framing with
the magic ``b"ARRS"`` and an ``arrays`` table in the header.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

MAGIC = b"ACTV"
ARRAYS_MAGIC = b"ARRS"
VERSION = 1
REQUIRED_KEYS = ("run_id", "block", "n_steps", "dim", "dtype", "source", "seed")
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
TASKS = ("two_step", "grid_world", "graph")

_PREFIX = struct.Struct("<4sII")


class StoreError(Exception):
    """Base class for persistence failures."""

    code = "store_error"


class BadMagic(StoreError):
    code = "bad_magic"


class VersionMismatch(StoreError):
    code = "version_mismatch"


class Truncated(StoreError):
    code = "truncated"


class HeaderError(StoreError):
    """Header is not valid JSON, misses keys, or disagrees with the payload."""

    code = "header_inconsistent"


class NonFiniteError(StoreError, ValueError):
    code = "non_finite"


class OrderViolation(StoreError):
    code = "order_violation"


class ParseError(StoreError):
    code = "parse_error"

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _dtype_name(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    return "f64"


def _encode_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _check_finite(arr: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteError(f"{what}: {int(bad.sum())} non-finite values, first at index {idx}")


def write_activations(path: str | os.PathLike, m: np.ndarray, meta: dict[str, Any]) -> None:
    """Write an ``n_steps x dim`` matrix to an ACTV container.

    ``meta`` must carry ``run_id``, ``block``, ``source`` and ``seed``. ``n_steps``,
    ``dim`` and ``dtype`` are taken from the matrix; if present in ``meta`` they
    must agree with it. A ``dtype`` of ``"f32"`` in ``meta`` casts the data.
    Extra keys (scaling metadata, ...) are stored verbatim.
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise HeaderError(f"expected a 2-d matrix, got shape {m.shape}")
    n_steps, dim = m.shape
    if n_steps < 1 or dim < 1:
        raise HeaderError(f"empty matrix {m.shape}")
    dtype = meta.get("dtype", _dtype_name(m))
    if dtype not in DTYPES:
        raise HeaderError(f"unknown dtype {dtype!r}")
    for key, actual in (("n_steps", n_steps), ("dim", dim)):
        if key in meta and int(meta[key]) != actual:
            raise HeaderError(f"meta {key}={meta[key]} but matrix has {actual}")
    missing = [k for k in ("run_id", "block", "source", "seed") if k not in meta]
    if missing:
        raise HeaderError(f"missing header fields: {missing}")
    if int(meta["block"]) < 0:
        raise HeaderError("block must be >= 0")
    if not 0 <= int(meta["seed"]) < 2**64:
        raise HeaderError("seed must fit an unsigned 64-bit integer")

    data = m.astype(DTYPES[dtype])
    _check_finite(data, "activation matrix")

    header = dict(meta)
    header.update(
        run_id=str(meta["run_id"]),
        block=int(meta["block"]),
        n_steps=n_steps,
        dim=dim,
        dtype=dtype,
        source=str(meta["source"]),
        seed=int(meta["seed"]),
    )
    hbytes = _encode_header(header)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(np.ascontiguousarray(data).tobytes(order="C"))


def _read_frame(path: str | os.PathLike, magic: bytes) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        if raw[:4] != magic[: len(raw[:4])]:
            raise BadMagic(f"{path}: bad magic {raw[:4]!r}")
        raise Truncated(f"{path}: file shorter than the fixed prefix")
    got, version, hlen = _PREFIX.unpack_from(raw)
    if got != magic:
        raise BadMagic(f"{path}: expected magic {magic!r}, found {got!r}")
    if version != VERSION:
        raise VersionMismatch(f"{path}: version {version}, this reader handles {VERSION}")
    hend = _PREFIX.size + hlen
    if len(raw) < hend:
        raise Truncated(f"{path}: header truncated ({len(raw) - _PREFIX.size} of {hlen} bytes)")
    try:
        header = json.loads(raw[_PREFIX.size:hend].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise HeaderError(f"{path}: header must be a JSON object")
    return header, raw[hend:]


def read_activations(path: str | os.PathLike) -> tuple[np.ndarray, dict[str, Any]]:
    """Inverse of :func:`write_activations`; returns ``(matrix, header)``."""
    header, payload = _read_frame(path, MAGIC)
    missing = [k for k in REQUIRED_KEYS if k not in header]
    if missing:
        raise HeaderError(f"{path}: header misses {missing}")
    dtype = header["dtype"]
    if dtype not in DTYPES:
        raise HeaderError(f"{path}: unknown dtype {dtype!r}")
    n_steps, dim = header["n_steps"], header["dim"]
    if not (isinstance(n_steps, int) and isinstance(dim, int)) or n_steps < 1 or dim < 1:
        raise HeaderError(f"{path}: invalid shape ({n_steps}, {dim})")
    expected = n_steps * dim * DTYPES[dtype].itemsize
    if len(payload) < expected:
        raise Truncated(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    if len(payload) > expected:
        raise HeaderError(f"{path}: payload has {len(payload) - expected} trailing bytes")
    m = np.frombuffer(payload, dtype=DTYPES[dtype]).reshape(n_steps, dim)
    m = m.astype(DTYPES[dtype].newbyteorder("="), copy=True)
    if not np.isfinite(m).all():
        raise NonFiniteError(f"{path}: payload contains non-finite values")
    return m, header


ARRAY_DTYPES = dict(DTYPES, i64=np.dtype("<i8"))


def _array_dtype_name(arr: np.ndarray) -> str:
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return "i64"
    return _dtype_name(arr)


def write_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    """Write several named float or integer arrays plus a JSON config into one file."""
    table = []
    chunks = []
    offset = 0
    for name in arrays:
        arr = np.asarray(arrays[name])
        dtype = _array_dtype_name(arr)
        arr = arr.astype(ARRAY_DTYPES[dtype])
        if dtype != "i64":
            _check_finite(arr, f"array {name!r}")
        blob = np.ascontiguousarray(arr).tobytes(order="C")
        table.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    header = {"meta": meta, "arrays": table}
    hbytes = _encode_header(header)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(ARRAYS_MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        for blob in chunks:
            fh.write(blob)


def read_arrays(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    header, payload = _read_frame(path, ARRAYS_MAGIC)
    if "arrays" not in header or "meta" not in header:
        raise HeaderError(f"{path}: header misses 'arrays'/'meta'")
    out = {}
    for entry in header["arrays"]:
        if entry.get("dtype") not in ARRAY_DTYPES:
            raise HeaderError(f"{path}: array {entry.get('name')!r} has unknown dtype {entry.get('dtype')!r}")
        dt = ARRAY_DTYPES[entry["dtype"]]
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise Truncated(f"{path}: array {entry['name']!r} extends past end of file")
        if int(np.prod(entry["shape"], dtype=np.int64)) * dt.itemsize != nbytes:
            raise HeaderError(f"{path}: array {entry['name']!r} shape/bytes disagree")
        arr = np.frombuffer(payload[start:start + nbytes], dtype=dt).reshape(entry["shape"])
        out[entry["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return out, header["meta"]


# -- trajectory logs -------------------------------------------------------


@dataclass(frozen=True)
class Step:
    episode: int
    t: int
    state: Any
    action: str | None
    reward: float | None
    next_state: Any

    @property
    def key(self) -> tuple[int, int]:
        return (self.episode, self.t)


@dataclass
class TrajectoryLog:
    run_id: str = ""
    task: str | None = None
    steps: list[Step] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.steps)

    def states(self) -> list:
        """Observation sequence: first state followed by every next_state."""
        if not self.steps:
            start = self.meta.get("start_state")
            return [] if start is None else [_decode_state(json.loads(start))]
        return [self.steps[0].state] + [s.next_state for s in self.steps]

    def episodes(self) -> dict[int, list[Step]]:
        out: dict[int, list[Step]] = {}
        for s in self.steps:
            out.setdefault(s.episode, []).append(s)
        return out

    def rewards(self) -> list[float | None]:
        return [s.reward for s in self.steps]


def _encode_state(state):
    if isinstance(state, tuple):
        return [_encode_state(x) for x in state]
    if isinstance(state, np.integer):
        return int(state)
    return state


def _decode_state(state):
    if isinstance(state, list):
        return tuple(_decode_state(x) for x in state)
    return state


def _step_to_json(step: Step) -> str:
    rec = {
        "episode": int(step.episode),
        "t": int(step.t),
        "state": _encode_state(step.state),
        "action": step.action,
        "reward": None if step.reward is None else float(step.reward),
        "next_state": _encode_state(step.next_state),
    }
    if rec["reward"] is not None and not math.isfinite(rec["reward"]):
        raise NonFiniteError(f"non-finite reward at episode {step.episode}, t {step.t}")
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def _header_line(run_id: str, task: str, meta: dict | None) -> str:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    rec = {"kind": "header", "run_id": str(run_id), "task": task,
           "meta": {str(k): str(v) for k, v in (meta or {}).items()}}
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def _last_line(path: Path) -> str | None:
    with open(path, "rb") as fh:
        fh.seek(0, os.SEEK_END)
        end = fh.tell()
        if end == 0:
            return None
        block = 4096
        data = b""
        pos = end
        while pos > 0:
            step = min(block, pos)
            pos -= step
            fh.seek(pos)
            data = fh.read(step) + data
            stripped = data.rstrip(b"\n")
            if b"\n" in stripped:
                return stripped.rsplit(b"\n", 1)[1].decode("utf-8")
        return data.rstrip(b"\n").decode("utf-8") or None


def _check_step(step: Step, task: str | None) -> None:
    if task == "graph" and step.action is not None:
        raise ValueError("graph-task steps carry no action")


def append_trajectory(path: str | os.PathLike, step: Step, *, run_id: str | None = None,
                      task: str | None = None, meta: dict | None = None) -> None:
    """Append one step; the first append on an empty/missing file writes the header.

    Raises :class:`OrderViolation` if ``(episode, t)`` does not strictly increase.
    """
    path = Path(path)
    last = _last_line(path) if path.exists() else None
    if last is None:
        if task is None:
            raise ValueError("first append to a log needs run_id and task")
        _check_step(step, task)
        with open(path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(_header_line(run_id or "", task, meta) + "\n")
            fh.write(_step_to_json(step) + "\n")
        return
    rec = json.loads(last)
    if rec.get("kind") != "header":
        prev = (rec["episode"], rec["t"])
        if step.key <= prev:
            raise OrderViolation(f"step {step.key} does not follow {prev}")
    else:
        _check_step(step, rec.get("task"))
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(_step_to_json(step) + "\n")


def write_trajectory(path: str | os.PathLike, log: TrajectoryLog) -> None:
    """Write a whole log at once (truncates ``path``)."""
    lines = [_header_line(log.run_id, log.task, log.meta)]
    prev = None
    for step in log.steps:
        _check_step(step, log.task)
        if prev is not None and step.key <= prev:
            raise OrderViolation(f"step {step.key} does not follow {prev}")
        prev = step.key
        lines.append(_step_to_json(step))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_trajectory(path: str | os.PathLike) -> TrajectoryLog:
    log = TrajectoryLog()
    prev = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(exc), lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("expected a JSON object", lineno)
            if rec.get("kind") == "header":
                if lineno != 1:
                    raise ParseError("header must be the first line", lineno)
                log.run_id = rec.get("run_id", "")
                log.task = rec.get("task")
                log.meta = dict(rec.get("meta", {}))
                continue
            try:
                step = Step(
                    episode=int(rec["episode"]),
                    t=int(rec["t"]),
                    state=_decode_state(rec["state"]),
                    action=rec["action"],
                    reward=rec["reward"],
                    next_state=_decode_state(rec["next_state"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"malformed step record ({exc})", lineno) from None
            if prev is not None and step.key <= prev:
                raise OrderViolation(f"line {lineno}: step {step.key} does not follow {prev}")
            if log.task == "graph" and step.action is not None:
                raise ParseError("graph-task step with an action", lineno)
            prev = step.key
            log.steps.append(step)
    return log


# -- CSV reports -----------------------------------------------------------

KINDS = ("int", "real", "string")


@dataclass
class ReportTable:
    name: str
    columns: list[tuple[str, str]]
    rows: list[list] = field(default_factory=list)

    def __post_init__(self):
        for col, kind in self.columns:
            if kind not in KINDS:
                raise ValueError(f"column {col!r}: unknown kind {kind!r}")
        for row in self.rows:
            self._check(row)

    @property
    def column_names(self) -> list[str]:
        return [c for c, _ in self.columns]

    def _check(self, row: Sequence) -> None:
        if len(row) != len(self.columns):
            raise ValueError(f"{self.name}: row has {len(row)} cells, table has {len(self.columns)} columns")
        for value, (col, kind) in zip(row, self.columns):
            if value is None:
                continue
            ok = {
                "int": isinstance(value, (int, np.integer)) and not isinstance(value, bool),
                "real": isinstance(value, (int, float, np.integer, np.floating)) and not isinstance(value, bool),
                "string": isinstance(value, str),
            }[kind]
            if not ok:
                raise ValueError(f"{self.name}: column {col!r} expects {kind}, got {value!r}")

    def append(self, row: Sequence) -> None:
        self._check(row)
        self.rows.append(list(row))

    def column(self, name: str) -> list:
        i = self.column_names.index(name)
        return [r[i] for r in self.rows]

    def as_dicts(self) -> list[dict]:
        names = self.column_names
        return [dict(zip(names, r)) for r in self.rows]


def _fmt(value, kind: str) -> str:
    if value is None:
        return ""
    if kind == "real":
        value = float(value)
        return repr(value) if math.isfinite(value) else ("nan" if math.isnan(value) else repr(value))
    return str(int(value)) if kind == "int" else value


def write_csv(path: str | os.PathLike, table: ReportTable) -> None:
    """CSV with a header row and RFC 4180 quoting (CRLF line ends)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
        w.writerow(table.column_names)
        for row in table.rows:
            w.writerow([_fmt(v, k) for v, (_, k) in zip(row, table.columns)])


def read_csv(path: str | os.PathLike, kinds: dict[str, str] | None = None, name: str | None = None) -> ReportTable:
    """Read a CSV report. Columns not listed in ``kinds`` are read as strings."""
    kinds = kinds or {}
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty CSV", 1)
    cols = [(c, kinds.get(c, "string")) for c in rows[0]]
    conv = {"int": int, "real": float, "string": str}
    table = ReportTable(name or Path(path).stem, cols)
    for lineno, raw in enumerate(rows[1:], start=2):
        if len(raw) != len(cols):
            raise ParseError(f"expected {len(cols)} cells, got {len(raw)}", lineno)
        try:
            table.append([None if (v == "" and k != "string") else conv[k](v) for v, (_, k) in zip(raw, cols)])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    return table

