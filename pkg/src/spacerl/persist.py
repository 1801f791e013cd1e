"""Checkpoint and metrics file formats.

Checkpoint byte layout (all integers little-endian)::

    offset  size  content
    0       4     magic b"SPCK"
    4       4     uint32 format_version (currently 1)
    8       4     uint32 header length H
    12      H     UTF-8 JSON header, keys sorted, no whitespace
    12+H    8*n   theta as n float64 values, little-endian

Header keys: ``arch``, ``feature_map``, ``state_dim``, ``action_dim``,
``hidden``, ``n_params``, ``meta`` (free-form mapping) and ``train_state``
(``null`` or ``{iteration, h_d, v, prev_j_c, prev_j_r, lam}``). JSON floats
are written with shortest round-trip repr, so a load/save cycle reproduces
the file byte for byte.

Metrics file: one header line ``seed,iter,J_R,J_C,J_D,h_D,lambda,wall_time``
followed by one row per (seed, iteration); floats use 17 significant digits.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .algorithms import HdController, IterationRecord, TrainState
from .errors import ConfigError
from .policy import GaussianPolicy

MAGIC = b"SPCK"
FORMAT_VERSION = 1
METRICS_VERSION = 1
METRICS_COLUMNS = ("seed", "iter", "J_R", "J_C", "J_D", "h_D", "lambda", "wall_time")
METRICS_HEADER = ",".join(METRICS_COLUMNS)
PLOT_QUANTITIES = ("J_R", "J_C", "J_D", "h_D")


class CheckpointError(ConfigError):
    pass


class MetricsFormatError(ConfigError):
    pass


@dataclass
class Checkpoint:
    policy: GaussianPolicy
    train_state: TrainState | None = None
    meta: dict = field(default_factory=dict)


def encode_checkpoint(policy: GaussianPolicy, train_state: TrainState | None = None, meta=None) -> bytes:
    ts = None
    if train_state is not None:
        hd = train_state.hd
        ts = {"iteration": int(train_state.iteration), "h_d": float(hd.h_d), "v": float(hd.v),
              "prev_j_c": hd.prev_j_c, "prev_j_r": hd.prev_j_r, "lam": float(train_state.lam)}
    header = {
        "arch": policy.arch, "feature_map": policy.feature_map, "state_dim": policy.state_dim,
        "action_dim": policy.action_dim, "hidden": policy.hidden, "n_params": policy.n_params,
        "meta": meta or {}, "train_state": ts,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return (MAGIC + struct.pack("<II", FORMAT_VERSION, len(blob)) + blob
            + policy.theta.astype("<f8").tobytes())


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    body = data[12 + hlen:]
    if len(body) != 8 * header["n_params"]:
        raise CheckpointError(f"checkpoint holds {len(body)} parameter bytes, expected {8 * header['n_params']}")
    theta = np.frombuffer(body, dtype="<f8").astype(np.float64)
    policy = GaussianPolicy(header["state_dim"], header["action_dim"], theta, header["arch"],
                            header["hidden"], header["feature_map"])
    state = None
    ts = header.get("train_state")
    if ts is not None:
        state = TrainState(policy, HdController(ts["h_d"], ts["v"], ts["prev_j_c"], ts["prev_j_r"]),
                           ts["lam"], ts["iteration"])
    return Checkpoint(policy, state, header.get("meta") or {})


def save_checkpoint(path, policy, train_state=None, meta=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(policy, train_state, meta))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    return decode_checkpoint(path.read_bytes())


def _fmt(x) -> str:
    return format(float(x), ".17g")


def metrics_line(seed: int, rec: IterationRecord, record_wall_time: bool) -> str:
    wall = rec.wall_time if record_wall_time else 0.0
    return ",".join([str(int(seed)), str(int(rec.iter)), _fmt(rec.J_R), _fmt(rec.J_C), _fmt(rec.J_D),
                     _fmt(rec.h_D), _fmt(rec.lam), _fmt(wall)])


def write_metrics(path, lines) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join([METRICS_HEADER, *lines]) + "\n")
    return path


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise MetricsFormatError(f"metrics file {path} not found")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_COLUMNS:
            raise MetricsFormatError(f"{path}: header must be {METRICS_HEADER!r}")
        rows = []
        for lineno, fields in enumerate(reader, start=2):
            if len(fields) != len(METRICS_COLUMNS):
                raise MetricsFormatError(f"{path}:{lineno}: expected {len(METRICS_COLUMNS)} fields")
            try:
                row = {"seed": int(fields[0]), "iter": int(fields[1])}
                row.update({k: float(v) for k, v in zip(METRICS_COLUMNS[2:], fields[2:])})
            except ValueError as exc:
                raise MetricsFormatError(f"{path}:{lineno}: {exc}") from None
            rows.append(row)
    return rows


def aggregate(rows, quantity: str):
    """``(iter, mean, std, n)`` per iteration across seeds; population std."""
    by_iter = {}
    for row in rows:
        by_iter.setdefault(row["iter"], []).append(row[quantity])
    out = []
    for it in sorted(by_iter):
        vals = np.array(by_iter[it])
        out.append((it, float(vals.mean()), float(vals.std()), len(vals)))
    return out


def export_plotdata(metrics_path, out_dir) -> list[Path]:
    rows = read_metrics(metrics_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for q in PLOT_QUANTITIES:
        lines = ["iter,mean,std,n"]
        lines += [f"{it},{_fmt(m)},{_fmt(s)},{n}" for it, m, s, n in aggregate(rows, q)]
        path = out_dir / f"{q}.csv"
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    return written
