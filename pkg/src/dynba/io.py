"""Readers and writers for the on-disk artifacts (CSV, TUM, PLY, JSON)."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .ba.states import FrameState
from .classifier import LandmarkLabel
from .geometry import Rotation
from .imu_preint import ImuSample

FMT = "%.9g"   # 9 significant digits
IMU_HEADER = ["t", "gx", "gy", "gz", "ax", "ay", "az"]
TRACKS_HEADER = ["frame", "landmark_id", "u", "v"]
STATES_HEADER = ["frame", "t", "px", "py", "pz", "qw", "qx", "qy", "qz",
                 "vx", "vy", "vz", "bax", "bay", "baz", "bgx", "bgy", "bgz"]
DEBUG_HEADER = ["frame", "landmark_id", "d_raw", "sigma", "d_s", "label"]

LABEL_RGB = {
    LandmarkLabel.STATIC: (200, 200, 200),
    LandmarkLabel.DYNAMIC_CANDIDATE: (40, 200, 40),
    LandmarkLabel.DYNAMIC_ELIMINATED: (40, 40, 230),
    LandmarkLabel.CONFIRMED_DYNAMIC: (230, 40, 40),
}


class FormatError(ValueError):
    pass


def _fmt(x) -> str:
    return FMT % x


def _reader(path, header):
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != header:
        raise FormatError(f"{path}: expected header {','.join(header)}")
    return rows[1:]


def _floats(path, row, n, lineno):
    if len(row) != n:
        raise FormatError(f"{path}:{lineno}: expected {n} fields, got {len(row)}")
    try:
        return [float(x) for x in row]
    except ValueError as exc:
        raise FormatError(f"{path}:{lineno}: {exc}") from None


# -- IMU -----------------------------------------------------------------

def write_imu_csv(path, samples):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IMU_HEADER)
        for s in samples:
            w.writerow([_fmt(s.t), *map(_fmt, s.gyro), *map(_fmt, s.accel)])


def read_imu_csv(path) -> list:
    out = []
    for k, row in enumerate(_reader(path, IMU_HEADER), start=2):
        v = _floats(path, row, 7, k)
        out.append(ImuSample(v[0], v[1:4], v[4:7]))
    return out


# -- tracks --------------------------------------------------------------

def write_tracks_csv(path, frames):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACKS_HEADER)
        for f in frames:
            for lid, uv in zip(f.ids, f.pixels):
                w.writerow([f.frame_id, int(lid), _fmt(uv[0]), _fmt(uv[1])])


def read_tracks_csv(path) -> dict:
    """Map frame id -> (ids, pixels) in file order."""
    acc: dict[int, tuple[list, list]] = {}
    for k, row in enumerate(_reader(path, TRACKS_HEADER), start=2):
        if len(row) != 4:
            raise FormatError(f"{path}:{k}: expected 4 fields, got {len(row)}")
        try:
            f, lid, u, v = int(row[0]), int(row[1]), float(row[2]), float(row[3])
        except ValueError as exc:
            raise FormatError(f"{path}:{k}: {exc}") from None
        ids, pix = acc.setdefault(f, ([], []))
        ids.append(lid)
        pix.append((u, v))
    return {f: (np.array(i, dtype=np.int64), np.array(p, dtype=float).reshape(-1, 2))
            for f, (i, p) in sorted(acc.items())}


# -- trajectories ---------------------------------------------------------

def write_tum(path, states):
    """``timestamp tx ty tz qx qy qz qw``, one pose per line."""
    with Path(path).open("w") as fh:
        for s in states:
            w, x, y, z = s.R.q
            fh.write(" ".join(_fmt(v) for v in (s.timestamp, *s.p, x, y, z, w)) + "\n")


def read_tum(path):
    """Returns ``(times, positions, quaternions_wxyz)``."""
    rows = []
    for k, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"{path}:{k}: expected 8 fields, got {len(parts)}")
        rows.append([float(x) for x in parts])
    a = np.array(rows, dtype=float).reshape(-1, 8)
    return a[:, 0], a[:, 1:4], a[:, [7, 4, 5, 6]]


def write_states_csv(path, states):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATES_HEADER)
        for s in states:
            w.writerow([s.frame_id] + [_fmt(v) for v in (s.timestamp, *s.p, *s.R.q, *s.v, *s.ba, *s.bg)])


def read_states_csv(path) -> list:
    out = []
    for k, row in enumerate(_reader(path, STATES_HEADER), start=2):
        v = _floats(path, row, len(STATES_HEADER), k)
        out.append(FrameState(int(v[0]), v[1], v[2:5], Rotation(v[5:9]), v[9:12], v[12:15], v[15:18]))
    return out


# -- labels and map --------------------------------------------------------

def write_labels_csv(path, labels: dict):
    """``landmark_id,is_dynamic``; values may be booleans or labels."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["landmark_id", "is_dynamic"])
        for lid in sorted(labels):
            lab = labels[lid]
            dyn = lab.is_dynamic if isinstance(lab, LandmarkLabel) else bool(lab)
            w.writerow([int(lid), int(dyn)])


def read_labels_csv(path) -> dict:
    out = {}
    for k, row in enumerate(_reader(path, ["landmark_id", "is_dynamic"]), start=2):
        if len(row) != 2 or row[1].strip() not in ("0", "1"):
            raise FormatError(f"{path}:{k}: expected landmark_id,0|1")
        out[int(row[0])] = row[1].strip() == "1"
    return out


def write_map_csv(path, map_points):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["landmark_id", "x", "y", "z", "label"])
        for m in map_points:
            w.writerow([m.landmark_id, *map(_fmt, m.position), m.label.value])


def write_map_ply(path, map_points):
    """ASCII PLY with per-vertex RGB derived from the label."""
    lines = ["ply", "format ascii 1.0", f"element vertex {len(map_points)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    for m in map_points:
        r, g, b = LABEL_RGB[m.label]
        lines.append(" ".join([*map(_fmt, m.position), str(r), str(g), str(b)]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_debug_csv(path, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DEBUG_HEADER)
        for f, lid, d, sig, ds, lab in rows:
            w.writerow([f, lid, _fmt(d), _fmt(sig), _fmt(ds), lab])


# -- JSON ----------------------------------------------------------------------

def _json_clean(o):
    if isinstance(o, dict):
        return {str(k): _json_clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_json_clean(v) for v in o]
    if isinstance(o, (np.floating, float)):
        o = float(o)
        return o if math.isfinite(o) else None
    if isinstance(o, np.integer):
        return int(o)
    return o


def write_json(path, doc):
    Path(path).write_text(json.dumps(_json_clean(doc), indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
