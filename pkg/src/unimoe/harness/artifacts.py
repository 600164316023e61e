"""Byte-stable file writers for every artifact kind the CLI emits.

Reruns with identical configs must produce identical bytes, so all
writers avoid timestamps: floats are serialized with repr (shortest
round-trip), JSON keys are sorted, and array bundles are zip archives
with a fixed entry date (numpy's savez stamps wall-clock time into the
zip directory, which would break rerun equality; np.load still reads
these files as ordinary .npz).
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


def fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def write_csv(path: str | Path, header: Sequence[str],
              rows: Sequence[Sequence]) -> Path:
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row width {len(row)} != header width {len(header)}")
        lines.append(",".join(fmt(v) for v in row))
    return write_text(path, "\n".join(lines) + "\n")


def write_json(path: str | Path, payload) -> Path:
    return write_text(path, json.dumps(payload, sort_keys=True, indent=2,
                                       default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            zf.writestr(info, buf.getvalue())
    return path


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(path) as npz:
        return {name: npz[name] for name in npz.files}


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]
