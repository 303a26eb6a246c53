"""Binary container and CSV helpers shared by ensembles, PDE solutions and reports.

Container layout (all little-endian)::

    magic      8 bytes  b"FBSDLAB\\0"
    version    uint32
    hdr_len    uint32
    header     hdr_len bytes of UTF-8 JSON (metadata + array directory)
    arrays     float64 data, each array stored column-major, in directory order

The JSON header always carries ``"arrays": [[name, shape], ...]``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"FBSDLAB\x00"
VERSION = 1
_FMT = "<8sII"


class ContainerError(ValueError):
    pass


def write_container(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    path = Path(path)
    arrays = {k: np.asarray(v, dtype="<f8") for k, v in arrays.items()}
    header = dict(meta or {})
    header["arrays"] = [[k, list(v.shape)] for k, v in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack(_FMT, MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.asfortranarray(v).tobytes(order="F"))
    return path


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    n0 = struct.calcsize(_FMT)
    if len(raw) < n0:
        raise ContainerError("file too short for container header")
    magic, version, hlen = struct.unpack(_FMT, raw[:n0])
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    header = json.loads(raw[n0:n0 + hlen].decode("utf-8"))
    off = n0 + hlen
    arrays = {}
    for name, shape in header.pop("arrays"):
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        arrays[name] = data.reshape(shape, order="F").astype(float)
        off += 8 * count
    if off != len(raw):
        raise ContainerError("trailing bytes after declared arrays")
    return header, arrays


def fmt(x: float) -> str:
    """Locale-independent decimal with 17 significant digits."""
    return format(float(x), ".17g")


def write_csv(path, header: Iterable[str], rows: Iterable[Iterable], comments: Iterable[str] = ()) -> Path:
    path = Path(path)
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header))
    for r in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in r])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_csv(path) -> tuple[list[str], list[str], list[list[str]]]:
    """Return (comment lines, header, rows) with values left as strings."""
    comments, lines = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            comments.append(line[1:].strip())
        else:
            lines.append(line)
    rows = list(csv.reader(lines))
    if not rows:
        return comments, [], []
    return comments, rows[0], rows[1:]


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dump_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
