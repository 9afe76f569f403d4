"""On-disk formats: binary PGM/PPM, raw float32 fields with JSON sidecars."""
from __future__ import annotations

import json
import os
import re
from pathlib import Path

import numpy as np

from .fields import DisplacementField, GrayImage, StrainField

FIELD_TYPES = {"displacement": DisplacementField, "strain": StrainField}


def dumps(obj) -> str:
    """Canonical JSON text used for every file this package writes."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


def quantize(values) -> np.ndarray:
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, img: GrayImage):
    data = quantize(img.data)
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


_PNM_HEADER = re.compile(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+"
                         rb"(?:#[^\n]*\n\s*)*(\d+)\s")


def _read_pnm(path, magic):
    raw = Path(path).read_bytes()
    m = _PNM_HEADER.match(raw)
    if m is None or m.group(1) != magic:
        raise ValueError(f"{path}: not a binary {magic.decode()} file")
    w, h, maxval = (int(g) for g in m.group(2, 3, 4))
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    body = raw[m.end():]
    if len(body) != w * h * channels:
        raise ValueError(f"{path}: expected {w * h * channels} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape((h, w) if channels == 1 else (h, w, 3))


def read_pgm(path) -> GrayImage:
    return GrayImage(_read_pnm(path, b"P5") / 255.0)


def write_ppm(path, rgb, comment=None):
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    head = "P6\n"
    if comment:
        head += "".join(f"# {line}\n" for line in comment.splitlines())
    head += f"{w} {h}\n255\n"
    Path(path).write_bytes(head.encode("ascii") + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6").copy()


def _sidecar(path):
    return Path(path).with_suffix(".json")


def write_field(path, field):
    """Write ``field`` as raw little-endian float32 plus a JSON sidecar.

    ``path`` should end in ``.f32``; the sidecar replaces that suffix with
    ``.json``.
    """
    arr = field.as_array().astype("<f4")
    Path(path).write_bytes(arr.tobytes(order="C"))
    write_json(_sidecar(path), {
        "height": field.height,
        "width": field.width,
        "channels": list(field.channel_names),
        "semantics": field.semantics,
        "units": field.units,
    })


def read_field(path):
    meta = read_json(_sidecar(path))
    cls = FIELD_TYPES.get(meta.get("semantics"))
    if cls is None:
        raise ValueError(f"{path}: unknown field semantics {meta.get('semantics')!r}")
    if list(meta["channels"]) != list(cls.channel_names):
        raise ValueError(f"{path}: channels {meta['channels']} do not match {cls.__name__}")
    h, w, c = meta["height"], meta["width"], len(meta["channels"])
    raw = Path(path).read_bytes()
    if len(raw) != 4 * h * w * c:
        raise ValueError(f"{path}: expected {4 * h * w * c} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(c, h, w).astype(np.float64)
    return cls.from_array(arr)


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        os.makedirs(p, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create directory {p}: {exc.strerror}") from exc
    return p
