"""Raw float32 array files with JSON shape sidecars.

Every matrix in a corpus directory (and every mel emitted at inference) is
stored as `<name>.f32` -- raw little-endian IEEE-754 float32, row-major --
next to `<name>.shape.json` holding `{"dims": [...]}`.
"""

import json
from pathlib import Path

import numpy as np

from .errors import DataError


def sidecar_path(f32_path) -> Path:
    p = Path(f32_path)
    if p.suffix != ".f32":
        raise ValueError(f"expected a .f32 path, got {p}")
    return p.with_name(p.stem + ".shape.json")


def write_f32(path, array) -> None:
    """Write `array` as little-endian float32 plus its shape sidecar."""
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype="<f4")
    path.write_bytes(arr.tobytes())
    sidecar_path(path).write_text(
        json.dumps({"dims": list(arr.shape)}), encoding="utf-8"
    )


def read_f32(path) -> np.ndarray:
    """Read a .f32 file, validating byte count against its sidecar."""
    path = Path(path)
    side = sidecar_path(path)
    if not path.exists():
        raise DataError(f"missing array file: {path}")
    if not side.exists():
        raise DataError(f"missing shape sidecar: {side}")
    try:
        dims = json.loads(side.read_text(encoding="utf-8"))["dims"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"corrupt shape sidecar {side}: {exc}") from exc
    raw = path.read_bytes()
    expected = int(np.prod(dims, dtype=np.int64)) * 4
    if len(raw) != expected:
        raise DataError(
            f"{path}: {len(raw)} bytes on disk, sidecar dims {dims} "
            f"require {expected}"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
