"""On-disk formats: the shared volume container, geometry config text,
and the checkpoint layout (manifest header + concatenated containers).

Container layout, all little-endian:
  8 bytes   magic "KUKVOL01"
  1 byte    dtype code (0 = 32-bit float; the only code defined)
  3 uint32  extents H, W, D
  payload   H*W*D float32 values, row-major (H-major)

Panoramic images reuse the container with D=1. Checkpoints carry one
container per parameter tensor after a plain-text manifest that maps
parameter names to shapes and byte offsets.
"""

from __future__ import annotations

import io
import struct

import numpy as np

MAGIC = b"KUKVOL01"
DTYPE_F32 = 0

GEOM_KEYS = ("h", "k", "a1", "b1", "a2", "b2", "W", "K", "dt")
_GEOM_INT = {"W", "K"}

__all__ = [
    "write_volume", "read_volume", "volume_bytes", "volume_from_bytes",
    "parse_geometry_text", "format_geometry", "load_geometry",
    "save_checkpoint", "load_checkpoint",
]


def volume_bytes(arr: np.ndarray) -> bytes:
    """Serialize a 3D array (or 2D image, promoted to D=1)."""
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"expected 2D or 3D array, got ndim={a.ndim}")
    h, w, d = a.shape
    head = MAGIC + struct.pack("<BIII", DTYPE_F32, h, w, d)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def volume_from_bytes(buf: bytes, offset: int = 0):
    """Deserialize one container; returns (array float32, bytes consumed)."""
    if buf[offset:offset + 8] != MAGIC:
        raise ValueError("bad magic; not a volume container")
    code, h, w, d = struct.unpack_from("<BIII", buf, offset + 8)
    if code != DTYPE_F32:
        raise ValueError(f"unknown dtype code {code}")
    n = h * w * d
    start = offset + 8 + 13
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=start)
    return data.reshape(h, w, d).copy(), (start + 4 * n) - offset


def write_volume(path, arr):
    with open(path, "wb") as f:
        f.write(volume_bytes(arr))


def read_volume(path) -> np.ndarray:
    """Read a container; D=1 volumes come back squeezed to 2D."""
    with open(path, "rb") as f:
        buf = f.read()
    arr, used = volume_from_bytes(buf)
    if used != len(buf):
        raise ValueError("trailing bytes after container payload")
    if arr.shape[2] == 1:
        return arr[:, :, 0]
    return arr


def parse_geometry_text(text: str) -> dict:
    """Parse flat key=value lines; unknown keys are an error, all nine
    keys are required. '#' starts a comment, blank lines ignored."""
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in GEOM_KEYS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        try:
            seen[key] = int(val) if key in _GEOM_INT else float(val)
        except ValueError as e:
            raise ValueError(f"line {lineno}: bad value for {key!r}") from e
    missing = [k for k in GEOM_KEYS if k not in seen]
    if missing:
        raise ValueError(f"missing keys: {', '.join(missing)}")
    return seen


def format_geometry(cfg: dict) -> str:
    return "".join(f"{k}={cfg[k]}\n" for k in GEOM_KEYS)


def load_geometry(path) -> dict:
    with open(path, "r") as f:
        return parse_geometry_text(f.read())


def save_checkpoint(path, named_arrays):
    """Write (name, array) pairs: text manifest, blank line, containers.

    Manifest rows are 'name shape offset' where offset is relative to
    the start of the binary section and shape is comma-joined extents
    of the array as stored (arrays of any rank are stored flattened
    into an H×1×1 container; shape records the true rank).
    """
    rows = []
    blobs = []
    offset = 0
    for name, arr in named_arrays:
        a = np.asarray(arr)
        blob = volume_bytes(a.reshape(a.size, 1, 1))
        shape = ",".join(str(s) for s in a.shape) if a.ndim else "scalar"
        rows.append(f"{name} {shape} {offset}")
        blobs.append(blob)
        offset += len(blob)
    header = "\n".join(rows) + "\n\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> dict:
    """Read back name → float32 array (original shapes restored)."""
    with open(path, "rb") as f:
        buf = f.read()
    split = buf.index(b"\n\n")
    header = buf[:split].decode("ascii")
    base = split + 2
    out = {}
    for row in header.splitlines():
        name, shape_s, off_s = row.rsplit(" ", 2)
        arr, _ = volume_from_bytes(buf, base + int(off_s))
        flat = arr.reshape(-1)
        if shape_s == "scalar":
            out[name] = flat.reshape(())
        else:
            shape = tuple(int(s) for s in shape_s.split(","))
            out[name] = flat.reshape(shape)
    return out
