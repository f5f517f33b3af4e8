"""Checkpoint container: named components of named tensors, CRC-guarded.

Layout: magic "SVCK", format version (u32), component count (u32); per
component a name record, frozen flag (u8), tensor count (u32); then all
tensor records named "component/param"; trailing CRC32 (u32 LE) over every
preceding byte.
"""

from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import ArtifactFormatError
from .numerics import Tensor

MAGIC = b"SVCK"
VERSION = 1


def save_checkpoint(path: Path, components: dict[str, tuple[bool, dict[str, np.ndarray]]]) -> None:
    """components: name -> (frozen flag, {param name -> array})."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(components)))
    names = sorted(components)
    for name in names:
        frozen, tensors = components[name]
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", 1 if frozen else 0))
        buf.write(struct.pack("<I", len(tensors)))
    for name in names:
        _, tensors = components[name]
        for pname in sorted(tensors):
            nm.write_tensor_record(buf, f"{name}/{pname}", np.asarray(tensors[pname]))
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(payload + struct.pack("<I", crc))


def load_checkpoint(path: Path) -> dict[str, tuple[bool, dict[str, np.ndarray]]]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise ArtifactFormatError(f"checkpoint {path}: bad magic")
    payload, crc_bytes = raw[:-4], raw[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ArtifactFormatError(f"checkpoint {path}: CRC mismatch, refusing to load")
    fh = io.BytesIO(payload[4:])
    (version,) = struct.unpack("<I", fh.read(4))
    if version != VERSION:
        raise ArtifactFormatError(f"checkpoint {path}: unsupported version {version}")
    (n_comp,) = struct.unpack("<I", fh.read(4))
    manifest = []
    for _ in range(n_comp):
        (nlen,) = struct.unpack("<I", fh.read(4))
        name = fh.read(nlen).decode("utf-8")
        (frozen,) = struct.unpack("<B", fh.read(1))
        (count,) = struct.unpack("<I", fh.read(4))
        manifest.append((name, bool(frozen), count))
    out: dict[str, tuple[bool, dict[str, np.ndarray]]] = {
        name: (frozen, {}) for name, frozen, _ in manifest}
    for name, frozen, count in manifest:
        for _ in range(count):
            rec = nm.read_tensor_record(fh)
            if rec is None:
                raise ArtifactFormatError(f"checkpoint {path}: truncated tensor records")
            full, arr = rec
            comp, _, pname = full.partition("/")
            if comp != name:
                raise ArtifactFormatError(f"checkpoint {path}: record {full!r} out of order")
            out[comp][1][pname] = arr
    return out


# ---------------------------------------------------------------------------
# adapters between checkpoints and live param dicts


def params_to_components(params: dict[str, Tensor],
                         frozen: bool = False) -> dict[str, tuple[bool, dict[str, np.ndarray]]]:
    """Split a flat param dict on the first dotted segment."""
    comps: dict[str, dict[str, np.ndarray]] = {}
    for name, t in params.items():
        comp, _, rest = name.partition(".")
        comps.setdefault(comp, {})[rest] = t.data
    return {c: (frozen, tensors) for c, tensors in comps.items()}


def components_to_params(components: dict[str, tuple[bool, dict[str, np.ndarray]]]) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for comp in sorted(components):
        frozen, tensors = components[comp]
        for pname in sorted(tensors):
            params[f"{comp}.{pname}"] = Tensor(tensors[pname], requires_grad=not frozen)
    return params
