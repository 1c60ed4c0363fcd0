"""Binary checkpoint format: magic "FSLB", versioned named f32 tensors, CRC32.

Layout (all integers little-endian):
    magic   4 bytes  b"FSLB"
    version u32
    count   u32                      number of entries
    entry   u16 name_len; name utf-8; u32 ndim; u32 dims[ndim]; f32 data[...]
    crc     u32                      zlib.crc32 of every preceding byte

Parameters are stored f32 (compute stays f64); the round-trip error is bounded
by one f32 rounding, max abs err <= 6e-8 x magnitude.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .network import NetArch, VelocityNet, param_shapes

MAGIC = b"FSLB"
VERSION = 1

_ARCH_KEY = "__arch__"


class CheckpointError(ValueError):
    pass


def _pack_entry(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4")
    name_b = name.encode("utf-8")
    parts = [struct.pack("<H", len(name_b)), name_b, struct.pack("<I", data.ndim)]
    parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
    parts.append(data.tobytes())
    return b"".join(parts)


def checkpoint_bytes(net: VelocityNet) -> bytes:
    arch = net.arch
    meta = np.array(
        [arch.dim, arch.hidden, arch.depth, arch.n_classes, arch.t_scale,
         arch.n_freqs, arch.freq_min, arch.freq_max]
    )
    body = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(net.params) + 1)]
    body.append(_pack_entry(_ARCH_KEY, meta))
    for name, arr in net.params.items():
        body.append(_pack_entry(name, arr))
    blob = b"".join(body)
    return blob + struct.pack("<I", zlib.crc32(blob))


def save_checkpoint(net: VelocityNet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(net))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"truncated file: needed {n} bytes for {what} at offset {self.pos}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_entries(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise CheckpointError("truncated file: no trailing CRC")
    payload, stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    actual = zlib.crc32(payload)
    if actual != stored:
        raise CheckpointError(
            f"CRC mismatch at offset {len(payload)}: "
            f"stored 0x{stored:08x}, computed 0x{actual:08x}"
        )
    r = _Reader(payload)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, expected {VERSION}")
    count = r.u32("entry count")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u16("name length")
        name = r.take(name_len, "name").decode("utf-8")
        ndim = r.u32("ndim")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "dims"))
        size = int(np.prod(dims)) if dims else 1
        raw = r.take(4 * size, f"data of {name!r}")
        entries[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float64)
    if r.pos != len(payload):
        raise CheckpointError(f"{len(payload) - r.pos} trailing bytes before CRC")
    return entries


def load_checkpoint(path) -> VelocityNet:
    entries = load_entries(path)
    if _ARCH_KEY not in entries:
        raise CheckpointError("missing architecture entry")
    meta = entries.pop(_ARCH_KEY)
    if len(meta) == 6:  # records written before the frequency band was stored
        meta = np.concatenate([meta, [0.05, 30.0]])
    arch = NetArch(
        dim=int(meta[0]),
        hidden=int(meta[1]),
        depth=int(meta[2]),
        n_classes=int(meta[3]),
        t_scale=float(meta[4]),
        n_freqs=int(meta[5]),
        freq_min=float(meta[6]),
        freq_max=float(meta[7]),
    )
    expected = param_shapes(arch)
    params: dict[str, np.ndarray] = {}
    for name, shape in expected.items():
        if name not in entries:
            raise CheckpointError(f"missing parameter {name!r}")
        arr = entries[name]
        if arr.shape != shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {arr.shape}, expected {shape}"
            )
        params[name] = arr
    return VelocityNet(arch, params)
