"""Binary checkpoint files.

Layout (all integers little-endian u32 unless noted)::

    b"FCN8CKPT"
    version (= 1)
    spec block: variant code (0=FCN32, 1=FCN16, 2=FCN8), number of stage
                widths, the widths, num_classes, input_channels,
                float width in bits (32 or 64)
    record count
    per record: name length, UTF-8 name, rank, dims..., payload
                (little-endian IEEE-754 floats of the declared width)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .network import VARIANTS, Network, NetworkSpec

MAGIC = b"FCN8CKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(network: Network, path) -> None:
    spec = network.spec
    bits = network.dtype.itemsize * 8
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    out += struct.pack("<II", VARIANTS.index(spec.variant), len(spec.stage_widths))
    out += struct.pack(f"<{len(spec.stage_widths)}I", *spec.stage_widths)
    out += struct.pack("<III", spec.num_classes, spec.input_channels, bits)
    params = list(network.named_parameters())
    out += struct.pack("<I", len(params))
    le = np.dtype(network.dtype).newbyteorder("<")
    for name, value in params:
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded)) + encoded
        out += struct.pack("<I", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape)
        out += np.ascontiguousarray(value, dtype=le).tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(
                f"payload length mismatch: {what} needs {n} bytes at offset {self.pos}, "
                f"file has {len(self.raw) - self.pos} left"
            )
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count, what))
        return vals[0] if count == 1 else vals


def load_checkpoint(path, expected_spec: NetworkSpec | None = None) -> Network:
    """Rebuild a network from ``path``.

    If ``expected_spec`` is given, a differing stored spec is an error.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("magic mismatch: not an FCN checkpoint")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, expected {VERSION}")
    variant_code, n_widths = r.u32("spec", 2)
    if variant_code >= len(VARIANTS):
        raise CheckpointError(f"unknown variant code {variant_code}")
    widths = r.u32("stage widths", n_widths) if n_widths else ()
    if n_widths == 1:
        widths = (widths,)
    num_classes, input_channels, bits = r.u32("spec", 3)
    if bits not in (32, 64):
        raise CheckpointError(f"unsupported float width {bits}")
    try:
        spec = NetworkSpec(VARIANTS[variant_code], tuple(widths), num_classes, input_channels)
    except ValueError as exc:
        raise CheckpointError(f"invalid stored spec: {exc}") from None
    if expected_spec is not None and spec != expected_spec:
        raise CheckpointError(f"spec mismatch: checkpoint holds {spec}, expected {expected_spec}")

    dtype = np.float32 if bits == 32 else np.float64
    network = Network(spec, dtype)
    expected = dict(network.named_parameters())
    count = r.u32("record count")
    if count != len(expected):
        raise CheckpointError(f"checkpoint has {count} records, network expects {len(expected)}")
    le = np.dtype(dtype).newbyteorder("<")
    for _ in range(count):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        if name not in expected:
            raise CheckpointError(f"unexpected parameter record {name!r}")
        rank = r.u32("rank")
        dims = r.u32("dims", rank) if rank else ()
        if rank == 1:
            dims = (dims,)
        target = expected[name]
        if tuple(dims) != target.shape:
            raise CheckpointError(f"shape mismatch for {name}: file {tuple(dims)}, network {target.shape}")
        nbytes = int(np.prod(dims, dtype=np.int64)) * le.itemsize
        target[...] = np.frombuffer(r.take(nbytes, name), dtype=le).reshape(dims)
    if r.pos != len(r.raw):
        raise CheckpointError(f"payload length mismatch: {len(r.raw) - r.pos} trailing bytes")
    return network
