"""Binary checkpoints for a :class:`~poolgen.nn.Network` and its optimizer.

Layout (little-endian)::

    b"PGCK"            magic
    u8                 format version
    u32                manifest length
    manifest           UTF-8 JSON: layer specs, input shape, seed, tensor list,
                       optimizer state
    f64[...]           tensor payloads in manifest order
    u32                CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .nn import SGD, LRSchedule, Network

MAGIC = b"PGCK"
VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def _tensors(net: Network, opt: SGD | None):
    out = [(f"param/{key}", layer.params[name]) for key, layer, name in net.named_params()]
    if opt is not None:
        out += [(f"velocity/{k}", v) for k, v in sorted(opt.velocity.items())]
    return out


def dumps(net: Network, opt: SGD | None = None, meta: dict | None = None) -> bytes:
    tensors = _tensors(net, opt)
    manifest = {
        "layers": net.layer_specs,
        "input_shape": list(net.input_shape),
        "seed": net.seed,
        "tensors": [[name, list(a.shape)] for name, a in tensors],
        "meta": meta or {},
    }
    if opt is not None:
        manifest["optimizer"] = {"momentum": opt.momentum, "weight_decay": opt.weight_decay,
                                 "steps": opt.steps, "schedule": opt.schedule.state()}
    head = json.dumps(manifest, sort_keys=True).encode()
    body = MAGIC + struct.pack("<BI", VERSION, len(head)) + head
    body += b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in tensors)
    return body + struct.pack("<I", zlib.crc32(body))


def save(path, net: Network, opt: SGD | None = None, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(net, opt, meta))


def loads(raw: bytes) -> tuple[Network, SGD | None, dict]:
    if raw[:4] != MAGIC:
        raise CheckpointVersionError("not a poolgen checkpoint (bad magic bytes)")
    if len(raw) < 13:
        raise CorruptCheckpointError("checkpoint truncated inside the header")
    version, mlen = struct.unpack("<BI", raw[4:9])
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {VERSION}")
    if len(raw) < 9 + mlen + 4:
        raise CorruptCheckpointError("checkpoint truncated inside the manifest")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise CorruptCheckpointError("checkpoint checksum mismatch (truncated or corrupted)")
    try:
        manifest = json.loads(raw[9:9 + mlen])
    except ValueError as exc:
        raise CorruptCheckpointError(f"unreadable manifest: {exc}") from exc
    net = Network(manifest["layers"], tuple(manifest["input_shape"]), manifest["seed"])
    opt = None
    if "optimizer" in manifest:
        o = manifest["optimizer"]
        opt = SGD(LRSchedule.from_state(o["schedule"]), o["momentum"], o["weight_decay"])
        opt.steps = o["steps"]
    targets = {f"param/{key}": layer.params[name] for key, layer, name in net.named_params()}
    offset = 9 + mlen
    payload_end = len(raw) - 4
    for name, shape in manifest["tensors"]:
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > payload_end:
            raise CorruptCheckpointError(f"payload truncated at tensor {name}")
        arr = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
        if name.startswith("param/"):
            if name not in targets or targets[name].shape != arr.shape:
                raise CorruptCheckpointError(f"tensor {name} does not fit the rebuilt network")
            targets[name][...] = arr
        elif opt is not None:
            opt.velocity[name[len("velocity/"):]] = arr
    if offset != payload_end:
        raise CorruptCheckpointError("trailing bytes after the last tensor")
    return net, opt, manifest.get("meta", {})


def load(path) -> tuple[Network, SGD | None, dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(raw)
