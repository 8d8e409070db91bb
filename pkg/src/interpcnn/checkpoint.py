"""Checkpoint container: one file holding the network description, every
parameter and batchnorm buffer as flat tensor blobs, and optimizer state.

Layout (all integers little-endian):
    magic   b"ICNN1"
    u32     metadata length, then that many bytes of UTF-8 JSON
    u32     parameter count, then per parameter: u16 name length, name,
            tensor blob (rank u32, dims u32 each, f64 values)
    u32     buffer count, same encoding
    u8      optimizer-present flag; if set: u64 step count, then for each
            parameter in order its first- and second-moment blobs
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError
from .networks import Network, spec_from_dict, spec_to_dict
from .tensor import Tensor, tensor_from_bytes, tensor_to_bytes
from .training import OptimState

MAGIC = b"ICNN1"


def _named_blob(name: str, values) -> bytes:
    encoded = name.encode("utf-8")
    tensor = values if isinstance(values, Tensor) else Tensor(np.asarray(values))
    return struct.pack("<H", len(encoded)) + encoded + tensor_to_bytes(tensor)


def _read_named_blob(buf: bytes, offset: int) -> tuple[str, Tensor, int]:
    (name_len,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    name = buf[offset:offset + name_len].decode("utf-8")
    offset += name_len
    tensor, offset = tensor_from_bytes(buf, offset)
    return name, tensor, offset


def save_checkpoint(path, network: Network, optim: OptimState | None = None,
                    extra: dict | None = None) -> None:
    meta = {
        "spec": spec_to_dict(network.spec),
        "network_seed": network.seed,
        "extra": extra or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    params = network.named_parameters()
    buffers = network.named_buffers()
    parts = [MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(params)))
    for name, tensor in params:
        parts.append(_named_blob(name, tensor))
    parts.append(struct.pack("<I", len(buffers)))
    for name, values in buffers:
        parts.append(_named_blob(name, values))
    if optim is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        parts.append(struct.pack("<Q", optim.step))
        parts.append(struct.pack("<d", optim.lr))
        for name, tensor in params:
            m = optim.m.get(name, np.zeros_like(tensor.values))
            v = optim.v.get(name, np.zeros_like(tensor.values))
            parts.append(_named_blob(f"{name}.m", m))
            parts.append(_named_blob(f"{name}.v", v))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[Network, OptimState | None, dict]:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise ContractError(f"bad magic in checkpoint {path}")
    offset = len(MAGIC)
    (meta_len,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    meta = json.loads(buf[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    network = Network(spec_from_dict(meta["spec"]), seed=meta["network_seed"])
    params = dict(network.named_parameters())
    (n_params,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    for _ in range(n_params):
        name, tensor, offset = _read_named_blob(buf, offset)
        if name not in params:
            raise ContractError(f"checkpoint parameter {name!r} not in network")
        if params[name].shape != tensor.shape:
            raise ContractError(
                f"checkpoint parameter {name!r} has shape {tensor.shape}, "
                f"network expects {params[name].shape}")
        params[name].values = tensor.values
    (n_buffers,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    for _ in range(n_buffers):
        name, tensor, offset = _read_named_blob(buf, offset)
        network.load_buffer(name, tensor.values)
    (has_optim,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    optim = None
    if has_optim:
        (step,) = struct.unpack_from("<Q", buf, offset)
        offset += 8
        (lr,) = struct.unpack_from("<d", buf, offset)
        offset += 8
        optim = OptimState(lr=lr, step=step)
        for _ in range(n_params * 2):
            name, tensor, offset = _read_named_blob(buf, offset)
            base, _, moment = name.rpartition(".")
            target = optim.m if moment == "m" else optim.v
            target[base] = tensor.values
    return network, optim, meta.get("extra", {})
