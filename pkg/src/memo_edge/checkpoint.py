"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MEMO" | u32 version | u32 manifest length | manifest (UTF-8) | payloads | u64 checksum

The manifest has one ``name<TAB>dtype<TAB>shape`` line per tensor, in
payload order, plus ``@key=value`` metadata lines.  The checksum is an
8-byte BLAKE2b digest of the concatenated payload bytes.
"""

from __future__ import annotations

import hashlib
import os
import struct
from collections import OrderedDict
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .model import MEMONetwork, ModelConfig

MAGIC = b"MEMO"
VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_TAGS = {v: k for k, v in DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def encode_checkpoint(params: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> bytes:
    lines, chunks = [], []
    for key, value in (meta or {}).items():
        value = str(value)
        if "\n" in key or "\n" in value or "=" in key:
            raise CheckpointError(f"metadata key/value not representable: {key!r}")
        lines.append(f"@{key}={value}")
    for name, arr in params.items():
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        if any(c in name for c in "\t\n@") or not name:
            raise CheckpointError(f"parameter name not representable: {name!r}")
        tag = _TAGS.get(arr.dtype.newbyteorder("<"))
        if tag is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        lines.append(f"{name}\t{tag}\t{','.join(str(d) for d in arr.shape)}")
        chunks.append(np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes())
    manifest = "\n".join(lines).encode("utf-8")
    payload = b"".join(chunks)
    head = MAGIC + struct.pack("<II", VERSION, len(manifest))
    return head + manifest + payload + struct.pack("<Q", _checksum(payload))


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> tuple[OrderedDict, dict]:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: checkpoint format version {version}, this build reads version {VERSION}")
    if 12 + mlen > len(blob):
        raise CheckpointError(f"{source}: truncated manifest")
    try:
        manifest = blob[12 : 12 + mlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{source}: manifest is not UTF-8") from exc
    meta: dict[str, str] = {}
    entries = []
    for line in manifest.split("\n") if manifest else []:
        if line.startswith("@"):
            key, sep, value = line[1:].partition("=")
            if not sep:
                raise CheckpointError(f"{source}: malformed metadata line {line!r}")
            meta[key] = value
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CheckpointError(f"{source}: malformed manifest line {line!r}")
        name, tag, shape_s = parts
        if tag not in DTYPES:
            raise CheckpointError(f"{source}: unknown dtype tag {tag!r} for {name}")
        try:
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
        except ValueError as exc:
            raise CheckpointError(f"{source}: bad shape {shape_s!r} for {name}") from exc
        entries.append((name, DTYPES[tag], shape))
    offset = 12 + mlen
    sizes = [int(np.prod(shape, dtype=np.int64)) * dt.itemsize for _, dt, shape in entries]
    end = offset + sum(sizes)
    if end + 8 > len(blob):
        raise CheckpointError(f"{source}: truncated payload ({len(blob) - offset} bytes, need {end + 8 - offset})")
    if end + 8 < len(blob):
        raise CheckpointError(f"{source}: {len(blob) - end - 8} unexpected trailing bytes")
    payload = blob[offset:end]
    (stored,) = struct.unpack_from("<Q", blob, end)
    if stored != _checksum(payload):
        raise CheckpointError(f"{source}: checksum mismatch; payload is corrupt")
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    pos = 0
    for (name, dt, shape), size in zip(entries, sizes):
        if name in params:
            raise CheckpointError(f"{source}: duplicate tensor {name}")
        params[name] = np.frombuffer(payload, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += size
    return params, meta


def save_checkpoint(params: Mapping[str, np.ndarray], path, meta: Mapping[str, str] | None = None) -> None:
    blob = encode_checkpoint(params, meta)
    tmp = f"{os.fspath(path)}.tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[OrderedDict, dict]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob, os.fspath(path))


# ---------------------------------------------------------------------------
# whole networks
# ---------------------------------------------------------------------------


def network_meta(net: MEMONetwork) -> dict[str, str]:
    cfg = net.config
    meta = {
        "channels": ",".join(str(c) for c in cfg.channels),
        "groups": str(cfg.groups),
        "pe_dim": str(cfg.pe_dim),
        "image_channels": str(cfg.image_channels),
        "seed": str(cfg.seed),
    }
    if net.lora:
        meta.update(
            lora_rank=str(net.lora["rank"]),
            lora_alpha=repr(float(net.lora["alpha"])),
            lora_targets=",".join(net.lora["targets"]),
            lora_seed=str(net.lora["seed"]),
        )
    return meta


def save_network(net: MEMONetwork, path) -> None:
    save_checkpoint(net.params, path, network_meta(net))


def load_network(path) -> MEMONetwork:
    """Rebuild a network (including any adapters) from a checkpoint written by :func:`save_network`."""
    from .training import lora_inject

    params, meta = load_checkpoint(path)
    try:
        cfg = ModelConfig(
            channels=tuple(int(c) for c in meta["channels"].split(",")),
            groups=int(meta["groups"]),
            pe_dim=int(meta["pe_dim"]),
            image_channels=int(meta["image_channels"]),
            seed=int(meta["seed"]),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: missing or invalid model metadata ({exc})") from exc
    net = MEMONetwork(cfg)
    if "lora_rank" in meta:
        lora_inject(
            net,
            int(meta["lora_rank"]),
            float(meta["lora_alpha"]),
            tuple(meta["lora_targets"].split(",")),
            int(meta["lora_seed"]),
        )
    if list(params) != list(net.params):
        missing = sorted(set(net.params) - set(params))
        extra = sorted(set(params) - set(net.params))
        raise CheckpointError(f"{path}: parameter set differs from the model (missing {missing[:3]}, extra {extra[:3]})")
    for name, arr in params.items():
        if arr.shape != net.params[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, model expects {net.params[name].shape}")
        net.params[name].data = arr
    return net
