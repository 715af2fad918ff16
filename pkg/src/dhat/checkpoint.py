"""Bit-exact checkpoint container.

Layout: 4-byte magic ``DHAT``, little-endian uint32 format version,
little-endian uint64 header length, a canonical JSON header, then raw
little-endian tensor bytes in index order.  The header carries the
tensor index (name, dtype, shape, offset, length, kind, frozen) and a
metadata block (epoch, stage, config digest, seed, network layout,
head-enable flags, frozen regions).  Everything is plain JSON plus
typed arrays; nothing in a checkpoint is ever executed.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings

import numpy as np

from .architectures import (ArchSpec, DualHeadNetwork, SingleHeadNet,
                            attach_merge, attach_second_head, build_network,
                            set_freeze)
from .errors import (ArchitectureError, CheckpointError, FormatError,
                     NumericError)
from .nn import set_module_freeze

MAGIC = b"DHAT"
VERSION = 1

_HEADER_KEYS = {"index", "metadata"}
_ENTRY_KEYS = {"name", "dtype", "shape", "offset", "length", "kind", "frozen"}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest_json(obj) -> str:
    """Stable sha256 hex digest of a JSON-serializable object."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def _named_tensors(net):
    """(name, array, kind, frozen) for params then buffers, walk order."""
    for name, p in net.named_parameters():
        yield name, p.data, "param", bool(getattr(p, "frozen", False))
    for name, b in net.named_buffers():
        yield name, b, "buffer", False


def _net_layout(net) -> dict:
    if isinstance(net, DualHeadNetwork):
        return {
            "kind": "dual",
            "spec": net.spec.to_dict(),
            "second_spec": net.second_spec.to_dict(),
            "attach_group": net.attach_group,
            "has_merge": net.merge is not None,
        }
    if isinstance(net, SingleHeadNet):
        return {"kind": "single", "spec": net.spec.to_dict()}
    raise CheckpointError(f"cannot checkpoint a {type(net).__name__}")


def _frozen_regions(net) -> list[str]:
    if isinstance(net, DualHeadNetwork):
        return sorted(name for name, mod in net.regions().items()
                      if getattr(mod, "frozen", False))
    return ["net"] if getattr(net, "frozen", False) else []


def _le_dtype(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<")
    return dt.str


def save_checkpoint(net, metadata, path) -> None:
    """Serialize a network plus metadata; see the module docstring."""
    meta = dict(metadata or {})
    meta.setdefault("epoch", 0)
    meta.setdefault("stage", "")
    meta.setdefault("seed", 0)
    meta["net"] = _net_layout(net)
    meta.setdefault("config_digest", digest_json(meta["net"]))
    meta["frozen_regions"] = _frozen_regions(net)
    if isinstance(net, DualHeadNetwork):
        meta["enabled"] = {k: bool(v) for k, v in net.enabled.items()}

    index = []
    chunks = []
    offset = 0
    for name, arr, kind, frozen in _named_tensors(net):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"tensor {name} holds non-finite values")
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        index.append({"name": name, "dtype": _le_dtype(arr),
                      "shape": list(arr.shape), "offset": offset,
                      "length": len(raw), "kind": kind, "frozen": frozen})
        chunks.append(raw)
        offset += len(raw)

    header = canonical_json({"index": index, "metadata": meta}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in chunks:
            f.write(raw)


def read_header(path) -> dict:
    """Parse and validate the container framing; return the JSON header."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version_raw = f.read(4)
        if len(version_raw) != 4:
            raise FormatError("truncated version field")
        version, = struct.unpack("<I", version_raw)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        len_raw = f.read(8)
        if len(len_raw) != 8:
            raise FormatError("truncated header-length field")
        header_len, = struct.unpack("<Q", len_raw)
        header_raw = f.read(header_len)
        if len(header_raw) != header_len:
            raise FormatError("truncated header")
    try:
        header = json.loads(header_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or "index" not in header or "metadata" not in header:
        raise FormatError("header must be an object with index and metadata")
    for key in header:
        if key not in _HEADER_KEYS:
            warnings.warn(f"ignoring unknown checkpoint header key {key!r}")
    for entry in header["index"]:
        for key in entry:
            if key not in _ENTRY_KEYS:
                warnings.warn(f"ignoring unknown index entry key {key!r}")
    return header


def _rebuild_net(meta_net: dict, spec: ArchSpec | None, dtype):
    kind = meta_net.get("kind")
    base_spec = spec or ArchSpec.from_dict(meta_net["spec"])
    if kind == "single":
        return build_network(base_spec, seed=0, dtype=dtype)
    if kind == "dual":
        base = build_network(base_spec, seed=0, dtype=dtype)
        try:
            net = attach_second_head(
                base, meta_net["attach_group"],
                second_spec=ArchSpec.from_dict(meta_net["second_spec"]),
                init="fresh", seed=0)
        except ArchitectureError as exc:
            raise CheckpointError(
                f"checkpoint layout is incompatible with the given spec: {exc}") from exc
        if meta_net.get("has_merge"):
            attach_merge(net, seed=0)
        return net
    raise FormatError(f"unknown network kind {kind!r} in checkpoint")


def load_checkpoint(path, spec: ArchSpec | None = None):
    """Rebuild the stored network; returns (net, metadata).

    A provided ``spec`` overrides the stored base-network spec, with
    every tensor checked against it; the first offender is named in the
    resulting checkpoint error.
    """
    header = read_header(path)
    index, meta = header["index"], header["metadata"]
    with open(path, "rb") as f:
        f.seek(16 + _stored_header_len(path))
        payload = f.read()

    dtype = np.dtype(index[0]["dtype"]) if index else np.float64
    net = _rebuild_net(meta.get("net", {}), spec, dtype)

    tensors = {}
    for name, p in net.named_parameters():
        tensors[name] = ("param", p)
    for name, b in net.named_buffers():
        tensors[name] = ("buffer", b)

    seen = set()
    for entry in index:
        name = entry["name"]
        if name in seen:
            raise CheckpointError(f"tensor {name} appears twice in the index")
        seen.add(name)
        if name not in tensors:
            raise CheckpointError(f"tensor {name} does not exist in the network")
        kind, target = tensors[name]
        arr = target.data if kind == "param" else target
        shape = tuple(entry["shape"])
        if arr.shape != shape:
            raise CheckpointError(
                f"tensor {name}: network expects shape {tuple(arr.shape)}, "
                f"checkpoint has {shape}")
        start, length = entry["offset"], entry["length"]
        if start < 0 or start + length > len(payload):
            raise FormatError(f"tensor {name}: payload range out of bounds")
        want_dtype = np.dtype(entry["dtype"])
        if length != int(np.prod(shape)) * want_dtype.itemsize:
            raise FormatError(f"tensor {name}: length does not match shape and dtype")
        values = np.frombuffer(payload[start:start + length], dtype=want_dtype)
        values = values.reshape(shape).astype(arr.dtype, copy=False)
        arr[...] = values
    missing = sorted(set(tensors) - seen)
    if missing:
        raise CheckpointError(f"tensor {missing[0]} is missing from the checkpoint")

    for head, value in meta.get("enabled", {}).items():
        if isinstance(net, DualHeadNetwork):
            net.set_enabled(head, value)
    for region in meta.get("frozen_regions", []):
        if isinstance(net, DualHeadNetwork):
            set_freeze(net, region, True)
        else:
            set_module_freeze(net, True)
    return net, meta


def _stored_header_len(path) -> int:
    with open(path, "rb") as f:
        f.seek(8)
        return struct.unpack("<Q", f.read(8))[0]
