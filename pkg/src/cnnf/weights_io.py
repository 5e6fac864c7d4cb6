"""Bit-exact binary serialization for tensors, network parameters,
optimizer velocities and whole checkpoints.

File layout (all integers little-endian, no alignment padding):

    magic  "CNNF" (4 bytes)
    u32    format version (currently 1)
    u32    record count
    then per record:
        u32    name length, then that many UTF-8 name bytes
        u8     dtype code: 1 = float32, 2 = float64, 3 = utf-8 metadata
        u8     ndim
        u32[]  dims (ndim of them)
        bytes  payload, elementwidth * prod(dims), little-endian

Tensor records are float32/float64 only.  Two reserved metadata records
(dtype 3, ndim 1, dims = [byte length]) carry JSON: `meta.structure`
describes the network topology and `meta.run` holds run metadata (epoch,
lr, seed).  Optimizer velocities are stored under `velocity.<layer>.<field>`
and the training-set mean under `data.mean`.

Files are written to a temp file and renamed, so readers never observe a
partial checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import layers as L
from .errors import (
    BadMagicError,
    DuplicateNameError,
    FormatError,
    PrecisionMismatchError,
    RecordSizeError,
    StructureError,
    TruncationError,
    VersionError,
    WeightImportError,
)
from .model import PARAM_FIELDS, STAT_FIELDS, LayerSpec, Network

MAGIC = b"CNNF"
VERSION = 1

DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
UTF8_CODE = 3

META_STRUCTURE = "meta.structure"
META_RUN = "meta.run"
VELOCITY_PREFIX = "velocity."
MEAN_NAME = "data.mean"


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    structure: Optional[dict] = None
    metadata: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# byte-level encode / decode
# ---------------------------------------------------------------------------


def _encode_record(out: bytearray, name: str, code: int, dims: Tuple[int, ...],
                   payload: bytes) -> None:
    name_bytes = name.encode("utf-8")
    out += struct.pack("<I", len(name_bytes))
    out += name_bytes
    out += struct.pack("<BB", code, len(dims))
    out += struct.pack(f"<{len(dims)}I", *dims)
    out += payload


def save_bytes(ckpt: Checkpoint) -> bytes:
    records: List[Tuple[str, int, Tuple[int, ...], bytes]] = []
    if ckpt.structure is not None:
        blob = json.dumps(ckpt.structure, sort_keys=True).encode("utf-8")
        records.append((META_STRUCTURE, UTF8_CODE, (len(blob),), blob))
    if ckpt.metadata:
        blob = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
        records.append((META_RUN, UTF8_CODE, (len(blob),), blob))
    for name, arr in ckpt.tensors.items():
        if name in (META_STRUCTURE, META_RUN):
            raise FormatError(f"tensor name {name!r} is reserved")
        arr = np.asarray(arr)
        if arr.dtype not in DTYPE_CODES:
            raise FormatError(f"record {name!r}: dtype {arr.dtype} is not "
                              "serializable (float32/float64 only)")
        code = DTYPE_CODES[arr.dtype]
        payload = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"),
                                                   copy=False).tobytes()
        records.append((name, code, arr.shape, payload))
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(records))
    for rec in records:
        _encode_record(out, *rec)
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncationError(
                f"file ends while reading {what} ({n} bytes needed, "
                f"{len(self.buf) - self.pos} remain)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def load_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, got {magic!r}")
    version = r.u32("version")
    if version > VERSION:
        raise VersionError(f"file is format version {version}; this build "
                           f"reads up to {VERSION}")
    count = r.u32("record count")
    ckpt = Checkpoint()
    seen = set()
    for i in range(count):
        name_len = r.u32(f"record {i} name length")
        name = r.take(name_len, f"record {i} name").decode("utf-8")
        if name in seen:
            raise DuplicateNameError(f"record name {name!r} appears twice")
        seen.add(name)
        code = r.u8(f"record {name!r} dtype")
        ndim = r.u8(f"record {name!r} ndim")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"record {name!r} dims"))
        if code == UTF8_CODE:
            if ndim != 1:
                raise FormatError(f"metadata record {name!r} must be 1-d")
            blob = r.take(dims[0], f"record {name!r} payload")
            try:
                parsed = json.loads(blob.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError(f"metadata record {name!r}: {exc}") from None
            if name == META_STRUCTURE:
                ckpt.structure = parsed
            elif name == META_RUN:
                ckpt.metadata = parsed
            else:
                raise FormatError(f"unknown metadata record {name!r}")
            continue
        if code not in CODE_DTYPES:
            raise FormatError(f"record {name!r}: unknown dtype code {code}")
        dtype = CODE_DTYPES[code]
        n_elems = int(np.prod(dims, dtype=np.int64)) if dims else 1
        nbytes = n_elems * dtype.itemsize
        if r.pos + nbytes > len(r.buf):
            raise RecordSizeError(
                f"record {name!r} declares dims {tuple(dims)} needing {nbytes} "
                f"bytes, but only {len(r.buf) - r.pos} remain")
        payload = r.take(nbytes, f"record {name!r} payload")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
        ckpt.tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after the last record")
    return ckpt


def save(ckpt: Checkpoint, path: str) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    data = save_bytes(ckpt)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        return load_bytes(f.read())


# ---------------------------------------------------------------------------
# network <-> structure / records
# ---------------------------------------------------------------------------


def network_structure(net: Network) -> dict:
    layer_entries = []
    for spec in net.layers:
        entry = {"name": spec.name, "kind": spec.kind, "trainable": spec.trainable}
        p = spec.params
        if spec.kind == "conv":
            entry.update(kernel=list(p.weights.shape), stride=p.stride, pad=p.pad)
        elif spec.kind == "fc":
            entry.update(in_features=p.weights.shape[0],
                         out_features=p.weights.shape[1])
        elif spec.kind == "lrn":
            entry.update(depth=p.depth, k=p.k, alpha=p.alpha, beta=p.beta)
        elif spec.kind == "bn":
            entry.update(channels=int(p.gamma.shape[0]), epsilon=p.epsilon,
                         stat_momentum=p.stat_momentum)
        elif spec.kind == "pool":
            entry.update(window=p.window, stride=p.stride)
        elif spec.kind == "dropout":
            entry.update(rate=p.rate)
        layer_entries.append(entry)
    dtype_name = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}[net.dtype]
    return {"input_hw": net.input_hw, "in_channels": net.in_channels,
            "num_classes": net.num_classes, "dtype": dtype_name,
            "layers": layer_entries}


def network_from_structure(structure: dict) -> Network:
    """Rebuild the topology with zero/identity parameters (records fill them)."""
    dtype = {"f32": np.float32, "f64": np.float64}.get(structure.get("dtype"))
    if dtype is None:
        raise StructureError(f"unknown dtype {structure.get('dtype')!r} in structure")
    layer_list = []
    for entry in structure["layers"]:
        kind = entry["kind"]
        if kind == "conv":
            kh, kw, ci, co = entry["kernel"]
            params = L.ConvParams(np.zeros((kh, kw, ci, co), dtype),
                                  np.zeros(co, dtype), stride=entry["stride"],
                                  pad=entry["pad"])
        elif kind == "fc":
            params = L.FCParams(np.zeros((entry["in_features"],
                                          entry["out_features"]), dtype),
                                np.zeros(entry["out_features"], dtype))
        elif kind == "lrn":
            params = L.LRNParams(depth=entry["depth"], k=entry["k"],
                                 alpha=entry["alpha"], beta=entry["beta"])
        elif kind == "bn":
            params = L.BNParams.identity(entry["channels"], entry["epsilon"],
                                         entry["stat_momentum"], dtype=dtype)
        elif kind == "pool":
            params = L.PoolConfig(entry["window"], entry["stride"])
        elif kind == "dropout":
            params = L.DropoutConfig(entry["rate"])
        elif kind == "relu":
            params = None
        else:
            raise StructureError(f"unknown layer kind {kind!r} in structure")
        layer_list.append(LayerSpec(entry["name"], kind, params,
                                    trainable=entry.get("trainable", False)))
    return Network(layer_list, structure["input_hw"], structure["in_channels"],
                   structure["num_classes"], dtype)


def network_records(net: Network) -> Dict[str, np.ndarray]:
    """Parameters plus batchnorm running stats as `<layer>.<field>` records."""
    records: Dict[str, np.ndarray] = {}
    for spec in net.layers:
        fields = PARAM_FIELDS.get(spec.kind, ()) + STAT_FIELDS.get(spec.kind, ())
        for fieldname in fields:
            records[f"{spec.name}.{fieldname}"] = getattr(spec.params, fieldname)
    return records


def import_pretrained(net: Network, records: Mapping[str, np.ndarray],
                      strict: bool = True):
    """Copy name-matched tensors into a copy of `net`.

    Strict mode is all-or-nothing: every network parameter must be matched
    with agreeing shapes, and unknown record names are errors.  Lenient
    mode skips mismatches (the shape-changed fc8 after head replacement
    being the canonical case) and reports them.  A float-width mismatch is
    an error in both modes; there is no silent cast.

    Returns (new_net, skipped) where skipped is a list of (name, reason).
    """
    targets = network_records(net)
    skipped: List[Tuple[str, str]] = []
    to_apply: Dict[str, np.ndarray] = {}
    for name, arr in records.items():
        arr = np.asarray(arr)
        if name not in targets:
            if strict:
                raise WeightImportError(f"record {name!r} matches no network "
                                        "parameter")
            skipped.append((name, "no such parameter"))
            continue
        if arr.dtype != net.dtype:
            raise PrecisionMismatchError(
                f"record {name!r} is {arr.dtype}, run is {net.dtype}; "
                "convert explicitly instead of relying on a silent cast")
        if arr.shape != targets[name].shape:
            if strict:
                raise WeightImportError(
                    f"record {name!r} has shape {arr.shape}, layer expects "
                    f"{targets[name].shape}")
            skipped.append((name, f"shape {arr.shape} != {targets[name].shape}"))
            continue
        to_apply[name] = arr
    if strict:
        missing = sorted(set(targets) - set(to_apply))
        if missing:
            raise WeightImportError(f"records missing for {', '.join(missing)}")
    new = net.copy()
    for name, arr in to_apply.items():
        layer_name, fieldname = name.rsplit(".", 1)
        setattr(new.layer(layer_name).params, fieldname, arr.copy())
    return new, skipped


# ---------------------------------------------------------------------------
# whole-checkpoint convenience
# ---------------------------------------------------------------------------


def checkpoint_for_network(net: Network, metadata: Optional[dict] = None,
                           velocities: Optional[Mapping] = None,
                           extra_tensors: Optional[Mapping[str, np.ndarray]] = None,
                           ) -> Checkpoint:
    tensors = dict(network_records(net))
    if velocities:
        for (layer_name, fieldname), arr in velocities.items():
            tensors[f"{VELOCITY_PREFIX}{layer_name}.{fieldname}"] = arr
    if extra_tensors:
        for name, arr in extra_tensors.items():
            tensors[name] = arr
    return Checkpoint(tensors=tensors, structure=network_structure(net),
                      metadata=dict(metadata or {}))


def network_from_checkpoint(ckpt: Checkpoint):
    """Rebuild (net, velocities, extras) from a checkpoint with structure."""
    if ckpt.structure is None:
        raise FormatError("checkpoint has no structure record")
    net = network_from_structure(ckpt.structure)
    param_records = {}
    velocities = {}
    extras = {}
    for name, arr in ckpt.tensors.items():
        if name.startswith(VELOCITY_PREFIX):
            layer_name, fieldname = name[len(VELOCITY_PREFIX):].rsplit(".", 1)
            velocities[(layer_name, fieldname)] = arr
        elif name in network_records(net):
            param_records[name] = arr
        else:
            extras[name] = arr
    net, _ = import_pretrained(net, param_records, strict=True)
    return net, velocities, extras
