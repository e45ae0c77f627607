"""
Checkpoint directory format.

    <dir>/manifest.json   format version, graph topology, tensor table, metadata
    <dir>/weights.bin     little-endian float32 values, tensors concatenated in table order

Each tensor table entry records name, shape, dtype, byte offset, byte length and
the sha256 of its bytes. The manifest is written with sorted keys and a fixed
indent so that load followed by save reproduces both files byte for byte.
"""
import hashlib
import json
import os
import shutil
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional

import numpy as np

from slimdet.errors import ConfigError, FormatError, ShapeError
from slimdet.graph import GraphSpec, ParamStore, check_params, param_names

FORMAT_NAME = "slimdet-checkpoint"
FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
WEIGHTS_FILE = "weights.bin"
ELEMENT_DTYPE = np.dtype("<f4")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def dump_json(document: Dict[str, Any]) -> bytes:
    return (json.dumps(document, indent=2, sort_keys=True) + "\n").encode("utf-8")


def atomic_write(path: str, data: bytes) -> None:
    """Write ``data`` to a temporary sibling of ``path``, then rename it into place."""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@contextmanager
def atomic_directory(path: str) -> Iterator[str]:
    """
    Yield a staging directory that replaces ``path`` only if the block succeeds.

    An existing ``path`` is kept until the new directory is in place.
    """
    target = os.path.abspath(path)
    parent = os.path.dirname(target)
    os.makedirs(parent, exist_ok=True)
    staging = tempfile.mkdtemp(dir=parent, prefix=".tmp-")
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    backup = None
    if os.path.exists(target):
        backup = tempfile.mkdtemp(dir=parent, prefix=".old-")
        os.rmdir(backup)
        os.rename(target, backup)
    os.rename(staging, target)
    if backup:
        shutil.rmtree(backup, ignore_errors=True)


@dataclass
class Checkpoint:
    graph: GraphSpec
    params: ParamStore
    metadata: Dict[str, Any] = field(default_factory=dict)


def encode_checkpoint(graph: GraphSpec, params: ParamStore, metadata: Optional[Dict[str, Any]] = None):
    """Return (manifest bytes, weights bytes) for a graph and its parameters."""
    check_params(graph, params)
    table: List[Dict[str, Any]] = []
    blobs = []
    offset = 0
    for name in param_names(graph, include_buffers=True):
        value = np.asarray(params[name])
        if not np.all(np.isfinite(value)):
            raise FormatError(f"parameter {name} holds non-finite values")
        raw = value.astype(ELEMENT_DTYPE).tobytes(order="C")
        table.append({
            "name": name,
            "shape": list(value.shape),
            "dtype": "float32",
            "offset": offset,
            "nbytes": len(raw),
            "sha256": sha256_hex(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    weights = b"".join(blobs)
    manifest = {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "topology": graph.to_dict(),
        "tensors": table,
        "total_elements": offset // ELEMENT_DTYPE.itemsize,
        "weights_sha256": sha256_hex(weights),
        "metadata": metadata or {},
    }
    return dump_json(manifest), weights


def save_checkpoint(
    path: str,
    graph: GraphSpec,
    params: ParamStore,
    metadata: Optional[Dict[str, Any]] = None,
    extra_files: Optional[Dict[str, bytes]] = None,
) -> str:
    """
    Write a checkpoint directory atomically.

    Args:
        path: Output directory (replaced if it exists)
        graph: Topology stored in the manifest
        params: Trainable parameters and batch-norm buffers
        metadata: Free-form provenance (stage, epochs, effective config)
        extra_files: Side files (training log, prune report) staged with the checkpoint

    Returns:
        The output path
    """
    extra_files = extra_files or {}
    for name in extra_files:
        if name in (MANIFEST_FILE, WEIGHTS_FILE) or os.path.basename(name) != name:
            raise ConfigError(f"cannot store side file {name!r} in a checkpoint")
    manifest, weights = encode_checkpoint(graph, params, metadata)
    with atomic_directory(path) as staging:
        for name, data in extra_files.items():
            with open(os.path.join(staging, name), "wb") as f:
                f.write(data)
        with open(os.path.join(staging, WEIGHTS_FILE), "wb") as f:
            f.write(weights)
        with open(os.path.join(staging, MANIFEST_FILE), "wb") as f:
            f.write(manifest)
    return path


def _read(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except FileNotFoundError:
        raise FormatError("file is missing", path=path)


def load_checkpoint(path: str) -> Checkpoint:
    """
    Read and fully validate a checkpoint directory.

    Every size, offset and checksum is checked before any array is returned;
    problems raise FormatError naming the offending file.
    """
    manifest_path = os.path.join(path, MANIFEST_FILE)
    weights_path = os.path.join(path, WEIGHTS_FILE)
    if not os.path.isdir(path):
        raise FormatError("checkpoint directory not found", path=path)
    try:
        manifest = json.loads(_read(manifest_path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"manifest is not valid JSON: {e}", path=manifest_path)
    weights = _read(weights_path)

    if manifest.get("format") != FORMAT_NAME:
        raise FormatError("not a slimdet checkpoint", path=manifest_path)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"unsupported checkpoint version {manifest.get('format_version')} (expected {FORMAT_VERSION})",
            path=manifest_path)
    if sha256_hex(weights) != manifest.get("weights_sha256"):
        raise FormatError("checksum mismatch", path=weights_path)

    try:
        graph = GraphSpec.from_dict(manifest["topology"])
    except (KeyError, TypeError, ShapeError, ConfigError) as e:
        raise FormatError(f"invalid topology: {e}", path=manifest_path)

    expected_names = param_names(graph, include_buffers=True)
    table = manifest.get("tensors", [])
    if [entry.get("name") for entry in table] != expected_names:
        raise FormatError("tensor table does not match the topology's parameters", path=manifest_path)

    params: ParamStore = {}
    offset = 0
    for entry in table:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * ELEMENT_DTYPE.itemsize
        if entry.get("dtype") != "float32":
            raise FormatError(f"tensor {name} has unsupported dtype {entry.get('dtype')}", path=manifest_path)
        if entry["offset"] != offset or entry["nbytes"] != nbytes:
            raise FormatError(f"tensor {name} span does not match its shape {shape}", path=manifest_path)
        raw = weights[offset:offset + nbytes]
        if len(raw) != nbytes:
            raise FormatError(f"tensor {name} runs past the end of the blob", path=weights_path)
        if sha256_hex(raw) != entry["sha256"]:
            raise FormatError(f"checksum mismatch for tensor {name}", path=weights_path)
        params[name] = np.frombuffer(raw, dtype=ELEMENT_DTYPE).astype(np.float32).reshape(shape)
        offset += nbytes
    if offset != len(weights):
        raise FormatError(f"blob holds {len(weights)} bytes, manifest declares {offset}", path=weights_path)
    if manifest.get("total_elements") != offset // ELEMENT_DTYPE.itemsize:
        raise FormatError("total_elements disagrees with the tensor table", path=manifest_path)

    try:
        check_params(graph, params)
    except ShapeError as e:
        raise FormatError(str(e), path=manifest_path)
    return Checkpoint(graph=graph, params=params, metadata=manifest.get("metadata", {}))
