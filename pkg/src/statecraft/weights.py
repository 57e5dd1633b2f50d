"""Named-tensor weights archive.

Layout (all little-endian)::

    uint64   manifest length in bytes
    bytes    UTF-8 JSON manifest
    bytes    packed float32 blobs, in manifest order

Each manifest entry records ``name`` ("layer/param"), ``shape``, ``dtype``
("float32"), ``offset`` (relative to the start of the blob section) and
``nbytes``. Moving statistics are stored alongside trainable parameters so a
round trip preserves forward outputs bit-exactly.
"""

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, WeightsMismatchError

FORMAT = "statecraft.weights"
VERSION = 1
_HEADER = struct.Struct("<Q")


@dataclass
class LoadReport:
    matched: list = field(default_factory=list)
    unmatched_graph: list = field(default_factory=list)
    unmatched_archive: list = field(default_factory=list)

    @property
    def unmatched_layers(self):
        return sorted({name.rsplit("/", 1)[0] for name in self.unmatched_graph})


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def encode_archive(arrays, metadata=None):
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "float32",
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {"format": FORMAT, "version": VERSION, "metadata": metadata or {}, "entries": entries}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(len(head)) + head + b"".join(blobs)


def save_weights(graph, path, layers=None, metadata=None):
    """Write every parameter and state array of ``graph`` (or just ``layers``)."""
    state = graph.state_dict()
    if layers is not None:
        keep = {l if isinstance(l, str) else l.name for l in layers}
        state = {k: v for k, v in state.items() if k.rsplit("/", 1)[0] in keep}
    meta = dict(graph.metadata)
    meta.update(metadata or {})
    atomic_write_bytes(path, encode_archive(state, meta))


def save_backbone(graph, path, metadata=None):
    end = graph.blocks["backbone"]
    return save_weights(graph, path, layers=[l for l in graph.layers if l.index <= end], metadata=metadata)


def read_archive(path):
    """Parse and validate an archive; returns (manifest, {name: float32 array})."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return decode_archive(raw, source=os.fspath(path))


def decode_archive(raw, source="<bytes>"):
    if len(raw) < _HEADER.size:
        raise FormatError(f"{source}: file too short for a weights archive")
    (mlen,) = _HEADER.unpack_from(raw, 0)
    if mlen > len(raw) - _HEADER.size:
        raise FormatError(f"{source}: manifest length {mlen} exceeds file size")
    try:
        manifest = json.loads(raw[_HEADER.size : _HEADER.size + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: manifest is not valid JSON ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise FormatError(f"{source}: not a {FORMAT} archive")
    if manifest.get("version") != VERSION:
        raise FormatError(f"{source}: unsupported archive version {manifest.get('version')}")
    blob = memoryview(raw)[_HEADER.size + mlen :]
    arrays = {}
    for entry in manifest.get("entries", []):
        name, shape = entry["name"], tuple(entry["shape"])
        offset, nbytes = entry["offset"], entry["nbytes"]
        if entry.get("dtype") != "float32":
            raise FormatError(f"{source}: entry {name} has unsupported dtype {entry.get('dtype')}")
        if nbytes != math.prod(shape) * 4:
            raise FormatError(f"{source}: entry {name} declares {nbytes} bytes for shape {shape}")
        if offset < 0 or offset + nbytes > len(blob):
            raise FormatError(f"{source}: entry {name} extends past the end of the blob section")
        arrays[name] = np.frombuffer(blob[offset : offset + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
    return manifest, arrays


def load_weights(graph, path, strict=True):
    """Load an archive into ``graph``; nothing is modified unless every check passes.

    ``strict`` requires the archive and graph to hold exactly the same entries.
    Non-strict loading copies the overlap (for backbone-only imports) and
    reports what was left untouched.
    """
    manifest, arrays = read_archive(path)
    expected = graph.entry_shapes()
    report = LoadReport()
    for name in expected:
        (report.matched if name in arrays else report.unmatched_graph).append(name)
    report.unmatched_archive = [n for n in arrays if n not in expected]
    for name in report.matched:
        if tuple(arrays[name].shape) != expected[name]:
            layer = name.rsplit("/", 1)[0]
            raise WeightsMismatchError(
                f"layer {layer}: archive has {name} with shape {tuple(arrays[name].shape)}, "
                f"graph expects {expected[name]}", layer=layer)
    if strict and (report.unmatched_graph or report.unmatched_archive):
        first = (report.unmatched_graph or report.unmatched_archive)[0]
        layer = first.rsplit("/", 1)[0]
        raise WeightsMismatchError(f"strict load: entry {first} is not present on both sides", layer=layer)
    graph.load_state_dict({n: arrays[n] for n in report.matched})
    return report


def archive_metadata(path):
    manifest, _ = read_archive(path)
    return manifest.get("metadata", {})
