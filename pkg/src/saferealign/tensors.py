"""Named parameter sets and the checkpoint file format.

Checkpoints use the safetensors layout: an 8-byte little-endian header
length, a UTF-8 JSON header mapping tensor names to ``dtype``, ``shape`` and
``data_offsets``, an optional ``__metadata__`` string map, then one
contiguous little-endian payload.
"""

from __future__ import annotations

import json
import os
import struct
from collections.abc import Iterator, Mapping

import numpy as np

DTYPES = {
    "F32": np.dtype("<f4"),
    "F64": np.dtype("<f8"),
    "I64": np.dtype("<i8"),
    "I32": np.dtype("<i4"),
    "BOOL": np.dtype("bool"),
}
_TAGS = {v: k for k, v in DTYPES.items()}

_HEADER_LIMIT = 100 * 1024 * 1024


class CheckpointError(ValueError):
    """Raised for malformed or inconsistent checkpoint files."""

    code = "checkpoint"


class MalformedHeaderError(CheckpointError):
    code = "malformed-header"


class ByteLengthMismatchError(CheckpointError):
    code = "byte-length-mismatch"


class DuplicateNameError(CheckpointError):
    code = "duplicate-name"


class IncompatibleError(ValueError):
    """Two parameter sets do not share names and shapes."""


def dtype_tag(dtype) -> str:
    try:
        return _TAGS[np.dtype(dtype).newbyteorder("<")]
    except KeyError:
        raise TypeError(f"unsupported dtype {dtype!r}") from None


class ParamSet(Mapping):
    """Immutable ordered map of tensor name to array, plus string metadata.

    Iteration order is lexicographic by name. Arrays are stored read-only so
    a ParamSet can be shared between workers without copying.
    """

    kind = "params"

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None, metadata: Mapping[str, str] | None = None):
        self._entries: dict[str, np.ndarray] = {}
        for name in sorted(entries or {}):
            arr = np.array(entries[name], copy=True)
            if arr.dtype == np.float16:
                arr = arr.astype(np.float32)
            arr.setflags(write=False)
            self._entries[name] = arr
        self.metadata: dict[str, str] = {str(k): str(v) for k, v in (metadata or {}).items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}: {list(v.shape)}" for k, v in self._entries.items())
        return f"{type(self).__name__}({{{shapes}}})"

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._entries.items()}

    def numel(self) -> int:
        return sum(v.size for v in self._entries.values())

    def replace(self, **changes: np.ndarray) -> "ParamSet":
        """Return a copy with some entries swapped out."""
        entries = dict(self._entries)
        entries.update(changes)
        return type(self)(entries, self.metadata)

    def with_metadata(self, **meta) -> "ParamSet":
        return type(self)(self._entries, {**self.metadata, **meta})

    def equal(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, shapes, dtypes and bytes."""
        if list(self) != list(other):
            return False
        for k in self:
            a, b = self[k], other[k]
            if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True


def assert_compatible(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> None:
    """Raise IncompatibleError unless ``a`` and ``b`` have equal names and shapes."""
    names_a, names_b = set(a), set(b)
    for name in sorted(names_a | names_b):
        if name not in names_b:
            raise IncompatibleError(f"tensor {name!r} missing from second set")
        if name not in names_a:
            raise IncompatibleError(f"tensor {name!r} missing from first set")
        sa, sb = tuple(np.shape(a[name])), tuple(np.shape(b[name]))
        if sa != sb:
            raise IncompatibleError(f"tensor {name!r} shape mismatch: {list(sa)} vs {list(sb)}")


def _header_for(specs: Mapping[str, tuple[str, tuple[int, ...]]], metadata: Mapping[str, str]) -> tuple[bytes, int]:
    header: dict = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in sorted(metadata.items())}
    offset = 0
    for name in sorted(specs):
        tag, shape = specs[name]
        nbytes = int(np.prod(shape, dtype=np.int64)) * DTYPES[tag].itemsize
        header[name] = {"dtype": tag, "shape": list(shape), "data_offsets": [offset, offset + nbytes]}
        offset += nbytes
    raw = json.dumps(header, separators=(",", ":"), sort_keys=False).encode("utf-8")
    # pad so the payload starts 8-byte aligned, as safetensors writers do
    raw += b" " * (-(len(raw) + 8) % 8)
    return raw, offset


def save_checkpoint(ps: Mapping[str, np.ndarray], path: str | os.PathLike, metadata: Mapping[str, str] | None = None) -> None:
    """Write ``ps`` to ``path``. Equal inputs always give byte-identical files."""
    if metadata is None:
        metadata = getattr(ps, "metadata", {})
    specs = {}
    arrays = {}
    for name in sorted(ps):
        arr = np.asarray(ps[name])
        tag = dtype_tag(arr.dtype)
        specs[name] = (tag, arr.shape)
        arrays[name] = np.ascontiguousarray(arr, dtype=DTYPES[tag])
    raw, _ = _header_for(specs, metadata)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for name in sorted(arrays):
            fh.write(arrays[name].tobytes())
    os.replace(tmp, path)


def _parse_header(fh, path) -> tuple[dict, dict, int]:
    prefix = fh.read(8)
    if len(prefix) != 8:
        raise MalformedHeaderError(f"{path}: file too short for header length")
    (n,) = struct.unpack("<Q", prefix)
    if n > _HEADER_LIMIT:
        raise MalformedHeaderError(f"{path}: header length {n} exceeds limit")
    raw = fh.read(n)
    if len(raw) != n:
        raise MalformedHeaderError(f"{path}: header truncated")

    def no_dupes(pairs):
        seen = {}
        for k, v in pairs:
            if k in seen:
                raise DuplicateNameError(f"{path}: duplicate tensor name {k!r}")
            seen[k] = v
        return seen

    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=no_dupes)
    except DuplicateNameError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"{path}: header must be a JSON object")
    metadata = header.pop("__metadata__", None) or {}
    if not isinstance(metadata, dict):
        raise MalformedHeaderError(f"{path}: __metadata__ must be an object")
    for name, info in header.items():
        if not isinstance(info, dict) or {"dtype", "shape", "data_offsets"} - set(info):
            raise MalformedHeaderError(f"{path}: entry {name!r} lacks dtype/shape/data_offsets")
        if info["dtype"] not in DTYPES:
            raise MalformedHeaderError(f"{path}: entry {name!r} has unsupported dtype {info['dtype']!r}")
        shape, offs = info["shape"], info["data_offsets"]
        if not (isinstance(shape, list) and all(isinstance(s, int) and s >= 0 for s in shape)):
            raise MalformedHeaderError(f"{path}: entry {name!r} has invalid shape {shape!r}")
        if not (isinstance(offs, list) and len(offs) == 2 and all(isinstance(o, int) for o in offs) and 0 <= offs[0] <= offs[1]):
            raise MalformedHeaderError(f"{path}: entry {name!r} has invalid data_offsets {offs!r}")
        expected = int(np.prod(shape, dtype=np.int64)) * DTYPES[info["dtype"]].itemsize
        if offs[1] - offs[0] != expected:
            raise ByteLengthMismatchError(
                f"{path}: byte-length mismatch for {name!r}: header spans {offs[1] - offs[0]} bytes, "
                f"shape {shape} needs {expected}"
            )
    return header, metadata, 8 + n


class CheckpointReader(Mapping):
    """Lazy view of a checkpoint file; each lookup reads one tensor from disk."""

    def __init__(self, path: str | os.PathLike):
        self.path = os.fspath(path)
        with open(self.path, "rb") as fh:
            self._header, self.metadata, self._start = _parse_header(fh, self.path)
        size = os.path.getsize(self.path) - self._start
        end = max((info["data_offsets"][1] for info in self._header.values()), default=0)
        if end != size:
            raise ByteLengthMismatchError(
                f"{self.path}: byte-length mismatch: header declares {end} payload bytes, file has {size}"
            )
        self._names = sorted(self._header)

    def __getitem__(self, name: str) -> np.ndarray:
        info = self._header[name]
        start, end = info["data_offsets"]
        with open(self.path, "rb") as fh:
            fh.seek(self._start + start)
            buf = fh.read(end - start)
        arr = np.frombuffer(buf, dtype=DTYPES[info["dtype"]]).reshape(info["shape"])
        return arr.astype(arr.dtype.newbyteorder("="), copy=True)

    def __iter__(self):
        return iter(self._names)

    def __len__(self):
        return len(self._names)

    def spec(self, name: str) -> tuple[str, tuple[int, ...]]:
        info = self._header[name]
        return info["dtype"], tuple(info["shape"])


def load_checkpoint(path: str | os.PathLike, cls: type[ParamSet] | None = None) -> ParamSet:
    """Read a whole checkpoint. ``cls`` defaults to the class named by the ``kind`` metadata tag."""
    reader = CheckpointReader(path)
    entries = {name: reader[name] for name in reader}
    if cls is None:
        cls = KINDS.get(reader.metadata.get("kind", "params"), ParamSet)
    return cls(entries, reader.metadata)


class CheckpointWriter:
    """Streams tensors into a checkpoint whose names, dtypes and shapes are known up front.

    Tensors must be written in lexicographic name order; only the tensor
    currently being written is held in memory.
    """

    def __init__(self, path: str | os.PathLike, specs: Mapping[str, tuple[str, tuple[int, ...]]], metadata: Mapping[str, str] | None = None):
        self.path = os.fspath(path)
        self._specs = dict(specs)
        self._order = sorted(specs)
        self._next = 0
        raw, _ = _header_for(self._specs, metadata or {})
        self._tmp = self.path + ".tmp"
        self._fh = open(self._tmp, "wb")
        self._fh.write(struct.pack("<Q", len(raw)))
        self._fh.write(raw)

    def write(self, name: str, arr: np.ndarray) -> None:
        if self._next >= len(self._order) or self._order[self._next] != name:
            expected = self._order[self._next] if self._next < len(self._order) else None
            raise ValueError(f"expected tensor {expected!r}, got {name!r}")
        tag, shape = self._specs[name]
        arr = np.ascontiguousarray(arr, dtype=DTYPES[tag])
        if arr.shape != tuple(shape):
            raise ValueError(f"tensor {name!r} has shape {arr.shape}, declared {shape}")
        self._fh.write(arr.tobytes())
        self._next += 1

    def close(self) -> None:
        self._fh.close()
        if self._next != len(self._order):
            os.unlink(self._tmp)
            raise ValueError(f"checkpoint incomplete: wrote {self._next} of {len(self._order)} tensors")
        os.replace(self._tmp, self.path)

    def abort(self) -> None:
        self._fh.close()
        if os.path.exists(self._tmp):
            os.unlink(self._tmp)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *_):
        if exc_type is None:
            self.close()
        else:
            self.abort()


# populated by modules defining ParamSet subclasses
KINDS: dict[str, type[ParamSet]] = {"params": ParamSet}
