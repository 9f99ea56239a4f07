# On-disk formats: model and dataset containers, zoo manifests and
# reports.
#
# A container file is
#     magic (4 bytes, b"GMMF" model / b"GMDS" dataset)
#     header length (u32 little-endian)
#     header (UTF-8 JSON object)
#     payload length (u64 little-endian)
#     payload (little-endian tensors at the offsets the header declares)
#     FNV-1a 64-bit checksum of the payload (u64 little-endian)

import csv
import json
import math
import struct
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .common import (
    FORMAT_VERSION,
    ChecksumMismatchError,
    HeaderValidationError,
    UnknownLayerTypeError,
    VersionMismatchError,
)
from .evaluation import ZooEntry
from .logging_utils import logger
from .network import (
    AvgPool,
    Conv2d,
    Dense,
    Flatten,
    LabeledDataset,
    Layer,
    Network,
    ReLU,
)

MODEL_MAGIC = b"GMMF"
DATASET_MAGIC = b"GMDS"
FLOAT_DTYPE = "<f4"
LABEL_DTYPE = "<i4"

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")

PathLike = Union[str, Path]


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET_BASIS
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def write_container(
    path: PathLike, magic: bytes, header: dict[str, Any], payload: bytes
) -> None:
    header_bytes = json.dumps(
        header, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(_U32.pack(len(header_bytes)))
        f.write(header_bytes)
        f.write(_U64.pack(len(payload)))
        f.write(payload)
        f.write(_U64.pack(fnv1a_64(payload)))


def read_container(path: PathLike, magic: bytes) -> tuple[dict, bytes]:
    """Returns the header and the checksum-verified payload."""
    name = str(path)
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != magic:
        raise HeaderValidationError(
            f"{name}: magic {data[:4]!r}, expected {magic!r}"
        )
    pos = 4
    if len(data) < pos + _U32.size:
        raise HeaderValidationError(f"{name}: truncated header length")
    (header_len,) = _U32.unpack_from(data, pos)
    pos += _U32.size
    if len(data) < pos + header_len + _U64.size:
        raise HeaderValidationError(f"{name}: truncated header")
    try:
        header = json.loads(data[pos : pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderValidationError(f"{name}: malformed header: {e}") from e
    if not isinstance(header, dict):
        raise HeaderValidationError(f"{name}: header is not a JSON object")
    pos += header_len
    (payload_len,) = _U64.unpack_from(data, pos)
    pos += _U64.size
    if len(data) != pos + payload_len + _U64.size:
        raise HeaderValidationError(
            f"{name}: file is {len(data)} bytes, header declares "
            f"{pos + payload_len + _U64.size}"
        )
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(name, version, FORMAT_VERSION)
    payload = data[pos : pos + payload_len]
    (expected,) = _U64.unpack_from(data, pos + payload_len)
    found = fnv1a_64(payload)
    if found != expected:
        raise ChecksumMismatchError(name, expected, found)
    return header, payload


class _PayloadWriter:
    """Appends tensors to a payload and describes them for the header."""

    def __init__(self) -> None:
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, arr: np.ndarray, dtype: str) -> dict[str, Any]:
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        desc = {
            "offset": self.offset,
            "nbytes": len(raw),
            "shape": list(arr.shape),
            "dtype": dtype,
        }
        self.chunks.append(raw)
        self.offset += len(raw)
        return desc

    def payload(self) -> bytes:
        return b"".join(self.chunks)


class _PayloadReader:
    """Reads tensors declared in a header, checking that every declared
    range is in bounds and that no two ranges overlap."""

    def __init__(self, name: str, payload: bytes) -> None:
        self.name = name
        self.payload = payload
        self.ranges: list[tuple[int, int, str]] = []

    def get(self, desc: Any, dtype: str, what: str) -> np.ndarray:
        if not isinstance(desc, dict):
            raise HeaderValidationError(f"{self.name}: {what} is not a tensor")
        try:
            offset = int(desc["offset"])
            nbytes = int(desc["nbytes"])
            shape = tuple(int(d) for d in desc["shape"])
            declared = desc["dtype"]
        except (KeyError, TypeError, ValueError) as e:
            raise HeaderValidationError(
                f"{self.name}: {what}: bad tensor entry {desc!r}"
            ) from e
        if declared != dtype:
            raise HeaderValidationError(
                f"{self.name}: {what} has dtype {declared!r}, expected "
                f"{dtype!r}"
            )
        if any(d < 0 for d in shape):
            raise HeaderValidationError(f"{self.name}: {what} shape {shape}")
        itemsize = np.dtype(dtype).itemsize
        if nbytes != math.prod(shape) * itemsize:
            raise HeaderValidationError(
                f"{self.name}: {what} declares {nbytes} bytes for shape "
                f"{shape}"
            )
        if offset < 0 or offset + nbytes > len(self.payload):
            raise HeaderValidationError(
                f"{self.name}: {what} bytes [{offset}, {offset + nbytes}) "
                f"outside payload of {len(self.payload)} bytes"
            )
        for start, stop, other in self.ranges:
            if nbytes and offset < stop and start < offset + nbytes:
                raise HeaderValidationError(
                    f"{self.name}: {what} bytes [{offset}, "
                    f"{offset + nbytes}) overlap {other} [{start}, {stop})"
                )
        self.ranges.append((offset, offset + nbytes, what))
        if nbytes == 0:
            return np.zeros(shape, dtype=dtype[1:])
        arr = np.frombuffer(
            self.payload, dtype=dtype, count=math.prod(shape), offset=offset
        )
        return arr.reshape(shape).astype(dtype[1:], copy=True)


def save_model(net: Network, path: PathLike) -> None:
    """Writes ``net`` with 32-bit float weights."""
    writer = _PayloadWriter()
    layers: list[dict[str, Any]] = []
    for layer in net.layers:
        if isinstance(layer, Dense):
            layers.append(
                {
                    "type": "dense",
                    "weight": writer.add(layer.weight, FLOAT_DTYPE),
                    "bias": writer.add(layer.bias, FLOAT_DTYPE),
                }
            )
        elif isinstance(layer, Conv2d):
            layers.append(
                {
                    "type": "conv2d",
                    "kernel": writer.add(layer.kernel, FLOAT_DTYPE),
                    "bias": writer.add(layer.bias, FLOAT_DTYPE),
                    "stride": layer.stride,
                    "padding": layer.padding,
                }
            )
        elif isinstance(layer, ReLU):
            layers.append({"type": "relu"})
        elif isinstance(layer, Flatten):
            layers.append({"type": "flatten"})
        elif isinstance(layer, AvgPool):
            layers.append(
                {
                    "type": "avgpool",
                    "window": layer.window,
                    "stride": layer.stride,
                }
            )
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "model",
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "layers": layers,
    }
    write_container(path, MODEL_MAGIC, header, writer.payload())


def _int_field(name: str, desc: dict, key: str, what: str) -> int:
    value = desc.get(key)
    if not isinstance(value, int) or isinstance(value, bool):
        raise HeaderValidationError(f"{name}: {what} {key} is {value!r}")
    return value


def load_model(path: PathLike) -> Network:
    """Reads a model file.  Shape errors come from Network validation."""
    name = str(path)
    header, payload = read_container(path, MODEL_MAGIC)
    if header.get("kind") != "model":
        raise HeaderValidationError(f"{name}: kind {header.get('kind')!r}")
    descs = header.get("layers")
    if not isinstance(descs, list):
        raise HeaderValidationError(f"{name}: missing layer list")
    reader = _PayloadReader(name, payload)
    layers: list[Layer] = []
    for k, desc in enumerate(descs):
        what = f"layer {k}"
        if not isinstance(desc, dict):
            raise HeaderValidationError(f"{name}: {what} is not an object")
        kind = desc.get("type")
        if kind == "dense":
            layers.append(
                Dense(
                    reader.get(desc.get("weight"), FLOAT_DTYPE, what),
                    reader.get(desc.get("bias"), FLOAT_DTYPE, what),
                )
            )
        elif kind == "conv2d":
            layers.append(
                Conv2d(
                    reader.get(desc.get("kernel"), FLOAT_DTYPE, what),
                    reader.get(desc.get("bias"), FLOAT_DTYPE, what),
                    _int_field(name, desc, "stride", what),
                    _int_field(name, desc, "padding", what),
                )
            )
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "flatten":
            layers.append(Flatten())
        elif kind == "avgpool":
            layers.append(
                AvgPool(
                    _int_field(name, desc, "window", what),
                    _int_field(name, desc, "stride", what),
                )
            )
        else:
            raise UnknownLayerTypeError(name, str(kind))
    input_shape = header.get("input_shape")
    if not isinstance(input_shape, list):
        raise HeaderValidationError(f"{name}: missing input_shape")
    dims = tuple(
        _int_field(name, {"input_shape": d}, "input_shape", "model")
        for d in input_shape
    )
    classes = _int_field(name, header, "num_classes", "model")
    return Network(tuple(layers), dims, classes)


def save_dataset(data: LabeledDataset, path: PathLike) -> None:
    writer = _PayloadWriter()
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "dataset",
        "num_classes": data.num_classes,
        "inputs": writer.add(data.inputs, FLOAT_DTYPE),
        "labels": writer.add(data.labels, LABEL_DTYPE),
    }
    write_container(path, DATASET_MAGIC, header, writer.payload())


def load_dataset(path: PathLike) -> LabeledDataset:
    name = str(path)
    header, payload = read_container(path, DATASET_MAGIC)
    if header.get("kind") != "dataset":
        raise HeaderValidationError(f"{name}: kind {header.get('kind')!r}")
    num_classes = header.get("num_classes")
    if not isinstance(num_classes, int):
        raise HeaderValidationError(f"{name}: num_classes {num_classes!r}")
    reader = _PayloadReader(name, payload)
    inputs = reader.get(header.get("inputs"), FLOAT_DTYPE, "inputs")
    labels = reader.get(header.get("labels"), LABEL_DTYPE, "labels")
    return LabeledDataset(inputs, labels, num_classes)


@dataclass
class Zoo:
    """A loaded manifest.  Entry paths are relative to ``root``."""

    entries: list[ZooEntry]
    task: dict[str, Any] = field(default_factory=dict)
    root: Path = Path(".")

    def model(self, entry: ZooEntry) -> Network:
        if entry.network is None:
            if entry.model_path is None:
                raise HeaderValidationError(
                    f"{entry.model_id}: no model file"
                )
            entry.network = load_model(self.root / entry.model_path)
        return entry.network

    def train_data(self, entry: ZooEntry) -> LabeledDataset:
        if entry.train_data is None:
            if entry.data_path is None:
                raise HeaderValidationError(
                    f"{entry.model_id}: no training data file"
                )
            entry.train_data = load_dataset(self.root / entry.data_path)
        entry.train_data.check_network(self.model(entry))
        return entry.train_data


def _entry_to_dict(entry: ZooEntry) -> dict[str, Any]:
    return {
        "model_id": entry.model_id,
        "model_path": entry.model_path,
        "data_path": entry.data_path,
        "hyperparams": entry.hyperparams,
        "train_error": entry.train_error,
        "test_error": entry.test_error,
        "did_not_fit": entry.did_not_fit,
        "measure_values": entry.measure_values,
    }


def _entry_from_dict(name: str, d: Any) -> ZooEntry:
    if not isinstance(d, dict):
        raise HeaderValidationError(f"{name}: manifest entry is not an object")
    try:
        return ZooEntry(
            str(d["model_id"]),
            dict(d["hyperparams"]),
            float(d["train_error"]),
            float(d["test_error"]),
            {str(k): float(v) for k, v in d.get("measure_values", {}).items()},
            d.get("model_path"),
            d.get("data_path"),
            bool(d.get("did_not_fit", False)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise HeaderValidationError(
            f"{name}: bad manifest entry {d.get('model_id')!r}: {e}"
        ) from e


def save_manifest(
    entries: Sequence[ZooEntry],
    path: PathLike,
    task: Optional[dict[str, Any]] = None,
    write_files: bool = True,
) -> None:
    """Writes the manifest plus, with ``write_files``, the model and dataset
    files of entries that hold them in memory."""
    path = Path(path)
    root = path.parent
    written: set[str] = set()
    for e in entries if write_files else ():
        if e.network is not None:
            if e.model_path is None:
                e.model_path = f"models/{e.model_id}.gmmf"
            target = root / e.model_path
            target.parent.mkdir(parents=True, exist_ok=True)
            save_model(e.network, target)
        if e.train_data is not None and e.data_path is not None:
            if e.data_path not in written:
                target = root / e.data_path
                target.parent.mkdir(parents=True, exist_ok=True)
                save_dataset(e.train_data, target)
                written.add(e.data_path)
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "zoo",
        "task": task or {},
        "entries": [_entry_to_dict(e) for e in entries],
    }
    root.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
    logger.info(f"wrote manifest with {len(entries)} models to {path}")


def load_manifest(path: PathLike, verify_models: bool = True) -> Zoo:
    """Reads a manifest.  Unless ``verify_models`` is False, every model
    file must exist and pass its checksum."""
    path = Path(path)
    name = str(path)
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise HeaderValidationError(f"{name}: malformed manifest: {e}") from e
    if not isinstance(doc, dict) or doc.get("kind") != "zoo":
        raise HeaderValidationError(f"{name}: not a zoo manifest")
    if doc.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            name, doc.get("format_version"), FORMAT_VERSION
        )
    raw = doc.get("entries")
    if not isinstance(raw, list):
        raise HeaderValidationError(f"{name}: missing entry list")
    entries = [_entry_from_dict(name, d) for d in raw]
    if entries:
        keys = sorted(entries[0].hyperparams)
        for e in entries:
            if sorted(e.hyperparams) != keys:
                raise HeaderValidationError(
                    f"{name}: {e.model_id} hyperparameters "
                    f"{sorted(e.hyperparams)} differ from {keys}"
                )
    zoo = Zoo(entries, dict(doc.get("task") or {}), path.parent)
    if verify_models:
        for e in entries:
            if e.model_path is not None:
                read_container(zoo.root / e.model_path, MODEL_MAGIC)
    return zoo


def write_report(
    path: Optional[PathLike],
    data: dict[str, Any],
    csv_rows: Optional[Iterable[Sequence[Any]]] = None,
) -> str:
    """Writes ``data`` as sorted-key JSON (to stdout when ``path`` is
    None) and, if given, ``csv_rows`` next to it with a .csv suffix.
    Returns the JSON text."""
    text = json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n"
    if path is None:
        print(text, end="")
        return text
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    if csv_rows is not None:
        with open(path.with_suffix(".csv"), "w", newline="") as f:
            csv.writer(f).writerows(csv_rows)
    return text
