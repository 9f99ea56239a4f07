import argparse
import json
import struct
from pathlib import Path

from genmeasures.fileformats import DATASET_MAGIC, MODEL_MAGIC, fnv1a_64

MAGICS = {MODEL_MAGIC: "model", DATASET_MAGIC: "dataset"}


def hex_lines(data, start, limit):
    shown = data[:limit]
    for i in range(0, len(shown), 16):
        chunk = shown[i : i + 16]
        yield f"  {start + i:08x}  {chunk.hex(' ')}"
    if len(data) > limit:
        yield f"  ... {len(data) - limit} more bytes"


def tensors(header):
    if header.get("kind") == "dataset":
        yield "inputs", header["inputs"]
        yield "labels", header["labels"]
        return
    for k, layer in enumerate(header.get("layers", [])):
        for key in ("weight", "kernel", "bias"):
            if key in layer:
                yield f"layer {k} {layer['type']} {key}", layer[key]


def main():
    """
    Print the sections of a model or dataset container with byte offsets,
    for checking files written by other tools against the format.
    """
    parser = argparse.ArgumentParser()
    parser.add_argument("path", type=Path, help="Model or dataset file")
    parser.add_argument(
        "--bytes",
        type=int,
        default=32,
        help="Bytes of each tensor to dump (default: 32)",
    )
    args = parser.parse_args()

    data = args.path.read_bytes()
    magic = data[:4]
    print(f"00000000  magic {magic!r} ({MAGICS.get(magic, 'unknown')})")
    (header_len,) = struct.unpack_from("<I", data, 4)
    print(f"00000004  header length {header_len}")
    header = json.loads(data[8 : 8 + header_len].decode("utf-8"))
    print("00000008  header")
    for line in json.dumps(header, indent=2).splitlines():
        print(f"  {line}")
    pos = 8 + header_len
    (payload_len,) = struct.unpack_from("<Q", data, pos)
    print(f"{pos:08x}  payload length {payload_len}")
    base = pos + 8
    payload = data[base : base + payload_len]
    for what, desc in tensors(header):
        start = base + desc["offset"]
        print(
            f"{start:08x}  {what} {desc['dtype']} {desc['shape']} "
            f"({desc['nbytes']} bytes)"
        )
        raw = payload[desc["offset"] : desc["offset"] + desc["nbytes"]]
        for line in hex_lines(raw, start, args.bytes):
            print(line)
    (stored,) = struct.unpack_from("<Q", data, base + payload_len)
    found = fnv1a_64(payload)
    status = "ok" if stored == found else f"MISMATCH, computed {found:016x}"
    print(f"{base + payload_len:08x}  checksum {stored:016x} ({status})")


if __name__ == "__main__":
    main()
