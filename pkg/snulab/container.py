import json
import logging
import os
import struct
import typing

import numpy as np


logger = logging.getLogger(__name__)


MAGIC = b"SNULAB\x00\x00"
FORMAT_VERSION = 1
ENCODING_FLOAT64 = "f8"
ENCODING_BITS = "bits"
BLOCK_ENCODINGS = (ENCODING_FLOAT64, ENCODING_BITS)


class ContainerException(Exception):

    def __init__(self, message):
        super().__init__(message)


class Block(object):

    __slots__ = ("name", "array", "encoding")
    name: str
    array: np.ndarray
    encoding: str

    def __init__(self, name, array, encoding=ENCODING_FLOAT64):
        if encoding not in BLOCK_ENCODINGS:
            raise ContainerException("Unknown block encoding {}".format(encoding))
        self.name = name
        self.array = np.asarray(array)
        self.encoding = encoding

    def to_bytes(self) -> bytes:
        if self.encoding == ENCODING_FLOAT64:
            return np.ascontiguousarray(self.array, dtype="<f8").tobytes()
        flat = np.ascontiguousarray(self.array).reshape(-1).astype(np.uint8)
        return np.packbits(flat, bitorder="little").tobytes()


def _decode(raw: bytes, encoding: str, shape: typing.Tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape, dtype=np.int64))
    if encoding == ENCODING_FLOAT64:
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little", count=count)
    return bits.reshape(shape)


def _expected_nbytes(encoding: str, shape: typing.Tuple[int, ...]) -> int:
    count = int(np.prod(shape, dtype=np.int64))
    if encoding == ENCODING_FLOAT64:
        return 8 * count
    return (count + 7) // 8


def write_container(path: str, kind: str, meta: dict, blocks: typing.Sequence[Block]):
    payloads = []
    entries = []
    offset = 0
    for block in blocks:
        raw = block.to_bytes()
        entries.append(dict(
            name=block.name,
            shape=list(block.array.shape),
            encoding=block.encoding,
            offset=offset,
            nbytes=len(raw),
        ))
        payloads.append(raw)
        offset += len(raw)

    header = dict(meta)
    header.update(format_version=FORMAT_VERSION, kind=kind, blocks=entries)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    directory = os.path.dirname(os.path.realpath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for raw in payloads:
            f.write(raw)

    logger.info("Wrote {} container {} ({} blocks)".format(kind, path, len(entries)))


def read_container(path: str, kind: str) -> typing.Tuple[dict, typing.Dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as f:
            content = f.read()
    except OSError as e:
        raise ContainerException("Cannot read {}: {}".format(path, e))

    if content[:len(MAGIC)] != MAGIC:
        raise ContainerException("{} is not a snulab container".format(path))

    cursor = len(MAGIC)
    if len(content) < cursor + 8:
        raise ContainerException("Truncated header in {}".format(path))
    (header_length,) = struct.unpack("<Q", content[cursor:cursor + 8])
    cursor += 8

    try:
        header = json.loads(content[cursor:cursor + header_length].decode("utf-8"))
    except (UnicodeDecodeError, ValueError):
        raise ContainerException("Corrupted header in {}".format(path))
    if not isinstance(header, dict):
        raise ContainerException("Corrupted header in {}".format(path))
    cursor += header_length

    version = header.get("format_version")
    if not isinstance(version, int) or version < 1:
        raise ContainerException("Missing format version in {}".format(path))
    if version > FORMAT_VERSION:
        raise ContainerException("Unknown version {} for container {}".format(version, path))
    if header.get("kind") != kind:
        raise ContainerException("{} holds a {} container, expected {}".format(
            path, header.get("kind"), kind))

    payload = content[cursor:]
    arrays = dict()
    try:
        for entry in header["blocks"]:
            shape = tuple(int(extent) for extent in entry["shape"])
            encoding = entry["encoding"]
            start, nbytes = int(entry["offset"]), int(entry["nbytes"])
            if encoding not in BLOCK_ENCODINGS or nbytes != _expected_nbytes(encoding, shape):
                raise ContainerException("Block {} in {} has an invalid layout".format(
                    entry["name"], path))
            if start < 0 or start + nbytes > len(payload):
                raise ContainerException("Block {} in {} is truncated".format(entry["name"], path))
            arrays[entry["name"]] = _decode(payload[start:start + nbytes], encoding, shape)
    except (KeyError, TypeError, ValueError):
        raise ContainerException("Corrupted block table in {}".format(path))

    return header, arrays
