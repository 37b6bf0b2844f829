"""Framed binary artifact files: magic, version, JSON header, length-prefixed
blocks, and a trailing CRC-64 over everything that precedes it.

Dataset and policy files share this container so corruption and version
checks behave identically for both.
"""
from __future__ import annotations

import json
import struct

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")

# CRC-64/XZ: reflected polynomial, all-ones init and final xor
_CRC64_POLY = 0xC96C5795D7870F42
_MASK = 0xFFFFFFFFFFFFFFFF


def _build_table() -> tuple[int, ...]:
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return tuple(table)


_TABLE = _build_table()


def crc64(data: bytes) -> int:
    crc = _MASK
    for b in data:
        crc = _TABLE[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ _MASK


class FileFormatError(Exception):
    pass


class CorruptFile(FileFormatError):
    pass


class BadVersion(FileFormatError):
    pass


def write_framed(path, magic: bytes, version: int, header: dict, blocks: list[bytes]) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = bytearray()
    out += magic
    out += _U32.pack(version)
    out += _U32.pack(len(header_bytes))
    out += header_bytes
    out += _U32.pack(len(blocks))
    for block in blocks:
        out += _U32.pack(len(block))
        out += block
    out += _U64.pack(crc64(bytes(out)))
    with open(path, "wb") as f:
        f.write(out)


def read_framed(path, magic: bytes, expect_version: int) -> tuple[dict, list[bytes]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 + 4 + 4 + 4 + 8:
        raise CorruptFile(f"{path}: truncated")
    body, crc_bytes = raw[:-8], raw[-8:]
    if crc64(body) != _U64.unpack(crc_bytes)[0]:
        raise CorruptFile(f"{path}: checksum mismatch")
    if body[:4] != magic:
        raise CorruptFile(f"{path}: bad magic {body[:4]!r}")
    pos = 4
    version = _U32.unpack_from(body, pos)[0]
    pos += 4
    if version != expect_version:
        raise BadVersion(f"{path}: version {version}, expected {expect_version}")
    hlen = _U32.unpack_from(body, pos)[0]
    pos += 4
    if pos + hlen > len(body):
        raise CorruptFile(f"{path}: header overruns file")
    try:
        header = json.loads(body[pos : pos + hlen])
    except ValueError as e:
        raise CorruptFile(f"{path}: header not valid JSON") from e
    pos += hlen
    if pos + 4 > len(body):
        raise CorruptFile(f"{path}: missing block count")
    nblocks = _U32.unpack_from(body, pos)[0]
    pos += 4
    blocks = []
    for i in range(nblocks):
        if pos + 4 > len(body):
            raise CorruptFile(f"{path}: missing length of block {i}")
        blen = _U32.unpack_from(body, pos)[0]
        pos += 4
        if pos + blen > len(body):
            raise CorruptFile(f"{path}: block {i} overruns file")
        blocks.append(bytes(body[pos : pos + blen]))
        pos += blen
    if pos != len(body):
        raise CorruptFile(f"{path}: {len(body) - pos} trailing bytes")
    return header, blocks
