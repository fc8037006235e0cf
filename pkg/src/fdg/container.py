"""Binary container shared by checkpoints, cluster models and datasets.

Layout (all integers little-endian)::

    magic       4 bytes ASCII ("FDGW", "FDGC" or "FDGD")
    version     u32 (currently 1)
    desc_len    u32
    descriptor  desc_len bytes of UTF-8 JSON
    payload     raw little-endian numbers, layout described by the descriptor

The JSON descriptor is written with sorted keys and no extra whitespace so
that identical content always yields identical bytes.
"""
import json
import struct

from .errors import FormatError

VERSION = 1
_HEADER = struct.Struct("<4sII")


def dump_descriptor(descriptor):
    return json.dumps(descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, magic, descriptor, payload):
    desc = dump_descriptor(descriptor)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic.encode("ascii"), VERSION, len(desc)))
        fh.write(desc)
        fh.write(payload)


def read_container(path, magic):
    """Return ``(descriptor, payload_bytes)``; raise FormatError on any defect."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: file too short for header")
    got_magic, version, desc_len = _HEADER.unpack_from(blob)
    if got_magic != magic.encode("ascii"):
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    end = _HEADER.size + desc_len
    if end > len(blob):
        raise FormatError(f"{path}: descriptor length {desc_len} exceeds file size")
    try:
        descriptor = json.loads(blob[_HEADER.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt descriptor ({exc})") from None
    if not isinstance(descriptor, dict):
        raise FormatError(f"{path}: descriptor is not an object")
    return descriptor, blob[end:]
