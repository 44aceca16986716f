"""
Contract argument codec

Versioned, length-prefixed binary encoding of contract call arguments.
Calldata size feeds gas metering, so the encoding is canonical: map keys
are sorted and integers use a fixed width.
"""

import struct
from typing import Any, Tuple

from src.core.errors import MalformedArguments

ABI_VERSION = 0x01

_NONE = 0x00
_FALSE = 0x01
_TRUE = 0x02
_INT = 0x03
_STR = 0x04
_BYTES = 0x05
_LIST = 0x06
_MAP = 0x07


def _encode_value(value: Any, out: bytearray) -> None:
    if value is None:
        out.append(_NONE)
    elif isinstance(value, bool):
        out.append(_TRUE if value else _FALSE)
    elif isinstance(value, int):
        if not -(2 ** 63) <= value < 2 ** 63:
            raise MalformedArguments(f"Integer out of int64 range: {value}")
        out.append(_INT)
        out += struct.pack("<q", value)
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out.append(_STR)
        out += struct.pack("<I", len(raw)) + raw
    elif isinstance(value, (bytes, bytearray, memoryview)):
        raw = bytes(value)
        out.append(_BYTES)
        out += struct.pack("<I", len(raw)) + raw
    elif isinstance(value, (list, tuple)):
        out.append(_LIST)
        out += struct.pack("<I", len(value))
        for item in value:
            _encode_value(item, out)
    elif isinstance(value, dict):
        out.append(_MAP)
        out += struct.pack("<I", len(value))
        for key in sorted(value):
            if not isinstance(key, str):
                raise MalformedArguments(f"Map keys must be strings, got {type(key).__name__}")
            _encode_value(key, out)
            _encode_value(value[key], out)
    else:
        raise MalformedArguments(f"Unsupported argument type: {type(value).__name__}")


def encode_value(value: Any) -> bytes:
    """Canonical encoding of a single value, without the version byte"""
    out = bytearray()
    _encode_value(value, out)
    return bytes(out)


def encode_args(*args: Any) -> bytes:
    out = bytearray([ABI_VERSION])
    _encode_value(list(args), out)
    return bytes(out)


def _decode_value(data: bytes, offset: int) -> Tuple[Any, int]:
    tag = data[offset]
    offset += 1
    if tag == _NONE:
        return None, offset
    if tag in (_FALSE, _TRUE):
        return tag == _TRUE, offset
    if tag == _INT:
        return struct.unpack_from("<q", data, offset)[0], offset + 8
    if tag in (_STR, _BYTES):
        (length,) = struct.unpack_from("<I", data, offset)
        offset += 4
        raw = data[offset:offset + length]
        if len(raw) != length:
            raise MalformedArguments("Truncated string or bytes value")
        return (raw.decode("utf-8") if tag == _STR else bytes(raw)), offset + length
    if tag == _LIST:
        (count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        items = []
        for _ in range(count):
            item, offset = _decode_value(data, offset)
            items.append(item)
        return items, offset
    if tag == _MAP:
        (count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        mapping = {}
        for _ in range(count):
            key, offset = _decode_value(data, offset)
            if not isinstance(key, str):
                raise MalformedArguments(f"Map keys must be strings, got {type(key).__name__}")
            mapping[key], offset = _decode_value(data, offset)
        return mapping, offset
    raise MalformedArguments(f"Unknown value tag 0x{tag:02x}")


def decode_args(payload: bytes) -> list:
    if not payload or payload[0] != ABI_VERSION:
        raise MalformedArguments("Missing or unsupported argument encoding version")
    try:
        args, offset = _decode_value(payload, 1)
    except (IndexError, TypeError, struct.error, UnicodeDecodeError) as e:
        raise MalformedArguments(f"Malformed arguments: {e}") from None
    if offset != len(payload) or not isinstance(args, list):
        raise MalformedArguments("Trailing bytes after arguments")
    return args
