"""Small shared helpers: id generation, byte literals, monotone stamps."""
from __future__ import annotations

import base64
import codecs
import itertools
import threading
import uuid


def new_id(prefix: str) -> str:
    """Opaque unique identifier with a readable prefix (e.g. "sess-3fa9...")."""
    return f"{prefix}-{uuid.uuid4().hex[:12]}"


class MonotoneStamp:
    """Process-wide strictly increasing counter, safe across threads.

    Used to order protocol steps (trace appends vs. checkpoint completion
    notices) without relying on clock resolution.
    """

    def __init__(self) -> None:
        self._counter = itertools.count(1)
        self._lock = threading.Lock()

    def next(self) -> int:
        with self._lock:
            return next(self._counter)


PROTOCOL_STAMP = MonotoneStamp()


def parse_bytes_literal(token: str) -> bytes:
    """Decode a payload token from the script/config byte-literal syntax.

    Three forms: ``hex:<hexdigits>``, ``b64:<base64>``, or a plain string
    with backslash escapes (\\n, \\r, \\t, \\0, \\xNN). Binary payloads
    should use hex:/b64:; the plain form is latin-1 limited.
    """
    if token.startswith("hex:"):
        return bytes.fromhex(token[4:])
    if token.startswith("b64:"):
        return base64.b64decode(token[4:])
    return codecs.decode(token.encode("latin-1"), "unicode_escape").encode("latin-1")


def format_bytes_literal(data: bytes) -> str:
    """Inverse-ish of parse_bytes_literal for display: printable or hex form."""
    if all(32 <= b < 127 for b in data):
        return data.decode("ascii")
    return "hex:" + data.hex()
