"""Digest and seed-derivation helpers shared across modules."""

from __future__ import annotations

import hashlib
import json


def canonical_json(obj) -> str:
    """Serialize with sorted keys and no whitespace so digests are stable."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def stable_seed(*parts) -> int:
    """Derive a 32-bit seed from arbitrary labeled parts, order-sensitively."""
    digest = hashlib.sha256(canonical_json(list(map(str, parts))).encode()).digest()
    return int.from_bytes(digest[:4], "big")
