"""Canonical JSON, SHA-256 stamping and deterministic seed derivation."""

import hashlib
import json
from typing import Any


def canonical_json(obj: Any) -> str:
    """Serialize ``obj`` with sorted keys and compact separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def sha256_hex(data: bytes | str) -> str:
    """Hex SHA-256 of bytes or UTF-8 text."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def config_digest(obj: Any) -> str:
    """SHA-256 of the canonical JSON form of a configuration document."""
    return sha256_hex(canonical_json(obj))


def derive_seed(*parts: Any) -> int:
    """Derive a 64-bit seed from an ordered tuple of parts.

    Used wherever independent random streams are needed (per object,
    per episode, per training step) so results do not depend on the
    order or thread in which the streams are consumed.
    """
    digest = hashlib.sha256(canonical_json([str(p) for p in parts]).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
