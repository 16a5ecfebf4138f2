"""Small shared helpers: seed derivation, hashing, canonical JSON."""

import hashlib
import json
from pathlib import Path


def derive_seed(base_seed: int, *tags: str) -> int:
    """Derive a child seed from a base seed and a sequence of string tags.

    The derivation is a SHA-256 hash of the base seed and tags, so child
    streams are independent of each other and of iteration order.  Returns
    a non-negative int that fits in 63 bits.
    """
    payload = repr(int(base_seed)) + "\x1f" + "\x1f".join(tags)
    digest = hashlib.sha256(payload.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def sha256_file(path) -> str:
    """Hex SHA-256 of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def dump_json(obj, path) -> None:
    """Write JSON with sorted keys and a trailing newline (stable bytes)."""
    Path(path).write_text(
        json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
