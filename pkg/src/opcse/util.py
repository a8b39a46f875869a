"""Small shared helpers: seed substreams, stable hashing, atomic file writes."""

from __future__ import annotations

import hashlib
import os
import tempfile
from pathlib import Path

_SEED_MASK = (1 << 63) - 1


class NonFiniteValueError(ValueError):
    """A NaN/inf appeared in a numeric pipeline stage.

    Raised at the first check that sees it (encoder outputs, loss inputs,
    loss parts); the trainer converts it into an abort that names the
    offending batch.
    """


def derive_seed(base_seed: int, *labels: object) -> int:
    """Derive a named RNG substream seed from a single base seed.

    All randomness in a run flows from one manifest seed through calls like
    ``derive_seed(seed, "shuffle", "text", epoch)``.  The derivation is a
    stable cryptographic hash, so substreams are independent of each other,
    of Python's per-process hash randomization, and of platform word size.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(repr(int(base_seed)).encode("utf-8"))
    for label in labels:
        h.update(b"\x1f")
        h.update(repr(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "big") & _SEED_MASK


def stable_text_digest(text: str) -> int:
    """Position-independent 63-bit digest of a string."""
    h = hashlib.blake2b(text.encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "big") & _SEED_MASK


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
