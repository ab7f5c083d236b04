"""Hash-chain seed derivation.

``derive_seed(parent, *path)`` hashes the parent seed together with a path of
labels and indices using BLAKE2b (8-byte digest), so the seed for e.g.
``("pool", 3)`` depends only on that path and never on how many siblings
exist.  Chains compose: ``derive_seed(derive_seed(s, "task", 2), "game", 7)``.
"""

from __future__ import annotations

import hashlib


def derive_seed(parent: int, *path) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(int(parent).to_bytes(16, "little", signed=True))
    for part in path:
        tag = b"i" if isinstance(part, int) else b"s"
        raw = str(part).encode()
        h.update(tag + len(raw).to_bytes(4, "little") + raw)
    # 63 bits keeps the value valid for numpy and signed 64-bit consumers
    return int.from_bytes(h.digest(), "little") >> 1
