"""Deterministic fan-out of one root seed into named substreams.

Every random decision in the package draws from a stream derived as
``derive(root_seed, "name")`` so that adding a consumer never perturbs the
draws of existing ones.
"""

import hashlib


def derive(seed: int, stream: str) -> int:
    """Return a 63-bit seed for the named substream of ``seed``."""
    digest = hashlib.sha256(f"{seed}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
