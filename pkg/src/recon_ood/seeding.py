"""Deterministic, platform-stable seed derivation.

All randomness in the package flows from explicit integer seeds; derived
seeds come from hashing the master seed with string/int labels, so that
distinct roles (splits, stages, per-sample noise draws) get independent
streams that never depend on Python's randomized ``hash``.
"""

from __future__ import annotations

import hashlib
import struct


def derive_seed(master_seed: int, *parts) -> int:
    """Stable u64 seed from a master seed and any mix of str/int labels."""
    key = ":".join([str(int(master_seed))] + [str(p) for p in parts]).encode()
    return struct.unpack("<Q", hashlib.sha256(key).digest()[:8])[0]
