"""Deterministic named RNG substreams.

All randomness in a run flows from one root seed through `substream`, so
components draw from independent, reproducible streams regardless of call
order elsewhere. Uses sha256 rather than `hash()` (which is salted per
process).
"""

from __future__ import annotations

import hashlib
import random


def stable_int(*parts: object) -> int:
    """64-bit integer derived stably from the string forms of ``parts``."""
    joined = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(joined.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def substream(*parts: object) -> random.Random:
    """Independent RNG stream named by ``parts``."""
    return random.Random(stable_int(*parts))
