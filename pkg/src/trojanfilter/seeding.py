"""Derive independent 63-bit seeds from one master seed.

``derive_seed(master, *tags)`` hashes the master seed together with any
number of tags (coordinate index, sample index, purpose string, ...). Equal
inputs give equal seeds on every platform; distinct tag tuples give
unrelated seeds.
"""
from __future__ import annotations

import hashlib


def derive_seed(master: int, *tags) -> int:
    payload = "\x1f".join([str(int(master))] + [str(t) for t in tags]).encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little") >> 1
