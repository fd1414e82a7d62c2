"""Named random sub-streams derived from one user-visible seed."""

import zlib

import numpy as np

STREAMS = (
    "split", "struct", "tasks", "init", "init-transform", "dropout", "schedule", "validation", "eval",
)


def _stream_key(name: str) -> int:
    # crc32 keeps the key stable across interpreter runs, unlike hash()
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the component called ``name``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_stream_key(name),)))


def subseed(seed: int, name: str) -> int:
    """Integer seed for APIs that take one instead of a generator."""
    ss = np.random.SeedSequence(seed, spawn_key=(_stream_key(name),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
