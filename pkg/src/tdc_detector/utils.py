import hashlib
import json
import sys
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np

# Number of set bits for every byte value
POPCOUNT = np.unpackbits(np.arange(256, dtype=np.uint8)[:, None], axis=1).sum(axis=1)


def popcount(words: np.ndarray) -> np.ndarray:
    """
    Returns the number of set bits of each 8-bit word.
    """
    return POPCOUNT[np.asarray(words, dtype=np.uint8)]


def spawn_seeds(seed: Union[int, Sequence[int]], n: int) -> List[int]:
    """
    Derives n independent integer seeds from a root seed.
    """
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def make_rng(*keys: int) -> np.random.Generator:
    """
    Returns a generator seeded from a tuple of non-negative integers, e.g.
    (run seed, victim id, query index).
    """
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def sha256_file(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def show_progress(disable: bool) -> bool:
    """
    Returns True if tqdm progress bars should be drawn.
    """
    return not disable and sys.stderr.isatty()


def block_mean(x: np.ndarray, window: int) -> np.ndarray:
    """
    Averages consecutive non-overlapping blocks of length window along the last
    axis; a trailing partial block is averaged over its own length.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    n_full = n // window
    out = x[..., : n_full * window].reshape(*x.shape[:-1], n_full, window).mean(axis=-1)
    if n % window:
        out = np.concatenate([out, x[..., n_full * window :].mean(axis=-1, keepdims=True)], axis=-1)
    return out


def center_fit(x: np.ndarray, length: int) -> np.ndarray:
    """
    Center-crops or symmetrically zero-pads the last axis to length. With an
    odd difference the extra sample is cropped from / padded at the end.
    """
    n = x.shape[-1]
    if n >= length:
        start = (n - length) // 2
        return x[..., start : start + length]
    before = (length - n) // 2
    after = length - n - before
    pad = [(0, 0)] * (x.ndim - 1) + [(before, after)]
    return np.pad(x, pad)


def canonical_digest(obj) -> str:
    """
    SHA-256 of the canonical JSON of a (nested) dataclass or plain structure.
    """
    if is_dataclass(obj):
        obj = asdict(obj)
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return sha256_bytes(text.encode())
