"""Counter-based random streams derived from a master seed.

Every independent unit of work (a molecule batch, a repetition, a burst, a
grid cell, an entropy seed) draws from its own ``Philox`` generator keyed by
``(master_seed, domain, *indices)``. Streams never depend on execution order
or worker count.
"""

import hashlib

import numpy as np


_DOMAINS: dict[str, int] = {
    "impulse": 1,
    "sequence": 2,
    "bits": 3,
    "grid": 4,
    "entropy": 5,
}


def _domain_code(domain: str) -> int:
    """Map a domain label to a stable integer."""
    if domain in _DOMAINS:
        return _DOMAINS[domain]
    digest = hashlib.sha256(domain.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") | (1 << 32)


def derive_generator(seed: int, domain: str, *indices: int) -> np.random.Generator:
    """Return the generator for one unit of work.

    Parameters
    ----------
    seed : int
        Master seed (unsigned 64-bit).
    domain : str
        Purpose of the stream, e.g. ``"impulse"``.
    *indices : int
        Position of the unit inside its domain, e.g. (repetition, batch).

    Returns
    -------
    numpy.random.Generator
        Philox-backed generator, independent of all other (domain, indices).
    """
    spawn_key = (_domain_code(domain), *(int(_index) for _index in indices))
    seed_sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(seed_sequence))


def derive_seed(seed: int, domain: str, *indices: int) -> int:
    """Return a 64-bit child seed for a unit of work."""
    spawn_key = (_domain_code(domain), *(int(_index) for _index in indices))
    seed_sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key)
    return int(seed_sequence.generate_state(1, dtype=np.uint64)[0])
