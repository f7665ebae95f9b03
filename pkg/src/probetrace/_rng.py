"""Seeded random streams.

Two kinds of randomness are used in the package:

* Matrix entries come from a raw Philox4x64-10 stream (counter-based,
  keyed by the 64-bit matrix seed) converted to normal variates by an
  explicit Box-Muller transform.  Nothing else touches that stream, so a
  matrix is fully determined by ``(L, seed, noise_sigma)`` and can be
  regenerated by any implementation of Philox.
* Everything else (noise vectors, initial probing vectors, pool picks)
  uses ``numpy.random.Generator`` over PCG64, seeded through
  ``SeedSequence`` with a spawn key derived from string/integer labels.
"""
import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _label_to_int(label):
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def seed_sequence(master_seed, *labels):
    """``SeedSequence`` for ``master_seed`` refined by ``labels``.

    Labels may be strings or non-negative integers; the mapping is a pure
    function of its arguments (strings are hashed with SHA-256).
    """
    return np.random.SeedSequence(
        entropy=int(master_seed) & _MASK64,
        spawn_key=tuple(_label_to_int(lab) for lab in labels),
    )


def derive_seed(master_seed, *labels):
    """A 64-bit integer seed derived from ``master_seed`` and ``labels``."""
    return int(seed_sequence(master_seed, *labels).generate_state(1, np.uint64)[0])


def make_rng(master_seed, *labels):
    """PCG64 generator derived from ``master_seed`` and ``labels``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, *labels)))


def rng_state(rng):
    """JSON-serialisable snapshot of a PCG64 generator."""
    state = rng.bit_generator.state
    if state["bit_generator"] != "PCG64":
        raise TypeError("only PCG64 generators can be snapshotted")
    return {
        "bit_generator": "PCG64",
        "state": {k: int(v) for k, v in state["state"].items()},
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def rng_from_state(state):
    bitgen = np.random.PCG64()
    bitgen.state = state
    return np.random.Generator(bitgen)


def philox_uint64(seed, n):
    """First ``n`` raw outputs of Philox4x64-10 with key ``(seed, 0)``.

    The counter starts at zero and is incremented before each 4-word block
    (numpy's convention), so the first block is generated from counter 1.
    """
    bitgen = np.random.Philox(key=np.array([int(seed) & _MASK64, 0], dtype=np.uint64))
    return bitgen.random_raw(n)


def box_muller(raw):
    """Standard normals from an even-length array of raw 64-bit words.

    Each word becomes ``u = (x >> 11) * 2**-53`` in [0, 1).  Consecutive
    pairs ``(u1, u2)`` give ``rho = sqrt(-2 log(1 - u1))`` and the two
    variates ``rho*cos(2 pi u2)``, ``rho*sin(2 pi u2)`` in that order.
    """
    raw = np.asarray(raw, dtype=np.uint64)
    if raw.size % 2:
        raise ValueError("box_muller needs an even number of words")
    u = (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53
    u1, u2 = u[0::2], u[1::2]
    rho = np.sqrt(-2.0 * np.log1p(-u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(raw.size, dtype=np.float64)
    out[0::2] = rho * np.cos(theta)
    out[1::2] = rho * np.sin(theta)
    return out


def philox_normals(seed, n):
    """``n`` standard normal variates from the Philox stream of ``seed``."""
    m = n + (n % 2)
    return box_muller(philox_uint64(seed, m))[:n]
