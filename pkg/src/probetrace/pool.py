"""Finite pool of training matrices with lazily cached trace estimates."""
import csv

import numpy as np

from ._rng import derive_seed, make_rng
from .hutchinson import hutchinson_trace
from .operators import DEFAULT_TOL, InverseOperator, MatrixSpec


class MatrixPool:
    """``size`` ensemble members addressed by index.

    Entry ``i`` is regenerated from ``derive_seed(seed, "matrix", i)``; its
    Hutchinson noise comes from its own stream, so the cached value of an
    entry does not depend on when it is first picked.
    """

    def __init__(self, L, size, seed, noise_sigma=0.1, n_z=800,
                 tol=DEFAULT_TOL, max_iter=None):
        if size < 1:
            raise ValueError("pool size must be >= 1")
        self.L = int(L)
        self.size = int(size)
        self.seed = int(seed)
        self.noise_sigma = float(noise_sigma)
        self.n_z = int(n_z)
        self.tol = float(tol)
        self.max_iter = max_iter
        self.cache = np.full(self.size, np.nan)
        self.n_evaluations = 0

    def matrix_seed(self, index):
        return derive_seed(self.seed, "matrix", index)

    def spec(self, index):
        return MatrixSpec(self.L, self.matrix_seed(index), self.noise_sigma)

    def operator(self, index):
        return InverseOperator(self.spec(index).build(), tol=self.tol, max_iter=self.max_iter)

    def is_cached(self, index):
        return not np.isnan(self.cache[index])

    def trace_estimate(self, index, op=None):
        """Cached Hutchinson estimate of entry ``index``, computed on first use.

        Returns ``(value, fresh)``.  A solver failure leaves the entry empty.
        """
        if self.is_cached(index):
            return float(self.cache[index]), False
        if op is None:
            op = self.operator(index)
        rng = make_rng(self.seed, "hutchinson", index)
        value = hutchinson_trace(op, self.n_z, rng).estimate
        self.cache[index] = value
        self.n_evaluations += 1
        return value, True

    def pick(self, rng):
        return int(rng.integers(self.size))

    def warm(self, indices=None):
        for i in range(self.size) if indices is None else indices:
            self.trace_estimate(i)

    def cached_indices(self):
        return np.flatnonzero(~np.isnan(self.cache))

    def to_dict(self):
        return {
            "L": self.L, "size": self.size, "seed": self.seed,
            "noise_sigma": self.noise_sigma, "n_z": self.n_z,
            "tol": self.tol, "max_iter": self.max_iter,
            "n_evaluations": self.n_evaluations,
            "cache": [None if np.isnan(x) else float(x) for x in self.cache],
        }

    @classmethod
    def from_dict(cls, d):
        pool = cls(d["L"], d["size"], d["seed"], d["noise_sigma"], d["n_z"],
                   d["tol"], d["max_iter"])
        cache = d["cache"]
        if len(cache) != pool.size:
            raise ValueError("pool cache length does not match pool size")
        pool.cache = np.array([np.nan if x is None else x for x in cache], dtype=np.float64)
        pool.n_evaluations = int(d["n_evaluations"])
        return pool

    def write_csv(self, path):
        """``index,L,seed,noise_sigma,trace_estimate`` (empty when uncached)."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["index", "L", "seed", "noise_sigma", "trace_estimate"])
            for i in range(self.size):
                est = "" if np.isnan(self.cache[i]) else repr(float(self.cache[i]))
                writer.writerow([i, self.L, self.matrix_seed(i), repr(self.noise_sigma), est])


def pool_pick(pool, rng):
    """Uniform pick from the pool; returns ``(index, operator, trace_estimate, fresh)``."""
    if pool.size < 1:
        raise ValueError("empty pool")
    index = pool.pick(rng)
    op = pool.operator(index)
    value, fresh = pool.trace_estimate(index, op)
    return index, op, value, fresh
