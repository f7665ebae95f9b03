"""Probing-vector estimator, its cost, gradient and step-size rules."""
from dataclasses import dataclass
import math

import numpy as np


class StateError(RuntimeError):
    pass


@dataclass
class ProbingVectorSet:
    """Probing vectors stored as rows of an ``(N_p, L)`` array."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"probing vectors must be a non-empty (N_p, L) array, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("probing vectors must be finite")
        self.vectors = v

    @property
    def N_p(self):
        return self.vectors.shape[0]

    @property
    def L(self):
        return self.vectors.shape[1]

    def copy(self):
        return ProbingVectorSet(self.vectors.copy())


def _rows(w):
    return w.vectors if isinstance(w, ProbingVectorSet) else np.asarray(w, dtype=np.float64)


def _total(a, b):
    return float(np.sum(np.einsum("ij,ij->i", a, b)))


def init_probing_vectors(n_probe, L, rng):
    """Standard-normal initial probing vectors."""
    if n_probe < 1 or L < 1:
        raise ValueError("n_probe and L must be >= 1")
    return ProbingVectorSet(rng.standard_normal((n_probe, L)))


def probe_estimate(w, op, return_products=False):
    """``sum_l p_l^T A p_l`` using one application per probing vector.

    With ``return_products`` the ``(N_p, L)`` array of ``A p_l`` is returned
    too, so the gradient can reuse it.
    """
    V = _rows(w)
    if V.shape[1] != op.dim:
        raise ValueError(f"probing vectors have length {V.shape[1]}, operator has dim {op.dim}")
    AV = op.apply(V)
    est = _total(V, AV)
    return (est, AV) if return_products else est


def cost(w, op, trace_target):
    return (probe_estimate(w, op) - trace_target) ** 2


def cost_gradient(w, op, trace_target, products=None, transposed=None):
    """Gradient of ``(estimate - target)**2`` with respect to every ``p_l``.

    ``2 r (A + A^T) p_l`` with ``r = estimate - target``.  ``products``
    (``A p_l``) and ``transposed`` (``A^T p_l``) are reused when given; a
    symmetric operator needs no transpose applications.
    """
    V = _rows(w)
    AV = op.apply(V) if products is None else products
    r = _total(V, AV) - trace_target
    if op.symmetric:
        S = 2.0 * AV
    else:
        ATV = op.apply_transpose(V) if transposed is None else transposed
        S = AV + ATV
    return 2.0 * r * S


@dataclass(frozen=True)
class LineSearchResult:
    gamma: float
    a: float
    b: float
    c: float
    n_applications: int
    diagnostic: str = ""

    def residual(self, gamma):
        return (self.a * gamma + self.b) * gamma + self.c

    def phi(self, gamma):
        r = self.residual(gamma)
        return r * r


def minimize_squared_quadratic(a, b, c):
    """Minimise ``(a g^2 + b g + c)**2`` over ``g >= 0``.

    The stationary points are the real roots of the quadratic and its
    vertex, so the minimum over ``[0, inf)`` is attained at ``0`` or at one
    of those that is positive.  Candidates are scanned in increasing order
    and only a strictly smaller value replaces the incumbent, so ties go to
    the smaller step.  Returns ``(gamma, diagnostic)``.
    """
    if a == 0.0 and b == 0.0:
        return 0.0, "degenerate line search (a = b = 0): gamma set to 0"
    cands = []
    if a != 0.0:
        cands.append(-b / (2.0 * a))
        disc = b * b - 4.0 * a * c
        if disc >= 0.0:
            q = -0.5 * (b + math.copysign(math.sqrt(disc), b))
            cands.append(q / a)
            if q != 0.0:
                cands.append(c / q)
    else:
        cands.append(-c / b)

    def phi(g):
        r = (a * g + b) * g + c
        return r * r   # overflows to inf instead of raising

    best, best_phi = 0.0, phi(0.0)
    for g in sorted(x for x in cands if x > 0.0 and math.isfinite(x)):
        p = phi(g)
        if p < best_phi:
            best, best_phi = g, p
    return best, ""


def line_search_gamma(w, gradient, delta_prev, eta, op, trace_target, products=None):
    """Exact step size for ``w - (gamma * gradient + eta * delta_prev)``.

    The estimate along that path is ``a g^2 + b g + c`` (``c`` already has
    the target subtracted) with

        c = sum u^T A u - target,  b = -sum (u^T A g + g^T A u),  a = sum g^T A g

    where ``u = w - eta * delta_prev``.  ``A g`` costs one application per
    vector; ``A u`` is ``A w - eta A delta_prev`` and needs another batch of
    applications only when the momentum term is non-zero.
    """
    V = _rows(w)
    G = np.asarray(gradient, dtype=np.float64)
    D = np.asarray(delta_prev, dtype=np.float64)
    n = V.shape[0]
    AV = op.apply(V) if products is None else products
    napps = 0 if products is not None else n
    AG = op.apply(G)
    napps += n
    if eta != 0.0 and np.any(D != 0.0):
        U = V - eta * D
        AU = AV - eta * op.apply(D)
        napps += n
    else:
        U, AU = V, AV
    c = _total(U, AU) - trace_target
    b = -(_total(U, AG) + _total(G, AU))
    a = _total(G, AG)
    gamma, diag = minimize_squared_quadratic(a, b, c)
    return LineSearchResult(gamma=gamma, a=a, b=b, c=c, n_applications=napps, diagnostic=diag)


def schedule_gamma(t, gamma0, alpha):
    """Decaying learning rate ``gamma0 / (1 + alpha t)``."""
    if gamma0 is None:
        raise StateError("gamma0 is not set; the bootstrap phase has not finished")
    return gamma0 / (1.0 + alpha * t)


def lower_median(values):
    """Median with the lower middle element for even counts."""
    if not values:
        raise ValueError("median of an empty sequence")
    s = sorted(values)
    return s[(len(s) - 1) // 2]
