"""Online training of probing vectors with momentum.

One step on a matrix ``A`` with trace target ``T``::

    delta_t = gamma_t * grad Q_t(w_t) + eta * delta_{t-1}
    w_{t+1} = w_t - delta_t

For ``t <= bootstrap_len`` the step size comes from the exact line search;
afterwards ``gamma0 / (1 + alpha t)`` with ``gamma0`` the lower median of
the bootstrap step sizes.  By default the line search minimises
``Q_t(w_t - gamma grad Q_t)``; momentum still enters the update itself.
With ``search_with_momentum`` the search runs over the full momentum update
instead, which was found to produce erratic step sizes and a ``gamma0`` that
diverges once the schedule takes over.
"""
from dataclasses import asdict, dataclass, field
import csv
import hashlib
import json
import logging
import os

import numpy as np

from ._rng import derive_seed, make_rng, rng_from_state, rng_state
from .operators import DEFAULT_TOL, SolverFailure
from .pool import MatrixPool, pool_pick
from .probing import (
    ProbingVectorSet,
    cost_gradient,
    init_probing_vectors,
    line_search_gamma,
    lower_median,
    probe_estimate,
    schedule_gamma,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "probetrace-checkpoint"
CHECKPOINT_VERSION = 1
MAX_HALVINGS = 64
LOG_COLUMNS = ("t", "gamma", "cost", "matvecs_cumulative")


class TrainingAborted(RuntimeError):
    pass


class TrainingDivergence(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    """Training parameters; defaults are the full-scale L=100 settings."""

    L: int = 100
    N_p: int = 8
    N_z: int = 800
    eta: float = 0.8
    alpha: float = 1e-5
    N_r: int = 100_000
    N_training: int = 5_000_000
    bootstrap_len: int = 100
    seed: int = 0
    noise_sigma: float = 0.1
    tol: float = DEFAULT_TOL
    max_iter: int | None = None
    search_with_momentum: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.L < 3:
            raise ValueError(f"L must be >= 3, got {self.L}")
        if self.N_p < 1:
            raise ValueError(f"N_p must be >= 1, got {self.N_p}")
        if self.N_z < 2:
            raise ValueError(f"N_z must be >= 2, got {self.N_z}")
        if not 0.0 <= self.eta < 1.0:
            raise ValueError(f"eta must be in [0, 1), got {self.eta}")
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.N_r < 1:
            raise ValueError(f"N_r must be >= 1, got {self.N_r}")
        if self.bootstrap_len < 1:
            raise ValueError(f"bootstrap_len must be >= 1, got {self.bootstrap_len}")
        if self.N_training != 0 and self.N_training < self.bootstrap_len:
            raise ValueError(
                f"N_training must be 0 or >= bootstrap_len ({self.bootstrap_len}), "
                f"got {self.N_training}")
        if self.noise_sigma < 0.0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not self.tol > 0.0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return TrainingConfig(**d)


def make_pool(config):
    return MatrixPool(config.L, config.N_r, derive_seed(config.seed, "pool"),
                      noise_sigma=config.noise_sigma, n_z=config.N_z,
                      tol=config.tol, max_iter=config.max_iter)


@dataclass
class StepResult:
    t: int
    gamma: float
    cost: float
    estimate: float
    target: float
    applications: dict


@dataclass
class TrainerState:
    config: TrainingConfig
    w: ProbingVectorSet
    pool: MatrixPool
    rng: np.random.Generator
    delta_w_prev: np.ndarray = None
    t: int = 1
    gamma_history: list = field(default_factory=list)
    gamma0: float | None = None
    matvecs: dict = field(default_factory=lambda: {
        "forward": 0, "transpose": 0, "line_search": 0, "hutchinson": 0})
    log: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    n_momentum_searches: int = 0
    last_step: StepResult | None = None

    def __post_init__(self):
        if self.delta_w_prev is None:
            self.delta_w_prev = np.zeros_like(self.w.vectors)
        if self.delta_w_prev.shape != self.w.vectors.shape:
            raise ValueError("delta_w_prev must have the shape of w")

    @property
    def matvecs_cumulative(self):
        return sum(self.matvecs.values())


def init_state(config, pool=None):
    if pool is None:
        pool = make_pool(config)
    w = init_probing_vectors(config.N_p, config.L, make_rng(config.seed, "init"))
    return TrainerState(config=config, w=w, pool=pool, rng=make_rng(config.seed, "pick"))


def _diagnose(state, message):
    state.diagnostics.append(f"t={state.t}: {message}")
    log.warning("t=%d: %s", state.t, message)


def training_step(state, op, trace_target):
    """Advance ``state`` by one update on operator ``op``.

    Nothing in ``state`` is modified if an operator application fails.
    """
    cfg = state.config
    W = state.w.vectors
    D = state.delta_w_prev
    n = W.shape[0]
    apps = {"forward": 0, "transpose": 0, "line_search": 0}

    est, AW = probe_estimate(W, op, return_products=True)
    apps["forward"] += n
    ATW = None
    if not op.symmetric:
        ATW = op.apply_transpose(W)
        apps["transpose"] += n
    G = cost_gradient(W, op, trace_target, products=AW, transposed=ATW)
    r = est - trace_target

    notes = []
    if state.t <= cfg.bootstrap_len:
        eta_search = cfg.eta if cfg.search_with_momentum else 0.0
        ls = line_search_gamma(W, G, D, eta_search, op, trace_target, products=AW)
        apps["line_search"] += ls.n_applications
        momentum_search = ls.n_applications > n
        gamma = ls.gamma
        if ls.diagnostic:
            notes.append(ls.diagnostic)
    else:
        gamma = schedule_gamma(state.t, state.gamma0, cfg.alpha)

    for _ in range(MAX_HALVINGS):
        with np.errstate(over="ignore", invalid="ignore"):
            delta = gamma * G + cfg.eta * D
            W_new = W - delta
        if np.all(np.isfinite(W_new)):
            break
        notes.append(f"non-finite update rejected; gamma halved to {gamma / 2:.6g}")
        gamma *= 0.5
    else:
        raise TrainingDivergence(f"t={state.t}: update stays non-finite after {MAX_HALVINGS} halvings")

    # commit
    for note in notes:
        _diagnose(state, note)
    state.w = ProbingVectorSet(W_new)
    state.delta_w_prev = delta
    for k, v in apps.items():
        state.matvecs[k] += v
    if state.t <= cfg.bootstrap_len:
        state.n_momentum_searches += int(momentum_search)
        state.gamma_history.append(gamma)
        if state.t == cfg.bootstrap_len:
            state.gamma0 = lower_median(state.gamma_history)
            if state.gamma0 == 0.0:
                _diagnose(state, "bootstrap median step size is 0; training will stall")
    state.last_step = StepResult(t=state.t, gamma=gamma, cost=r * r, estimate=est,
                                 target=trace_target, applications=apps)
    state.t += 1
    return state


def step_budget(config, n_fresh_entries, n_momentum_searches=0, symmetric=False):
    """Operator applications implied by the per-step budget.

    Every update: ``N_p`` forward, plus ``N_p`` transpose unless the
    operator is symmetric.  Bootstrap updates: ``N_p`` on the gradient
    directions, plus ``N_p`` on the previous update for the
    ``n_momentum_searches`` searches that included a non-zero momentum term.
    Each of the ``n_fresh_entries`` pool entries costs ``N_z`` once.
    """
    steps = config.N_training
    boot = min(steps, config.bootstrap_len)
    budget = {
        "forward": steps * config.N_p,
        "transpose": 0 if symmetric else steps * config.N_p,
        "line_search": (boot + n_momentum_searches) * config.N_p,
        "hutchinson": n_fresh_entries * config.N_z,
    }
    budget["total"] = sum(budget.values())
    return budget


def train(config, pool=None, state=None, log_stride=1, checkpoint_path=None,
          checkpoint_every=None, callback=None, callback_every=None,
          max_consecutive_failures=3, stop_at=None):
    """Run (or resume) training until ``config.N_training`` updates are done.

    Each update picks a pool entry uniformly, uses its cached Hutchinson
    trace as the target, and calls ``training_step``.  A row
    ``(t, gamma, cost, matvecs_cumulative)`` is logged every ``log_stride``
    updates.  ``callback(state)`` runs after every ``callback_every``
    updates (and once before the first).  ``stop_at`` halts early after
    that update, leaving the state resumable.

    Returns ``(w, state)``.
    """
    if state is None:
        state = init_state(config, pool)
    config = state.config
    last = config.N_training if stop_at is None else min(stop_at, config.N_training)
    failures = 0
    if callback is not None and state.t == 1:
        callback(state)
    while state.t <= last:
        try:
            index, op, target, fresh = pool_pick(state.pool, state.rng)
            if fresh:
                state.matvecs["hutchinson"] += state.pool.n_z
            training_step(state, op, target)
        except SolverFailure as exc:
            failures += 1
            _diagnose(state, f"solver failure ({exc}); skipping pick")
            if failures >= max_consecutive_failures:
                if checkpoint_path is not None:
                    checkpoint_save(state, checkpoint_path)
                raise TrainingAborted(
                    f"{failures} consecutive solver failures at t={state.t}") from exc
            continue
        failures = 0
        t_done = state.t - 1
        if t_done % log_stride == 0:
            step = state.last_step
            state.log.append((t_done, step.gamma, step.cost, state.matvecs_cumulative))
        if checkpoint_path is not None and checkpoint_every and t_done % checkpoint_every == 0:
            checkpoint_save(state, checkpoint_path)
        if callback is not None and callback_every and t_done % callback_every == 0:
            callback(state)
    if checkpoint_path is not None:
        checkpoint_save(state, checkpoint_path)
    return state.w, state


def write_log_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for t, gamma, q, mv in rows:
            writer.writerow([t, repr(float(gamma)), repr(float(q)), mv])


# --- checkpoints -------------------------------------------------------

def _payload(state):
    return {
        "config": asdict(state.config),
        "t": state.t,
        "w": state.w.vectors.tolist(),
        "delta_w_prev": state.delta_w_prev.tolist(),
        "gamma_history": [float(g) for g in state.gamma_history],
        "gamma0": state.gamma0,
        "rng": rng_state(state.rng),
        "pool": state.pool.to_dict(),
        "matvecs": dict(state.matvecs),
        "log": [list(row) for row in state.log],
        "diagnostics": list(state.diagnostics),
        "n_momentum_searches": state.n_momentum_searches,
    }


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def checkpoint_bytes(state):
    payload = _dumps(_payload(state))
    digest = hashlib.sha256(payload.encode("utf-8")).hexdigest()
    header = _dumps({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "sha256": digest})
    return (header + "\n" + payload + "\n").encode("utf-8")


def checkpoint_save(state, path):
    """Write ``state`` atomically as a versioned, checksummed JSON container."""
    data = checkpoint_bytes(state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def checkpoint_load(path):
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        text = data.decode("utf-8")
        header_line, payload_line, tail = text.split("\n", 2)
        header = json.loads(header_line)
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable checkpoint") from exc
    if tail != "" or header.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpointError(f"{path}: not a probetrace checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
    if hashlib.sha256(payload_line.encode("utf-8")).hexdigest() != header.get("sha256"):
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    p = json.loads(payload_line)
    config = TrainingConfig(**p["config"])
    w = ProbingVectorSet(np.array(p["w"], dtype=np.float64))
    state = TrainerState(
        config=config,
        w=w,
        pool=MatrixPool.from_dict(p["pool"]),
        rng=rng_from_state(p["rng"]),
        delta_w_prev=np.array(p["delta_w_prev"], dtype=np.float64).reshape(w.vectors.shape),
        t=int(p["t"]),
        gamma_history=[float(g) for g in p["gamma_history"]],
        gamma0=p["gamma0"],
        matvecs={k: int(v) for k, v in p["matvecs"].items()},
        log=[(int(r[0]), float(r[1]), float(r[2]), int(r[3])) for r in p["log"]],
        diagnostics=list(p["diagnostics"]),
        n_momentum_searches=int(p["n_momentum_searches"]),
    )
    return state


def save_probes(w, path, d_bar=None):
    """Write probing vectors (and an optional bias offset) as JSON."""
    obj = {"format": "probetrace-probes", "N_p": w.N_p, "L": w.L,
           "vectors": w.vectors.tolist(), "d_bar": d_bar}
    with open(path, "w") as fh:
        fh.write(_dumps(obj) + "\n")


def load_probes(path):
    """Probing vectors from a probes file or a checkpoint; returns ``(w, d_bar)``."""
    with open(path, "rb") as fh:
        head = fh.read(200)
    if CHECKPOINT_FORMAT.encode() in head:
        return checkpoint_load(path).w, None
    with open(path) as fh:
        obj = json.load(fh)
    if obj.get("format") != "probetrace-probes":
        raise ValueError(f"{path}: not a probes file")
    return ProbingVectorSet(np.array(obj["vectors"], dtype=np.float64)), obj.get("d_bar")
