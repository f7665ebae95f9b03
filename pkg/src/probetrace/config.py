"""Line-based ``key=value`` configuration for the command-line harness.

Precedence, lowest first: built-in defaults, recipe defaults, the config
file, command-line flags.
"""
from dataclasses import asdict, dataclass, fields

from .training import TrainingConfig


class ConfigError(ValueError):
    pass


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int(text):
    # accept 1e5-style integers
    value = float(text) if any(c in str(text) for c in "eE.") else int(text)
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError(f"not an integer: {text!r}")
        value = int(value)
    return value


def _opt_int(text):
    return None if str(text).strip().lower() in ("", "none") else _int(text)


# config key -> (TrainingConfig field, parser)
TRAINING_KEYS = {
    "L": ("L", _int),
    "Np": ("N_p", _int),
    "Nz": ("N_z", _int),
    "eta": ("eta", float),
    "alpha": ("alpha", float),
    "Nr": ("N_r", _int),
    "steps": ("N_training", _int),
    "seed": ("seed", _int),
    "sigma": ("noise_sigma", float),
    "bootstrap": ("bootstrap_len", _int),
    "tol": ("tol", float),
    "max_iter": ("max_iter", _opt_int),
    "search_with_momentum": ("search_with_momentum", _bool),
}


@dataclass(frozen=True)
class HarnessOptions:
    n_test: int = 50
    log_stride: int = 100
    eval_every: int = 0          # 0: about 40 points per learning curve
    checkpoint_every: int = 0    # 0: only at the end
    n_hist: int = 10_000
    n_calib: int = 0             # 0: every cached pool entry
    probes: str = ""
    f: str = "square"
    N: int = 400
    Nc: int = 40
    reference: str = "exact"
    subset: str = "first"
    repeats: int = 20
    n_matrices: int = 5
    scan: str = ""

    def validate(self):
        positive = ("n_test", "log_stride", "n_hist", "N", "Nc", "repeats", "n_matrices")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("eval_every", "checkpoint_every", "n_calib"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.n_test < 2:
            raise ConfigError(f"n_test must be >= 2, got {self.n_test}")
        if self.Nc > self.N:
            raise ConfigError(f"Nc must be <= N, got Nc={self.Nc}, N={self.N}")
        if self.reference not in ("exact", "stochastic"):
            raise ConfigError(f"reference must be 'exact' or 'stochastic', got {self.reference!r}")
        if self.subset not in ("first", "strided"):
            raise ConfigError(f"subset must be 'first' or 'strided', got {self.subset!r}")
        from .evaluation import TRACE_FUNCTIONS
        if self.f not in TRACE_FUNCTIONS:
            raise ConfigError(f"f must be one of {sorted(TRACE_FUNCTIONS)}, got {self.f!r}")

    def scan_values(self, default, cast=float):
        text = self.scan.strip()
        if not text:
            return list(default)
        try:
            return [cast(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError(f"scan: {exc}") from None


_HARNESS_PARSERS = {
    f.name: {int: _int, str: str, float: float}[f.type] for f in fields(HarnessOptions)
}

ALL_KEYS = tuple(TRAINING_KEYS) + tuple(_HARNESS_PARSERS)


def read_config_file(path):
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: missing key")
            if value == "":
                raise ConfigError(f"{path}:{lineno}: missing value for key {key!r}")
            values[key] = value
    return values


def resolve(values):
    """Turn a ``{key: text-or-value}`` mapping into validated configs."""
    train_kw, harness_kw = {}, {}
    for key, raw in values.items():
        if key in TRAINING_KEYS:
            field_name, parse = TRAINING_KEYS[key]
            target = train_kw
        elif key in _HARNESS_PARSERS:
            field_name, parse = key, _HARNESS_PARSERS[key]
            target = harness_kw
        else:
            raise ConfigError(f"unknown key {key!r}; known keys: {', '.join(ALL_KEYS)}")
        try:
            target[field_name] = parse(raw) if isinstance(raw, str) else raw
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
    try:
        training = TrainingConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    options = HarnessOptions(**harness_kw)
    options.validate()
    return training, options


def parse_config(path=None, flags=None, defaults=None):
    """Resolve defaults, then ``path`` (if given), then ``flags``.

    ``defaults`` are recipe-level defaults layered on top of the built-in
    ones (the full-scale L=100 training parameters).
    """
    values = dict(defaults or {})
    if path:
        values.update(read_config_file(path))
    for key, value in (flags or {}).items():
        if value is not None:
            values[key] = value
    return resolve(values)


def echo(training, options):
    """Flat dict of every resolved setting, for manifests."""
    return {"training": asdict(training), "harness": asdict(options)}
