"""Experiment configuration: an INI file with one operation per run.

Layout::

    [operation]
    name = fk-sweep

    [model]
    kind = overdamped1d
    potential = "x^2 + a*exp(-x^2)"
    theta = 1

    [params]
    a = 2

    [numeric]
    seed = 7
    dx = 1e-2

    [output]
    dir = out

Every key not given is filled with its default during parsing, so the
resolved configuration written back by :func:`serialize` is complete.
Optional quantities that are computed when absent take the value ``auto``.
"""

from __future__ import annotations

import configparser
import json
import math
import re
from dataclasses import dataclass, field
from typing import Any, Callable

from .expr import ExpressionError, parse_expression
from .io import fmt_float

__all__ = [
    "OPERATIONS",
    "MODEL_KINDS",
    "ConfigError",
    "ExperimentConfig",
    "parse_config",
    "load_config",
    "serialize",
]

OPERATIONS = ("fk-eig", "fk-sweep", "kappa", "gp", "lyapunov", "couple", "constants", "certify",
              "kinetic-rate", "mass-bound")

AUTO = "auto"


class ConfigError(ValueError):
    """A configuration problem, located by line and field where possible."""

    def __init__(self, message: str, line: int | None = None, section: str | None = None,
                 key: str | None = None):
        self.message = message
        self.line = line
        self.section = section
        self.key = key
        where = []
        if line is not None:
            where.append(f"line {line}")
        if section is not None:
            where.append(f"[{section}]" + (f" {key}" if key else ""))
        super().__init__(("%s: %s" % (", ".join(where), message)) if where else message)


# -- value types ---------------------------------------------------------------


def _float(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _int(s: str) -> int:
    return int(s, 10)


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError("expected true or false")


def _floats(s: str) -> tuple[float, ...]:
    parts = [p for p in re.split(r"[,\s]+", s.strip()) if p]
    if not parts:
        raise ValueError("expected at least one number")
    return tuple(_float(p) for p in parts)


def _matrix(s: str) -> tuple[tuple[float, ...], ...]:
    s = s.strip()
    if s.startswith("["):
        raw = json.loads(s)
        if not isinstance(raw, list):
            raise ValueError("expected a nested list")
        if raw and not isinstance(raw[0], list):
            raw = [raw]
        rows = tuple(tuple(_float(str(v)) for v in row) for row in raw)
    else:
        rows = ((_float(s),),)
    if not rows or any(len(r) != len(rows[0]) for r in rows) or not rows[0]:
        raise ValueError("matrix rows must be non-empty and of equal length")
    return rows


def _expr(s: str) -> str:
    s = s.strip()
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "\"'":
        s = s[1:-1]
    if not s.strip():
        raise ValueError("empty expression")
    return s


def _choice(*options: str) -> Callable[[str], str]:
    def conv(s: str) -> str:
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s

    conv.options = options  # type: ignore[attr-defined]
    return conv


def _optional(conv: Callable[[str], Any]) -> Callable[[str], Any]:
    def opt(s: str):
        return AUTO if s.strip().lower() == AUTO else conv(s)

    opt.inner = conv  # type: ignore[attr-defined]
    return opt


def _seed(s: str) -> int:
    v = _int(s)
    if not 0 <= v < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return v


REQUIRED = object()


@dataclass(frozen=True)
class _Field:
    conv: Callable[[str], Any]
    default: Any = REQUIRED
    check: Callable[[Any], str | None] | None = None


def _pos(v):
    vals = v if isinstance(v, tuple) else (v,)
    return None if all(x > 0 for x in vals if x != AUTO) else "must be positive"


def _nonneg(v):
    return None if v == AUTO or v >= 0 else "must be non-negative"


def _at_least_one(v):
    vals = v if isinstance(v, tuple) else (v,)
    return None if all(x >= 1 for x in vals) else "must be at least 1"


def _range3(v):
    if len(v) != 3:
        return "expected lo, hi, count"
    lo, hi, n = v
    if n < 1 or n != int(n):
        return "count must be a positive integer"
    if hi < lo or (n > 1 and hi == lo):
        return "need lo < hi"
    return None


def _grid3(v):
    if len(v) != 3 or v[2] <= 0 or v[1] < v[0]:
        return "expected lo, hi, step with lo <= hi and step > 0"
    return None


def _pair(v):
    return None if len(v) == 2 and v[0] < v[1] else "expected lo, hi with lo < hi"


F = _Field

MODEL_KINDS: dict[str, dict[str, _Field]] = {
    "overdamped1d": {"potential": F(_expr), "theta": F(_float, 1.0, _pos)},
    "ornstein_uhlenbeck": {"rate": F(_float, 1.0, _nonneg), "d": F(_int, 1, _pos), "theta": F(_float, 1.0, _pos)},
    "linear": {"A": F(_matrix), "sigma": F(_optional(_matrix), AUTO)},
    "kinetic_langevin": {"potential": F(_expr), "gamma": F(_float, 1.0, _pos), "theta": F(_float, 1.0, _pos),
                         "d": F(_int, 1, _pos)},
    "colored_noise": {"potential": F(_expr), "A": F(_matrix, ((1.0,),)), "sigma0": F(_matrix, ((1.0,),)),
                      "eta_cv": F(_optional(_float), AUTO, _pos)},
    "coupling_params": {"rho1": F(_float, check=_pos), "L1": F(_float, check=_pos), "L2": F(_float, check=_pos),
                        "L3": F(_float, check=_pos), "theta": F(_float, check=_pos), "Q": F(_matrix),
                        "rho2": F(_float, check=_pos), "S_star": F(_float, check=_pos), "n": F(_int, 1, _pos)},
    "none": {},
}

_FK = {"domain": F(_floats, (-5.0, 5.0), _pair), "dx": F(_float, 1e-3, _pos),
       "boundary": F(_choice("reflecting", "dirichlet"), "reflecting"), "tol": F(_float, 1e-10, _pos)}
_MC = {"N": F(_int, 1000, _pos), "dt": F(_float, 1e-3, _pos)}

NUMERIC: dict[str, dict[str, _Field]] = {
    "fk-eig": {"p": F(_floats, (1.0,), _pos), "theta2": F(_optional(_floats), AUTO, _pos), **_FK,
               "method": F(_choice("auto", "sturm", "power"), "auto")},
    "fk-sweep": {"p_range": F(_floats, (1.0, 3.0, 25.0), _range3),
                 "theta2_range": F(_floats, (0.1, 5.0, 25.0), _range3), **_FK,
                 "color_range": F(_floats, (-4.0, 4.0), _pair)},
    "kappa": {"p": F(_floats, (1.0, 2.0, 3.0), _at_least_one), "t": F(_floats, (1.0,), _pos), **_MC,
              "grid": F(_floats, (-3.0, 3.0, 0.25), _grid3),
              "scheme": F(_choice("euler", "exponential"), "euler")},
    "gp": {"p": F(_float, 1.0, _pos), "x": F(_floats, (0.0,)), "t": F(_float, 1.0, _pos), **_MC},
    "lyapunov": {"p": F(_floats, (1.0,), _at_least_one), "T": F(_float, 10.0, _pos), **_MC,
                 "n_checkpoints": F(_int, 11, _pos), "grid": F(_floats, (-3.0, 3.0, 0.25), _grid3)},
    "couple": {"p": F(_float, 2.0, _at_least_one), "x0": F(_floats, (1.0, 1.0)), "x0p": F(_floats, (-1.0, -1.0)),
               "T": F(_float, 20.0, _pos), "dt": F(_float, 1e-3, _pos), "N": F(_int, 10000, _pos),
               "xi": F(_float, 1e-3, _pos), "n_checkpoints": F(_int, 41, _pos)},
    "constants": {"p": F(_float, 2.0, _at_least_one), "xi": F(_float, 0.0, _nonneg),
                  "variant": F(_choice("derived", "printed"), "derived"), "full_q_norm": F(_bool, False)},
    "certify": {"p": F(_float, 1.0, _at_least_one), "C1": F(_optional(_float), AUTO, _pos),
                "lambda1": F(_optional(_float), AUTO, _pos), "mu_eta": F(_optional(_float), AUTO),
                "mu_abs_moment": F(_optional(_float), AUTO, _nonneg), "L_eta": F(_optional(_float), AUTO, _nonneg),
                "sigma_norm": F(_optional(_float), AUTO, _nonneg), "R": F(_float, 0.0, _nonneg),
                "rho": F(_optional(_float), AUTO), "T": F(_float, 20.0, _pos), **_MC},
    "kinetic-rate": {"gamma": F(_float, check=_pos), "xi0": F(_float)},
    "mass-bound": {"K": F(_float, check=_pos), "R": F(_float, check=_pos), "R2": F(_float, check=_pos),
                   "theta": F(_float, check=_pos), "d": F(_float, check=_pos)},
}

OUTPUT: dict[str, _Field] = {"dir": F(str, "out"), "svg": F(_bool, True), "png": F(_bool, True)}

#: model kinds each operation can run on
OPERATION_MODELS: dict[str, tuple[str, ...]] = {
    "fk-eig": ("overdamped1d",),
    "fk-sweep": ("overdamped1d",),
    "kappa": ("overdamped1d", "ornstein_uhlenbeck", "linear", "kinetic_langevin", "colored_noise"),
    "gp": ("overdamped1d", "ornstein_uhlenbeck", "linear", "kinetic_langevin", "colored_noise"),
    "lyapunov": ("overdamped1d", "ornstein_uhlenbeck", "linear", "kinetic_langevin", "colored_noise"),
    "couple": ("colored_noise",),
    "constants": ("colored_noise", "coupling_params"),
    "certify": ("colored_noise", "coupling_params", "overdamped1d"),
    "kinetic-rate": ("none",),
    "mass-bound": ("none",),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved configuration; every field carries a value."""

    operation: str
    model: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    numeric: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.numeric["seed"]

    @property
    def kind(self) -> str:
        return self.model["kind"]


def _line_index(text: str) -> dict[tuple[str, str | None], int]:
    idx: dict[tuple[str, str | None], int] = {}
    section = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            idx.setdefault((section, None), no)
        elif section is not None:
            m = re.match(r"([^=:]+?)\s*[=:]", line)
            if m:
                idx.setdefault((section, m.group(1).strip()), no)
    return idx


def _resolve_section(cp: configparser.ConfigParser, section: str, schema: dict[str, _Field],
                     lines: dict, skip: tuple[str, ...] = ()) -> dict:
    raw = dict(cp.items(section)) if cp.has_section(section) else {}
    for k in raw:
        if k not in schema and k not in skip:
            raise ConfigError(f"unknown key (expected one of {', '.join(sorted(schema))})",
                              lines.get((section, k)), section, k)
    out = {}
    for k, f in schema.items():
        if k in raw:
            try:
                v = f.conv(raw[k])
            except (ValueError, json.JSONDecodeError) as exc:
                raise ConfigError(f"invalid value {raw[k]!r}: {exc}", lines.get((section, k)), section, k) from None
        elif f.default is REQUIRED:
            raise ConfigError("missing required key", lines.get((section, None)), section, k)
        else:
            v = f.default
        if f.check is not None and v != AUTO:
            msg = f.check(v)
            if msg:
                raise ConfigError(msg, lines.get((section, k)), section, k)
        out[k] = v
    return out


def parse_config(text: str, operation: str | None = None, seed: int | None = None) -> ExperimentConfig:
    """Parse and validate INI text, materializing every default.

    ``operation`` and ``seed`` (typically from the command line) override
    the file; the operation named in the file, if any, must then agree.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"), strict=True)
    cp.optionxform = str  # keys are case-sensitive (L1, Q, ...)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed file: {getattr(exc, 'message', exc)}", getattr(exc, "lineno", None)) from None
    lines = _line_index(text)
    known = {"operation", "model", "params", "numeric", "output"}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"unknown section (expected one of {', '.join(sorted(known))})",
                              lines.get((sec, None)), sec)

    file_op = cp.get("operation", "name", fallback=None) if cp.has_section("operation") else None
    if cp.has_section("operation"):
        for k in cp.options("operation"):
            if k != "name":
                raise ConfigError("unknown key (expected name)", lines.get(("operation", k)), "operation", k)
    if operation is not None and file_op is not None and file_op.strip() != operation:
        raise ConfigError(f"file names operation {file_op.strip()!r} but {operation!r} was requested",
                          lines.get(("operation", "name")), "operation", "name")
    op = operation or (file_op.strip() if file_op else None)
    if op is None:
        raise ConfigError("no operation given", None, "operation", "name")
    if op not in OPERATIONS:
        raise ConfigError(f"unknown operation {op!r} (expected one of {', '.join(OPERATIONS)})",
                          lines.get(("operation", "name")), "operation", "name")

    allowed = OPERATION_MODELS[op]
    kind = cp.get("model", "kind", fallback=None) if cp.has_section("model") else None
    kind = kind.strip() if kind else ("none" if allowed == ("none",) else None)
    if kind is None:
        raise ConfigError("missing required key", lines.get(("model", None)), "model", "kind")
    if kind not in allowed:
        raise ConfigError(f"operation {op} needs a model of kind {', '.join(allowed)}, got {kind!r}",
                          lines.get(("model", "kind")), "model", "kind")
    model = {"kind": kind, **_resolve_section(cp, "model", MODEL_KINDS[kind], lines, skip=("kind",))}

    params = {}
    if cp.has_section("params"):
        for k, v in cp.items("params"):
            try:
                params[k] = _float(v)
            except ValueError as exc:
                raise ConfigError(f"invalid value {v!r}: {exc}", lines.get(("params", k)), "params", k) from None

    for k, v in model.items():
        if MODEL_KINDS[kind].get(k) is not None and MODEL_KINDS[kind][k].conv is _expr:
            try:
                parse_expression(v, params)
            except ExpressionError as exc:
                raise ConfigError(f"bad expression: {exc}", lines.get(("model", k)), "model", k) from None

    numeric = _resolve_section(cp, "numeric", {"seed": F(_seed, None), **NUMERIC[op]}, lines)
    if seed is not None:
        try:
            numeric["seed"] = _seed(str(seed))
        except ValueError as exc:
            raise ConfigError(str(exc), None, "numeric", "seed") from None
    if numeric["seed"] is None:
        raise ConfigError("a seed is required (set seed in [numeric] or pass --seed)",
                          lines.get(("numeric", None)), "numeric", "seed")
    if op == "fk-eig" and numeric["theta2"] == AUTO:
        numeric["theta2"] = (model["theta"] ** 2,)
    output = _resolve_section(cp, "output", OUTPUT, lines)
    return ExperimentConfig(op, model, params, numeric, output)


def load_config(path, operation: str | None = None, seed: int | None = None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, operation, seed)


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return fmt_float(v)
    if isinstance(v, tuple) and v and isinstance(v[0], tuple):
        return "[" + ", ".join("[" + ", ".join(fmt_float(x) for x in row) + "]" for row in v) + "]"
    if isinstance(v, tuple):
        return ", ".join(fmt_float(x) for x in v)
    return str(v)


def serialize(cfg: ExperimentConfig) -> str:
    """INI text that parses back to ``cfg``."""
    out = ["[operation]", f"name = {cfg.operation}", "", "[model]"]
    schema = MODEL_KINDS[cfg.kind]
    for k, v in cfg.model.items():
        if k != "kind" and schema[k].conv is _expr:
            out.append(f'{k} = "{v}"')
        else:
            out.append(f"{k} = {_fmt(v)}")
    if cfg.params:
        out += ["", "[params]"] + [f"{k} = {_fmt(v)}" for k, v in cfg.params.items()]
    out += ["", "[numeric]"] + [f"{k} = {_fmt(v)}" for k, v in cfg.numeric.items()]
    out += ["", "[output]"] + [f"{k} = {_fmt(v)}" for k, v in cfg.output.items()]
    return "\n".join(out) + "\n"


def as_plain(cfg: ExperimentConfig) -> dict:
    """The resolved configuration as JSON-ready nested dicts."""

    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v

    return {
        "operation": cfg.operation,
        "model": {k: plain(v) for k, v in cfg.model.items()},
        "params": dict(cfg.params),
        "numeric": {k: plain(v) for k, v in cfg.numeric.items()},
        "output": dict(cfg.output),
    }
