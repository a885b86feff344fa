"""Run descriptions: a line-oriented key = value grammar with one [base]
section, strict validation with line numbers, and a canonical serializer
whose output parses back to the same config.

Top-level keys (defaults in parentheses): n, k, p, alpha, eps, J, tau
(none), q (none), seed (0), box_lo (zeros), box_hi (ones), quad_points
(4), cube_cap (512), mass_floor (1e-14), schedule_mode (holder),
strict_partition (false), node_budget (300000000), dump_res (0),
dump_stages (empty), out_dir (runs/out). The [base] section needs a
family key; every other entry is passed to the base builder, scalars as
floats, space-separated rows as vectors, semicolon-separated rows as
matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from degenhess.fields import Box, ScalarFieldC2, make_base
from degenhess.staircase import StairConfig


class ConfigError(ValueError):
    """Parse or validation failure; message carries the line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


_INT_KEYS = ("n", "k", "J", "seed", "quad_points", "cube_cap",
             "node_budget", "dump_res")
_FLOAT_KEYS = ("p", "alpha", "eps", "tau", "q", "mass_floor")
_STR_KEYS = ("schedule_mode", "out_dir")
_BOOL_KEYS = ("strict_partition",)
_VEC_KEYS = ("box_lo", "box_hi")
_INTLIST_KEYS = ("dump_stages",)
_ALL_KEYS = (_INT_KEYS + _FLOAT_KEYS + _STR_KEYS + _BOOL_KEYS
             + _VEC_KEYS + _INTLIST_KEYS)
_REQUIRED = ("n", "k", "p", "alpha", "eps", "J")


@dataclass(frozen=True, eq=True)
class BaseSpec:
    family: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RunConfig:
    n: int
    k: int
    p: float
    alpha: float
    eps: float
    J: int
    base: BaseSpec
    tau: float | None = None
    q: float | None = None
    seed: int = 0
    box_lo: tuple = ()
    box_hi: tuple = ()
    quad_points: int = 4
    cube_cap: int = 512
    mass_floor: float = 1e-14
    schedule_mode: str = "holder"
    strict_partition: bool = False
    node_budget: int = 300_000_000
    dump_res: int = 0
    dump_stages: tuple = ()
    out_dir: str = "runs/out"

    def stair_config(self):
        return StairConfig(
            tau=self.tau,
            q=self.q,
            cube_cap=self.cube_cap,
            mass_floor=self.mass_floor,
            schedule_mode=self.schedule_mode,
            strict_partition=self.strict_partition,
            seed=self.seed,
            quad_points=self.quad_points,
            node_budget=self.node_budget,
        )

    def build_field(self):
        base = make_base(self.base.family, self.base.params, self.n)
        return ScalarFieldC2(base, Box(self.box_lo, self.box_hi))


def _strip(line):
    # '#' starts a comment anywhere on the line
    cut = line.find("#")
    if cut >= 0:
        line = line[:cut]
    return line.strip()


def _parse_scalar(tok, line):
    try:
        return float(tok)
    except ValueError:
        raise ConfigError(f"cannot parse number '{tok}'", line) from None


def _parse_param_value(text, line):
    if ";" in text:
        rows = [r.strip() for r in text.split(";")]
        mat = [[_parse_scalar(t, line) for t in r.split()] for r in rows if r]
        if len({len(r) for r in mat}) > 1:
            raise ConfigError("matrix rows must have equal length", line)
        return mat
    toks = text.split()
    if len(toks) > 1:
        return [_parse_scalar(t, line) for t in toks]
    return _parse_scalar(toks[0], line) if toks else None


def _parse_int(text, key, line):
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"expected integer for '{key}'", line) from None


def _parse_float(text, key, line):
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"expected number for '{key}'", line) from None


def parse_config(text):
    """Parse and validate a run description, first error wins."""
    raw = {}
    lines = {}
    base_family = None
    base_params = {}
    base_line = None
    base_lines = {}
    section = None
    for no, src in enumerate(text.splitlines(), start=1):
        line = _strip(src)
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name != "base":
                raise ConfigError(f"unknown section '[{name}]'", no)
            section = "base"
            base_line = no
            continue
        if "=" not in line:
            raise ConfigError("expected key = value", no)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError("expected key = value", no)
        if section == "base":
            base_lines[key] = no
            if key == "family":
                base_family = value
            else:
                if not value:
                    raise ConfigError(f"empty value for '{key}'", no)
                base_params[key] = _parse_param_value(value, no)
            continue
        if key not in _ALL_KEYS:
            raise ConfigError(f"unknown key '{key}'", no)
        if key in raw:
            raise ConfigError(f"duplicate key '{key}'", no)
        lines[key] = no
        if key in _INT_KEYS:
            raw[key] = _parse_int(value, key, no)
        elif key in _FLOAT_KEYS:
            raw[key] = _parse_float(value, key, no)
        elif key in _BOOL_KEYS:
            if value not in ("true", "false"):
                raise ConfigError(f"expected true/false for '{key}'", no)
            raw[key] = value == "true"
        elif key in _VEC_KEYS:
            raw[key] = tuple(_parse_scalar(t, no) for t in value.split())
        elif key in _INTLIST_KEYS:
            raw[key] = tuple(_parse_int(t, key, no) for t in value.split())
        else:
            if not value:
                raise ConfigError(f"empty value for '{key}'", no)
            raw[key] = value

    for key in _REQUIRED:
        if key not in raw:
            raise ConfigError(f"missing required key '{key}'")
    if base_family is None:
        raise ConfigError("missing [base] section with a family key", base_line)

    def fail(msg, key):
        raise ConfigError(msg, lines.get(key))

    n, k, p = raw["n"], raw["k"], raw["p"]
    if not 2 <= k <= n <= 3:
        fail("requires 2 <= k <= n <= 3", "k" if k < 2 or k > n else "n")
    if p < 1.0:
        fail("requires 1 <= p", "p")
    if p >= k:
        fail("requires p < k", "p")
    if not 0.0 < raw["alpha"] < 1.0:
        fail("alpha must lie in (0,1)", "alpha")
    if raw["eps"] <= 0.0:
        fail("eps must be positive", "eps")
    if raw["J"] < 1:
        fail("J must be a positive integer", "J")
    if "tau" in raw and not 0.0 < raw["tau"] < 1.0:
        fail("tau must lie in (0,1)", "tau")
    if "q" in raw and not p <= raw["q"] < k:
        fail("requires p <= q < k", "q")
    box_lo = raw.get("box_lo", tuple(0.0 for _ in range(n)))
    box_hi = raw.get("box_hi", tuple(1.0 for _ in range(n)))
    if len(box_lo) != n:
        fail(f"box_lo needs {n} entries", "box_lo")
    if len(box_hi) != n:
        fail(f"box_hi needs {n} entries", "box_hi")
    if any(h <= l for l, h in zip(box_lo, box_hi)):
        fail("box_hi must exceed box_lo per axis", "box_hi")
    if raw.get("quad_points", 4) < 2:
        fail("quad_points must be at least 2", "quad_points")
    if raw.get("cube_cap", 512) < 4:
        fail("cube_cap must be at least 4", "cube_cap")
    if raw.get("mass_floor", 1e-14) < 0.0:
        fail("mass_floor must be nonnegative", "mass_floor")
    if raw.get("node_budget", 300_000_000) < 1:
        fail("node_budget must be positive", "node_budget")
    mode = raw.get("schedule_mode", "holder")
    if mode not in ("holder", "contraction"):
        fail("schedule_mode must be holder or contraction", "schedule_mode")
    dump_res = raw.get("dump_res", 0)
    if dump_res != 0 and dump_res < 2:
        fail("resolution must be at least 2", "dump_res")
    stages = raw.get("dump_stages", ())
    if any(s < 0 or s > raw["J"] for s in stages):
        fail("dump_stages entries must lie in 0..J", "dump_stages")

    cfg = RunConfig(
        n=n,
        k=k,
        p=p,
        alpha=raw["alpha"],
        eps=raw["eps"],
        J=raw["J"],
        base=BaseSpec(base_family, dict(base_params)),
        tau=raw.get("tau"),
        q=raw.get("q"),
        seed=raw.get("seed", 0),
        box_lo=box_lo,
        box_hi=box_hi,
        quad_points=raw.get("quad_points", 4),
        cube_cap=raw.get("cube_cap", 512),
        mass_floor=raw.get("mass_floor", 1e-14),
        schedule_mode=mode,
        strict_partition=raw.get("strict_partition", False),
        node_budget=raw.get("node_budget", 300_000_000),
        dump_res=dump_res,
        dump_stages=stages,
        out_dir=raw.get("out_dir", "runs/out"),
    )
    try:
        cfg.build_field()
    except (ValueError, TypeError) as exc:
        where = base_lines.get("family", base_line)
        raise ConfigError(str(exc), where) from None
    return cfg


def _fmt_num(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    f = float(v)
    return str(int(f)) if f == int(f) and abs(f) < 1e16 else repr(f)


def _fmt_param(v):
    if isinstance(v, list) and v and isinstance(v[0], list):
        return "; ".join(" ".join(_fmt_num(x) for x in row) for row in v)
    if isinstance(v, (list, tuple)):
        return " ".join(_fmt_num(x) for x in v)
    return _fmt_num(v)


def serialize_config(cfg):
    """Canonical text form; parse_config(serialize_config(c)) == c."""
    out = [
        f"n = {cfg.n}",
        f"k = {cfg.k}",
        f"p = {_fmt_num(cfg.p)}",
        f"alpha = {_fmt_num(cfg.alpha)}",
        f"eps = {_fmt_num(cfg.eps)}",
        f"J = {cfg.J}",
    ]
    if cfg.tau is not None:
        out.append(f"tau = {_fmt_num(cfg.tau)}")
    if cfg.q is not None:
        out.append(f"q = {_fmt_num(cfg.q)}")
    out.extend(
        [
            f"seed = {cfg.seed}",
            f"box_lo = {' '.join(_fmt_num(v) for v in cfg.box_lo)}",
            f"box_hi = {' '.join(_fmt_num(v) for v in cfg.box_hi)}",
            f"quad_points = {cfg.quad_points}",
            f"cube_cap = {cfg.cube_cap}",
            f"mass_floor = {_fmt_num(cfg.mass_floor)}",
            f"schedule_mode = {cfg.schedule_mode}",
            f"strict_partition = {_fmt_num(cfg.strict_partition)}",
            f"node_budget = {cfg.node_budget}",
            f"dump_res = {cfg.dump_res}",
        ]
    )
    if cfg.dump_stages:
        out.append(f"dump_stages = {' '.join(str(s) for s in cfg.dump_stages)}")
    out.append(f"out_dir = {cfg.out_dir}")
    out.extend(["", "[base]", f"family = {cfg.base.family}"])
    for key in sorted(cfg.base.params):
        out.append(f"{key} = {_fmt_param(cfg.base.params[key])}")
    return "\n".join(out) + "\n"
