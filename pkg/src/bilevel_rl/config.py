"""Run configuration: flat ``key = value`` files with one section per module.

Every key is declared in :data:`SCHEMA`; unknown sections or keys are hard
errors. Diagnostics name the file, line, section and key. Overrides use the
dotted form ``section.key=value``.

A ``[sweep]`` section lists ``seeds`` and any number of dotted keys with
comma-separated values; the sweep runs their Cartesian product.
"""

from __future__ import annotations

import configparser
import itertools
import re
from dataclasses import dataclass, field
from pathlib import Path

from .actor_critic import AlgorithmOptions, checkpoints
from .baselines import BaselineConfig
from .oracles import OracleConfig
from .schedules import ScheduleSet, parse_exponent

ALGORITHMS = ("proposed", "proposed_fixed_tau", "partial_sgd", "finite_difference", "nested_loop")
ENVIRONMENTS = ("gridworld", "preference")
NONE_WORDS = ("", "none", "null")


class ConfigError(ValueError):
    """Configuration problem, located by source, line, section and key."""

    def __init__(self, message: str, source: str = "<config>", line: int | None = None,
                 section: str | None = None, key: str | None = None):
        where = source if line is None else f"{source}:{line}"
        what = f"[{section}] {key}" if key else (f"[{section}]" if section else "")
        super().__init__(f"{where}: {what + ': ' if what else ''}{message}")
        self.source, self.line, self.section, self.key = source, line, section, key


def _bool(text):
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int(lo=None):
    def parse(text):
        value = int(text.strip())
        if lo is not None and value < lo:
            raise ValueError(f"must be >= {lo}")
        return value
    return parse


def _u64(text):
    value = int(text.strip())
    if not 0 <= value < 2 ** 64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return value


def _float(positive=False, nonneg=False):
    def parse(text):
        value = float(text.strip())
        if value != value or value in (float("inf"), float("-inf")):
            raise ValueError("must be finite")
        if positive and not value > 0:
            raise ValueError("must be positive")
        if nonneg and not value >= 0:
            raise ValueError("must be nonnegative")
        return value
    return parse


def _optional(parse):
    def wrapped(text):
        return None if text.strip().lower() in NONE_WORDS else parse(text)
    return wrapped


def _choice(*options):
    def parse(text):
        value = text.strip()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {value!r}")
        return value
    return parse


def _exponent(text):
    value = parse_exponent(text)
    if value < 0:
        raise ValueError("exponents must be nonnegative")
    return value


def _cadence(text):
    value = text.strip()
    checkpoints(1, value)
    return value


def _float_list(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _int_list(text):
    values = tuple(_u64(v) for v in text.split(",") if v.strip())
    if not values:
        raise ValueError("needs at least one seed")
    return values


_D = ScheduleSet(0.01, 0.1, 0.1, 0.5, 1.0)
_O = OracleConfig()
_A = AlgorithmOptions()

# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "environment": (_choice(*ENVIRONMENTS), "gridworld"),
        "algorithm": (_choice(*ALGORITHMS), "proposed"),
        "iterations": (_int(0), 1000),
        "sample_budget": (_optional(_int(0)), None),
        "seed": (_u64, 0),
        "checkpoint_cadence": (_cadence, "geometric:1.2"),
        "mode": (_choice("markovian", "iid"), "markovian"),
        "name": (str.strip, ""),
    },
    "schedules": {
        "zeta0": (_float(nonneg=True), _D.zeta0),
        "alpha0": (_float(nonneg=True), _D.alpha0),
        "beta0": (_float(nonneg=True), _D.beta0),
        "w0": (_float(positive=True), _D.w0),
        "tau0": (_float(positive=True), _D.tau0),
        "c_zeta": (_exponent, _D.c_zeta),
        "c_alpha": (_exponent, _D.c_alpha),
        "c_beta": (_exponent, _D.c_beta),
        "c_w": (_exponent, _D.c_w),
        "c_tau": (_exponent, _D.c_tau),
        "strict": (_bool, False),
    },
    "algorithm": {
        "include_baseline": (_bool, _A.include_baseline),
        "entropy_correction": (_bool, _A.entropy_correction),
        "td_target_uses_restart": (_bool, _A.td_target_uses_restart),
        "recenter_every": (_int(0), _A.recenter_every),
        "track_bounds": (_bool, _A.track_bounds),
        "critic_init": (_float(nonneg=True), _A.critic_init),
        "use_kernel": (_bool, _A.use_kernel),
    },
    "baseline": {
        "inner_iters": (_int(1), 2000),
        "fd_epsilon": (_optional(_float(positive=True)), None),
        "fixed_tau": (_optional(_float(positive=True)), None),
    },
    "oracle": {
        "svi_tol": (_float(positive=True), _O.svi_tol),
        "svi_max_iter": (_int(1), _O.svi_max_iter),
        "gd_tol": (_float(positive=True), _O.gd_tol),
        "gd_max_iter": (_int(1), _O.gd_max_iter),
        "fd_step": (_float(positive=True), _O.fd_step),
        "phi_eval_tau": (_float(positive=True), _O.phi_eval_tau),
        "phi_refine_tol": (_float(positive=True), _O.phi_refine_tol),
        "method": (_choice("lbfgs", "gd"), _O.method),
    },
    "evaluation": {
        "phi": (_bool, True),
        "grad_norm": (_bool, True),
        "residuals": (_bool, False),
    },
    "gridworld": {
        "width": (_int(1), 10),
        "height": (_int(1), 10),
        "gamma": (_float(positive=True), 0.95),
        "lambda": (_float(nonneg=True), 10.0),
        "normalize_reward": (_bool, False),
    },
    "preference": {
        "num_states": (_int(2), 4),
        "gamma": (_float(positive=True), 0.9),
        "slip": (_float(nonneg=True), 0.1),
        "trajectory_len": (_int(1), 3),
        "pairs_per_eval": (_int(1), 1),
        "x_bound": (_float(positive=True), 2.0),
        "true_reward": (_optional(_float_list), None),
    },
    "sweep_phi": {
        "spacing": (_float(positive=True), 1.0),
        "tau": (_optional(_float(positive=True)), None),
    },
}


@dataclass(frozen=True)
class Origin:
    source: str
    line: int | None


@dataclass
class ConfigValues:
    """Typed values of every schema key, with where each explicit value came from."""

    values: dict = field(default_factory=dict)
    origins: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    source: str = "<defaults>"

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set_text(self, section: str, key: str, text: str, origin: Origin):
        if section not in SCHEMA:
            raise ConfigError(f"unknown section (known: {', '.join(SCHEMA)})", origin.source,
                              origin.line, section)
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key (known: {', '.join(SCHEMA[section])})",
                              origin.source, origin.line, section, key)
        try:
            value = SCHEMA[section][key][0](text)
        except (ValueError, ArithmeticError) as err:
            raise ConfigError(f"invalid value {text.strip()!r}: {err}", origin.source,
                              origin.line, section, key) from None
        self.values[section][key] = value
        self.origins[(section, key)] = origin

    def copy(self) -> "ConfigValues":
        return ConfigValues({s: dict(v) for s, v in self.values.items()}, dict(self.origins),
                            dict(self.sweep), self.source)


def defaults() -> ConfigValues:
    return ConfigValues({s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()})


_SECTION = re.compile(r"^\s*\[([^\]]+)\]")
_KEY = re.compile(r"^\s*([^=:#;\s\[][^=:]*?)\s*[=:]")


def _line_index(text: str) -> dict:
    """(section, key) -> first line number, found by a plain scan of the file."""
    index, section = {}, None
    for n, line in enumerate(text.splitlines(), 1):
        m = _SECTION.match(line)
        if m:
            section = m.group(1).strip()
            index.setdefault((section, None), n)
            continue
        m = _KEY.match(line)
        if m and section is not None:
            index.setdefault((section, m.group(1).strip()), n)
    return index


def parse_text(text: str, source: str = "<config>", base: ConfigValues | None = None) -> ConfigValues:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#", ";"), strict=True,
                                       default_section="__no_default__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as err:
        raise ConfigError("key outside of any section", source, err.lineno) from None
    except configparser.DuplicateSectionError as err:
        raise ConfigError("duplicate section", source, err.lineno, err.section) from None
    except configparser.DuplicateOptionError as err:
        raise ConfigError("duplicate key", source, err.lineno, err.section, err.option) from None
    except configparser.ParsingError as err:
        line = err.errors[0][0] if err.errors else None
        raise ConfigError("malformed line (expected 'key = value')", source, line) from None
    lines = _line_index(text)
    out = (base or defaults()).copy()
    out.source = source
    for section in parser.sections():
        if section != "sweep" and section not in SCHEMA:
            raise ConfigError(f"unknown section (known: {', '.join(SCHEMA)}, sweep)", source,
                              lines.get((section, None)), section)
        if section == "sweep":
            for key, raw in parser.items(section):
                origin = Origin(source, lines.get((section, key)))
                out.sweep[key] = _parse_sweep_entry(key, raw, origin)
            continue
        for key, raw in parser.items(section):
            out.set_text(section, key, raw, Origin(source, lines.get((section, key))))
    if out.sweep and "seeds" not in out.sweep:
        out.sweep["seeds"] = (out.get("run", "seed"),)
    return out


def _parse_sweep_entry(key: str, raw: str, origin: Origin):
    if key == "seeds":
        try:
            return _int_list(raw)
        except ValueError as err:
            raise ConfigError(f"invalid seeds {raw!r}: {err}", origin.source, origin.line,
                              "sweep", key) from None
    section, _, name = key.partition(".")
    if not name or section not in SCHEMA or name not in SCHEMA[section]:
        raise ConfigError("sweep keys must be 'seeds' or a known 'section.key'", origin.source,
                          origin.line, "sweep", key)
    texts = [v.strip() for v in raw.split(",")]
    if not texts or any(not t for t in texts):
        raise ConfigError("needs a comma-separated list of values", origin.source, origin.line,
                          "sweep", key)
    parse = SCHEMA[section][name][0]
    for t in texts:
        try:
            parse(t)
        except (ValueError, ArithmeticError) as err:
            raise ConfigError(f"invalid value {t!r}: {err}", origin.source, origin.line,
                              "sweep", key) from None
    return tuple(texts)


def load(path, overrides=(), base: ConfigValues | None = None) -> ConfigValues:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config: {err.strerror}", str(path)) from None
    return apply_overrides(parse_text(text, str(path), base), overrides)


def apply_overrides(values: ConfigValues, overrides=()) -> ConfigValues:
    out = values.copy()
    for item in overrides:
        key, sep, text = item.partition("=")
        section, _, name = key.strip().partition(".")
        if not sep or not name:
            raise ConfigError(f"override {item!r} must look like section.key=value", "--override")
        out.set_text(section, name, text, Origin("--override", None))
    return out


@dataclass(frozen=True)
class RunConfig:
    """Everything a single run needs, validated."""

    environment: str
    algorithm: str
    iterations: int
    seed: int
    cadence: str
    schedules: ScheduleSet
    options: AlgorithmOptions
    baseline: BaselineConfig | None
    oracle: OracleConfig
    evaluation: dict
    env: dict
    sweep_phi: dict
    name: str = ""

    @property
    def samples_per_iteration(self) -> int:
        inner = self.baseline.inner_iters if self.baseline else 1
        return samples_per_iteration(self.algorithm, inner)


def samples_per_iteration(algorithm: str, inner_iters: int) -> int:
    if algorithm in ("proposed", "proposed_fixed_tau"):
        return 2
    if algorithm == "partial_sgd":
        return 1
    return 2 * inner_iters


def build(values: ConfigValues) -> RunConfig:
    """Validate cross-key constraints and assemble a :class:`RunConfig`."""
    v = values.values

    def fail(section, key, message):
        origin = values.origins.get((section, key), Origin(values.source, None))
        raise ConfigError(message, origin.source, origin.line, section, key)

    run, sch, alg, bl = v["run"], v["schedules"], v["algorithm"], v["baseline"]
    try:
        schedules = ScheduleSet(sch["zeta0"], sch["alpha0"], sch["beta0"], sch["w0"], sch["tau0"],
                                sch["c_zeta"], sch["c_alpha"], sch["c_beta"], sch["c_w"],
                                sch["c_tau"], sch["strict"])
    except ValueError as err:
        fail("schedules", "strict" if sch["strict"] else None, str(err))
    if not alg["critic_init"] <= 1.0:
        fail("algorithm", "critic_init", "critic_init must lie in [0, 1]")
    options = AlgorithmOptions(run["mode"], alg["include_baseline"], alg["entropy_correction"],
                               alg["td_target_uses_restart"], alg["recenter_every"],
                               alg["track_bounds"], alg["use_kernel"], alg["critic_init"])
    if run["algorithm"] == "proposed_fixed_tau" and bl["fixed_tau"] is None:
        fail("baseline", "fixed_tau", "algorithm proposed_fixed_tau needs a fixed_tau")
    baseline = None
    if run["algorithm"] != "proposed":
        kind = "fixed_regularization" if run["algorithm"] == "proposed_fixed_tau" else run["algorithm"]
        baseline = BaselineConfig(kind, bl["inner_iters"], bl["fd_epsilon"], bl["fixed_tau"])
    env = dict(v[run["environment"]])
    if not env["gamma"] < 1.0:
        fail(run["environment"], "gamma", "gamma must lie in (0, 1)")
    if run["environment"] == "preference":
        if not env["slip"] < 0.5:
            fail("preference", "slip", "slip must lie in [0, 0.5)")
        if env["num_states"] > 8:
            fail("preference", "num_states", "the preference chain has at most 8 states")
        tr = env["true_reward"]
        if tr is not None and len(tr) != env["num_states"]:
            fail("preference", "true_reward", "needs one entry per state")
    iterations = run["iterations"]
    if run["sample_budget"] is not None:
        iterations = run["sample_budget"] // samples_per_iteration(run["algorithm"], bl["inner_iters"])
    return RunConfig(run["environment"], run["algorithm"], iterations, run["seed"],
                     run["checkpoint_cadence"], schedules, options, baseline, OracleConfig(**v["oracle"]),
                     dict(v["evaluation"]), env, dict(v["sweep_phi"]), run["name"])


def sweep_cells(values: ConfigValues) -> list[tuple[dict, ConfigValues]]:
    """(assignment, values) for each cell of the Cartesian product, seeds innermost."""
    keys = [k for k in values.sweep if k != "seeds"]
    seeds = values.sweep.get("seeds", (values.get("run", "seed"),))
    cells = []
    for combo in itertools.product(*(values.sweep[k] for k in keys)):
        for seed in seeds:
            cell = apply_overrides(values, [f"{k}={t}" for k, t in zip(keys, combo)]
                                   + [f"run.seed={seed}"])
            cells.append((dict(zip(keys, combo), seed=seed), cell))
    return cells


def render(values: ConfigValues) -> str:
    """The full effective configuration as config text."""
    lines = []
    for section, keys in values.values.items():
        lines.append(f"[{section}]")
        for key, value in keys.items():
            if isinstance(value, tuple):
                value = ", ".join(repr(v) for v in value)
            elif value is None:
                value = "none"
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
