"""Experiment configuration: INI files with a fixed schema and per-experiment defaults.

Layout::

    [experiment]  name, sampler, target, modes_file, observations_file
    [run]         n_steps, burn_in, seed, start
    [base]        kind, sigma, gamma, delta_t, n_hmc, tune_accept
    [teleport]    kind, sigma, gamma, delta_t, n_hmc, tune_accept,
                  threshold, envelope_c, box_lo, box_hi, alpha_width
    [output]      trace, histogram_bins

Unknown sections or keys are errors. Values not given fall back to the
defaults of the chosen experiment, then to the generic defaults below.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

EXPERIMENTS = ("bimodal", "fifteen_mode", "stoch_vol", "ginzburg_landau", "custom")
SAMPLERS = ("rwm", "mala", "hmc", "kkt_memoryless", "kkt", "gkkt", "mh_gkkt")
TELEPORTING = ("kkt_memoryless", "kkt", "gkkt")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _optional(parse: Callable) -> Callable:
    def go(text: str):
        return None if text.strip().lower() in ("", "none") else parse(text)
    return go


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _vector(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _int(text: str) -> int:
    v = float(text)
    if v != int(v):
        raise ValueError(f"not an integer: {text!r}")
    return int(v)


_opt_float = _optional(float)

SCHEMA: dict[str, dict[str, tuple[Callable, Any]]] = {
    "experiment": {
        "name": (str, "bimodal"),
        "sampler": (str, "kkt_memoryless"),
        "target": (_optional(str), None),
        "modes_file": (_optional(str), None),
        "observations_file": (_optional(str), None),
    },
    "run": {
        "n_steps": (_int, 100_000),
        "burn_in": (_int, 100_000),
        "seed": (_int, 0),
        "start": (_optional(_vector), None),
    },
    "base": {
        "kind": (str, "mala"),
        "sigma": (float, 1.0),
        "gamma": (float, 0.1),
        "delta_t": (float, 0.05),
        "n_hmc": (_int, 10),
        "tune_accept": (_opt_float, None),
    },
    "teleport": {
        "kind": (str, "rwm"),
        "sigma": (float, 1.0),
        "gamma": (float, 0.1),
        "delta_t": (float, 0.05),
        "n_hmc": (_int, 10),
        "tune_accept": (_opt_float, None),
        "threshold": (_opt_float, None),
        "envelope_c": (_opt_float, None),
        "box_lo": (_opt_float, None),
        "box_hi": (_opt_float, None),
        "alpha_width": (float, 0.0),
    },
    "output": {
        "trace": (_bool, True),
        "histogram_bins": (_int, 60),
    },
}

# Settings stated for each experiment; anything else is a generic default.
EXPERIMENT_DEFAULTS: dict[str, dict[str, dict[str, Any]]] = {
    "bimodal": {
        "experiment": {"sampler": "kkt_memoryless"},
        "run": {"n_steps": 1_000_000, "start": (10.0, 0.0)},
        "base": {"kind": "mala", "gamma": 0.1},
        "teleport": {"envelope_c": 1.3 / math.pi, "box_lo": -15.0, "box_hi": 15.0,
                     "sigma": 1.0, "threshold": None},
    },
    "fifteen_mode": {
        "experiment": {"sampler": "kkt"},
        "run": {"n_steps": 1_000_000},
        "base": {"kind": "mala", "gamma": 0.8},
        # C = {-log(14.8 pi) > 2}
        "teleport": {"kind": "rwm", "sigma": 0.8, "threshold": 2.0 + math.log(14.8)},
    },
    "stoch_vol": {
        "experiment": {"sampler": "kkt"},
        "run": {"n_steps": 100_000, "burn_in": 100_000},
        "base": {"kind": "hmc", "n_hmc": 35, "delta_t": 0.05, "tune_accept": 0.7},
        "teleport": {"kind": "rwm", "sigma": 0.05, "tune_accept": 0.25, "threshold": 75.0},
    },
    "ginzburg_landau": {
        "experiment": {"sampler": "kkt"},
        "run": {"n_steps": 100_000, "burn_in": 100_000},
        "base": {"kind": "mala", "gamma": 0.1},
        "teleport": {"kind": "rwm", "sigma": 0.1, "threshold": 100.0},
    },
    "custom": {},
}

# Plain samplers on experiments where a different step size is stated for them.
PLAIN_OVERRIDES: dict[tuple[str, str], dict[str, Any]] = {
    ("ginzburg_landau", "mala"): {"gamma": 1e-3},
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        section, name = key.split(".")
        return self.values[section][name]

    @property
    def experiment(self) -> str:
        return self["experiment.name"]

    @property
    def sampler(self) -> str:
        return self["experiment.sampler"]

    @property
    def seed(self) -> int:
        return self["run.seed"]

    def with_overrides(self, **dotted) -> "ExperimentConfig":
        raw = {s: dict(v) for s, v in self.values.items()}
        for key, v in dotted.items():
            section, name = key.split("__") if "__" in key else key.split(".")
            raw[section][name] = v
        return build_config(raw, explicit=True)

    def to_json(self) -> dict:
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
                for s, d in self.values.items()}

    def to_ini(self) -> str:
        lines = []
        for section, d in self.values.items():
            lines.append(f"[{section}]")
            for k, v in d.items():
                lines.append(f"{k} = {_format(v)}")
            lines.append("")
        return "\n".join(lines)


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(repr(float(t)) for t in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def build_config(given: dict[str, dict[str, Any]], explicit: bool = False) -> ExperimentConfig:
    """Merge user values over experiment defaults and validate.

    ``given`` maps section to key to either raw strings (from a file) or
    already-typed values (``explicit=True`` skips parsing).
    """
    for section, d in given.items():
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
        for key in d:
            if key not in SCHEMA[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")

    def parse(section, key, raw):
        if explicit or not isinstance(raw, str):
            return raw
        try:
            return SCHEMA[section][key][0](raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{section}.{key}", str(exc)) from None

    name = given.get("experiment", {}).get("name", SCHEMA["experiment"]["name"][1])
    if name not in EXPERIMENTS:
        raise ConfigError("experiment.name", f"must be one of {', '.join(EXPERIMENTS)}")
    values = {s: {k: entry[1] for k, entry in keys.items()} for s, keys in SCHEMA.items()}
    for section, d in EXPERIMENT_DEFAULTS[name].items():
        values[section].update(d)
    for section, d in given.items():
        for key, raw in d.items():
            values[section][key] = parse(section, key, raw)
    sampler = values["experiment"]["sampler"]
    if sampler in ("rwm", "mala", "hmc"):
        override = PLAIN_OVERRIDES.get((name, sampler), {})
        for key, v in override.items():
            if key not in given.get("base", {}):
                values["base"][key] = v
    _validate(values)
    return ExperimentConfig(values)


def _validate(v: dict) -> None:
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(key, msg)

    exp, sampler = v["experiment"]["name"], v["experiment"]["sampler"]
    need(sampler in SAMPLERS, "experiment.sampler", f"must be one of {', '.join(SAMPLERS)}")
    need(exp != "custom" or v["experiment"]["target"], "experiment.target",
         "custom experiments need target = module:factory")
    need(v["run"]["n_steps"] >= 1, "run.n_steps", "must be at least 1")
    need(v["run"]["burn_in"] >= 0, "run.burn_in", "must be non-negative")
    need(v["run"]["seed"] >= 0, "run.seed", "must be non-negative")
    for section in ("base", "teleport"):
        d = v[section]
        need(d["kind"] in ("rwm", "mala", "hmc"), f"{section}.kind", "must be rwm, mala or hmc")
        for key in ("sigma", "gamma", "delta_t"):
            need(d[key] > 0 and math.isfinite(d[key]), f"{section}.{key}", "must be positive")
        need(d["n_hmc"] >= 1, f"{section}.n_hmc", "must be at least 1")
        ta = d["tune_accept"]
        need(ta is None or 0 < ta < 1, f"{section}.tune_accept", "must lie in (0, 1)")
    t = v["teleport"]
    need(t["alpha_width"] >= 0, "teleport.alpha_width", "must be non-negative")
    if sampler == "kkt_memoryless":
        need(t["envelope_c"] is not None and t["envelope_c"] > 0, "teleport.envelope_c",
             "memoryless KKT needs a positive envelope constant")
        need(t["box_lo"] is not None and t["box_hi"] is not None and t["box_lo"] < t["box_hi"],
             "teleport.box_lo", "memoryless KKT needs box_lo < box_hi")
    if sampler in ("kkt", "gkkt"):
        need(t["threshold"] is not None and math.isfinite(t["threshold"]), "teleport.threshold",
             "KKT needs a finite level-set threshold")
    if sampler == "mh_gkkt":
        need(v["base"]["kind"] in ("rwm", "mala"), "base.kind",
             "MH-as-GKKT needs an rwm or mala proposal")
    need(v["output"]["histogram_bins"] >= 1, "output.histogram_bins", "must be positive")


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(str(path), str(exc)) from None
    given = {s: dict(parser.items(s)) for s in parser.sections()}
    return build_config(given)


def write_config(cfg: ExperimentConfig, path: Path) -> None:
    Path(path).write_text(cfg.to_ini())
