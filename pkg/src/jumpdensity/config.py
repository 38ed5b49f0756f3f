"""JSON experiment configuration: schema, validation and model construction."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Optional

import jsonschema

from . import dsl
from .engine import SimConfig
from .fields import FieldSystem
from .levy import LevyMeasure
from .models import BUILTINS, builtin

EXPERIMENTS = ("simulate", "uh-check", "cov-tail", "inverse-moment", "emi", "norris", "density",
               "verify-measure", "interval-cdf")

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_str_list = {"type": "array", "items": {"type": "string"}}
_box = {"type": "array", "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}, "minItems": 1}

MEASURE_SCHEMA = {
    "oneOf": [
        {"type": "null"},
        {
            "type": "object",
            "properties": {
                "name": {"const": "power_law"},
                "kappa": _pos,
                "support": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                "symmetric": {"type": "boolean"},
            },
            "required": ["name", "kappa"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "name": {"const": "finite_activity_uniform"},
                "rate": _pos,
                "support": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
            },
            "required": ["name"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "name": {"const": "custom"},
                "density": {"type": "string"},
                "kappa": _pos,
                "support": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                "symmetric": {"type": "boolean"},
            },
            "required": ["name", "density", "kappa"],
            "additionalProperties": False,
        },
    ]
}

MODEL_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "properties": {"builtin": {"enum": sorted(BUILTINS)}, "params": {"type": "object"}},
            "required": ["builtin"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "e": {"type": "integer", "minimum": 1, "maximum": 10},
                "d": {"type": "integer", "minimum": 0},
                "Z": _str_list,
                "V": {"type": "array", "items": _str_list},
                "Y": {"oneOf": [{"type": "null"}, _str_list]},
            },
            "required": ["e", "d", "Z", "V"],
            "additionalProperties": False,
        },
    ]
}

SIM_SCHEMA = {
    "type": "object",
    "properties": {
        "T": _pos,
        "dt": _pos,
        "cut": {"type": "number", "minimum": 0},
        "gaussian_smalljump_correction": {"type": "boolean"},
        "record_jacobians": {"type": "boolean"},
    },
    "additionalProperties": False,
}

EXPERIMENT_SCHEMA = {
    "type": "object",
    "properties": {
        "type": {"enum": list(EXPERIMENTS)},
        "n_paths": _posint,
        "dump_paths": {"type": "integer", "minimum": 0},
        "jmax": {"type": "integer", "minimum": 0, "maximum": 6},
        "sample_box": _box,
        "n_points": _posint,
        "n_dirs": _posint,
        "c_min": _pos,
        "eps_grid": {"type": "array", "items": _pos, "minItems": 1},
        "u": {"type": "array", "items": _num},
        "p": {"type": "number", "minimum": 2},
        "floors": {"type": "array", "items": _pos, "minItems": 1},
        "f": {"type": "string"},
        "A": {"type": "array", "items": _pos, "minItems": 1},
        "delta": {"type": "array", "items": _pos, "minItems": 1},
        "rho": {"type": "array", "items": _pos, "minItems": 1},
        "T": _pos,
        "cut": {"type": "number", "minimum": 0},
        "instance": {"type": "object"},
        "n_grid": {"type": "integer", "minimum": 5},
        "alpha": _pos,
        "beta": _pos,
        "tail_eps": {"type": "array", "items": _pos},
        "m": _posint,
        "t0": _pos,
        "n_mc": _posint,
    },
    "required": ["type"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "model": MODEL_SCHEMA,
        "measure": MEASURE_SCHEMA,
        "sim": SIM_SCHEMA,
        "x0": {"type": "array", "items": _num},
        "experiment": EXPERIMENT_SCHEMA,
        "output_dir": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "threads": {"type": "integer", "minimum": 1},
    },
    "required": ["experiment"],
    "additionalProperties": False,
}

SIM_DEFAULTS = {"T": 1.0, "dt": 1e-3, "cut": 0.01, "gaussian_smalljump_correction": False,
                "record_jacobians": True}


class ConfigError(ValueError):
    """A configuration problem; ``pointer`` is a JSON-pointer-style location."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer}: {message}" if pointer else message)
        self.pointer = pointer


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


@dataclass
class ExperimentConfig:
    experiment: dict
    model: Optional[dict] = None
    measure: Optional[dict] = None
    sim: dict = field(default_factory=lambda: dict(SIM_DEFAULTS))
    x0: Optional[list] = None
    output_dir: str = "out"
    seed: int = 0
    threads: Optional[int] = None

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        validate(raw)
        raw = copy.deepcopy(raw)
        sim = {**SIM_DEFAULTS, **raw.get("sim", {})}
        sim = {k: (float(v) if isinstance(v, (int, float)) and not isinstance(v, bool) else v) for k, v in sim.items()}
        cfg = cls(
            experiment=raw["experiment"],
            model=raw.get("model"),
            measure=raw.get("measure"),
            sim=sim,
            x0=None if raw.get("x0") is None else [float(v) for v in raw["x0"]],
            output_dir=raw.get("output_dir", "out"),
            seed=int(raw.get("seed", 0)),
            threads=raw.get("threads"),
        )
        cfg.check_semantics()
        return cfg

    def to_dict(self) -> dict:
        out = {
            "experiment": copy.deepcopy(self.experiment),
            "model": copy.deepcopy(self.model),
            "measure": copy.deepcopy(self.measure),
            "sim": dict(self.sim),
            "x0": None if self.x0 is None else list(self.x0),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }
        if self.threads is not None:
            out["threads"] = self.threads
        if out["model"] is None:
            del out["model"]
        if out["x0"] is None:
            del out["x0"]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    # -- semantic checks beyond the schema ----------------------------------
    def check_semantics(self) -> None:
        kind = self.experiment["type"]
        needs_model = kind in ("simulate", "uh-check", "cov-tail", "inverse-moment", "density", "verify-measure")
        if needs_model and self.model is None:
            raise ConfigError("/model", f"experiment {kind!r} needs a model")
        if self.sim["dt"] > self.sim["T"]:
            raise ConfigError("/sim/dt", "dt must not exceed T")
        if self.model is not None:
            system = self.system()
            if self.x0 is not None and len(self.x0) != system.e:
                raise ConfigError("/x0", f"expected {system.e} components")
        if kind == "emi":
            for key in ("f", "A", "delta", "rho"):
                if key not in self.experiment:
                    raise ConfigError(f"/experiment/{key}", "required for emi")
            try:
                dsl.parse_expr(self.experiment["f"], 0, 1)
            except dsl.DSLError as exc:
                raise ConfigError("/experiment/f", str(exc)) from None
            if self.measure is None:
                raise ConfigError("/measure", "emi needs a jump measure")
        if kind == "cov-tail" and "eps_grid" in self.experiment:
            g = self.experiment["eps_grid"]
            if any(b >= a for a, b in zip(g[:-1], g[1:])):
                raise ConfigError("/experiment/eps_grid", "must be strictly decreasing")

    # -- construction -------------------------------------------------------------
    def levy_measure(self) -> Optional[LevyMeasure]:
        return build_measure(self.measure, "/measure")

    def system(self) -> FieldSystem:
        return build_system(self.model, self.levy_measure())

    def sim_config(self) -> SimConfig:
        s = self.sim
        return SimConfig(T=s["T"], dt=s["dt"], cut=s["cut"], seed=self.seed,
                         gaussian_smalljump_correction=s["gaussian_smalljump_correction"],
                         record_jacobians=s["record_jacobians"])

    def initial_state(self, e: int) -> list:
        return list(self.x0) if self.x0 is not None else [0.0] * e


def validate(raw) -> None:
    v = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(v.iter_errors(raw), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        best = jsonschema.exceptions.best_match(errors)
        err = best if best is not None else err
        raise ConfigError(_pointer(err.absolute_path), err.message)


def build_measure(entry: Optional[dict], where: str = "/measure") -> Optional[LevyMeasure]:
    if entry is None:
        return None
    lo, hi = entry.get("support", [0.0, 1.0])
    try:
        if entry["name"] == "power_law":
            return LevyMeasure.power_law(entry["kappa"], hi=hi, lo=lo, symmetric=entry.get("symmetric", True))
        if entry["name"] == "finite_activity_uniform":
            return LevyMeasure.finite_activity_uniform(rate=entry.get("rate", 5.0), hi=hi)
        return LevyMeasure.custom(entry["density"], entry["kappa"], lo=lo, hi=hi, symmetric=entry.get("symmetric", True))
    except (ValueError, dsl.DSLError) as exc:
        raise ConfigError(where, str(exc)) from None


def build_system(entry: dict, G: Optional[LevyMeasure]) -> FieldSystem:
    if "builtin" in entry:
        try:
            system = builtin(entry["builtin"], entry.get("params"))
        except (TypeError, ValueError, dsl.DSLError) as exc:
            raise ConfigError("/model/params", str(exc)) from None
        if G is not None and system.has_jumps:
            system = FieldSystem(system.e, system.d, system.Z, system.V, system.Y, G, system.n, system.name)
        return system
    e, d = entry["e"], entry["d"]
    if len(entry["Z"]) != e:
        raise ConfigError("/model/Z", f"expected {e} components")
    if len(entry["V"]) != d:
        raise ConfigError("/model/V", f"expected {d} fields")
    for i, Vi in enumerate(entry["V"]):
        if len(Vi) != e:
            raise ConfigError(f"/model/V/{i}", f"expected {e} components")
    if entry.get("Y") is not None and len(entry["Y"]) != e:
        raise ConfigError("/model/Y", f"expected {e} components")

    def parse(s, where):
        try:
            return dsl.parse_expr(s, e, 1)
        except dsl.DSLError as exc:
            raise ConfigError(where, str(exc)) from None

    Z = tuple(parse(s, f"/model/Z/{i}") for i, s in enumerate(entry["Z"]))
    V = tuple(tuple(parse(s, f"/model/V/{i}/{j}") for j, s in enumerate(Vi)) for i, Vi in enumerate(entry["V"]))
    Y = None
    if entry.get("Y") is not None:
        Y = tuple(parse(s, f"/model/Y/{i}") for i, s in enumerate(entry["Y"]))
    try:
        return FieldSystem(e=e, d=d, Z=Z, V=V, Y=Y, G=G)
    except ValueError as exc:
        raise ConfigError("/model", str(exc)) from None


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"invalid JSON: {exc}") from None
    return ExperimentConfig.from_dict(raw)
