"""Experiment configuration: a single JSON document, schema-validated.

Unknown keys are rejected at every level.  Physical quantities are in the
natural (dimensionless) units of the model definitions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .exceptions import ConfigError
from .models import InitialLaw, MeasurementSet, SdeModel
from .ocp import ShootOptions
from .pde import Grid1D, auto_domain

_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model", "initial_law", "horizon", "measurements"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["gbm", "cir", "ou", "poly"]},
                "kappa": {"type": "number"},
                "lam": {"type": "number"},
                "b": {"type": "number"},
                "gamma": {"type": "number"},
                "sigma_c": {"type": "number"},
                "drift": {"type": "array", "items": {"type": "number"}},
                "diffusion": {"type": "array", "items": {"type": "number"}},
            },
        },
        "initial_law": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "mu", "sigma"],
            "properties": {
                "kind": {"enum": ["lognormal", "normal"]},
                "mu": {"type": "number"},
                "sigma": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "horizon": {"type": "number", "exclusiveMinimum": 0},
        "measurements": {
            "type": "object",
            "additionalProperties": False,
            "required": ["noise_std"],
            "properties": {
                "count": {"type": "integer", "minimum": 1},
                "times": {"type": "array", "items": {"type": "number"}},
                "values": {"type": "array", "items": {"type": "number"}},
                "noise_std": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "nx": {"type": "integer", "minimum": 200},
                "dt": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "x_min": {"type": ["number", "null"]},
                "x_max": {"type": ["number", "null"]},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": {"type": "integer", "minimum": 16},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iters": {"type": "integer", "minimum": 1},
                "refined_inverse_moments": {"type": "boolean"},
            },
        },
        "em": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kappa0": {"type": "number"},
                "max_iters": {"type": "integer", "minimum": 1},
                "tol": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "seed": {"type": "integer", "minimum": 0},
        "output_times": {"type": "integer", "minimum": 2},
    },
}

_MODEL_KEYS = {
    "gbm": {"kappa", "lam"},
    "cir": {"kappa", "b", "lam"},
    "ou": {"gamma", "sigma_c"},
    "poly": {"drift", "diffusion"},
}


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(data, _SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"invalid config: {exc.message}") from exc
        kind = data["model"]["kind"]
        given = set(data["model"]) - {"kind"}
        if given != _MODEL_KEYS[kind]:
            raise ConfigError(
                f"model kind {kind!r} needs exactly {sorted(_MODEL_KEYS[kind])}, "
                f"got {sorted(given)}")
        mconf = data["measurements"]
        if "times" not in mconf and "count" not in mconf:
            raise ConfigError("measurements need either 'times' or 'count'")
        if "times" in mconf and mconf["times"] and \
                max(mconf["times"]) > data["horizon"] + 1e-12:
            raise ConfigError("measurement times must not exceed the horizon")
        if "values" in mconf:
            times = mconf.get("times")
            if times is None or len(times) != len(mconf["values"]):
                raise ConfigError("fixed measurement values need matching times")
        return cls(data)

    # -- builders ----------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def horizon(self) -> float:
        return float(self.raw["horizon"])

    def model(self) -> SdeModel:
        m = self.raw["model"]
        if m["kind"] == "gbm":
            return SdeModel.gbm(m["kappa"], m["lam"])
        if m["kind"] == "cir":
            return SdeModel.cir(m["kappa"], m["b"], m["lam"])
        if m["kind"] == "ou":
            return SdeModel.ou(m["gamma"], m["sigma_c"])
        return SdeModel.poly(tuple(m["drift"]), tuple(m["diffusion"]))

    def initial_law(self) -> InitialLaw:
        c = self.raw["initial_law"]
        return InitialLaw(c["kind"], float(c["mu"]), float(c["sigma"]))

    def measurement_times(self) -> list[float]:
        m = self.raw["measurements"]
        if "times" in m:
            return [float(t) for t in m["times"]]
        n = int(m["count"])
        T = self.horizon
        return [k * T / n for k in range(1, n + 1)]

    def noise_std(self) -> float:
        return float(self.raw["measurements"]["noise_std"])

    def fixed_values(self) -> list[float] | None:
        vals = self.raw["measurements"].get("values")
        return None if vals is None else [float(v) for v in vals]

    def grid(self, meas: MeasurementSet) -> Grid1D:
        g = self.raw.get("grid", {})
        nx = int(g.get("nx", 2000))
        T = self.horizon
        dt = g.get("dt")
        dt = T / 2000 if dt is None else float(dt)
        x_min, x_max = g.get("x_min"), g.get("x_max")
        if x_min is None or x_max is None:
            lo, hi = auto_domain(self.model(), self.initial_law(), meas, T)
            x_min = lo if x_min is None else float(x_min)
            x_max = hi if x_max is None else float(x_max)
        return Grid1D(float(x_min), float(x_max), nx, dt)

    def shoot_options(self) -> ShootOptions:
        s = self.raw.get("solver", {})
        return ShootOptions(
            steps=int(s.get("steps", 2000)),
            tol=float(s.get("tol", 1e-6)),
            max_iters=int(s.get("max_iters", 50)),
            refined_inverse_moments=bool(s.get("refined_inverse_moments", True)),
        )

    def em_settings(self) -> tuple[float, int, float]:
        e = self.raw.get("em", {})
        return (float(e.get("kappa0", 4.0)), int(e.get("max_iters", 10)),
                float(e.get("tol", 1e-4)))

    def n_output_times(self) -> int:
        return int(self.raw.get("output_times", 41))

    def output_times(self) -> np.ndarray:
        T = self.horizon
        base = np.linspace(0.0, T, self.n_output_times())
        merged = sorted(set(np.round(base, 12)) | set(self.measurement_times()))
        return np.asarray(merged)
