"""Experiment configuration: a strict TOML schema with sections [model], [simulation], [outputs].

Every key is optional; omitted keys take the defaults below and are listed in
``ExperimentConfig.defaults_applied``. Unknown sections or keys, wrong types
and out-of-range values raise :class:`ConfigError` naming the key and, where it
can be located, the line.
"""

from __future__ import annotations

import math
import re
import sys
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidArgumentError
from .lq_model import LqParams
from .riccati import FormulaVariant, GammaChoice

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SUITES = ("riccati", "simulate", "adjoint", "cost", "smp", "paper-repro")

# (section, key) -> (kind, default)
SCHEMA = {
    ("model", "a"): ("float", 0.0),
    ("model", "b"): ("float", 1.0),
    ("model", "sigma"): ("float", 1e-2),
    ("model", "theta"): ("float", 1e-5),
    ("model", "mu"): ("float", 0.0),
    ("model", "x0"): ("float", 1.0),
    ("model", "t_end"): ("float", 1.0),
    ("model", "gamma_choice"): ("enum:sigma_beta,one", "sigma_beta"),
    ("model", "variant"): ("enum:derived_ode,paper_printed", "derived_ode"),
    ("simulation", "n_paths"): ("int", 10_000),
    ("simulation", "n_steps"): ("int", 1000),
    ("simulation", "seed"): ("int", 20240601),
    ("simulation", "control_min"): ("float", -5.0),
    ("simulation", "control_max"): ("float", 5.0),
    ("simulation", "control_step"): ("float", 0.1),
    ("simulation", "suites"): ("suites", list(SUITES)),
    ("simulation", "repro_dt"): ("float", 1e-4),
    ("simulation", "repro_t_end"): ("float", 5.0),
    ("simulation", "residual_paths"): ("int", 1000),
    ("outputs", "dir"): ("str", "rsmfc-out"),
    ("outputs", "plots"): ("bool", True),
}
SECTIONS = ("model", "simulation", "outputs")


@dataclass(frozen=True)
class ExperimentConfig:
    model: LqParams = field(default_factory=LqParams)
    gamma_choice: GammaChoice = GammaChoice.SIGMA_BETA
    variant: FormulaVariant = FormulaVariant.DERIVED_ODE
    n_paths: int = 10_000
    n_steps: int = 1000
    seed: int = 20240601
    control_min: float = -5.0
    control_max: float = 5.0
    control_step: float = 0.1
    suites: tuple = SUITES
    repro_dt: float = 1e-4
    repro_t_end: float = 5.0
    residual_paths: int = 1000
    outputs: str = "rsmfc-out"
    plots: bool = True
    defaults_applied: tuple = ()

    @property
    def control_grid(self) -> np.ndarray:
        n = int(round((self.control_max - self.control_min) / self.control_step))
        return np.round(self.control_min + self.control_step * np.arange(n + 1), 12)

    def echo(self) -> dict:
        """Plain-data view for the run manifest."""
        m = self.model
        return {
            "model": {"a": m.a, "b": m.b, "sigma": m.sigma, "theta": m.theta, "mu": m.mu,
                      "x0": m.x0, "t_end": m.t_end, "gamma_choice": self.gamma_choice.value,
                      "variant": self.variant.value},
            "simulation": {"n_paths": self.n_paths, "n_steps": self.n_steps, "seed": self.seed,
                           "control_min": self.control_min, "control_max": self.control_max,
                           "control_step": self.control_step, "suites": list(self.suites),
                           "repro_dt": self.repro_dt, "repro_t_end": self.repro_t_end,
                           "residual_paths": self.residual_paths},
            "outputs": {"dir": self.outputs, "plots": self.plots},
            "defaults_applied": list(self.defaults_applied),
        }


def _key_line(text: str, section: str, key: str) -> int | None:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        h = re.match(r"^\[\s*([A-Za-z0-9_.-]+)\s*\]", s)
        if h:
            current = h.group(1)
            if key is None and current == section:
                return n
            continue
        if current == section and key is not None and re.match(rf"^{re.escape(key)}\s*=", s):
            return n
    return None


def _coerce(kind: str, value, name: str, line):
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {type(value).__name__}", key=name, line=line)
        if not math.isfinite(value):
            raise ConfigError("value must be finite", key=name, line=line)
        return float(value)
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {type(value).__name__}", key=name, line=line)
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {type(value).__name__}", key=name, line=line)
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {type(value).__name__}", key=name, line=line)
        return value
    if kind.startswith("enum:"):
        allowed = kind[5:].split(",")
        if value not in allowed:
            raise ConfigError(f"expected one of {allowed}, got {value!r}", key=name, line=line)
        return value
    if kind == "suites":
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError("expected a list of suite names", key=name, line=line)
        bad = [v for v in value if v not in SUITES]
        if bad:
            raise ConfigError(f"unknown suites {bad}; known: {list(SUITES)}", key=name, line=line)
        # declared order, duplicates dropped
        return [s for s in SUITES if s in value]
    raise AssertionError(kind)


def parse_config(text: str) -> ExperimentConfig:
    """Parse a configuration document (all-or-nothing)."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"malformed document: {exc}", line=int(m.group(1)) if m else None) from exc

    values, defaults = {}, []
    for section, body in doc.items():
        if section not in SECTIONS:
            raise ConfigError("unknown section", key=section, line=_key_line(text, section, None))
        if not isinstance(body, dict):
            raise ConfigError("expected a table", key=section, line=_key_line(text, section, None))
        for key in body:
            if (section, key) not in SCHEMA:
                raise ConfigError("unknown key", key=f"{section}.{key}",
                                  line=_key_line(text, section, key))
    for (section, key), (kind, default) in SCHEMA.items():
        name = f"{section}.{key}"
        body = doc.get(section, {})
        if key in body:
            values[key] = _coerce(kind, body[key], name, _key_line(text, section, key))
        else:
            values[key] = default
            defaults.append(name)

    def fail(key, msg):
        section = next(s for (s, k) in SCHEMA if k == key)
        raise ConfigError(msg, key=f"{section}.{key}", line=_key_line(text, section, key))

    try:
        model = LqParams(**{k: values[k] for k in ("a", "b", "sigma", "theta", "mu", "x0", "t_end")})
    except InvalidArgumentError as exc:
        key = str(exc).split()[0]
        fail(key if key in values else "a", str(exc))
    for key in ("n_paths", "n_steps", "residual_paths"):
        if values[key] < 1:
            fail(key, f"must be >= 1, got {values[key]}")
    if not 0 <= values["seed"] < 2**64:
        fail("seed", "must lie in [0, 2**64)")
    if values["control_step"] <= 0:
        fail("control_step", "must be > 0")
    if values["control_max"] < values["control_min"]:
        fail("control_max", "must be >= control_min")
    for key in ("repro_dt", "repro_t_end"):
        if values[key] <= 0:
            fail(key, "must be > 0")
    for key, t_end in (("repro_dt", values["t_end"]), ("repro_dt", values["repro_t_end"])):
        n = t_end / values[key]
        if abs(n - round(n)) > 1e-6 * n:
            fail(key, f"must divide the horizon {t_end}")

    return ExperimentConfig(
        model=model,
        gamma_choice=GammaChoice(values["gamma_choice"]),
        variant=FormulaVariant(values["variant"]),
        n_paths=values["n_paths"],
        n_steps=values["n_steps"],
        seed=values["seed"],
        control_min=values["control_min"],
        control_max=values["control_max"],
        control_step=values["control_step"],
        suites=tuple(values["suites"]),
        repro_dt=values["repro_dt"],
        repro_t_end=values["repro_t_end"],
        residual_paths=values["residual_paths"],
        outputs=values["dir"],
        plots=values["plots"],
        defaults_applied=tuple(defaults),
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc.strerror}", key=str(path)) from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError("config file is not valid UTF-8") from exc
    return parse_config(text)
