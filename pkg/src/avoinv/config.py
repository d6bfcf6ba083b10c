"""Experiment configuration: INI sections with typed accessors.

Layers, lowest first: built-in defaults, config files in the order given,
then ``section.key=value`` overrides.  Unknown sections or keys are errors so
typos do not silently fall back to defaults.
"""
from __future__ import annotations

import configparser
import io
from pathlib import Path

import numpy as np

from .grf_fft import GridSpec
from .mcmc import ProposalKind
from .model import DepthConfig, ForwardCoefficients, MeanTrend, NoiseSpec, PriorConfig

__all__ = ["ConfigError", "DEFAULTS", "REQUIRED", "ExperimentConfig", "load_config"]


class ConfigError(ValueError):
    pass


REQUIRED = (("grid", "nx"), ("grid", "ny"))

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "0"},
    "grid": {},
    "depth": {"d_min": "2000.0", "d_max": "2250.0", "perturbation": "0.0"},
    "prior": {
        "sigma": "1.0, 1.0, 1.0",
        "effective_range": "3.0, 3.0, 3.0",
        "trend_x_g": "0:1.0, 1:-3.0",
        "trend_x_o": "0:0.5, 1:-2.5",
        "trend_x_clay": "0:-1.0, 1:-1.0",
    },
    "noise": {"var_r0": "0.003", "var_g": "0.03", "corr": "-0.6"},
    "forward": {
        "a": "0.02, -0.12, -0.06, 0.08, 0.05, 0.03",
        "b": "-0.05, 0.20, 0.10, -0.12, -0.08, -0.10",
    },
    "data": {"n_train": "20000", "n_test": "10000"},
    "surrogate": {
        "kind": "mars",
        "max_terms": "41",
        "max_degree": "2",
        "penalty": "3.0",
        "max_knots": "none",
        "n_subset": "1000",
        "lscv_starts": "5",
        "lscv_evals": "200",
        "gradient_models": "false",
        "gradient_eps": "1e-4",
        "benchmark_points": "44144",
    },
    "chain": {
        "proposal": "pcn",
        "s": "auto",
        "target": "auto",
        "iterations": "10000",
        "thin": "10",
        "burn_in": "auto",
        "start": "prior_mean",
        "forward": "synthetic",
        "surrogate_dir": "",
        "noise": "base",
        "likelihood": "data",
        "gradient": "auto",
    },
    "tuning": {
        "bracket_batch": "100",
        "batch_size": "200",
        "n_batches": "50",
        "gain": "3.0",
        "eval_iterations": "5000",
        "tolerance": "0.025",
    },
    "compare": {
        "proposals": "rw_identity, rw_prior, pcn, mala",
        "iterations": "20000",
        "thin": "10",
        "burn_in": "auto",
    },
    "diagnostics": {
        "quantities": "S_g, S_o, S_b, V_clay",
        "ternary_cells": "0",
        "acf_max_lag": "100",
    },
}


def _floats(text: str, n: int | None = None, what: str = "value") -> tuple[float, ...]:
    try:
        vals = tuple(float(t) for t in text.replace(";", ",").split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"{what}: cannot parse {text!r} as numbers") from None
    if n is not None and len(vals) == 1:
        vals = vals * n
    if n is not None and len(vals) != n:
        raise ConfigError(f"{what}: expected {n} numbers, got {len(vals)}")
    return vals


class ExperimentConfig:
    def __init__(self, parser: configparser.ConfigParser):
        self.parser = parser

    # raw access
    def get(self, section: str, key: str) -> str:
        try:
            return self.parser.get(section, key).strip()
        except (configparser.NoSectionError, configparser.NoOptionError):
            raise ConfigError(f"missing required key {section}.{key}") from None

    def getint(self, section: str, key: str, minimum: int | None = None) -> int:
        raw = self.get(section, key)
        try:
            v = int(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected an integer, got {raw!r}") from None
        if minimum is not None and v < minimum:
            raise ConfigError(f"{section}.{key}: must be >= {minimum}, got {v}")
        return v

    def getfloat(self, section: str, key: str) -> float:
        raw = self.get(section, key)
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected a number, got {raw!r}") from None

    def getbool(self, section: str, key: str) -> bool:
        raw = self.get(section, key).lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{section}.{key}: expected a boolean, got {raw!r}")

    def get_optional_int(self, section: str, key: str) -> int | None:
        raw = self.get(section, key).lower()
        return None if raw in ("", "none", "auto", "all") else self.getint(section, key)

    def get_optional_float(self, section: str, key: str) -> float | None:
        raw = self.get(section, key).lower()
        return None if raw in ("", "none", "auto") else self.getfloat(section, key)

    def getlist(self, section: str, key: str) -> list[str]:
        return [t.strip() for t in self.get(section, key).split(",") if t.strip()]

    # typed views
    @property
    def seed(self) -> int:
        return self.getint("run", "seed", 0)

    def grid(self) -> GridSpec:
        return GridSpec(self.getint("grid", "nx", 1), self.getint("grid", "ny", 1))

    def depth(self) -> DepthConfig:
        cfg = DepthConfig(self.getfloat("depth", "d_min"), self.getfloat("depth", "d_max"),
                          self.getfloat("depth", "perturbation"))
        if not cfg.d_max > cfg.d_min:
            raise ConfigError("depth.d_max must exceed depth.d_min")
        return cfg

    def prior(self) -> PriorConfig:
        sigma = _floats(self.get("prior", "sigma"), 3, "prior.sigma")
        rng = _floats(self.get("prior", "effective_range"), 3, "prior.effective_range")
        if min(sigma) <= 0 or min(rng) <= 0:
            raise ConfigError("prior.sigma and prior.effective_range must be positive")
        trends = {}
        for name in ("x_g", "x_o", "x_clay"):
            key = f"trend_{name}"
            pts = []
            for item in self.getlist("prior", key):
                try:
                    d, v = item.split(":")
                    pts.append((float(d), float(v)))
                except ValueError:
                    raise ConfigError(f"prior.{key}: expected depth:value pairs, got {item!r}") from None
            try:
                trends[name] = MeanTrend(tuple(pts))
            except ValueError as exc:
                raise ConfigError(f"prior.{key}: {exc}") from None
        return PriorConfig(sigma, rng, trends)

    def noise(self) -> NoiseSpec:
        try:
            n = NoiseSpec(self.getfloat("noise", "var_r0"), self.getfloat("noise", "var_g"),
                          self.getfloat("noise", "corr"))
        except ValueError as exc:
            raise ConfigError(f"noise: {exc}") from None
        return n

    def coefficients(self) -> ForwardCoefficients:
        return ForwardCoefficients(_floats(self.get("forward", "a"), None, "forward.a"),
                                   _floats(self.get("forward", "b"), None, "forward.b"))

    def proposal_kinds(self, section: str = "compare", key: str = "proposals") -> list[ProposalKind]:
        try:
            return [ProposalKind.parse(t) for t in self.getlist(section, key)]
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from None

    def to_text(self) -> str:
        buf = io.StringIO()
        self.parser.write(buf)
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def _parse_override(item: str) -> tuple[str, str, str]:
    if "=" not in item or "." not in item.split("=", 1)[0]:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    lhs, value = item.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    return section.strip(), key.strip(), value.strip()


def _check_known(section: str, key: str) -> None:
    if section not in DEFAULTS:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in DEFAULTS[section] and (section, key) not in REQUIRED:
        raise ConfigError(f"unknown config key {section}.{key}")


def load_config(paths=(), overrides=(), require: bool = True) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_dict(DEFAULTS)
    for p in paths:
        if p is None:
            continue
        layer = configparser.ConfigParser(interpolation=None)
        try:
            with open(p) as fh:
                layer.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror or exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {p}: {exc}") from None
        for section in layer.sections():
            for key, value in layer.items(section):
                _check_known(section, key)
                parser.set(section, key, value)
    for item in overrides:
        section, key, value = _parse_override(item)
        _check_known(section, key)
        parser.set(section, key, value)
    if require:
        for section, key in REQUIRED:
            if not parser.has_option(section, key) or not parser.get(section, key).strip():
                raise ConfigError(f"missing required key {section}.{key}")
    return ExperimentConfig(parser)
