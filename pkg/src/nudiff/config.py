"""Experiment configuration: a YAML key-value tree validated before any compute.

Grammar (every section optional except ``experiment`` and ``dataset``)::

    experiment: uniform | multiscale | conditional
    seed: <int>
    out: <directory>
    threads: <int>
    dataset:   {kind: gaussian | gmm2d | joint_gaussian | toy_images | gaussian_images, ...}
    sde:       {family: ve | vp_linear | vp_log_snr, <family parameters>, epsilon}
    model:     {hidden: [..], activation, width_factor}
    schedule:  {n_levels, snr_max, snr_min}                 # multiscale
    estimator: {kind: cde | cdiffe | cmde, sigma_y_max, operator}   # conditional
    train:     {optimizer, lr, betas, batch_size, iterations, ema_rate, weighting}
    sampler:   {n_steps, steps_per_range, scheme, tweedie, n_samples, use_ema}
    eval:      {n_reference, n_projections}

Unknown keys and ill-typed values raise :class:`ConfigError` naming the
file and line.  Environment variables ``NUDIFF_<SECTION>__<KEY>`` (or
``NUDIFF_<KEY>`` for top-level keys) override file values; their values
are parsed as YAML scalars.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .errors import ContractError

ENV_PREFIX = "NUDIFF_"


class ConfigError(ContractError):
    pass


def _num(kind):
    def conv(v):
        if isinstance(v, bool):
            raise ValueError("expected a number, got a boolean")
        if isinstance(v, str):
            v = float(v)  # YAML 1.1 reads "1e-5" as a string
        if kind is int:
            if float(v) != int(v):
                raise ValueError("expected an integer")
            return int(v)
        return float(v)
    return conv


def _bool(v):
    if not isinstance(v, bool):
        raise ValueError("expected true or false")
    return v


def _choice(*options):
    def conv(v):
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v
    return conv


def _list_of(conv, length=None):
    def inner(v):
        if not isinstance(v, list):
            raise ValueError("expected a list")
        if length is not None and len(v) != length:
            raise ValueError(f"expected {length} entries")
        return [conv(x) for x in v]
    return inner


def _matrix(v):
    if not isinstance(v, list) or not all(isinstance(r, list) for r in v):
        raise ValueError("expected a list of rows")
    return [[_num(float)(x) for x in r] for r in v]


def _str(v):
    if not isinstance(v, str):
        raise ValueError("expected a string")
    return v


def _operator(v):
    if not isinstance(v, dict):
        raise ValueError("expected a mapping with 'kind'")
    extra = set(v) - {"kind", "factor"}
    if extra:
        raise ValueError(f"unknown operator key(s) {sorted(extra)}")
    kind = _choice("mask", "downsample", "edge")(v.get("kind"))
    out = {"kind": kind}
    if "factor" in v:
        out["factor"] = _num(int)(v["factor"])
    return out


F, I = _num(float), _num(int)

# section -> key -> (converter, default); a default of ... marks a required key
SCHEMA: dict[str, dict[str, tuple]] = {
    "": {
        "experiment": (_choice("uniform", "multiscale", "conditional"), ...),
        "seed": (I, 0),
        "out": (_str, "runs/default"),
        "threads": (I, 1),
    },
    "dataset": {
        "kind": (_choice("gaussian", "gmm2d", "joint_gaussian", "toy_images", "gaussian_images"), ...),
        "mean": (_list_of(F), None),
        "cov": (_matrix, None),
        "n_x": (I, None),
        "rho": (F, None),
        "separation": (F, 2.0),
        "std": (F, 0.5),
        "pattern": (_choice("checkerboard", "blob", "gradient"), "blob"),
        "size": (I, 8),
        "noise": (F, 0.02),
        "lengthscale": (F, 2.0),
        "amplitude": (F, 0.5),
        "jitter": (F, 1e-2),
    },
    "sde": {
        "family": (_choice("ve", "vp_linear", "vp_log_snr"), "vp_linear"),
        "sigma_min": (F, 0.01),
        "sigma_max": (F, 50.0),
        "beta_min": (F, 0.1),
        "beta_max": (F, 20.0),
        "snr_max": (F, 1e4),
        "snr_min": (F, 1e-2),
        "terminal_time": (F, None),
        "epsilon": (F, 1e-5),
        "ve_kernel": (_choice("exact", "sigma"), "exact"),
    },
    "model": {
        "hidden": (_list_of(I), [64, 64]),
        "activation": (_choice("silu", "tanh", "relu"), "silu"),
        "width_factor": (F, 2.0),
    },
    "schedule": {
        "n_levels": (I, 1),
        "snr_max": (F, 1e6),
        "snr_min": (F, 4.3e-5),
    },
    "estimator": {
        "kind": (_choice("cde", "cdiffe", "cmde"), "cde"),
        "sigma_y_max": (F, 1.0),
        "operator": (_operator, None),
        "weighting": (_choice("likelihood", "identity"), "likelihood"),
    },
    "train": {
        "optimizer": (_choice("adam", "sgd"), "adam"),
        "lr": (F, 2e-4),
        "betas": (_list_of(F, 2), [0.9, 0.999]),
        "batch_size": (I, 128),
        "iterations": (I, 1000),
        "ema_rate": (F, 0.999),
        "weighting": (_choice("likelihood", "identity"), "likelihood"),
    },
    "sampler": {
        "n_steps": (I, 256),
        "steps_per_range": (I, 64),
        "scheme": (_choice("euler_maruyama", "probability_flow"), "euler_maruyama"),
        "tweedie": (_bool, False),
        "n_samples": (I, 16),
        "use_ema": (_bool, True),
    },
    "eval": {
        "n_reference": (I, 2000),
        "n_projections": (I, 100),
    },
}


@dataclass
class ExperimentConfig:
    """Validated configuration; sections are plain dicts with defaults filled."""

    data: dict
    source: str = "<config>"

    def __getattr__(self, name):
        data = self.__dict__.get("data", {})
        if name in data:
            return data[name]
        raise AttributeError(name)

    def section(self, name: str) -> dict:
        return self.data[name]

    def as_dict(self) -> dict:
        return copy.deepcopy(self.data)

    @property
    def digest(self) -> str:
        """SHA-256 of the canonical JSON form (embedded in every output)."""
        blob = json.dumps(self.data, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _line_index(text: str) -> dict[tuple, int]:
    lines: dict[tuple, int] = {}
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return lines

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, val in node.value:
                p = path + (k.value,)
                lines[p] = k.start_mark.line + 1
                walk(val, p)

    if root is not None:
        walk(root, ())
    return lines


def _where(source, lines, path):
    if path and path[0] == "env":
        return f"{source}: environment {path[1]}"
    line = lines.get(path)
    while line is None and path:
        path = path[:-1]
        line = lines.get(path)
    return f"{source}:{line}" if line else source


def env_overrides(environ=None) -> list[tuple[tuple[str, ...], Any, str]]:
    """``(path, value, variable)`` triples from ``NUDIFF_*`` variables."""
    environ = os.environ if environ is None else environ
    out = []
    for var in sorted(environ):
        if not var.startswith(ENV_PREFIX):
            continue
        path = tuple(p.lower() for p in var[len(ENV_PREFIX):].split("__"))
        if not all(path) or len(path) > 2:
            continue
        try:
            value = yaml.safe_load(environ[var])
        except yaml.YAMLError:
            value = environ[var]
        out.append((path, value, var))
    return out


def validate(raw: Any, source: str = "<config>", lines: dict | None = None,
             env_vars: dict | None = None) -> ExperimentConfig:
    lines = lines or {}
    env_vars = env_vars or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")

    def fail(path, msg):
        where = _where(source, lines, ("env", env_vars[path]) if path in env_vars else path)
        raise ConfigError(f"{where}: {'.'.join(path)}: {msg}")

    known_sections = set(SCHEMA) - {""}
    out: dict[str, Any] = {}
    for key in raw:
        if key not in SCHEMA[""] and key not in known_sections:
            allowed = sorted(set(SCHEMA[""]) | known_sections)
            fail((key,), f"unknown key (allowed: {', '.join(allowed)})")
    for key, (conv, default) in SCHEMA[""].items():
        if key in raw:
            try:
                out[key] = conv(raw[key])
            except (TypeError, ValueError) as exc:
                fail((key,), str(exc))
        elif default is ...:
            fail((key,), "required key missing")
        else:
            out[key] = default
    if "dataset" not in raw:
        fail(("dataset",), "required section missing")
    for sec in sorted(known_sections):
        body = raw.get(sec, {}) or {}
        if not isinstance(body, dict):
            fail((sec,), "section must be a mapping")
        schema = SCHEMA[sec]
        res = {}
        for key in body:
            if key not in schema:
                fail((sec, key), f"unknown key (allowed: {', '.join(sorted(schema))})")
        for key, (conv, default) in schema.items():
            if key in body and body[key] is not None:
                try:
                    res[key] = conv(body[key])
                except (TypeError, ValueError) as exc:
                    fail((sec, key), str(exc))
            elif default is ...:
                fail((sec, key), "required key missing")
            else:
                res[key] = copy.deepcopy(default)
        out[sec] = res
    _cross_checks(out, fail)
    return ExperimentConfig(out, source)


def _cross_checks(cfg, fail):
    ds, exp = cfg["dataset"], cfg["experiment"]
    if ds["kind"] == "gaussian" and (ds["mean"] is None or ds["cov"] is None):
        fail(("dataset", "kind"), "gaussian datasets need mean and cov")
    if ds["kind"] == "joint_gaussian":
        if ds["rho"] is None and (ds["mean"] is None or ds["cov"] is None or ds["n_x"] is None):
            fail(("dataset", "kind"), "joint_gaussian needs rho, or mean, cov and n_x")
    if exp == "conditional":
        if ds["kind"] not in ("joint_gaussian", "toy_images", "gaussian_images"):
            fail(("dataset", "kind"), "conditional experiments need joint_gaussian or image data")
        if ds["kind"] != "joint_gaussian" and cfg["estimator"]["operator"] is None:
            fail(("estimator", "operator"), "image conditioning needs a forward operator")
    if exp == "multiscale" and ds["kind"] not in ("toy_images", "gaussian_images"):
        fail(("dataset", "kind"), "multiscale experiments need image data")
    if cfg["threads"] < 1:
        fail(("threads",), "must be >= 1")
    for key in ("iterations",):
        if cfg["train"][key] < 0:
            fail(("train", key), "must be >= 0")
    for sec, key in (("train", "lr"), ("train", "batch_size"), ("sampler", "n_steps"),
                     ("sampler", "steps_per_range"), ("eval", "n_projections"), ("eval", "n_reference")):
        if not cfg[sec][key] > 0:
            fail((sec, key), "must be positive")
    if not 0 < cfg["train"]["ema_rate"] < 1:
        fail(("train", "ema_rate"), "must lie in (0, 1)")
    if cfg["sampler"]["n_samples"] < 0:
        fail(("sampler", "n_samples"), "must be >= 0")


def load_config(path, environ=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read, apply environment and explicit overrides, then validate.

    ``overrides`` maps dotted keys (``"seed"``, ``"train.iterations"``) to
    values and wins over the environment.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ConfigError(f"{where}: invalid YAML ({getattr(exc, 'problem', exc)})") from exc
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}:1: top level must be a mapping")
    env_vars = {}
    for p, value, var in env_overrides(environ):
        _set(raw, p)
        _assign(raw, p, value)
        env_vars[p] = var
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        p = tuple(dotted.split("."))
        _set(raw, p)
        _assign(raw, p, value)
        env_vars.pop(p, None)
    return validate(raw, str(path), _line_index(text), env_vars)


def _set(raw, path):
    node = raw
    for key in path[:-1]:
        if not isinstance(node.get(key), dict):
            node[key] = {}
        node = node[key]


def _assign(raw, path, value):
    node = raw
    for key in path[:-1]:
        node = node[key]
    node[path[-1]] = value
