"""Run configuration: strict dataclass schema loaded from YAML (or JSON).

Unknown keys anywhere are errors.  Integers given for float fields are
widened to 64-bit floats; matrices stay nested lists until the model builder
turns them into arrays.
"""

from __future__ import annotations

import dataclasses
import json
import re
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .errors import ValidationError


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-9`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?$|^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$"),
    list("-+0123456789."),
)

FAMILIES = ("affine", "zero", "pure-control", "pure-forward", "nonlinear", "no-jump", "no-jump-twin",
            "divergent", "lq")
CONTROL_KINDS = ("constant", "lq-oracle", "nonlinear-base", "file")
BENCHMARKS = ("lq-full", "lq-delayed", "pure-forward", "no-jump", "nonlinear")


@dataclass
class ControlSetConfig:
    kind: str = "box"
    lower: list | None = None
    upper: list | None = None
    radius: float = 1.0
    center: list | None = None
    total: float = 1.0


@dataclass
class FiltrationConfig:
    kind: str = "full"
    delta: float = 0.0


@dataclass
class ModelConfig:
    """``family`` names the builder; ``params`` are its keyword arguments.

    For ``affine`` the keys are ``n, m, d, k, atoms, weights, T, a, kappa``,
    the coefficient blocks ``b, g, sigma, f`` (each with ``const, A_x, A_y,
    A_z, A_r, A_v, kappa``), the costs ``l, phi, h`` (``const, lin, quad``) and
    ``terminal`` (``const, B, counts``).  Named fixtures accept their own
    keyword arguments.
    """

    family: str = "zero"
    params: dict = field(default_factory=dict)
    control_set: ControlSetConfig | None = None
    filtration: FiltrationConfig = field(default_factory=FiltrationConfig)


@dataclass
class PicardSection:
    max_iter: int = 50
    damping: float = 0.5
    tol: float = 1e-6
    blowup: float = 1e8


@dataclass
class OptimizerSection:
    step_size: float = 0.1
    step_rule: str = "halving"
    max_iter: int = 200
    tol: float = 1e-4
    min_step: float = 1e-8


@dataclass
class NumericsConfig:
    N: int = 64
    P: int = 4096
    seed: int = 0
    degree: int = 2
    ridge: float = 1e-8
    workers: int = 1
    picard: PicardSection = field(default_factory=PicardSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)


@dataclass
class ControlConfig:
    """Control to simulate or verify (also the optimizer's starting point)."""

    kind: str = "constant"
    value: list = field(default_factory=lambda: [0.0])
    path: str | None = None


@dataclass
class VerifyConfig:
    directions: int = 5
    direction_seed: int = 1
    fd_step: float = 1e-4
    gateaux_abs_tol: float = 1e-3
    stationarity_abs_tol: float = 1e-4
    # independent batches (seeds seed+1 ..) used to estimate the noise of G
    replicates: int = 4
    convexity_samples: int = 1000
    derivative_probes: int = 100
    ibp_C: float = 2.0


@dataclass
class OutputConfig:
    dir: str = "out"
    formats: list = field(default_factory=lambda: ["csv", "json"])
    # paths written to trajectory CSVs; None writes every path
    csv_paths: int | None = 256


@dataclass
class BenchConfig:
    name: str | None = None
    cost_tol: float = 0.01


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    outputs: OutputConfig = field(default_factory=OutputConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self):
        return asdict(self)


def _hints(cls):
    return typing.get_type_hints(cls)


def _coerce(value, hint, where):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError([f"{where}: expected a number, got {value!r}"])
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ValidationError([f"{where}: expected an integer, got {value!r}"])
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ValidationError([f"{where}: expected a string, got {value!r}"])
        return value
    if hint is dict or origin is dict:
        if not isinstance(value, dict):
            raise ValidationError([f"{where}: expected a mapping"])
        return value
    if hint is list or origin is list:
        if not isinstance(value, list):
            raise ValidationError([f"{where}: expected a list"])
        return value
    return value


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ValidationError([f"{where}: expected a mapping"])
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValidationError([f"{where}: unknown key(s) {unknown}"])
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}" if where else k) for k, v in data.items()}
    return cls(**kwargs)


def _check(cfg: RunConfig):
    errs = []
    if cfg.model.family not in FAMILIES:
        errs.append(f"model.family: unknown family {cfg.model.family!r} (choose from {list(FAMILIES)})")
    if cfg.control.kind not in CONTROL_KINDS:
        errs.append(f"control.kind: unknown kind {cfg.control.kind!r}")
    if cfg.control.kind == "file" and not cfg.control.path:
        errs.append("control.path: required when control.kind is 'file'")
    if cfg.bench.name is not None and cfg.bench.name not in BENCHMARKS:
        errs.append(f"bench.name: unknown benchmark {cfg.bench.name!r} (choose from {list(BENCHMARKS)})")
    nm = cfg.numerics
    if nm.N < 1:
        errs.append("numerics.N: must be >= 1")
    if nm.P < 2:
        errs.append("numerics.P: must be >= 2")
    if nm.workers < 1:
        errs.append("numerics.workers: must be >= 1")
    if nm.degree < 0:
        errs.append("numerics.degree: must be >= 0")
    if not 0 < nm.picard.damping <= 1:
        errs.append("numerics.picard.damping: must lie in (0, 1]")
    if not nm.picard.tol > 0 or nm.picard.max_iter < 1:
        errs.append("numerics.picard: tol must be > 0 and max_iter >= 1")
    opt = nm.optimizer
    if not opt.step_size > 0:
        errs.append("numerics.optimizer.step_size: must be > 0")
    if not opt.tol > 0:
        errs.append("numerics.optimizer.tol: must be > 0")
    if opt.step_rule not in ("fixed", "halving"):
        errs.append("numerics.optimizer.step_rule: must be 'fixed' or 'halving'")
    if cfg.verify.replicates < 0:
        errs.append("verify.replicates: must be >= 0")
    bad_fmt = sorted(set(cfg.outputs.formats) - {"csv", "json"})
    if bad_fmt:
        errs.append(f"outputs.formats: unsupported {bad_fmt}")
    if errs:
        raise ValidationError(errs)
    return cfg


def from_dict(data) -> RunConfig:
    return _check(_build(RunConfig, data or {}, ""))


def load_config(path) -> RunConfig:
    """Parse a YAML or JSON file into a :class:`RunConfig`; raises ValidationError."""
    text = Path(path).read_text()
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ValidationError([f"{path}: not valid YAML ({exc})"]) from exc
    return from_dict(data)


def dump_config(cfg: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def schema(cls=RunConfig):
    """Nested mapping of field names to type names and defaults."""
    out = {}
    defaults = cls()
    for f in dataclasses.fields(cls):
        hint = _hints(cls)[f.name]
        val = getattr(defaults, f.name)
        if dataclasses.is_dataclass(hint):
            out[f.name] = schema(hint)
        else:
            inner = [a for a in typing.get_args(hint) if dataclasses.is_dataclass(a)]
            if inner:
                out[f.name] = {"optional": schema(inner[0])}
            else:
                out[f.name] = {"type": getattr(hint, "__name__", str(hint)), "default": json.loads(json.dumps(val, default=str))}
    return out
