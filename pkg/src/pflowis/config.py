"""YAML experiment configuration: scenario, methods, run and sweep settings."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .estimator import METHODS, MethodConfig
from .tdoa import DEFAULT_PAIRS, ScenarioConfig

__all__ = ["ExperimentConfig", "RunSettings", "SweepSettings", "parse_config", "load_config",
           "default_methods"]


def default_methods(n_g: int = 100, n_p: int = 5000) -> list[MethodConfig]:
    """The four compared methods at their published step schedules."""
    return [
        MethodConfig("BS", n_g=n_g, n_p=n_p),
        MethodConfig("PFL-D", 1e-7, 1.5, n_g=n_g, n_p=n_p),
        MethodConfig("PFL-S", 1e-7, 1.5, n_g=n_g, n_p=n_p),
        MethodConfig("PFL-OS", 1e-5, 1.5, 0.1, n_g=n_g, n_p=n_p),
    ]


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    runs: int = 10
    jobs: int = 1


@dataclass(frozen=True)
class SweepSettings:
    """Grid of ``(beta, delta1)`` schedules crossed with PFL-D, PFL-S and PFL-OS at each ``alpha``."""

    schedules: tuple = ((1.3, 1e-13), (1.5, 1e-5), (2.0, 1e-4))
    alphas: tuple = (0.01, 0.1, 0.5)

    def methods(self, n_g: int, n_p: int) -> list[MethodConfig]:
        out = []
        for beta, delta1 in self.schedules:
            out.append(MethodConfig("PFL-D", delta1, beta, n_g=n_g, n_p=n_p))
            out.append(MethodConfig("PFL-S", delta1, beta, n_g=n_g, n_p=n_p))
            out.extend(MethodConfig("PFL-OS", delta1, beta, a, n_g=n_g, n_p=n_p) for a in self.alphas)
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    methods: tuple = ()
    run: RunSettings = field(default_factory=RunSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)


_SCENARIO_KEYS = {f.name for f in fields(ScenarioConfig)}
_METHOD_KEYS = {"method", "delta1", "beta", "alpha", "n_g", "n_p", "label", "curvature"}
_TOP_KEYS = {"scenario", "methods", "run", "sweep"}


def _number(value, key, *, integer=False, lo=None, hi=None, lo_open=False):
    # PyYAML reads "1e-5" (no dot) as a string, so numeric strings are accepted
    if isinstance(value, bool):
        raise ConfigError(key, f"expected a number, got {value!r}")
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected a number, got {value!r}") from None
    if not math.isfinite(x):
        raise ConfigError(key, f"must be finite, got {value!r}")
    if integer:
        if x != int(x):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        x = int(x)
    if lo is not None and (x <= lo if lo_open else x < lo):
        raise ConfigError(key, f"must be {'>' if lo_open else '>='} {lo}, got {value!r}")
    if hi is not None and x > hi:
        raise ConfigError(key, f"must be <= {hi}, got {value!r}")
    return x


def _mapping(value, key):
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(key, f"expected a mapping, got {type(value).__name__}")
    return value


def _reject_unknown(d, allowed, prefix):
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{prefix}.{k}" if prefix else str(k), f"unknown key (allowed: {sorted(allowed)})")


def _parse_scenario(raw) -> ScenarioConfig:
    d = _mapping(raw, "scenario")
    _reject_unknown(d, _SCENARIO_KEYS, "scenario")
    kw = {}
    checks = {
        "roi_half_width": dict(lo=0, lo_open=True),
        "n_sources": dict(integer=True, lo=1),
        "source_margin": dict(lo=0, lo_open=True, hi=1),
        "sigma_v": dict(lo=0, lo_open=True),
        "c_prop": dict(lo=0, lo_open=True),
        "p_d": dict(lo=0, lo_open=True, hi=1),
        "mu_c": dict(lo=0),
        "n_g": dict(integer=True, lo=1),
        "n_p": dict(integer=True, lo=1),
        "seed": dict(integer=True, lo=0),
    }
    for k, opts in checks.items():
        if k in d:
            kw[k] = _number(d[k], f"scenario.{k}", **opts)
    if d.get("sources") is not None:
        src = d["sources"]
        if not isinstance(src, list) or not src:
            raise ConfigError("scenario.sources", "expected a list of [x, y, z] positions")
        pts = []
        for i, p in enumerate(src):
            if not isinstance(p, list) or len(p) != 3:
                raise ConfigError(f"scenario.sources[{i}]", "expected [x, y, z]")
            pts.append(tuple(_number(v, f"scenario.sources[{i}]") for v in p))
        kw["sources"] = tuple(pts)
        kw.setdefault("n_sources", len(pts))
    if "pairs" in d:
        pairs = d["pairs"]
        if not isinstance(pairs, list) or not pairs:
            raise ConfigError("scenario.pairs", "expected a list of [a, b] receiver index pairs")
        out = []
        for i, p in enumerate(pairs):
            if not isinstance(p, list) or len(p) != 2:
                raise ConfigError(f"scenario.pairs[{i}]", "expected [a, b]")
            a, b = (_number(v, f"scenario.pairs[{i}]", integer=True, lo=0, hi=5) for v in p)
            if a == b:
                raise ConfigError(f"scenario.pairs[{i}]", "receivers of a pair must differ")
            out.append((a, b))
        kw["pairs"] = tuple(out)
    try:
        sc = ScenarioConfig(**kw)
    except ValueError as exc:
        raise ConfigError("scenario", str(exc)) from None
    if sc.sources is not None and len(sc.sources) != sc.n_sources:
        raise ConfigError("scenario.n_sources", f"{sc.n_sources} does not match {len(sc.sources)} listed sources")
    return sc


def _parse_method(d, i, scenario: ScenarioConfig) -> MethodConfig:
    key = f"methods[{i}]"
    if isinstance(d, str):
        d = {"method": d}
    d = _mapping(d, key)
    _reject_unknown(d, _METHOD_KEYS, key)
    name = d.get("method")
    if name not in METHODS:
        raise ConfigError(f"{key}.method", f"expected one of {list(METHODS)}, got {name!r}")
    kw = {"n_g": scenario.n_g, "n_p": scenario.n_p}
    if "n_g" in d:
        kw["n_g"] = _number(d["n_g"], f"{key}.n_g", integer=True, lo=1)
    if "n_p" in d:
        kw["n_p"] = _number(d["n_p"], f"{key}.n_p", integer=True, lo=1)
    if name == "BS":
        for k in ("delta1", "beta", "alpha"):
            if k in d:
                raise ConfigError(f"{key}.{k}", "the BS method takes no flow parameters")
    else:
        for k in ("delta1", "beta"):
            if k not in d:
                raise ConfigError(f"{key}.{k}", f"{name} requires {k}")
        kw["delta1"] = _number(d["delta1"], f"{key}.delta1", lo=0, lo_open=True, hi=1)
        kw["beta"] = _number(d["beta"], f"{key}.beta", lo=1)
        if name == "PFL-OS":
            if "alpha" not in d:
                raise ConfigError(f"{key}.alpha", "PFL-OS requires alpha")
            kw["alpha"] = _number(d["alpha"], f"{key}.alpha", lo=0, lo_open=True)
        elif "alpha" in d:
            raise ConfigError(f"{key}.alpha", f"alpha only applies to PFL-OS, not {name}")
    if d.get("label") is not None:
        kw["label"] = str(d["label"])
    if "curvature" in d:
        if not isinstance(d["curvature"], bool):
            raise ConfigError(f"{key}.curvature", f"expected true or false, got {d['curvature']!r}")
        if name == "BS":
            raise ConfigError(f"{key}.curvature", "the BS method takes no flow parameters")
        kw["curvature"] = d["curvature"]
    try:
        return MethodConfig(name, **kw)
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


def _parse_sweep(raw) -> SweepSettings:
    d = _mapping(raw, "sweep")
    _reject_unknown(d, {"schedules", "alphas"}, "sweep")
    kw = {}
    if "schedules" in d:
        sch = d["schedules"]
        if not isinstance(sch, list) or not sch:
            raise ConfigError("sweep.schedules", "expected a list of [beta, delta1]")
        out = []
        for i, s in enumerate(sch):
            if not isinstance(s, list) or len(s) != 2:
                raise ConfigError(f"sweep.schedules[{i}]", "expected [beta, delta1]")
            out.append((_number(s[0], f"sweep.schedules[{i}].beta", lo=1),
                        _number(s[1], f"sweep.schedules[{i}].delta1", lo=0, lo_open=True, hi=1)))
        kw["schedules"] = tuple(out)
    if "alphas" in d:
        al = d["alphas"]
        if not isinstance(al, list) or not al:
            raise ConfigError("sweep.alphas", "expected a list of positive numbers")
        kw["alphas"] = tuple(_number(a, f"sweep.alphas[{i}]", lo=0, lo_open=True) for i, a in enumerate(al))
    return SweepSettings(**kw)


def parse_config(text: str) -> ExperimentConfig:
    """Validate a YAML document; omitted fields take the published defaults."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<document>", f"not valid YAML ({exc})") from None
    d = _mapping(raw, "<document>")
    _reject_unknown(d, _TOP_KEYS, "")
    scenario = _parse_scenario(d.get("scenario"))
    if d.get("methods") is None:
        methods = default_methods(scenario.n_g, scenario.n_p)
    else:
        if not isinstance(d["methods"], list) or not d["methods"]:
            raise ConfigError("methods", "expected a non-empty list")
        methods = [_parse_method(m, i, scenario) for i, m in enumerate(d["methods"])]
        names = [m.name for m in methods]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise ConfigError("methods", f"duplicate method names {sorted(dup)}; set a label")
    r = _mapping(d.get("run"), "run")
    _reject_unknown(r, {"seed", "runs", "jobs"}, "run")
    run = RunSettings(
        seed=_number(r.get("seed", scenario.seed), "run.seed", integer=True, lo=0),
        runs=_number(r.get("runs", RunSettings.runs), "run.runs", integer=True, lo=1),
        jobs=_number(r.get("jobs", RunSettings.jobs), "run.jobs", integer=True, lo=1),
    )
    return ExperimentConfig(scenario, tuple(methods), run, _parse_sweep(d.get("sweep")))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path} ({exc.strerror})") from None
    return parse_config(text)
