"""TOML run configuration with strict key checking."""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigInvalid
from .functionals import NonlinearitySpec, Tolerances
from .mesh import BoundaryMode, DomainSpec, build_domain
from .solver import ContinuationSchedule

_TOP = {"seed", "output", "mu", "domain", "boundary", "nonlinearity", "mu_scan", "schedule",
        "tolerances", "spectrum", "multiplicity", "gn", "thresholds"}
_DOMAIN = {"kind", "bounds", "n", "center"}
_BOUNDARY = {"mode", "scale"}
_NONLIN = {"terms", "K2", "Kp", "odd", "g"}
_G = {"terms", "K2", "Kp", "odd"}
_SCAN = {"from", "to", "steps", "log"}
_SCHEDULE = {"r0", "growth", "r_max", "newton_budget", "warm_start"}
_TOL = set(Tolerances.__dataclass_fields__)
_SPECTRUM = {"count", "dump_vectors"}
_MULT = {"m", "frames", "k_tune"}
_GN = {"starts", "n"}
_THRESH = {"lambda1", "lambda_hat", "lambda_tilde", "C", "C_robin", "C_trace", "K2", "Kp",
           "p", "q", "N", "M", "K2g", "Kl", "l", "a", "p_low", "variant"}
_DIM_OF = {"interval": 1, "rectangle": 2, "box": 3}


def _keys(block: dict, allowed: set, where: str) -> None:
    if not isinstance(block, dict):
        raise ConfigInvalid(f"[{where}] must be a table")
    unknown = sorted(set(block) - allowed)
    if unknown:
        raise ConfigInvalid(f"unknown key(s) in [{where}]: {', '.join(unknown)}")


def _num(block, key, where, default=None, kind=float):
    if key not in block:
        if default is None:
            raise ConfigInvalid(f"[{where}] missing required key {key!r}")
        return default
    val = block[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigInvalid(f"[{where}] {key} must be a number")
    if kind is int:
        if float(val) != int(val):
            raise ConfigInvalid(f"[{where}] {key} must be an integer")
        return int(val)
    return float(val)


@dataclass
class RunConfig:
    domain: Optional[DomainSpec]
    n: int
    mode: BoundaryMode
    boundary_scale: float
    f: Optional[NonlinearitySpec]
    g: Optional[NonlinearitySpec]
    mu: Optional[float]
    mu_scan: Optional[dict]
    schedule: ContinuationSchedule
    tol: Tolerances
    seed: int = 0
    output: str = "out"
    spectrum_count: int = 6
    dump_vectors: bool = False
    multiplicity: dict = field(default_factory=dict)
    gn: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    def mu_grid(self) -> list:
        if self.mu is not None:
            return [self.mu]
        sc = self.mu_scan
        lo, hi, steps = sc["from"], sc["to"], sc["steps"]
        if steps == 1:
            return [lo]
        if sc["log"]:
            return [math.exp(math.log(lo) + (math.log(hi) - math.log(lo)) * i / (steps - 1)) for i in range(steps)]
        return [lo + (hi - lo) * i / (steps - 1) for i in range(steps)]


def _nonlinearity(block: dict, where: str, role: str) -> NonlinearitySpec:
    _keys(block, _NONLIN if role == "interior" else _G, where)
    terms = block.get("terms")
    if not isinstance(terms, list) or not terms:
        raise ConfigInvalid(f"[{where}] terms must be a non-empty list of {{a, p}} tables")
    parsed = []
    for i, t in enumerate(terms):
        _keys(t, {"a", "p"}, f"{where}.terms[{i}]")
        parsed.append((_num(t, "a", where), _num(t, "p", where)))
    odd = block.get("odd", True)
    if not isinstance(odd, bool):
        raise ConfigInvalid(f"[{where}] odd must be a boolean")
    K2 = _num(block, "K2", where) if "K2" in block else None
    Kp = _num(block, "Kp", where) if "Kp" in block else None
    try:
        return NonlinearitySpec(tuple(parsed), role=role, odd=odd, K2=K2, Kp=Kp)
    except ValueError as exc:
        raise ConfigInvalid(f"[{where}] {exc}") from exc


def parse_config(data: dict) -> RunConfig:
    _keys(data, _TOP, "top level")
    if ("mu" in data) == ("mu_scan" in data):
        raise ConfigInvalid("exactly one of mu and [mu_scan] must be given")

    domain, n = None, 0
    if "domain" in data:
        blk = data["domain"]
        _keys(blk, _DOMAIN, "domain")
        kind = blk.get("kind")
        if kind not in _DIM_OF:
            raise ConfigInvalid(f"[domain] kind must be one of {sorted(_DIM_OF)}")
        bounds = blk.get("bounds")
        if not isinstance(bounds, list):
            raise ConfigInvalid("[domain] bounds must be a list")
        if bounds and not isinstance(bounds[0], list):
            bounds = [bounds[i:i + 2] for i in range(0, len(bounds), 2)]
        if len(bounds) != _DIM_OF[kind] or any(len(b) != 2 for b in bounds):
            raise ConfigInvalid(f"[domain] {kind} needs {_DIM_OF[kind]} (lo, hi) pairs")
        center = blk.get("center")
        try:
            domain = build_domain(DomainSpec(
                tuple((float(lo), float(hi)) for lo, hi in bounds),
                None if center is None else tuple(float(c) for c in center)))
        except (ValueError, TypeError) as exc:
            raise ConfigInvalid(f"[domain] {exc}") from exc
        n = _num(blk, "n", "domain", kind=int)
        if n < 4:
            raise ConfigInvalid("[domain] n must be >= 4")

    bblk = data.get("boundary", {"mode": "dirichlet"})
    _keys(bblk, _BOUNDARY, "boundary")
    try:
        mode = BoundaryMode.from_name(str(bblk.get("mode", "dirichlet")))
    except ValueError as exc:
        raise ConfigInvalid(f"[boundary] {exc}") from exc
    scale = _num(bblk, "scale", "boundary", default=1.0)

    f = g = None
    if "nonlinearity" in data:
        nblk = data["nonlinearity"]
        f = _nonlinearity({k: v for k, v in nblk.items() if k != "g"} if isinstance(nblk, dict) else nblk,
                          "nonlinearity", "interior")
        if "g" in nblk:
            g = _nonlinearity(nblk["g"], "nonlinearity.g", "boundary")
    if mode.is_robin and f is not None and g is None:
        raise ConfigInvalid("robin mode needs [nonlinearity.g]")
    if g is not None and not mode.is_robin:
        raise ConfigInvalid("[nonlinearity.g] is only allowed in robin mode")

    mu = scan = None
    if "mu" in data:
        mu = _num(data, "mu", "top level")
        if not mu > 0:
            raise ConfigInvalid("mu must be positive")
    else:
        sblk = data["mu_scan"]
        _keys(sblk, _SCAN, "mu_scan")
        scan = {"from": _num(sblk, "from", "mu_scan"), "to": _num(sblk, "to", "mu_scan"),
                "steps": _num(sblk, "steps", "mu_scan", kind=int), "log": bool(sblk.get("log", False))}
        if scan["steps"] < 1:
            raise ConfigInvalid("[mu_scan] steps must be >= 1")
        if not (0 < scan["from"] <= scan["to"]):
            raise ConfigInvalid("[mu_scan] need 0 < from <= to")

    sch = data.get("schedule", {})
    _keys(sch, _SCHEDULE, "schedule")
    try:
        schedule = ContinuationSchedule(
            r0=_num(sch, "r0", "schedule", 2.0), growth=_num(sch, "growth", "schedule", 2.0),
            r_max=_num(sch, "r_max", "schedule", 2.0 ** 14),
            newton_budget=_num(sch, "newton_budget", "schedule", 80, kind=int),
            warm_start=bool(sch.get("warm_start", True)))
    except ValueError as exc:
        raise ConfigInvalid(f"[schedule] {exc}") from exc

    tblk = data.get("tolerances", {})
    _keys(tblk, _TOL, "tolerances")
    tol = Tolerances(**{k: _num(tblk, k, "tolerances") for k in tblk})

    spblk = data.get("spectrum", {})
    _keys(spblk, _SPECTRUM, "spectrum")
    mblk = data.get("multiplicity", {})
    _keys(mblk, _MULT, "multiplicity")
    if mblk:
        mblk = {"m": _num(mblk, "m", "multiplicity", kind=int),
                "frames": [int(j) for j in mblk.get("frames", [])],
                "k_tune": _num(mblk, "k_tune", "multiplicity", 100.0)}
    gblk = data.get("gn", {})
    _keys(gblk, _GN, "gn")
    thblk = data.get("thresholds", {})
    _keys(thblk, _THRESH, "thresholds")

    seed = _num(data, "seed", "top level", 0, kind=int)
    output = data.get("output", "out")
    if not isinstance(output, str):
        raise ConfigInvalid("output must be a string path")
    return RunConfig(
        domain=domain, n=n, mode=mode, boundary_scale=scale, f=f, g=g, mu=mu, mu_scan=scan,
        schedule=schedule, tol=tol, seed=seed, output=output,
        spectrum_count=_num(spblk, "count", "spectrum", 6, kind=int),
        dump_vectors=bool(spblk.get("dump_vectors", False)),
        multiplicity=mblk, gn=dict(gblk), thresholds=dict(thblk), raw=data,
    )


def load_config(path) -> RunConfig:
    try:
        with open(Path(path), "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigInvalid(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"config is not valid TOML: {exc}") from exc
    return parse_config(data)
