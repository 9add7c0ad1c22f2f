"""JSON configuration: schema, physical validation, and conversion to model objects.

Node and channel indices in files are 1-based. Electrical data may be left
``null``; commands that need it (simulation, nominal validation) refuse to
run, while the LMI certificate only needs damping, ``A``, ``Kcal``, the
topologies and the delay bounds.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .certify import CertifySetup, DelayBounds
from .graph import CHANNEL_MODELS, Graph, TopologySet, channel_matrices, validate_topology_set
from .netmodel import DaiParams, PowerNetwork, droop_damping
from .simulate import SimSetup


class ConfigError(Exception):
    """Base class; ``kind`` selects the exit code."""

    kind = "config"

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path:
            where = f"{path}:{line}: " if line else f"{path}: "
        super().__init__(where + message)
        self.line = line


class ConfigParseError(ConfigError):
    kind = "parse"


class ConfigSchemaError(ConfigError):
    kind = "schema"


class PhysicsError(ConfigError):
    kind = "physics"


class MissingDataError(ConfigError):
    kind = "missing"


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_vec_or_null = {"oneOf": [{"type": "null"}, {"type": "array", "items": _num}]}
_edge = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["comm", "delays"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "notes": {"type": "string"},
        "network": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "M": _vec_or_null, "D": _vec_or_null, "V": _vec_or_null, "Pd": _vec_or_null, "G": _vec_or_null,
                "wd": _num,
                "lines": {"oneOf": [{"type": "null"}, {"type": "array", "items": {
                    "type": "array", "prefixItems": [{"type": "integer", "minimum": 1},
                                                     {"type": "integer", "minimum": 1}, _num],
                    "minItems": 3, "maxItems": 3}}]},
                "damping": {"oneOf": [{"type": "null"}, {
                    "type": "object", "additionalProperties": False,
                    "required": ["droop", "f_nominal", "ratings", "S_base", "convention"],
                    "properties": {"droop": _pos, "f_nominal": _pos, "ratings": {"type": "array", "items": _pos},
                                   "S_base": _pos, "convention": {"enum": ["system", "machine"]}}}]},
            },
        },
        "comm": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n", "topologies", "A", "Kcal"],
            "properties": {
                "n": {"type": "integer", "minimum": 2},
                "topologies": {"type": "array", "minItems": 1, "items": {"type": "array", "items": _edge}},
                "channel_model": {"enum": list(CHANNEL_MODELS)},
                "A": {"type": "array", "items": _num},
                "Kcal": {"type": "array", "items": _num},
                "kappa": _num,
            },
        },
        "delays": {
            "type": "object",
            "additionalProperties": False,
            "required": ["h"],
            "properties": {
                "h": {"oneOf": [_nonneg, {"type": "array", "items": _nonneg}]},
                "Ts": _pos,
            },
        },
        "sim": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dt": _pos, "t_end": _pos, "dwell": _pos, "trials": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0}, "tol_freq": _pos, "tol_cost": _pos, "window": _pos,
                "init_radius": _nonneg, "stride": {"type": "integer", "minimum": 1},
                "theta_guess": _vec_or_null,
                "kappa_hi": {"oneOf": [{"type": "null"}, _pos]}, "tol_kappa": _pos,
            },
        },
        "certify": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "delta_rel": _pos, "tol_kappa": _pos, "kappa_init": _pos,
                "coupling": {"enum": ["blockdiag", "full"]},
                "solver": {"type": "string"},
                "extra_topologies": {"type": "array", "items": {"type": "array", "items": _edge}},
            },
        },
        "operating_points": {
            "type": "object",
            "additionalProperties": {"type": "array", "items": _num},
        },
    },
}


def _vec(x):
    return None if x is None else tuple(float(v) for v in x)


def _edges(tops):
    return tuple(tuple((int(e[0]), int(e[1])) for e in top) for top in tops)


@dataclass(frozen=True)
class DampingSpec:
    droop: float
    f_nominal: float
    ratings: tuple[float, ...]
    S_base: float
    convention: str = "system"

    def values(self) -> np.ndarray:
        base = droop_damping(self.droop, self.f_nominal)
        ratings = np.asarray(self.ratings, dtype=float)
        if self.convention == "machine":
            return np.full(ratings.shape, base)
        return base * ratings / self.S_base


@dataclass(frozen=True)
class NetworkSection:
    M: tuple | None = None
    D: tuple | None = None
    V: tuple | None = None
    Pd: tuple | None = None
    G: tuple | None = None
    wd: float = 0.0
    lines: tuple | None = None  # ((i, k, B), ...), 1-based
    damping: DampingSpec | None = None


@dataclass(frozen=True)
class CommSection:
    n: int
    topologies: tuple
    A: tuple
    Kcal: tuple
    channel_model: str = "undirected"
    kappa: float = 1.0


@dataclass(frozen=True)
class DelaySection:
    h: float | tuple
    Ts: float = 2e-3


@dataclass(frozen=True)
class SimSection:
    dt: float = 1e-3
    t_end: float = 200.0
    dwell: float = 0.5
    trials: int = 20
    seed: int = 0
    tol_freq: float = 1e-3
    tol_cost: float = 1e-3
    window: float = 10.0
    init_radius: float = 0.1
    stride: int = 10
    theta_guess: tuple | None = None
    kappa_hi: float | None = None
    tol_kappa: float = 1e-2


@dataclass(frozen=True)
class CertifySection:
    delta_rel: float = 1e-7
    tol_kappa: float = 1e-3
    kappa_init: float = 2.0
    coupling: str = "blockdiag"
    solver: str = "CLARABEL"
    extra_topologies: tuple = ()


@dataclass(frozen=True)
class Config:
    comm: CommSection
    delays: DelaySection
    network: NetworkSection = field(default_factory=NetworkSection)
    sim: SimSection = field(default_factory=SimSection)
    certify: CertifySection = field(default_factory=CertifySection)
    name: str = ""
    notes: str = ""
    operating_points: tuple = ()  # ((label, angles), ...)

    # ------------------------------------------------------------------ model objects

    def topology_set(self) -> TopologySet:
        n = self.comm.n
        graphs = [Graph.from_edges(n, [(i - 1, k - 1) for i, k in top]) for top in self.comm.topologies]
        return TopologySet.from_graphs(graphs, self.comm.channel_model)

    def damping(self) -> np.ndarray:
        if self.network.D is not None:
            return np.asarray(self.network.D, dtype=float)
        if self.network.damping is not None:
            return self.network.damping.values()
        raise MissingDataError("no damping given (network.D or network.damping)")

    def dai(self, kappa: float | None = None) -> DaiParams:
        return DaiParams(np.asarray(self.comm.A), np.asarray(self.comm.Kcal),
                         self.comm.kappa if kappa is None else kappa)

    def bounds(self, ts: TopologySet | None = None) -> DelayBounds:
        ts = ts or self.topology_set()
        if isinstance(self.delays.h, tuple):
            return DelayBounds(self.delays.h)
        return DelayBounds.uniform(self.delays.h, ts.n_channels)

    def has_electrical_data(self) -> bool:
        net = self.network
        return all(v is not None for v in (net.M, net.V, net.Pd, net.G, net.lines))

    def power_network(self) -> PowerNetwork:
        if not self.has_electrical_data():
            missing = [k for k in ("M", "V", "Pd", "G", "lines") if getattr(self.network, k) is None]
            raise MissingDataError("electrical data missing: " + ", ".join(f"network.{k}" for k in missing)
                                   + "; fill them in to simulate")
        n = self.comm.n
        B = np.zeros((n, n))
        for i, k, b in self.network.lines:
            B[i - 1, k - 1] = B[k - 1, i - 1] = b
        return PowerNetwork(np.asarray(self.network.M), self.damping(), np.asarray(self.network.V), B,
                            np.asarray(self.network.Pd), np.asarray(self.network.G), self.network.wd)

    def certify_setup(self, oracle=None) -> CertifySetup:
        ts = self.topology_set()
        extra = ()
        if self.certify.extra_topologies:
            extra_ts = TopologySet(tuple(Graph.from_edges(self.comm.n, [(i - 1, k - 1) for i, k in top])
                                         for top in self.certify.extra_topologies),
                                   ts.channel_model, ts.channels)
            extra = tuple(channel_matrices(extra_ts).astype(float))
        return CertifySetup(self.damping(), np.asarray(self.comm.A), np.asarray(self.comm.Kcal), ts,
                            self.bounds(ts), self.certify.coupling, extra, self.certify.delta_rel, oracle)

    def sim_setup(self, kappa: float | None = None, net: PowerNetwork | None = None) -> SimSetup:
        ts = self.topology_set()
        s = self.sim
        guess = None if s.theta_guess is None else np.asarray(s.theta_guess)
        return SimSetup(net or self.power_network(), self.dai(kappa), ts, self.bounds(ts).array, self.delays.Ts,
                        s.dwell, s.dt, s.t_end, s.tol_freq, s.tol_cost, s.window, s.init_radius, guess)


# ---------------------------------------------------------------------- loading

def _line_of(text: str, path_parts) -> int | None:
    """Best-effort line number of a JSON location given as key/index parts."""
    pos = 0
    for part in path_parts:
        if isinstance(part, str):
            m = re.compile(r'"%s"\s*:' % re.escape(part)).search(text, pos)
            if not m:
                break
            pos = m.start()
    return text.count("\n", 0, pos) + 1 if pos else None


def config_from_dict(doc: dict, path: str | None = None, text: str | None = None) -> Config:
    try:
        jsonschema.validate(doc, SCHEMA, cls=jsonschema.Draft202012Validator)
    except jsonschema.ValidationError as exc:
        parts = list(exc.absolute_path)
        loc = "/".join(str(p) for p in parts) or "<root>"
        line = _line_of(text, parts) if text else None
        raise ConfigSchemaError(f"{loc}: {exc.message}", path, line) from None

    net = doc.get("network", {}) or {}
    damp = net.get("damping")
    network = NetworkSection(
        M=_vec(net.get("M")), D=_vec(net.get("D")), V=_vec(net.get("V")), Pd=_vec(net.get("Pd")),
        G=_vec(net.get("G")), wd=float(net.get("wd", 0.0)),
        lines=None if net.get("lines") is None else tuple((int(i), int(k), float(b)) for i, k, b in net["lines"]),
        damping=None if damp is None else DampingSpec(float(damp["droop"]), float(damp["f_nominal"]),
                                                      _vec(damp["ratings"]), float(damp["S_base"]),
                                                      damp["convention"]))
    c = doc["comm"]
    comm = CommSection(int(c["n"]), _edges(c["topologies"]), _vec(c["A"]), _vec(c["Kcal"]),
                       c.get("channel_model", "undirected"), float(c.get("kappa", 1.0)))
    d = doc["delays"]
    h = d["h"]
    delays = DelaySection(_vec(h) if isinstance(h, list) else float(h), float(d.get("Ts", 2e-3)))
    s = doc.get("sim", {})
    sim = SimSection(**{k: (_vec(v) if k == "theta_guess" else v) for k, v in s.items()})
    ce = dict(doc.get("certify", {}))
    if "extra_topologies" in ce:
        ce["extra_topologies"] = _edges(ce["extra_topologies"])
    certify = CertifySection(**ce)
    ops = tuple((k, _vec(v)) for k, v in doc.get("operating_points", {}).items())
    cfg = Config(comm, delays, network, sim, certify, doc.get("name", ""), doc.get("notes", ""), ops)
    check_physics(cfg, path, text)
    return cfg


def load_config(path) -> Config:
    """Read, schema-check and physically validate a configuration file.

    Raises:
        ConfigParseError, ConfigSchemaError, PhysicsError
    """
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigParseError(f"cannot read file: {exc.strerror}", path) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"invalid JSON: {exc.msg} (column {exc.colno})", path, exc.lineno) from None
    return config_from_dict(doc, path, text)


def check_physics(cfg: Config, path: str | None = None, text: str | None = None) -> None:
    def fail(msg, *parts):
        raise PhysicsError(msg, path, _line_of(text, parts) if text else None)

    n = cfg.comm.n
    for name in ("A", "Kcal"):
        vec = getattr(cfg.comm, name)
        if len(vec) != n:
            fail(f"comm.{name} has {len(vec)} entries, expected {n}", "comm", name)
        if min(vec) <= 0:
            fail(f"comm.{name} must be strictly positive", "comm", name)
    if cfg.comm.kappa <= 0:
        fail("comm.kappa must be > 0", "comm", "kappa")
    for idx, top in enumerate(cfg.comm.topologies):
        for i, k in top:
            if i > n or k > n:
                fail(f"topology {idx + 1}: edge ({i}, {k}) refers to a node beyond n={n}", "comm", "topologies")
            if i == k:
                fail(f"topology {idx + 1}: self-loop at node {i}", "comm", "topologies")
    try:
        ts = cfg.topology_set()
    except ValueError as exc:
        fail(str(exc), "comm", "topologies")
    diag = validate_topology_set(ts)
    if not diag.ok:
        fail(diag.describe(), "comm", "topologies")
    if isinstance(cfg.delays.h, tuple) and len(cfg.delays.h) != ts.n_channels:
        fail(f"delays.h lists {len(cfg.delays.h)} bounds for {ts.n_channels} channels "
             f"({', '.join(ts.channel_labels())})", "delays", "h")
    net = cfg.network
    if net.D is not None and net.damping is not None:
        fail("give either network.D or network.damping, not both", "network", "damping")
    if net.damping is not None and len(net.damping.ratings) != n:
        fail(f"network.damping.ratings has {len(net.damping.ratings)} entries, expected {n}",
             "network", "damping")
    for name in ("M", "D", "V", "Pd", "G"):
        vec = getattr(net, name)
        if vec is None:
            continue
        if len(vec) != n:
            fail(f"network.{name} has {len(vec)} entries, expected {n}", "network", name)
        if name in ("M", "D", "V") and min(vec) <= 0:
            fail(f"network.{name} must be strictly positive", "network", name)
        if name == "G" and min(vec) < 0:
            fail("network.G must be non-negative", "network", name)
    if net.lines is not None:
        seen = set()
        for i, k, b in net.lines:
            pair = (min(i, k), max(i, k))
            if i == k or max(i, k) > n:
                fail(f"line ({i}, {k}) is invalid for n={n}", "network", "lines")
            if pair in seen:
                fail(f"line {pair} listed twice", "network", "lines")
            if b >= 0:
                fail(f"line ({i}, {k}): susceptance must be negative (inductive), got {b}", "network", "lines")
            seen.add(pair)
    if cfg.has_electrical_data():
        try:
            cfg.power_network()
        except ValueError as exc:
            fail(str(exc), "network")
    if cfg.sim.dt > cfg.delays.Ts:
        fail(f"sim.dt={cfg.sim.dt} exceeds delays.Ts={cfg.delays.Ts}", "sim", "dt")
    for label, angles in cfg.operating_points:
        if len(angles) != n:
            fail(f"operating point {label!r} has {len(angles)} angles, expected {n}", "operating_points", label)


# ---------------------------------------------------------------------- writing

def config_to_dict(cfg: Config) -> dict:
    def clean(obj):
        if isinstance(obj, tuple):
            return [clean(v) for v in obj]
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        return obj

    doc = {"name": cfg.name, "notes": cfg.notes}
    net = asdict(cfg.network)
    doc["network"] = clean(net)
    doc["comm"] = clean(asdict(cfg.comm))
    doc["delays"] = clean(asdict(cfg.delays))
    doc["sim"] = clean(asdict(cfg.sim))
    doc["certify"] = clean(asdict(cfg.certify))
    doc["operating_points"] = {k: list(v) for k, v in cfg.operating_points}
    return doc


def write_config(cfg: Config, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")


def preset_path(name: str = "kundur") -> Path:
    return Path(__file__).with_name("presets") / f"{name}.json"
