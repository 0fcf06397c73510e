"""Scenario files: JSON schema, loading, seeded fleet/network generation.

A scenario holds one network, a list of aggregators (bus, groups, EVs) and the
run parameters.  Fleets may be written out EV by EV or described by a
generator block that is expanded deterministically from the scenario seed.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .fleet import EvTask, FleetParams, GroupSpec, assign_groups
from .market import Generator, Line, Load, Network

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_INT = {"type": "integer"}
_LIMIT = {"anyOf": [_POS, {"type": "null"}]}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_EV = _obj({
    "id": {"type": ["string", "integer"]},
    "arrival": {"type": "integer", "minimum": 0},
    "departure": {"type": "integer", "minimum": 1},
    "energy_arrival": _NONNEG,
    "energy_target": _NONNEG,
    "energy_min": _NONNEG,
    "energy_max": _POS,
    "power_cap": _POS,
    "group": _INT,
}, ["id", "arrival", "departure", "energy_arrival", "energy_target", "energy_max", "power_cap"])

_GENERATE = _obj({
    "per_group": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2},
    "capacities": {"type": "array", "items": _POS, "minItems": 1},
    "soc_arrival": {"type": "array", "items": _NONNEG, "minItems": 2, "maxItems": 2},
    "soc_departure": {"type": "number", "minimum": 0, "maximum": 1},
    "power_caps": {"type": "array", "items": _POS, "minItems": 1},
    "arrival_window": {"type": "array", "items": {"type": "integer", "minimum": 0},
                       "minItems": 2, "maxItems": 2},
})

SCHEMA = _obj({
    "name": {"type": "string"},
    "description": {"type": "string"},
    "params": _obj({
        "eta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "dt": _POS,
        "horizon": {"type": "integer", "minimum": 1},
        "V": _POS,
        "alpha": _POS,
        "samples": {"type": "integer", "minimum": 2},
        "seed": {"type": "integer", "minimum": 0},
    }),
    "network": _obj({
        "buses": {"type": "integer", "minimum": 1},
        "slack": {"type": "integer", "minimum": 0},
        "lines": {"type": "array", "items": _obj({
            "from": {"type": "integer", "minimum": 0}, "to": {"type": "integer", "minimum": 0},
            "reactance": _POS, "limit": _LIMIT}, ["from", "to"])},
        "generators": {"type": "array", "minItems": 1, "items": _obj({
            "bus": {"type": "integer", "minimum": 0}, "a": _NONNEG, "b": _NUM, "c": _NUM,
            "pmin": _NUM, "pmax": _LIMIT}, ["bus"])},
        "loads": {"type": "array", "items": _obj({
            "bus": {"type": "integer", "minimum": 0},
            "kw": {"anyOf": [_NUM, {"type": "array", "items": _NUM, "minItems": 1}]},
            "profile": {"enum": ["flat", "daily"]}}, ["bus", "kw"])},
        "ptdf": {"type": "array", "items": {"type": "array", "items": _NUM}},
    }, ["buses", "generators"]),
    "fleet": _obj({
        "aggregators": {"type": "array", "items": _obj({
            "name": {"type": "string"},
            "bus": {"type": "integer", "minimum": 0},
            "groups": {"type": "array", "minItems": 1, "items": _obj({
                "id": _INT, "duration": {"type": "integer", "minimum": 1}, "alpha": _POS},
                ["duration"])},
            "evs": {"type": "array", "items": _EV},
            "generate": _GENERATE,
        }, ["name", "bus", "groups"])},
    }, ["aggregators"]),
}, ["network", "fleet"])

DEFAULTS = {"eta": 0.95, "dt": 1.0 / 12.0, "horizon": 288, "V": 80.0, "alpha": 1.0,
            "samples": 64, "seed": 0}
GENERATE_DEFAULTS = {"per_group": [30, 50], "capacities": [20.0, 50.0, 80.0],
                     "soc_arrival": [0.30, 0.70], "soc_departure": 0.80,
                     "power_caps": [7.0, 60.0, 120.0]}


class ScenarioError(ValueError):
    """Schema or consistency problem in a scenario file; ``line`` points into the source."""

    def __init__(self, message, line=None, source=None):
        where = f"{source or '<scenario>'}:{line}: " if line else (f"{source}: " if source else "")
        super().__init__(where + message)
        self.line = line


@dataclass
class AggregatorSpec:
    name: str
    bus: int
    groups: list
    evs: list = field(default_factory=list)


@dataclass
class Scenario:
    name: str
    network: Network
    aggregators: list
    params: FleetParams
    V: float = 80.0
    samples: int = 32
    seed: int = 0
    raw: dict | None = None

    @property
    def n_evs(self):
        return sum(len(a.evs) for a in self.aggregators)


def daily_profile(T, surge_at=200 / 288):
    """Smooth day shape with a load step late in the horizon (multipliers around 1)."""
    h = np.arange(T) / T * 24.0
    shape = 0.85 + 0.12 * np.sin(2 * np.pi * (h - 8.0) / 24.0) + 0.05 * np.sin(4 * np.pi * h / 24.0)
    shape[np.arange(T) >= int(round(surge_at * T))] *= 1.25
    return shape


def _line_of(text, path):
    """Best-effort source line for a JSON path by walking its keys through the text."""
    pos = 0
    for key in path:
        if isinstance(key, str):
            hit = text.find(f'"{key}"', pos)
            if hit < 0:
                break
            pos = hit
    return text.count("\n", 0, pos) + 1


def validate(doc, text=None, source=None):
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        loc = "/".join(str(p) for p in path) or "<root>"
        line = _line_of(text, path) if text is not None else None
        raise ScenarioError(f"{loc}: {err.message}", line, source)


def parse(text, source=None):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON: {exc.msg} (column {exc.colno})", exc.lineno, source) from exc
    validate(doc, text, source)
    return doc


def load(path, seed=None) -> Scenario:
    path = Path(path)
    text = path.read_text()
    return build(parse(text, str(path)), seed=seed, source=str(path))


def bundled(name="paper-desk") -> Scenario:
    text = resources.files("evbid").joinpath("data", f"{name}.json").read_text()
    return build(parse(text, name), source=name)


def bundled_names():
    return sorted(p.name[:-5] for p in resources.files("evbid").joinpath("data").iterdir()
                  if p.name.endswith(".json"))


def _limit(v):
    return np.inf if v is None else float(v)


def build_network(net, horizon):
    n = net["buses"]
    slack = net.get("slack", 0)
    if slack >= n:
        raise ScenarioError(f"slack bus {slack} out of range")
    gens = [Generator(bus=g["bus"], a=g.get("a", 0.0), b=g.get("b", 0.0), c=g.get("c", 0.0),
                      pmin=g.get("pmin", 0.0), pmax=_limit(g.get("pmax"))) for g in net["generators"]]
    lines = [Line(ln["from"], ln["to"], ln.get("reactance", 1.0), _limit(ln.get("limit")))
             for ln in net.get("lines", [])]
    loads = []
    for ld in net.get("loads", []):
        kw = np.asarray(ld["kw"], dtype=float)
        if kw.ndim and kw.size != horizon:
            raise ScenarioError(f"load series at bus {ld['bus']} has {kw.size} entries, horizon is {horizon}")
        if ld.get("profile", "flat") == "daily":
            kw = kw * daily_profile(horizon)
        loads.append(Load(ld["bus"], kw))
    ptdf = np.asarray(net["ptdf"], dtype=float) if "ptdf" in net else None
    try:
        return Network(n, gens, lines, loads, slack=slack, ptdf=ptdf)
    except ValueError as exc:
        raise ScenarioError(f"network: {exc}") from exc


def generate_evs(spec, groups, params: FleetParams, rng, prefix):
    """Draw EVs per group: capacity, arrival SOC, power cap and an arrival slot."""
    spec = {**GENERATE_DEFAULTS, **spec}
    lo, hi = spec["per_group"]
    evs = []
    T = params.horizon
    for grp in groups:
        count = int(rng.integers(lo, hi + 1))
        R = grp.parking_duration
        w0, w1 = spec.get("arrival_window", [0, max(T - R, 0)])
        for j in range(count):
            cap = float(rng.choice(spec["capacities"]))
            soc = float(rng.uniform(*spec["soc_arrival"]))
            pcap = float(rng.choice(spec["power_caps"]))
            arr = int(rng.integers(w0, max(w1, w0) + 1))
            e_a = round(cap * soc, 6)
            e_d = round(max(cap * spec["soc_departure"], e_a), 6)
            evs.append(EvTask(id=f"{prefix}-g{grp.group_id}-{j}", arrival_slot=arr,
                              departure_slot=arr + R, energy_arrival=e_a, energy_target=e_d,
                              energy_min=0.0, energy_max=cap, power_cap=pcap))
    return evs


def build(doc, seed=None, source=None) -> Scenario:
    """Turn a validated document into runnable objects (``seed`` overrides the file's)."""
    p = {**DEFAULTS, **doc.get("params", {})}
    if seed is not None:
        p["seed"] = seed
    params = FleetParams(eta=p["eta"], dt=p["dt"], horizon=p["horizon"])
    network = build_network(doc["network"], params.horizon)
    rng = np.random.default_rng(p["seed"])
    aggs = []
    for a in doc["fleet"]["aggregators"]:
        if not 0 <= a["bus"] < network.n_bus:
            raise ScenarioError(f"aggregator {a['name']}: bus {a['bus']} out of range", source=source)
        gdefs = a["groups"]
        ids = [g.get("id", i) for i, g in enumerate(gdefs)]
        durations = [g["duration"] for g in gdefs]
        if "evs" in a:
            try:
                evs = [EvTask(id=e["id"], arrival_slot=e["arrival"], departure_slot=e["departure"],
                              energy_arrival=e["energy_arrival"], energy_target=e["energy_target"],
                              energy_min=e.get("energy_min", 0.0), energy_max=e["energy_max"],
                              power_cap=e["power_cap"]) for e in a["evs"]]
            except ValueError as exc:
                raise ScenarioError(f"aggregator {a['name']}: {exc}", source=source) from exc
            explicit = [e.get("group") for e in a["evs"]]
        else:
            shells = [GroupSpec(i, d) for i, d in zip(ids, durations)]
            evs = generate_evs(a.get("generate", {}), shells, params, rng, a["name"])
            explicit = [None] * len(evs)
        auto = assign_groups([ev.parking_duration for ev in evs], durations) if evs else []
        members = [[] for _ in gdefs]
        for ev, g_auto, g_fixed in zip(evs, auto, explicit):
            g = ids.index(g_fixed) if g_fixed is not None and g_fixed in ids else int(g_auto)
            members[g].append(ev.id)
        groups = [GroupSpec(gid, d, g.get("alpha", p["alpha"]), tuple(m))
                  for gid, d, g, m in zip(ids, durations, gdefs, members)]
        aggs.append(AggregatorSpec(a["name"], a["bus"], groups, evs))
    return Scenario(name=doc.get("name", source or "scenario"), network=network, aggregators=aggs,
                    params=params, V=float(p["V"]), samples=int(p["samples"]), seed=int(p["seed"]),
                    raw=copy.deepcopy(doc))


def expand(scenario: Scenario) -> dict:
    """Document with every EV written out, so reloading needs no random draws."""
    doc = copy.deepcopy(scenario.raw)
    doc.setdefault("params", {})["seed"] = scenario.seed
    for a_doc, a in zip(doc["fleet"]["aggregators"], scenario.aggregators):
        a_doc.pop("generate", None)
        gid = {m: g.group_id for g in a.groups for m in g.members}
        a_doc["evs"] = [{"id": ev.id, "arrival": ev.arrival_slot, "departure": ev.departure_slot,
                         "energy_arrival": ev.energy_arrival, "energy_target": ev.energy_target,
                         "energy_min": ev.energy_min, "energy_max": ev.energy_max,
                         "power_cap": ev.power_cap, "group": gid[ev.id]} for ev in a.evs]
    return doc


def dump(doc, path):
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def synthetic_document(seed, n_bus=6, n_aggregators=3, groups_per_agg=(4, 3, 3), horizon=288,
                       per_group=(30, 50), congested_lines=1, name=None, V=None):
    """Random connected network with quadratic generators, daily loads and generated fleets."""
    rng = np.random.default_rng(seed)
    edges = {(i, (i + 1) % n_bus) for i in range(n_bus)} if n_bus > 2 else \
        ({(0, 1)} if n_bus == 2 else set())
    for _ in range(max(0, n_bus // 3)):
        i, j = sorted(rng.choice(n_bus, 2, replace=False).tolist())
        edges.add((i, j))
    edges = sorted({tuple(sorted(e)) for e in edges if e[0] != e[1]})
    n_gen = max(2, n_bus // 3)
    gen_buses = sorted(rng.choice(n_bus, n_gen, replace=False).tolist())
    gens = [{"bus": int(b), "a": round(float(rng.uniform(4e-4, 2e-3)), 6),
             "b": round(float(rng.uniform(18.0, 22.0)), 3), "c": 0.0, "pmin": 0.0}
            for b in gen_buses]
    load_buses = [b for b in range(n_bus) if b not in gen_buses] or [n_bus - 1]
    total = 3000.0 * n_bus / 6.0
    shares = rng.dirichlet(np.ones(len(load_buses)))
    loads = [{"bus": int(b), "kw": round(float(total * s), 3), "profile": "daily"}
             for b, s in zip(load_buses, shares)]
    agg_buses = rng.choice(n_bus, n_aggregators, replace=n_aggregators > n_bus).tolist()
    gp = list(groups_per_agg) if len(groups_per_agg) == n_aggregators else [groups_per_agg[0]] * n_aggregators
    all_durations = np.linspace(max(2, horizon // 12), max(3, 3 * horizon // 4),
                                sum(gp)).round().astype(int).tolist()
    aggs = []
    pos = 0
    for k, (bus, G) in enumerate(zip(agg_buses, gp)):
        groups = [{"id": g, "duration": int(all_durations[pos + g])} for g in range(G)]
        pos += G
        aggs.append({"name": f"A{k + 1}", "bus": int(bus), "groups": groups,
                     "generate": {"per_group": list(per_group)}})
    lines = [{"from": int(i), "to": int(j), "reactance": round(float(rng.uniform(0.05, 0.3)), 4),
              "limit": None} for i, j in edges]
    doc = {"name": name or f"synthetic-{n_bus}bus-{seed}",
           "params": {"horizon": horizon, "seed": int(seed), **({} if V is None else {"V": V})},
           "network": {"buses": n_bus, "slack": 0, "lines": lines, "generators": gens, "loads": loads},
           "fleet": {"aggregators": aggs}}
    if congested_lines and lines:
        _set_limits(doc, congested_lines, rng)
    return doc


def _set_limits(doc, n_tight, rng):
    """Loose limits everywhere, then tighten a few lines where redispatch keeps things feasible."""
    from .market import MarketInfeasibleError, clear_p3_bounds

    sc = build(doc)
    T = sc.params.horizon
    net = sc.network
    buses = [a.bus for a in sc.aggregators]
    peak_caps = [sum(ev.power_cap for ev in a.evs) for a in sc.aggregators]
    peak = int(np.argmax([net.load_vector(t).sum() for t in range(T)]))
    flows = np.zeros(len(net.lines))
    for x in (np.zeros(len(buses)), np.asarray(peak_caps, dtype=float)):
        r = clear_p3_bounds(net, buses, x, x, peak)
        flows = np.maximum(flows, np.abs(r.flows))
    limits = np.maximum(1.5 * flows, 50.0)
    order = rng.permutation(len(net.lines))
    for l in order[:n_tight]:
        for factor in (0.7, 0.85, 1.0):
            trial = limits.copy()
            trial[l] = max(factor * flows[l], 1.0)
            for ln, lim in zip(doc["network"]["lines"], trial):
                ln["limit"] = round(float(lim), 3)
            test = build(doc)
            try:
                for x in (np.zeros(len(buses)), np.asarray(peak_caps, dtype=float)):
                    for t in (0, peak, T - 1):
                        clear_p3_bounds(test.network, buses, x * 0, x, t)
                        clear_p3_bounds(test.network, buses, x, x, t)
                limits = trial
                break
            except MarketInfeasibleError:
                continue
    for ln, lim in zip(doc["network"]["lines"], limits):
        ln["limit"] = round(float(lim), 3)


def fuzz_document(seed, horizon=48):
    """Small random scenario: 3-6 buses, 1-3 aggregators, a handful of EVs per group."""
    rng = np.random.default_rng(10_000 + seed)
    n_bus = int(rng.integers(3, 7))
    K = int(rng.integers(1, 4))
    groups = tuple(int(g) for g in rng.integers(1, 4, size=K))
    V = float(rng.choice([0.5, 2.0, 10.0]))
    return synthetic_document(seed, n_bus=n_bus, n_aggregators=K, groups_per_agg=groups,
                              horizon=horizon, per_group=(2, 6), congested_lines=1,
                              name=f"fuzz-{seed}", V=V)
