"""Scenario files: a small sectioned ``key = value`` format.

Example::

    [topology]
    n = 6
    d_bar = 0
    noise_var = 0.04
    edge 1 2 0.5 1        # i j p_appear [b_mean [b_var [pmf ...]]], 1-based, link j -> i
    group 1 (2 0.5) (3 0.5)

    [dynamics]
    family = identity-control

    [schedule]
    kind = constant
    alpha = 0.1

    [initial]
    x0 = 1 2 3 4 5 6

    [run]
    T = 200

Sections: ``topology``, ``dynamics``, ``schedule``, ``initial``, ``run``,
``metrics``, ``loadbalance``, ``arrivals``.  A ``[loadbalance]`` section makes
it a load-balancing scenario.  Parsing collects every problem before failing.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Union

import numpy as np

from .core import DYNAMICS_FAMILIES, AgentDynamics, ConsensusScenario, StepSizeSchedule, dynamics_family
from .loadbalance import MODES, ArrivalProcess, LbScenario, RingTopology, lb_a_max
from .rng import Kind, stream
from .topology import EdgeSpec, ExclusiveGroup, StochasticTopologySpec, build_a_max

__all__ = [
    "ScenarioError",
    "ScenarioConfig",
    "parse_scenario",
    "load_scenario",
    "shipped_scenarios",
    "shipped_text",
]


class ScenarioError(ValueError):
    """Invalid scenario; ``errors`` lists every problem found."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


# key -> (default, kind); kind is one of int, float, str, bool, vec, list
_SCHEMA: dict[str, dict[str, tuple[object, str]]] = {
    "topology": {
        "kind": ("graph", "str"),
        "n": (None, "int"),
        "d_bar": (0, "int"),
        "noise_var": (0.0, "float"),
        "weight_dist": ("point", "str"),
        "noise_dist": ("gaussian", "str"),
        "extra_links": (None, "int"),
    },
    "dynamics": {
        "family": ("identity-control", "str"),
        "L1": (None, "float"),
        "Lx": (None, "float"),
        "L2": (None, "float"),
        "Lc": (None, "float"),
    },
    "schedule": {
        "kind": ("constant", "str"),
        "alpha": (0.1, "float"),
        "values": (None, "vec"),
    },
    "initial": {
        "x0": (None, "vec"),
        "prehistory": (None, "str"),
    },
    "run": {
        "T": (100, "int"),
        "seed": (0, "int"),
        "seeds": (1, "int"),
        "strict": (True, "bool"),
    },
    "metrics": {
        "eps": ((1.0, 0.1), "vec"),
        "err_threshold": (0.5, "float"),
        "warmup": (0, "int"),
        "anchor_lambda2": (None, "float"),
        "anchor_T": (None, "float"),
        "anchor_eps": (None, "float"),
        "norm": ("frobenius", "str"),
    },
    "loadbalance": {
        "productivities": (None, "vec"),
        "p_scale": (1.0, "float"),
        "q0": (None, "vec"),
        "mode": ("transfer", "str"),
    },
    "arrivals": {
        "kind": ("none", "str"),
        "jobs": (0, "int"),
        "window": (1, "int"),
        "complexity_mean": (1.0, "float"),
        "inject": ((), "list"),
    },
}

_SECTION_ORDER = tuple(_SCHEMA)
_GROUP_RE = re.compile(r"\(\s*(\S+)\s+(\S+)\s*\)")


def _convert(raw: str, kind: str):
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "vec":
        tok = raw.split()
        if tok and tok[0] == "uniform":
            if len(tok) != 3:
                raise ValueError("expected 'uniform <lo> <hi>'")
            lo, hi = float(tok[1]), float(tok[2])
            if hi < lo:
                raise ValueError("uniform bounds out of order")
            return ("uniform", lo, hi)
        return tuple(float(t) for t in tok)
    if kind == "list":
        return tuple(raw.split())
    return raw


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and v[0] == "uniform":
            return f"uniform {v[1]!r} {v[2]!r}"
        return " ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    """Parsed, defaulted and validated scenario."""

    values: dict[str, dict[str, object]]
    edges: tuple[EdgeSpec, ...]
    groups: tuple[ExclusiveGroup, ...]
    sections_present: frozenset[str] = field(default_factory=frozenset)
    name: str = ""

    # -- derived objects -------------------------------------------------
    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def is_loadbalance(self) -> bool:
        return "loadbalance" in self.sections_present

    @property
    def n(self) -> int:
        return int(self.get("topology", "n"))

    @property
    def T(self) -> int:
        return int(self.get("run", "T"))

    @property
    def seed(self) -> int:
        return int(self.get("run", "seed"))

    @property
    def seeds(self) -> int:
        return int(self.get("run", "seeds"))

    @property
    def eps(self) -> tuple[float, ...]:
        return tuple(self.get("metrics", "eps"))

    def topology(self) -> Union[StochasticTopologySpec, RingTopology]:
        t = self.values["topology"]
        if t["kind"] == "ring":
            return RingTopology(self.n, t["extra_links"], t["noise_var"], t["noise_dist"], t["d_bar"])
        return StochasticTopologySpec(
            n=self.n, d_bar=t["d_bar"], edges=self.edges, groups=self.groups,
            noise_var=t["noise_var"], weight_dist=t["weight_dist"], noise_dist=t["noise_dist"],
        )

    def dynamics(self) -> AgentDynamics:
        d = self.values["dynamics"]
        consts = {k: d[k] for k in ("L1", "Lx", "L2", "Lc") if d[k] is not None}
        return dynamics_family(d["family"], **consts)

    def schedule(self, alpha: Optional[float] = None, kind: Optional[str] = None) -> StepSizeSchedule:
        s = self.values["schedule"]
        return StepSizeSchedule(
            kind=kind or s["kind"],
            alpha=s["alpha"] if alpha is None else alpha,
            values=tuple(s["values"] or ()),
        )

    def _vector(self, raw, kind: Kind, scale: float = 1.0) -> np.ndarray:
        if raw is None:
            raise ScenarioError([f"missing vector for {kind.name.lower()}"])
        if raw and raw[0] == "uniform":
            v = stream(self.seed, -1, kind).uniform(raw[1], raw[2], self.n)
        else:
            v = np.array(raw, dtype=float)
        return v * scale

    def x0(self) -> np.ndarray:
        return self._vector(self.get("initial", "x0"), Kind.INITIAL)

    def productivities(self) -> np.ndarray:
        lb = self.values["loadbalance"]
        if lb["productivities"] is None:
            return np.full(self.n, lb["p_scale"])
        return self._vector(lb["productivities"], Kind.PRODUCTIVITY, lb["p_scale"])

    def q0(self) -> np.ndarray:
        lb = self.values["loadbalance"]
        if lb["q0"] is None:
            return np.zeros(self.n)
        return self._vector(lb["q0"], Kind.INITIAL)

    def prehistory(self) -> str:
        ph = self.get("initial", "prehistory")
        return ph if ph is not None else ("clamp" if self.is_loadbalance else "zero")

    def arrivals(self) -> ArrivalProcess:
        a = self.values["arrivals"]
        return ArrivalProcess(
            kind=a["kind"], jobs=a["jobs"], window=a["window"],
            complexity_mean=a["complexity_mean"], injections=_parse_injections(a["inject"])[0],
        )

    def consensus_scenario(self, schedule: Optional[StepSizeSchedule] = None, T: Optional[int] = None) -> ConsensusScenario:
        return ConsensusScenario(
            self.topology(), self.dynamics(), schedule or self.schedule(), self.x0(),
            self.T if T is None else T, self.prehistory(),
        )

    def lb_scenario(self, schedule: Optional[StepSizeSchedule] = None, T: Optional[int] = None) -> LbScenario:
        return LbScenario(
            self.topology(), self.productivities(), self.q0(), schedule or self.schedule(),
            self.arrivals(), self.T if T is None else T, self.get("loadbalance", "mode"), self.prehistory(),
        )

    # -- echo ------------------------------------------------------------
    def echo(self) -> str:
        """Fully defaulted configuration in the input format."""
        lines: list[str] = []
        for sec in _SECTION_ORDER:
            if sec in ("loadbalance", "arrivals") and not self.is_loadbalance:
                continue
            lines.append(f"[{sec}]")
            for key, val in self.values[sec].items():
                if sec == "initial" and key == "prehistory":
                    val = self.prehistory()
                if val is None:
                    continue
                if key == "inject":
                    for item in val:
                        lines.append(f"inject = {item}")
                    continue
                lines.append(f"{key} = {_fmt_value(val)}")
            if sec == "topology":
                for e in self.edges:
                    tail = " ".join(repr(float(p)) for p in e.pmf)
                    lines.append(f"edge {e.i + 1} {e.j + 1} {e.p_appear!r} {e.b_mean!r} {e.b_var!r} {tail}")
                for g in self.groups:
                    mem = " ".join(f"({j + 1} {p!r})" for j, p in g.members)
                    lines.append(f"group {g.i + 1} {mem}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.echo().encode("utf-8")).hexdigest()


def _parse_injections(items) -> tuple[tuple[tuple[int, int, float], ...], list[str]]:
    out, errs = [], []
    for item in items:
        parts = item.split(":")
        if len(parts) != 3:
            errs.append(f"[arrivals] inject {item!r}: expected t:agent:work")
            continue
        try:
            t = int(parts[0])
            a = -1 if parts[1] == "*" else int(parts[1]) - 1
            w = float(parts[2])
        except ValueError:
            errs.append(f"[arrivals] inject {item!r}: could not parse")
            continue
        out.append((t, a, w))
    return tuple(out), errs


def _parse_edge(tok: list[str], lineno: int, errs: list[str]) -> Optional[EdgeSpec]:
    if len(tok) < 4:
        errs.append(f"line {lineno}: edge needs at least 'edge i j p_appear'")
        return None
    try:
        i, j = int(tok[1]) - 1, int(tok[2]) - 1
        p = float(tok[3])
        b = float(tok[4]) if len(tok) > 4 else 1.0
        v = float(tok[5]) if len(tok) > 5 else 0.0
        pmf = tuple(float(x) for x in tok[6:]) or None
    except ValueError:
        errs.append(f"line {lineno}: could not parse edge line")
        return None
    return EdgeSpec(i, j, p, b, v, pmf if pmf is not None else ())


def _parse_group(rest: str, lineno: int, errs: list[str]) -> Optional[ExclusiveGroup]:
    head, _, tail = rest.partition("(")
    try:
        i = int(head.split()[0]) - 1
        members = tuple((int(j) - 1, float(p)) for j, p in _GROUP_RE.findall("(" + tail))
    except (ValueError, IndexError):
        errs.append(f"line {lineno}: expected 'group i (j p) (j p) ...'")
        return None
    if not members:
        errs.append(f"line {lineno}: group has no members")
        return None
    return ExclusiveGroup(i, members)


def parse_scenario(text: str, name: str = "") -> ScenarioConfig:
    errs: list[str] = []
    raw: dict[str, dict[str, str]] = {}
    multi: dict[str, list[str]] = {"inject": []}
    edges: list[EdgeSpec] = []
    groups: list[ExclusiveGroup] = []
    present: set[str] = set()
    section: Optional[str] = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SCHEMA:
                errs.append(f"line {lineno}: unknown section [{section}]")
            elif section in present:
                errs.append(f"line {lineno}: section [{section}] repeated")
            present.add(section)
            raw.setdefault(section, {})
            continue
        if section is None:
            errs.append(f"line {lineno}: content before the first section")
            continue
        if section not in _SCHEMA:
            continue
        first = line.split(None, 1)[0]
        if section == "topology" and first == "edge":
            e = _parse_edge(line.split(), lineno, errs)
            if e is not None:
                edges.append(e)
            continue
        if section == "topology" and first == "group":
            g = _parse_group(line[len("group"):], lineno, errs)
            if g is not None:
                groups.append(g)
            continue
        if "=" not in line:
            errs.append(f"line {lineno}: expected 'key = value'")
            continue
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _SCHEMA[section]:
            errs.append(f"line {lineno}: unknown key {key!r} in [{section}]")
            continue
        if section == "arrivals" and key == "inject":
            multi["inject"].append(val)
            continue
        if key in raw[section]:
            errs.append(f"line {lineno}: duplicate key {key!r} in [{section}]")
            continue
        raw[section][key] = val

    values: dict[str, dict[str, object]] = {}
    for sec, schema in _SCHEMA.items():
        values[sec] = {}
        for key, (default, kind) in schema.items():
            if key in raw.get(sec, {}):
                try:
                    values[sec][key] = _convert(raw[sec][key], kind)
                except ValueError as exc:
                    errs.append(f"[{sec}] {key}: {exc}")
                    values[sec][key] = default
            else:
                values[sec][key] = default
    values["arrivals"]["inject"] = tuple(multi["inject"])

    errs += _validate(values, edges, groups, present)
    d_bar = int(values["topology"]["d_bar"])
    edges = [e if e.pmf else EdgeSpec(e.i, e.j, e.p_appear, e.b_mean, e.b_var, (1.0,) + (0.0,) * d_bar) for e in edges]
    cfg = ScenarioConfig(values, tuple(edges), tuple(groups), frozenset(present), name)
    if errs:
        # still report link problems alongside the section errors
        if isinstance(values["topology"]["n"], int) and values["topology"]["n"] >= 1:
            try:
                cfg.topology()
            except (ValueError, TypeError) as exc:
                errs.append(str(exc))
        raise ScenarioError(errs)
    errs = _validate_objects(cfg)
    if errs:
        raise ScenarioError(errs)
    return cfg


def _validate(values, edges, groups, present) -> list[str]:
    errs = []
    t = values["topology"]
    if "topology" not in present:
        errs.append("missing [topology] section")
    if t["n"] is None:
        errs.append("[topology] n is required")
    elif t["n"] < 1:
        errs.append("[topology] n must be positive")
    if t["kind"] not in ("graph", "ring"):
        errs.append("[topology] kind must be graph or ring")
    if t["kind"] == "ring" and (edges or groups):
        errs.append("[topology] ring topology takes no edge or group lines")
    if t["kind"] == "graph" and t["extra_links"] is not None:
        errs.append("[topology] extra_links only applies to kind = ring")
    if values["dynamics"]["family"] not in DYNAMICS_FAMILIES:
        errs.append(f"[dynamics] family must be one of {DYNAMICS_FAMILIES}")
    if values["run"]["T"] < 0:
        errs.append("[run] T must be >= 0")
    if values["run"]["seeds"] < 1:
        errs.append("[run] seeds must be >= 1")
    if values["metrics"]["norm"] not in ("frobenius", "spectral"):
        errs.append("[metrics] norm must be frobenius or spectral")
    eps = values["metrics"]["eps"]
    if eps and eps[0] == "uniform" or any(not e > 0 for e in eps if not isinstance(e, str)):
        errs.append("[metrics] eps values must be positive")
    if "loadbalance" in present:
        if values["loadbalance"]["mode"] not in MODES:
            errs.append(f"[loadbalance] mode must be one of {MODES}")
    else:
        if values["initial"]["x0"] is None:
            errs.append("[initial] x0 is required")
        if "arrivals" in present:
            errs.append("[arrivals] needs a [loadbalance] section")
    _, inj_errs = _parse_injections(values["arrivals"]["inject"])
    errs += inj_errs
    if values["initial"]["prehistory"] not in (None, "zero", "clamp"):
        errs.append("[initial] prehistory must be zero or clamp")
    n = t["n"]
    for sec, key in (("initial", "x0"), ("loadbalance", "productivities"), ("loadbalance", "q0")):
        v = values[sec][key]
        if n and v is not None and not (v and v[0] == "uniform") and len(v) != n:
            errs.append(f"[{sec}] {key} needs {n} values, got {len(v)}")
    return errs


def _validate_objects(cfg: ScenarioConfig) -> list[str]:
    errs: list[str] = []
    try:
        topo = cfg.topology()
    except ValueError as exc:
        errs.append(str(exc))
        topo = None
    try:
        sched = cfg.schedule()
    except ValueError as exc:
        errs.append(f"[schedule] {exc}")
        sched = None
    try:
        cfg.dynamics()
    except (ValueError, TypeError) as exc:
        errs.append(f"[dynamics] {exc}")
    if cfg.is_loadbalance and topo is not None:
        try:
            cfg.arrivals()
            cfg.lb_scenario() if sched is not None else None
        except ValueError as exc:
            errs.append(str(exc))
    if (
        not errs
        and cfg.get("run", "strict")
        and isinstance(topo, StochasticTopologySpec)
        and sched is not None
        and sched.kind == "constant"
        and (cfg.is_loadbalance or cfg.get("dynamics", "family") == "identity-control")
    ):
        at = lb_a_max(topo, cfg.productivities()) if cfg.is_loadbalance else build_a_max(topo)
        if not sched.alpha * at.d_max < 1:
            errs.append(
                f"[schedule] step size condition alpha < 1/d_max(A_max) violated: "
                f"alpha={sched.alpha}, d_max={at.d_max}"
            )
    return errs


def shipped_scenarios() -> list[str]:
    root = resources.files("lvcons") / "scenarios"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def shipped_text(name: str) -> str:
    root = resources.files("lvcons") / "scenarios"
    f = root / f"{name}.cfg"
    if not f.is_file():
        raise ScenarioError([f"unknown scenario {name!r}; shipped: {', '.join(shipped_scenarios())}"])
    return f.read_text(encoding="utf-8")


def load_scenario(path_or_name: str) -> ScenarioConfig:
    """Parse a scenario file, or a shipped scenario by name."""
    import os

    if os.path.exists(path_or_name):
        with open(path_or_name, encoding="utf-8") as fh:
            return parse_scenario(fh.read(), os.path.basename(path_or_name))
    return parse_scenario(shipped_text(path_or_name), path_or_name)
