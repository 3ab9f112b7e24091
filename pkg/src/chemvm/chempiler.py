"""Compilation of programs onto a hardware graph.

A rig is a directed graph: matter nodes (flasks, reactors, separators,
rotavaps, filters, storage, chromatograph, waste, product) connected
through valves and a syringe pump. Compiling binds every program vessel to
a node (by id when the graph has a compatible node of that name, else
first-fit by ascending capability count so specialised stations stay free),
checks a route exists for every matter movement, and reports problems as
findings rather than exceptions, so a plan can explain everything wrong
with it at once.

Executing a plan drives the same machine the abstract run uses; the only
additions are stroke records describing how each movement is pumped
(ceil(total / pump capacity) strokes, last stroke carrying the remainder)
and a capacity watchdog that stops the run at q_fail when a vessel is
overfilled. Amounts are mol, volumes mL, converted 1:1 nominal.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .chemlang import (
    ChemProgram, HardwareReq, OpKind, ReagentDecl, STATION_CAPABILITY,
    UnitOperation,
)
from .chemlang.validate import Finding, MATTER_KINDS, ValidationReport, _KIND_WORDS
from .jsonio import dumps_stable, write_text_atomic
from .rules import Pathway, RuleDatabase, pathway_to_program
from .cstm import (
    DEFAULT_BUDGET, ExecutionTrace, Machine, MachineError, Primitive,
    selected_species,
)

__all__ = [
    "HardwareNode",
    "HardwareGraph",
    "GraphError",
    "RouteError",
    "CompiledPlan",
    "NODE_KINDS",
    "FLOW_KINDS",
    "load_graph",
    "loads_graph",
    "save_graph",
    "build_default_graph",
    "validate_graph",
    "route",
    "chempile",
    "execute_plan",
    "lowering_view",
]

FLOW_KINDS = frozenset({"Valve", "Pump"})
NODE_KINDS = frozenset(MATTER_KINDS) | FLOW_KINDS

RESERVOIR_ATTACHMENT = "solvent_reservoir"


class GraphError(Exception):
    pass


class RouteError(Exception):
    pass


@dataclass(frozen=True)
class HardwareNode:
    id: str
    kind: str
    capabilities: frozenset[str] = frozenset()
    capacity: float | None = None      # mL; None = unlimited
    ports: int | None = None           # max tube connections; None = unlimited
    attachments: tuple[str, ...] = ()

    @property
    def reserved(self) -> bool:
        return RESERVOIR_ATTACHMENT in self.attachments


@dataclass
class HardwareGraph:
    nodes: dict[str, HardwareNode]
    edges: list[tuple[str, str]]
    _adj: dict[str, list[str]] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        adj: dict[str, set[str]] = {n: set() for n in self.nodes}
        for a, b in self.edges:
            if a in adj:
                adj[a].add(b)
        self._adj = {n: sorted(v) for n, v in adj.items()}

    def neighbors(self, node: str) -> list[str]:
        return self._adj.get(node, [])

    def by_kind(self, kind: str) -> list[HardwareNode]:
        return [self.nodes[i] for i in sorted(self.nodes)
                if self.nodes[i].kind == kind]

    def reservoir(self) -> HardwareNode | None:
        for i in sorted(self.nodes):
            if self.nodes[i].reserved:
                return self.nodes[i]
        return None

    def pump_ids(self) -> list[str]:
        return [i for i in sorted(self.nodes) if self.nodes[i].kind == "Pump"]


# ---------------------------------------------------------------------------
# Serialization

def _parse_node(obj: dict) -> HardwareNode:
    where = f"node {obj.get('id', '?')!r}"
    required = {"id", "kind"}
    optional = {"capabilities", "capacity", "ports", "attachments"}
    missing = required - set(obj)
    if missing:
        raise GraphError(f"{where}: missing {sorted(missing)}")
    unknown = set(obj) - required - optional
    if unknown:
        raise GraphError(f"{where}: unknown field(s) {sorted(unknown)}")
    if obj["kind"] not in NODE_KINDS:
        raise GraphError(f"{where}: unknown kind {obj['kind']!r}")
    caps = obj.get("capabilities", [])
    if not isinstance(caps, list):
        raise GraphError(f"{where}: capabilities must be a list")
    capacity = obj.get("capacity")
    if capacity is not None and (not isinstance(capacity, (int, float)) or capacity <= 0):
        raise GraphError(f"{where}: capacity must be positive")
    ports = obj.get("ports")
    if ports is not None and (not isinstance(ports, int) or ports < 1):
        raise GraphError(f"{where}: ports must be a positive integer")
    return HardwareNode(obj["id"], obj["kind"], frozenset(caps),
                        capacity, ports, tuple(obj.get("attachments", [])))


def loads_graph(text: str, where: str = "<string>") -> HardwareGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphError(f"{where}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or set(doc) - {"nodes", "edges"} or "nodes" not in doc:
        raise GraphError(f"{where}: top level must be an object with nodes and edges")
    nodes: dict[str, HardwareNode] = {}
    for obj in doc["nodes"]:
        node = _parse_node(obj)
        if node.id in nodes:
            raise GraphError(f"duplicate node id {node.id!r}")
        nodes[node.id] = node
    edges: list[tuple[str, str]] = []
    for e in doc.get("edges", []):
        if not (isinstance(e, list) and len(e) == 2):
            raise GraphError(f"{where}: edge must be a pair, got {e!r}")
        a, b = e
        if a not in nodes or b not in nodes:
            raise GraphError(f"edge ({a!r}, {b!r}) references unknown node")
        edges.append((a, b))
    return HardwareGraph(nodes, edges)


def load_graph(path: str | Path) -> HardwareGraph:
    path = Path(path)
    return loads_graph(path.read_text(encoding="utf-8"), where=str(path))


def graph_to_json(graph: HardwareGraph) -> str:
    nodes = []
    for i in sorted(graph.nodes):
        n = graph.nodes[i]
        obj: dict = {"id": n.id, "kind": n.kind}
        if n.capabilities:
            obj["capabilities"] = sorted(n.capabilities)
        if n.capacity is not None:
            obj["capacity"] = n.capacity
        if n.ports is not None:
            obj["ports"] = n.ports
        if n.attachments:
            obj["attachments"] = list(n.attachments)
        nodes.append(obj)
    doc = {"nodes": nodes, "edges": [[a, b] for a, b in graph.edges]}
    return dumps_stable(doc, indent=2) + "\n"


def save_graph(graph: HardwareGraph, path: str | Path) -> None:
    write_text_atomic(path, graph_to_json(graph))


def build_default_graph() -> HardwareGraph:
    """Reference bench: four reagent flasks and a solvent reservoir feeding,
    through three valves and one syringe pump, a heated/chilled reactor with
    a photo sensor, a separator with a conductivity sensor, a rotavap, a
    filter, a chromatograph, storage, waste and a product receiver."""
    def n(id, kind, caps=(), capacity=None, ports=None, attachments=()):
        return HardwareNode(id, kind, frozenset(caps), capacity, ports,
                            tuple(attachments))

    nodes = [
        n("SOLV", "ReagentFlask", capacity=1000.0, ports=2,
          attachments=(RESERVOIR_ATTACHMENT,)),
        n("R1", "ReagentFlask", capacity=500.0, ports=2),
        n("R2", "ReagentFlask", capacity=500.0, ports=2),
        n("R3", "ReagentFlask", capacity=500.0, ports=2),
        n("R4", "ReagentFlask", capacity=500.0, ports=2),
        n("V1", "Valve", ports=8),
        n("V2", "Valve", ports=8),
        n("V3", "Valve", ports=8),
        n("P1", "Pump", capacity=25.0, ports=2),
        n("RX1", "Reactor",
          caps=("react_hot", "react_cold", "heat_stir", "chill", "evaporate"),
          capacity=250.0, ports=4,
          attachments=("HeaterStirrerChiller", "SensorPhoton")),
        n("SEP1", "Separator", caps=("separate",), capacity=200.0, ports=4,
          attachments=("SensorConductivity",)),
        n("RV1", "Rotavap",
          caps=("evaporate", "dry", "crystallise", "distil", "sublime",
                "heat_stir", "chill"),
          capacity=250.0, ports=4),
        n("F1", "Filter", caps=("filter", "dry"), capacity=100.0, ports=4),
        n("CH1", "Chromatograph", caps=("separate", "filter"), capacity=100.0,
          ports=4),
        n("S1", "Storage", capacity=500.0, ports=4),
        n("W", "Waste", capacity=5000.0, ports=2),
        n("OUT", "Product", capacity=500.0, ports=4),
    ]
    both = lambda a, b: [(a, b), (b, a)]
    edges: list[tuple[str, str]] = []
    edges += [("SOLV", "V1"), ("R1", "V1"), ("R2", "V1"), ("R3", "V3"), ("R4", "V3")]
    edges += both("V1", "P1") + both("P1", "V2")
    edges += both("V2", "V3") + both("V2", "RX1")
    edges += both("V3", "SEP1") + both("V3", "RV1")
    edges += both("V1", "F1") + both("V1", "S1")
    edges += [("V3", "W"), ("SEP1", "CH1"), ("CH1", "OUT"), ("V3", "OUT")]
    edges += both("CH1", "V3")
    return HardwareGraph({x.id: x for x in nodes}, edges)


# ---------------------------------------------------------------------------
# Graph validation and routing

def validate_graph(graph: HardwareGraph) -> ValidationReport:
    report = ValidationReport()
    for a, b in graph.edges:
        if a == b:
            report.add("bad_edge", f"self-edge on {a}", a)
        if a not in graph.nodes or b not in graph.nodes:
            report.add("bad_edge", f"edge ({a}, {b}) references unknown node", a)
    # one physical tube per neighbor pair, both directions included
    for nid in sorted(graph.nodes):
        node = graph.nodes[nid]
        if node.ports is None:
            continue
        partners = {b for a, b in graph.edges if a == nid}
        partners |= {a for a, b in graph.edges if b == nid}
        partners.discard(nid)
        if len(partners) > node.ports:
            report.add("ports_exceeded",
                       f"{nid} has {len(partners)} connections, {node.ports} ports",
                       nid)
    waste_ids = [n.id for n in graph.by_kind("Waste")]
    if not waste_ids:
        report.add("no_waste_node", "graph has no Waste node", None)
        return report
    # directed reachability; anything that can hold matter must be able to
    # discard it
    reach_waste: set[str] = set()
    for w in waste_ids:
        stack = [w]
        rev: dict[str, set[str]] = {}
        for a, b in graph.edges:
            rev.setdefault(b, set()).add(a)
        while stack:
            x = stack.pop()
            if x in reach_waste:
                continue
            reach_waste.add(x)
            stack.extend(rev.get(x, ()))
    for nid in sorted(graph.nodes):
        node = graph.nodes[nid]
        if node.kind in ("Waste", "Product") or node.kind in FLOW_KINDS:
            continue
        if nid not in reach_waste:
            report.add("unreachable_waste", f"{nid} cannot reach a waste node", nid)
    return report


def route(graph: HardwareGraph, src: str, dst: str) -> list[str]:
    """Shortest pump path src -> dst whose interior is valves and pumps
    only; among equal lengths the lexicographically smallest node sequence.
    """
    if src == dst:
        raise ValueError("route endpoints must differ")
    if src not in graph.nodes or dst not in graph.nodes:
        raise RouteError(f"unknown endpoint {src!r} or {dst!r}")
    heap: list[tuple[int, tuple[str, ...]]] = [(1, (src,))]
    settled: set[str] = set()
    while heap:
        n, path = heapq.heappop(heap)
        node = path[-1]
        if node == dst:
            return list(path)
        if node in settled:
            continue
        settled.add(node)
        for nxt in graph.neighbors(node):
            if nxt in settled or nxt in path:
                continue
            if nxt != dst and graph.nodes[nxt].kind not in FLOW_KINDS:
                continue
            heapq.heappush(heap, (n + 1, path + (nxt,)))
    raise RouteError(f"no route {src} -> {dst}")


# ---------------------------------------------------------------------------
# Compilation

@dataclass
class CompiledPlan:
    program: ChemProgram               # vessels renamed to node ids
    graph: HardwareGraph
    bindings: dict[str, str]           # program vessel -> node id
    routes: dict[str, list[str]]       # "SRC->DST" -> node path
    cleaning: list[dict]               # clean ops: {"op_index", "vessel"}
    allocations: dict[int, list[str]]  # reaction step -> node ids it uses
    report: ValidationReport
    source: str                        # "program" | "pathway"

    @property
    def feasible(self) -> bool:
        return self.report.ok

    def to_json(self) -> str:
        payload = {
            "source": self.source,
            "feasible": self.feasible,
            "bindings": {k: self.bindings[k] for k in sorted(self.bindings)},
            "routes": {k: self.routes[k] for k in sorted(self.routes)},
            "cleaning": self.cleaning,
            "allocations": {str(k): v for k, v in sorted(self.allocations.items())},
            "findings": [f.as_dict() for f in self.report.findings],
        }
        return dumps_stable(payload, indent=2) + "\n"


def _movements(op: UnitOperation, decl_map: dict[str, ReagentDecl],
               reservoir_id: str | None) -> list[tuple[str | None, str | None]]:
    """(src, dst) vessel pairs of matter this operation moves; declared
    reagents resolve to their flask, a missing solvent parameter to the
    reservoir."""
    k, p = op.kind, op.params

    def flask(reagent: str | None) -> str | None:
        if reagent is None:
            return reservoir_id
        decl = decl_map.get(reagent)
        return decl.source_vessel if decl else None

    if k == OpKind.ADD:
        return [(flask(p["reagent"]), p["vessel"])]
    if k == OpKind.TRANSFER:
        return [(p["from"], p["to"])]
    if k in (OpKind.REACT_HOT, OpKind.REACT_COLD):
        return [(flask(p["reagent"]), p["vessel"])]
    if k == OpKind.SEPARATE:
        return [(flask(p.get("solvent")), p["vessel"]), (p["vessel"], p["to"])]
    if k in (OpKind.DRY, OpKind.EVAPORATE):
        return [(p["vessel"], p.get("to", "waste"))]
    if k in (OpKind.CRYSTALLISE, OpKind.FILTER, OpKind.DISTIL, OpKind.SUBLIME):
        return [(p["vessel"], p["to"])]
    if k == OpKind.CLEAN:
        return [(flask(p.get("solvent")), p["vessel"]), (p["vessel"], "waste")]
    return []


def chempile(source: ChemProgram | Pathway, graph: HardwareGraph,
             db: RuleDatabase | None = None) -> CompiledPlan:
    """Bind a program (or a planned pathway) onto a rig.

    Always returns a plan; infeasibility is reported through plan.report
    findings (vessel_class_exhausted, missing_capability, no_route,
    capacity_exceeded, no_reservoir).
    """
    if isinstance(source, Pathway):
        if db is None:
            raise ValueError("compiling a pathway needs the rule database")
        prog = pathway_to_program(source, db)
        origin = "pathway"
    else:
        prog = source
        origin = "program"

    report = ValidationReport()
    bindings: dict[str, str] = {}
    claimed: set[str] = set()

    waste_nodes = graph.by_kind("Waste")
    product_nodes = graph.by_kind("Product")
    if waste_nodes:
        bindings["waste"] = waste_nodes[0].id
        claimed.add(waste_nodes[0].id)
    else:
        report.add("vessel_class_exhausted", "no Waste node in graph", "waste")
    if product_nodes:
        bindings["product"] = product_nodes[0].id
        claimed.add(product_nodes[0].id)
    else:
        report.add("vessel_class_exhausted", "no Product node in graph", "product")

    reservoir = graph.reservoir()
    reservoir_id = reservoir.id if reservoir else None
    needs_reservoir = any(
        op.kind in (OpKind.SEPARATE, OpKind.CLEAN) and "solvent" not in op.params
        for op in prog.steps
    )
    if needs_reservoir and reservoir_id is None:
        report.add("no_reservoir", "program draws wash solvent but the graph "
                   "has no reservoir flask", None)
    if reservoir_id is not None:
        claimed.add(reservoir_id)

    # reagent flasks, declaration order
    flask_pool = [n.id for n in graph.by_kind("ReagentFlask") if not n.reserved]
    source_vessels: list[str] = []
    for decl in prog.reagents:
        if decl.source_vessel not in source_vessels:
            source_vessels.append(decl.source_vessel)
    for v in source_vessels:
        if v in graph.nodes and graph.nodes[v].kind == "ReagentFlask" \
                and v not in claimed and not graph.nodes[v].reserved:
            bindings[v] = v
            claimed.add(v)
    for v in source_vessels:
        if v in bindings:
            continue
        free = [f for f in flask_pool if f not in claimed]
        if not free:
            report.add("vessel_class_exhausted",
                       f"no free ReagentFlask for source vessel {v}", v)
            continue
        bindings[v] = free[0]
        claimed.add(free[0])

    # working vessels: capability needs from the steps, kind from hardware reqs
    caps_needed: dict[str, set[str]] = {}
    for op in prog.steps:
        cap = STATION_CAPABILITY.get(op.kind)
        v = op.params.get("vessel")
        if cap and isinstance(v, str):
            caps_needed.setdefault(v, set()).add(cap)
    for req in prog.hardware:
        if req.vessel in bindings:
            continue
        need = caps_needed.get(req.vessel, set())
        want_kind = _KIND_WORDS.get(req.kind, req.kind if req.kind in NODE_KINDS else None)
        candidates = [
            n for nid, n in sorted(graph.nodes.items())
            if n.kind in MATTER_KINDS and n.kind not in ("ReagentFlask", "Waste", "Product")
            and nid not in claimed
            and (want_kind is None or n.kind == want_kind)
        ]
        with_caps = [n for n in candidates if need <= n.capabilities]
        if not with_caps:
            if candidates and need:
                missing = need - max(candidates, key=lambda n: len(need & n.capabilities)).capabilities
                report.add("missing_capability",
                           f"no free node for {req.vessel} with {sorted(need)} "
                           f"(closest lacks {sorted(missing)})", req.vessel)
            else:
                report.add("vessel_class_exhausted",
                           f"no free node of kind {want_kind or 'any'} for {req.vessel}",
                           req.vessel)
            continue
        exact = [n for n in with_caps if n.id == req.vessel]
        chosen = exact[0] if exact else sorted(
            with_caps, key=lambda n: (len(n.capabilities), n.id))[0]
        bindings[req.vessel] = chosen.id
        claimed.add(chosen.id)

    # rename the program onto the chosen nodes
    def mapped(v: str) -> str:
        return bindings.get(v, v)

    new_decls = [replace(d, source_vessel=mapped(d.source_vessel))
                 for d in prog.reagents]
    new_hw = [replace(h, vessel=mapped(h.vessel)) for h in prog.hardware]
    new_steps = []
    for op in prog.steps:
        params = dict(op.params)
        for key in ("vessel", "from", "to"):
            if key in params and isinstance(params[key], str):
                params[key] = mapped(params[key])
        new_steps.append(UnitOperation(op.kind, params, op.line))
    bound = ChemProgram(prog.name, new_decls, new_hw, new_steps,
                        dict(prog.metadata))

    # route every movement, collect cleaning ops and per-step allocations
    routes: dict[str, list[str]] = {}
    cleaning: list[dict] = []
    allocations: dict[int, list[str]] = {}
    current_step = 1
    decl_map = bound.decl_map
    for i, op in enumerate(bound.steps):
        if op.reaction_step is not None:
            current_step = op.reaction_step
        touched = set(op.vessels())
        alloc = allocations.setdefault(current_step, [])
        for v in sorted(touched | ({mapped("waste")} if op.kind == OpKind.CLEAN else set())):
            if v not in alloc:
                alloc.append(v)
        if op.kind == OpKind.CLEAN:
            cleaning.append({"op_index": i, "vessel": op.params["vessel"]})
        for src, dst in _movements(op, decl_map, reservoir_id):
            src = mapped(src) if src else src
            dst = mapped(dst) if dst else dst
            if src is None or dst is None or src == dst:
                continue
            key = f"{src}->{dst}"
            if key in routes:
                continue
            try:
                routes[key] = route(graph, src, dst)
            except RouteError:
                report.add("no_route", f"no path {src} -> {dst} "
                           f"(operation {i + 1}, {op.kind.value})", key)

    # static capacity screen: declared charges must fit their flask
    flask_load: dict[str, float] = {}
    for d in new_decls:
        flask_load[d.source_vessel] = flask_load.get(d.source_vessel, 0.0) + d.amount.value
    for fid, load in sorted(flask_load.items()):
        node = graph.nodes.get(fid)
        if node is not None and node.capacity is not None and load > node.capacity:
            report.add("capacity_exceeded",
                       f"{fid} charged with {load:g} mL against capacity "
                       f"{node.capacity:g}", fid)

    return CompiledPlan(bound, graph, bindings, routes, cleaning, allocations,
                        report, origin)


# ---------------------------------------------------------------------------
# Plan execution with stroke bookkeeping

def _planned_movement(machine: Machine, prim: Primitive,
                      pump_home: str | None) -> tuple[str, str, float] | None:
    """(src node, dst node, amount) a primitive is about to move, or None
    for in-place energy moves. Mirrors the machine's own accounting without
    touching state."""
    st = machine.state
    if prim.code == "AM":
        src = prim.source
        if src is None:
            return None
        if src[0] == "reagent":
            decl = machine.decls.get(src[1])
            if decl is None:
                return None
            flask = st.cell_named(decl.source_vessel) \
                if decl.source_vessel in st.index else None
            avail = flask.contents.get(decl.species, 0.0) if flask else 0.0
            amount = avail if prim.amount is None else min(prim.amount, avail)
            return (decl.source_vessel, prim.cell, amount)
        if src[0] == "reservoir":
            res = getattr(machine, "reservoir_id", None)
            if res is None:
                return None
            return (res, prim.cell, prim.amount or 0.0)
        if src[0] == "transit":
            if pump_home is None:
                return None
            return (pump_home, prim.cell, math.fsum(st.transit.values()))
        if src[0] == "vessel":
            other = st.cell_named(src[1]) if src[1] in st.index else None
            if other is None:
                return None
            total = other.total()
            amount = total if prim.amount is None else min(prim.amount, total)
            return (src[1], prim.cell, amount)
    elif prim.code == "SM":
        cell = st.cell_named(prim.cell) if prim.cell in st.index else None
        if cell is None:
            return None
        names = selected_species(cell, prim.species, st.solvent_species)
        total = math.fsum(cell.contents[s] for s in names)
        if prim.amount is not None:
            total = min(total, prim.amount)
        if prim.dest == ("transit",):
            if pump_home is None:
                return None
            return (prim.cell, pump_home, total)
        if prim.dest and prim.dest[0] == "vessel":
            dst = prim.dest[1]
            if dst == "waste" and dst not in st.index:
                dst = st.waste_cell.name
            if dst == "product" and dst not in st.index:
                dst = st.product_cell.name
            return (prim.cell, dst, total)
    return None


def execute_plan(plan: CompiledPlan, db: RuleDatabase, *, seed: int = 0,
                 budget: int = DEFAULT_BUDGET, explore: bool = False,
                 injector=None) -> ExecutionTrace:
    """Run a compiled plan: the abstract machine semantics, plus stroke
    records ahead of each movement and capacity enforcement per node."""
    if not plan.feasible:
        raise GraphError("plan is not feasible:\n" + "\n".join(
            f"  [{f.code}] {f.message}" for f in plan.report.findings))
    graph = plan.graph
    pumps = graph.pump_ids()
    pump_home = pumps[0] if pumps else None
    reservoir = graph.reservoir()

    def pre(machine: Machine, prim: Primitive) -> None:
        mv = _planned_movement(machine, prim, pump_home)
        if mv is None:
            return
        src, dst, total = mv
        if total <= 0 or src == dst:
            return
        try:
            path = route(graph, src, dst)
        except (RouteError, ValueError):
            return
        pump_cap = None
        for nid in path[1:-1]:
            node = graph.nodes[nid]
            if node.kind == "Pump" and node.capacity:
                pump_cap = node.capacity
                break
        strokes = 1 if pump_cap is None else max(1, math.ceil(total / pump_cap - 1e-12))
        per = total / strokes
        moved_so_far = 0.0
        for j in range(1, strokes + 1):
            moved = per if j < strokes else total - moved_so_far
            moved_so_far += per
            machine.emit({
                "kind": "transfer",
                "step": machine.state.step_count,
                "op_index": prim.op_index,
                "route": path,
                "stroke": j,
                "strokes": strokes,
                "moved": moved,
                "total": total,
            })

    def post(machine: Machine, prim: Primitive, record: dict) -> None:
        st = machine.state
        for cell in (st.cells[st.head],):
            node = graph.nodes.get(cell.name)
            if node is None or node.capacity is None:
                continue
            held = cell.total()
            if held > node.capacity + 1e-9:
                machine.emit({
                    "kind": "deviation",
                    "code": "capacity_exceeded",
                    "step": st.step_count,
                    "op_index": prim.op_index,
                    "cell": cell.name,
                    "held": held,
                    "capacity": node.capacity,
                })
                machine.halted = "q_fail"
                machine.halt_reason = (f"{cell.name} overfilled: {held:g} "
                                       f"over capacity {node.capacity:g}")

    machine = Machine(plan.program, db, seed=seed, explore=explore,
                      budget=budget, injector=injector,
                      pre_primitive=pre, post_primitive=post,
                      waste_name=plan.bindings.get("waste", "waste"),
                      product_name=plan.bindings.get("product", "product"))
    machine.reservoir_id = reservoir.id if reservoir else None
    try:
        for i in range(len(plan.program.steps)):
            if machine.halted:
                break
            machine.execute_op(i)
    except MachineError as exc:
        machine.halted = "q_fail"
        machine.halt_reason = str(exc)
    return machine.finalize()


def lowering_view(trace: ExecutionTrace, bindings: dict[str, str] | None = None
                  ) -> list[tuple]:
    """Comparable projection of a trace: per primitive/transition record the
    (op_index, discriminator, cell, contents, temp, controller state), with
    node ids mapped back to the program's vessel names when bindings are
    given. Two traces are equivalent lowerings when their views and halts
    agree."""
    back = {v: k for k, v in (bindings or {}).items()}
    view = []
    for r in trace.records:
        if r["kind"] == "primitive":
            tag = r["code"]
        elif r["kind"] == "transition":
            tag = f"rule:{r['rule']}"
        else:
            continue
        cell = back.get(r["cell"], r["cell"])
        contents = tuple(sorted(r["contents"].items()))
        view.append((r["op_index"], tag, cell, contents, r["temp"], r["state"]))
    return view
