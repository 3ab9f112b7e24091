"""Vessel-tape machine: unit operations lowered to matter/energy primitives.

The tape is a row of vessel cells (waste at index 0, product at index 1,
then source flasks, then working vessels, growing on demand). Every unit
operation expands to a short fixed sequence of four primitive moves:

    AM  add matter       SM  subtract matter
    AE  add energy       SE  subtract energy

The head teleports to the cell a primitive names; each primitive is one
machine step. Energy primitives that hold the cell for a dwell time
consult the rule database afterwards, so reactions are a consequence of
conditions, not of which surface operation requested the heating. A
matched rule consumes inputs and books products at its declared yield;
element surplus goes straight to the waste cell as the rule's byproduct.

Halting is classified per run: a characterised rule keeps q_out, a
predicted one downgrades the run to q_uout, a novel (explored) one to
q_nout, and a mandatory reaction that matched nothing stops the machine
at q_fail. Every record appended to the trace costs one unit of budget;
an exhausted budget is also q_fail.

Mass conservation is audited per species:

    stock_in + produced == consumed + held + waste + product

within a relative residual of 1e-9 (see `LedgerReport.residual`).
Conversion between mol, g and mL is treated as 1:1 nominal, so all
amounts are a single "mol" scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .chemlang import AMBIENT_C, ChemProgram, OpKind, Quantity, ReagentDecl
from .jsonio import dumps_stable
from .rng import substream
from .rules import (
    RuleDatabase, RuleMatch, classify_outcome, commit_discovery,
    explore as _explore_latent, match_rule, promote,
)

__all__ = [
    "Primitive",
    "VesselCell",
    "MachineState",
    "ExecutionTrace",
    "LedgerReport",
    "Machine",
    "MachineError",
    "InsufficientMaterial",
    "UnknownDestination",
    "CellStillFilled",
    "expansion_kinds",
    "expand_unit_op",
    "init_machine",
    "instantiate_cell",
    "apply_primitive",
    "selected_species",
    "step",
    "run",
    "read_trace_jsonl",
    "worst_halt",
    "DEFAULT_BUDGET",
    "RESERVOIR_SPECIES",
    "HALT_KINDS",
]

DEFAULT_BUDGET = 10000
HALT_KINDS = ("q_out", "q_uout", "q_nout", "q_fail")
_HALT_RANK = {k: i for i, k in enumerate(HALT_KINDS)}

# Nominal charges and dwell times for operations that do not spell them out.
CLEAN_CHARGE_MOL = 0.1
SEPARATE_CHARGE_MOL = 0.1
AGITATE_S = 60.0
SOAK_S = 600.0
ENERGY_HOLD_PER_S = 0.01

# Species name drawn from the shared solvent reservoir.
RESERVOIR_SPECIES = "solvent"

_AMOUNT_SLACK = 1e-9


class MachineError(Exception):
    pass


class InsufficientMaterial(MachineError):
    pass


class UnknownDestination(MachineError):
    pass


class CellStillFilled(MachineError):
    pass


# ---------------------------------------------------------------------------
# Expansion of unit operations into primitives

_EXPANSION: dict[OpKind, tuple[str, ...]] = {
    OpKind.ADD: ("AM",),
    OpKind.TRANSFER: ("SM", "AM"),
    OpKind.HEAT_STIR: ("AE",),
    OpKind.CHILL: ("SE",),
    OpKind.REACT_HOT: ("AM", "AE"),
    OpKind.REACT_COLD: ("AM", "SE"),
    OpKind.SEPARATE: ("AM", "AE", "SM"),
    OpKind.DRY: ("AE", "SM"),
    OpKind.CRYSTALLISE: ("AE", "SE", "SM"),
    OpKind.DISTIL: ("AE", "SM", "SE", "AM"),
    OpKind.SUBLIME: ("SM", "AE", "SE", "AM"),
    OpKind.FILTER: ("SM",),
    OpKind.EVAPORATE: ("AE", "SM"),
    OpKind.CLEAN: ("AM", "SM"),
}


def expansion_kinds(kind: OpKind | str) -> list[str]:
    """Primitive codes a unit operation expands to, in order."""
    return list(_EXPANSION[OpKind(kind)])


@dataclass(frozen=True)
class Primitive:
    code: str                      # AM | SM | AE | SE
    cell: str                      # vessel the head must sit on
    op_index: int
    op_kind: OpKind
    # AM source: ("reagent", decl) | ("vessel", name) | ("transit",) | ("reservoir",)
    source: tuple | None = None
    # SM destination: ("vessel", name) | ("transit",)
    dest: tuple | None = None
    # SM selector: None = everything, "solvents" = solvent-role species,
    # or an explicit tuple of species ids.
    species: tuple[str, ...] | str | None = None
    amount: float | None = None
    setpoint: float | None = None
    duration: float = 0.0
    expects_reaction: bool = False
    check_reaction: bool = False
    reset_cell: bool = False


def _qv(op, key: str) -> float | None:
    v = op.params.get(key)
    if v is None:
        return None
    return v.value if isinstance(v, Quantity) else float(v)


def expand_unit_op(op, op_index: int) -> list[Primitive]:
    """Lower one unit operation to its primitive sequence."""
    k = op.kind
    p = op.params
    amount = _qv(op, "amount")
    temp = _qv(op, "temp")
    duration = _qv(op, "time")

    def prim(code, cell, **kw):
        return Primitive(code, cell, op_index, k, **kw)

    if k == OpKind.ADD:
        return [prim("AM", p["vessel"], source=("reagent", p["reagent"]), amount=amount)]
    if k == OpKind.TRANSFER:
        return [
            prim("SM", p["from"], dest=("transit",), amount=amount),
            prim("AM", p["to"], source=("transit",)),
        ]
    if k == OpKind.HEAT_STIR:
        return [prim("AE", p["vessel"], setpoint=temp, duration=duration,
                     check_reaction=True)]
    if k == OpKind.CHILL:
        return [prim("SE", p["vessel"], setpoint=temp, duration=duration,
                     check_reaction=True)]
    if k == OpKind.REACT_HOT or k == OpKind.REACT_COLD:
        energy = "AE" if k == OpKind.REACT_HOT else "SE"
        return [
            prim("AM", p["vessel"], source=("reagent", p["reagent"]), amount=amount),
            prim(energy, p["vessel"], setpoint=temp, duration=duration,
                 check_reaction=True, expects_reaction=True),
        ]
    if k == OpKind.SEPARATE:
        solvent = p.get("solvent")
        source = ("reagent", solvent) if solvent else ("reservoir",)
        return [
            prim("AM", p["vessel"], source=source,
                 amount=amount if amount is not None else SEPARATE_CHARGE_MOL),
            prim("AE", p["vessel"], duration=duration if duration is not None else AGITATE_S,
                 check_reaction=True),
            prim("SM", p["vessel"], dest=("vessel", p["to"]), species=(p["species"],)),
        ]
    if k == OpKind.DRY:
        selector = (p["species"],) if "species" in p else "solvents"
        return [
            prim("AE", p["vessel"], setpoint=temp, duration=duration,
                 check_reaction=True),
            prim("SM", p["vessel"], dest=("vessel", p.get("to", "waste")),
                 species=selector),
        ]
    if k == OpKind.CRYSTALLISE:
        return [
            prim("AE", p["vessel"], setpoint=temp,
                 duration=duration if duration is not None else SOAK_S,
                 check_reaction=True),
            prim("SE", p["vessel"], setpoint=_qv(op, "cool_to"), duration=SOAK_S,
                 check_reaction=True),
            prim("SM", p["vessel"], dest=("vessel", p["to"]), species=(p["species"],)),
        ]
    if k == OpKind.DISTIL:
        cool_to = _qv(op, "cool_to")
        return [
            prim("AE", p["vessel"], setpoint=temp,
                 duration=duration if duration is not None else SOAK_S,
                 check_reaction=True),
            prim("SM", p["vessel"], dest=("transit",), species=(p["species"],)),
            prim("SE", p["to"], setpoint=cool_to if cool_to is not None else AMBIENT_C,
                 duration=AGITATE_S, check_reaction=True),
            prim("AM", p["to"], source=("transit",)),
        ]
    if k == OpKind.SUBLIME:
        cool_to = _qv(op, "cool_to")
        return [
            prim("SM", p["vessel"], dest=("transit",), species=(p["species"],)),
            prim("AE", p["vessel"], setpoint=temp,
                 duration=duration if duration is not None else SOAK_S,
                 check_reaction=True),
            prim("SE", p["to"], setpoint=cool_to if cool_to is not None else AMBIENT_C,
                 duration=AGITATE_S, check_reaction=True),
            prim("AM", p["to"], source=("transit",)),
        ]
    if k == OpKind.FILTER:
        return [prim("SM", p["vessel"], dest=("vessel", p["to"]),
                     species=(p["species"],))]
    if k == OpKind.EVAPORATE:
        selector = (p["species"],) if "species" in p else "solvents"
        return [
            prim("AE", p["vessel"], setpoint=temp, duration=duration,
                 check_reaction=True),
            prim("SM", p["vessel"], dest=("vessel", p.get("to", "waste")),
                 species=selector),
        ]
    if k == OpKind.CLEAN:
        solvent = p.get("solvent")
        source = ("reagent", solvent) if solvent else ("reservoir",)
        return [
            prim("AM", p["vessel"], source=source,
                 amount=amount if amount is not None else CLEAN_CHARGE_MOL),
            prim("SM", p["vessel"], dest=("vessel", "waste"), reset_cell=True),
        ]
    raise ValueError(f"no expansion for {k!r}")


# ---------------------------------------------------------------------------
# Tape state

@dataclass
class VesselCell:
    name: str
    contents: dict[str, float] = field(default_factory=dict)
    temp: float = AMBIENT_C
    energy_in: float = 0.0
    energy_out: float = 0.0

    @property
    def blank(self) -> bool:
        return not self.contents

    def total(self) -> float:
        return math.fsum(self.contents.values())


@dataclass
class MachineState:
    cells: list[VesselCell]
    index: dict[str, int]
    head: int = 0
    controller: str = "q0"
    transit: dict[str, float] = field(default_factory=dict)
    step_count: int = 0
    stock_in: dict[str, float] = field(default_factory=dict)
    consumed: dict[str, float] = field(default_factory=dict)
    produced: dict[str, float] = field(default_factory=dict)
    solvent_species: frozenset[str] = frozenset()

    @property
    def waste_cell(self) -> VesselCell:
        return self.cells[0]

    @property
    def product_cell(self) -> VesselCell:
        return self.cells[1]

    def cell_named(self, name: str) -> VesselCell:
        return self.cells[self.index[name]]


def _bump(d: dict[str, float], key: str, amount: float) -> None:
    if amount:
        d[key] = d.get(key, 0.0) + amount


def _pour(contents: dict[str, float], species: str, amount: float) -> None:
    if amount:
        contents[species] = contents.get(species, 0.0) + amount


def _drain(contents: dict[str, float], species: str, amount: float) -> None:
    left = contents.get(species, 0.0) - amount
    if left == 0.0:
        contents.pop(species, None)
    else:
        contents[species] = left


def init_machine(prog: ChemProgram, waste_name: str = "waste",
                 product_name: str = "product") -> MachineState:
    """Lay out the tape and charge the source flasks from the declarations."""
    cells = [VesselCell(waste_name), VesselCell(product_name)]
    index = {waste_name: 0, product_name: 1}
    state = MachineState(cells, index)

    def ensure(name: str) -> VesselCell:
        if name not in index:
            index[name] = len(cells)
            cells.append(VesselCell(name))
        return cells[index[name]]

    for decl in prog.reagents:
        flask = ensure(decl.source_vessel)
        _pour(flask.contents, decl.species, decl.amount.value)
        _bump(state.stock_in, decl.species, decl.amount.value)
    for req in prog.hardware:
        ensure(req.vessel)
    state.solvent_species = frozenset(
        {RESERVOIR_SPECIES} | {d.species for d in prog.reagents if d.role == "solvent"}
    )
    return state


def instantiate_cell(state: MachineState, vessel: str | None = None) -> VesselCell:
    """Bring a blank cell into service at `vessel` (default: under the head).
    An occupied cell must be emptied first."""
    if vessel is None:
        cell = state.cells[state.head]
    elif vessel in state.index:
        cell = state.cells[state.index[vessel]]
    else:
        cell = VesselCell(vessel)
        state.index[vessel] = len(state.cells)
        state.cells.append(cell)
        return cell
    if cell.contents:
        raise CellStillFilled(cell.name)
    cell.temp = AMBIENT_C
    return cell


def _resolve_cell(state: MachineState, name: str) -> VesselCell:
    if name not in state.index:
        # waste/product keep their tape slots whatever the cells are called
        if name == "waste":
            return state.cells[0]
        if name == "product":
            return state.cells[1]
        return instantiate_cell(state, name)
    return state.cells[state.index[name]]


def selected_species(cell: VesselCell, selector,
                     solvents: frozenset[str]) -> list[str]:
    """Resolve an SM selector against a cell: None selects everything,
    "solvents" the solvent-role species, a tuple exactly those present."""
    if selector is None:
        return sorted(cell.contents)
    if selector == "solvents":
        return sorted(s for s in cell.contents if s in solvents)
    return [s for s in selector if s in cell.contents]


def apply_primitive(state: MachineState, prim: Primitive,
                    decls: dict[str, ReagentDecl] | None = None) -> dict:
    """Execute one primitive: teleport the head, move matter or energy,
    return the trace record. Raises MachineError subclasses on infeasible
    moves (missing material, unknown vessels, drawing into a filled cell)."""
    decls = decls or {}
    target = _resolve_cell(state, prim.cell)
    idx = state.index[target.name]
    move = "N" if idx == state.head else ("R" if idx > state.head else "L")
    state.head = idx
    state.step_count += 1
    cell = target

    if prim.code == "AM":
        _apply_add_matter(state, prim, cell, decls)
    elif prim.code == "SM":
        _apply_sub_matter(state, prim, cell)
    elif prim.code == "AE":
        rise = max(prim.setpoint - cell.temp, 0.0) if prim.setpoint is not None else 0.0
        cell.energy_in += rise + ENERGY_HOLD_PER_S * prim.duration
        if prim.setpoint is not None and prim.setpoint > cell.temp:
            cell.temp = prim.setpoint
    elif prim.code == "SE":
        drop = max(cell.temp - prim.setpoint, 0.0) if prim.setpoint is not None else 0.0
        cell.energy_out += drop + ENERGY_HOLD_PER_S * prim.duration
        if prim.setpoint is not None and prim.setpoint < cell.temp:
            cell.temp = prim.setpoint
    else:
        raise ValueError(f"unknown primitive code {prim.code!r}")

    return {
        "kind": "primitive",
        "step": state.step_count,
        "op_index": prim.op_index,
        "op": prim.op_kind.value,
        "code": prim.code,
        "cell": cell.name,
        "move": move,
        "state": state.controller,
        "contents": {k: cell.contents[k] for k in sorted(cell.contents)},
        "temp": cell.temp,
    }


def _apply_add_matter(state: MachineState, prim: Primitive, cell: VesselCell,
                      decls: dict[str, ReagentDecl]) -> None:
    src = prim.source
    if src is None:
        raise UnknownDestination("AM needs a source")
    if src[0] == "reagent":
        decl = decls.get(src[1])
        if decl is None:
            raise UnknownDestination(f"no reagent declaration {src[1]!r}")
        flask = _resolve_cell(state, decl.source_vessel)
        avail = flask.contents.get(decl.species, 0.0)
        want = prim.amount if prim.amount is not None else avail
        if want > avail + _AMOUNT_SLACK:
            raise InsufficientMaterial(
                f"{decl.name}: need {want:g} {decl.species}, flask "
                f"{decl.source_vessel} holds {avail:g}"
            )
        take = min(want, avail)
        _drain(flask.contents, decl.species, take)
        _pour(cell.contents, decl.species, take)
    elif src[0] == "reservoir":
        amt = prim.amount if prim.amount is not None else CLEAN_CHARGE_MOL
        _bump(state.stock_in, RESERVOIR_SPECIES, amt)
        _pour(cell.contents, RESERVOIR_SPECIES, amt)
    elif src[0] == "transit":
        for s in sorted(state.transit):
            _pour(cell.contents, s, state.transit[s])
        state.transit.clear()
    elif src[0] == "vessel":
        if src[1] not in state.index:
            raise UnknownDestination(src[1])
        other = state.cells[state.index[src[1]]]
        total = other.total()
        if prim.amount is None or (total and prim.amount >= total):
            moved = dict(other.contents)
            other.contents.clear()
        else:
            frac = prim.amount / total if total else 0.0
            moved = {s: v * frac for s, v in other.contents.items()}
            for s, v in moved.items():
                _drain(other.contents, s, v)
        for s in sorted(moved):
            _pour(cell.contents, s, moved[s])
    else:
        raise UnknownDestination(str(src))


def _apply_sub_matter(state: MachineState, prim: Primitive, cell: VesselCell) -> None:
    names = selected_species(cell, prim.species, state.solvent_species)
    if prim.amount is None:
        moved = {s: cell.contents[s] for s in names}
    else:
        total = math.fsum(cell.contents[s] for s in names)
        frac = min(1.0, prim.amount / total) if total > 0 else 0.0
        moved = {s: cell.contents[s] * frac for s in names}
    for s, v in moved.items():
        _drain(cell.contents, s, v)
    if prim.dest == ("transit",):
        for s, v in moved.items():
            _bump(state.transit, s, v)
    elif prim.dest and prim.dest[0] == "vessel":
        dest = _resolve_cell(state, prim.dest[1])
        for s in sorted(moved):
            _pour(dest.contents, s, moved[s])
    else:
        raise UnknownDestination(str(prim.dest))
    if prim.reset_cell and not cell.contents:
        cell.temp = AMBIENT_C


def step(state: MachineState, prim: Primitive | None = None,
         decls: dict[str, ReagentDecl] | None = None) -> dict:
    """Single machine step. With no primitive pending the head just moves
    right over the (possibly fresh) blank cell."""
    if prim is not None:
        return apply_primitive(state, prim, decls)
    state.head += 1
    if state.head == len(state.cells):
        name = f"cell_{state.head}"
        state.index[name] = state.head
        state.cells.append(VesselCell(name))
    state.step_count += 1
    cell = state.cells[state.head]
    return {
        "kind": "primitive",
        "step": state.step_count,
        "op_index": -1,
        "op": "noop",
        "code": "N",
        "cell": cell.name,
        "move": "R",
        "state": state.controller,
        "contents": {k: cell.contents[k] for k in sorted(cell.contents)},
        "temp": cell.temp,
    }


# ---------------------------------------------------------------------------
# Ledger

@dataclass(frozen=True)
class LedgerReport:
    total_in: dict[str, float]       # stock drawn + reaction products
    total_consumed: dict[str, float]
    total_held: dict[str, float]     # working cells + transit line
    total_waste: float
    total_product: float
    waste_by_species: dict[str, float]
    product_by_species: dict[str, float]
    stock_in: dict[str, float]
    produced: dict[str, float]
    energy_in: float
    energy_out: float
    residual: float

    def to_json_dict(self) -> dict:
        def srt(d: dict[str, float]) -> dict[str, float]:
            return {k: d[k] for k in sorted(d)}
        return {
            "total_in": srt(self.total_in),
            "total_consumed": srt(self.total_consumed),
            "total_held": srt(self.total_held),
            "total_waste": self.total_waste,
            "total_product": self.total_product,
            "waste_by_species": srt(self.waste_by_species),
            "product_by_species": srt(self.product_by_species),
            "stock_in": srt(self.stock_in),
            "produced": srt(self.produced),
            "energy_in": self.energy_in,
            "energy_out": self.energy_out,
            "residual": self.residual,
        }


def build_ledger(state: MachineState) -> LedgerReport:
    held: dict[str, float] = {}
    for i, cell in enumerate(state.cells):
        if i in (0, 1):
            continue
        for s, v in cell.contents.items():
            _bump(held, s, v)
    for s, v in state.transit.items():
        _bump(held, s, v)
    waste = dict(state.waste_cell.contents)
    product = dict(state.product_cell.contents)
    species = (set(state.stock_in) | set(state.produced) | set(state.consumed)
               | set(held) | set(waste) | set(product))
    total_in = {}
    residual = 0.0
    for s in sorted(species):
        inflow = state.stock_in.get(s, 0.0) + state.produced.get(s, 0.0)
        total_in[s] = inflow
        outflow = (state.consumed.get(s, 0.0) + held.get(s, 0.0)
                   + waste.get(s, 0.0) + product.get(s, 0.0))
        residual = max(residual, abs(inflow - outflow) / max(inflow, 1e-30))
    return LedgerReport(
        total_in=total_in,
        total_consumed=dict(state.consumed),
        total_held=held,
        total_waste=math.fsum(waste.values()),
        total_product=math.fsum(product.values()),
        waste_by_species=waste,
        product_by_species=product,
        stock_in=dict(state.stock_in),
        produced=dict(state.produced),
        energy_in=math.fsum(c.energy_in for c in state.cells),
        energy_out=math.fsum(c.energy_out for c in state.cells),
        residual=residual,
    )


# ---------------------------------------------------------------------------
# Execution

def worst_halt(outcomes) -> str:
    """q_fail beats q_nout beats q_uout beats q_out; no reactions is q_out."""
    rank = 0
    for o in outcomes:
        rank = max(rank, _HALT_RANK[o])
    return HALT_KINDS[rank]


@dataclass
class ExecutionTrace:
    records: list[dict]
    halt: str
    ledger: LedgerReport
    rule_events: list[dict]
    state: MachineState
    db: RuleDatabase

    def to_jsonl(self) -> str:
        return "".join(dumps_stable(r) + "\n" for r in self.records)

    def reaction_records(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "transition"]


def read_trace_jsonl(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


class Machine:
    """Stepwise executor. `run` drives a whole program; recovery layers
    drive `execute_op` themselves and use checkpoint/restore between ops.

    Optional hooks: `injector.sample(rule) -> (yield factor, mode)` models
    process errors at reaction time; `pre_primitive(machine, prim)` and
    `post_primitive(machine, prim, record)` let a hardware layer wrap each
    move without touching the state the primitive produced.
    """

    def __init__(self, prog: ChemProgram, db: RuleDatabase, *, seed: int = 0,
                 explore: bool = False, budget: int = DEFAULT_BUDGET,
                 injector=None, pre_primitive=None, post_primitive=None,
                 waste_name: str = "waste", product_name: str = "product"):
        self.prog = prog
        self.db = db
        self.explore_enabled = explore
        self.budget = budget
        self.injector = injector
        self.pre_primitive = pre_primitive
        self.post_primitive = post_primitive
        self.state = init_machine(prog, waste_name, product_name)
        self.decls = prog.decl_map
        self.records: list[dict] = []
        self.rule_events: list[dict] = []
        self.reaction_outcomes: list[str] = []
        self.halted: str | None = None
        self.halt_reason: str | None = None
        self.pc = 0
        self._explore_rng = substream(seed, "explore")

    # -- trace plumbing ----------------------------------------------------

    def emit(self, record: dict) -> bool:
        if self.budget <= 0:
            if self.halted is None:
                self.halted = "q_fail"
                self.halt_reason = "budget exhausted"
            return False
        self.budget -= 1
        self.records.append(record)
        return True

    # -- op execution ------------------------------------------------------

    def execute_op(self, op_index: int) -> list[dict]:
        """Run one unit operation; returns the reaction records it caused."""
        op = self.prog.steps[op_index]
        self.state.controller = f"q{op_index}"
        events: list[dict] = []
        for prim in expand_unit_op(op, op_index):
            if self.halted:
                return events
            if self.pre_primitive is not None:
                self.pre_primitive(self, prim)
            record = apply_primitive(self.state, prim, self.decls)
            if not self.emit(record):
                return events
            if self.post_primitive is not None:
                self.post_primitive(self, prim, record)
            if prim.check_reaction and prim.duration > 0 and not self.halted:
                ev = self.check_reaction(prim)
                if ev is not None:
                    events.append(ev)
        self.pc = op_index + 1
        return events

    def check_reaction(self, prim: Primitive) -> dict | None:
        state = self.state
        cell = state.cells[state.head]
        conditions = (cell.temp, prim.duration)
        m = match_rule(self.db, cell.contents, conditions)
        if m is None and self.explore_enabled and self.db.latent:
            found = _explore_latent(self.db, cell.contents, conditions, self._explore_rng)
            if found is not None:
                self.db = commit_discovery(self.db, found)
                self.rule_events.append({"kind": "discovered", "rule_id": found.id})
                rule = self.db.rules[found.id]
                extents = {s: cell.contents[s] / r
                           for s, r in rule.reagent_pattern.items()}
                limiting = min(extents, key=lambda s: (extents[s], s))
                m = RuleMatch(rule, extents[limiting], limiting)
        if m is None:
            if prim.expects_reaction:
                self.halted = "q_fail"
                self.halt_reason = (f"no transition rule matched in {cell.name} "
                                    f"at {cell.temp:g} C / {prim.duration:g} s")
                record = {
                    "kind": "transition",
                    "step": state.step_count,
                    "op_index": prim.op_index,
                    "rule": None,
                    "outcome": "q_fail",
                    "cell": cell.name,
                    "contents": {k: cell.contents[k] for k in sorted(cell.contents)},
                    "temp": cell.temp,
                    "state": state.controller,
                }
                self.emit(record)
                return record
            return None

        factor, mode = (1.0, None) if self.injector is None \
            else self.injector.sample(m.rule)
        rule = m.rule
        extent = rule.yield_fraction * m.extent * factor
        for s in sorted(rule.reagent_pattern):
            take = rule.reagent_pattern[s] * extent
            _drain(cell.contents, s, take)
            _bump(state.consumed, s, take)
        for s in sorted(rule.products):
            out = rule.products[s] * extent
            _pour(cell.contents, s, out)
            _bump(state.produced, s, out)
        bp = rule.byproduct_species
        if bp is not None and extent:
            _bump(state.produced, bp, extent)
            _pour(state.waste_cell.contents, bp, extent)
        for c in rule.catalysts:
            # turns over but is not used up; book both sides equally
            _bump(state.consumed, c, extent)
            _bump(state.produced, c, extent)

        self.db = promote(self.db, rule.id)
        applied = self.db.rules[rule.id]
        self.rule_events.append({
            "kind": "applied", "rule_id": rule.id,
            "occurrences": applied.occurrences, "status_after": applied.status,
        })
        outcome = classify_outcome(m, self.db, self.explore_enabled)
        self.reaction_outcomes.append(outcome)
        achieved = extent / m.extent if m.extent > 0 else 0.0
        record = {
            "kind": "transition",
            "step": state.step_count,
            "op_index": prim.op_index,
            "rule": rule.id,
            "outcome": outcome,
            "extent": extent,
            "extent_max": m.extent,
            "limiting": m.limiting,
            "expected_yield": rule.yield_fraction,
            "achieved_yield": achieved,
            "cell": cell.name,
            "contents": {k: cell.contents[k] for k in sorted(cell.contents)},
            "temp": cell.temp,
            "state": state.controller,
        }
        if mode is not None:
            record["injected"] = mode
        self.emit(record)
        return record

    # -- checkpointing (used by the recovery layer) -------------------------

    def checkpoint(self) -> dict:
        st = self.state
        return {
            "pc": self.pc,
            "head": st.head,
            "controller": st.controller,
            "step_basis": st.step_count,
            "transit": dict(st.transit),
            "cells": [(c.name, dict(c.contents), c.temp) for c in st.cells[1:]],
            "n_cells": len(st.cells),
            "outcomes": list(self.reaction_outcomes),
            "db": self.db,
            "rule_events_len": len(self.rule_events),
        }

    def restore(self, ckpt: dict) -> None:
        """Roll the workspace back to a checkpoint. Current holdings land in
        waste and the restored inventory is credited as fresh stock, so the
        conservation ledger stays closed across the revert."""
        st = self.state
        waste = st.waste_cell.contents
        for cell in st.cells[1:]:
            for s, v in cell.contents.items():
                _pour(waste, s, v)
        for s, v in st.transit.items():
            _pour(waste, s, v)
        st.transit.clear()
        fresh: dict[str, float] = {}
        for name, contents, temp in ckpt["cells"]:
            cell = st.cells[st.index[name]]
            cell.contents = dict(contents)
            cell.temp = temp
            for s, v in contents.items():
                _bump(fresh, s, v)
        for i in range(ckpt["n_cells"], len(st.cells)):
            st.cells[i].contents = {}
            st.cells[i].temp = AMBIENT_C
        st.transit = dict(ckpt["transit"])
        for s, v in ckpt["transit"].items():
            _bump(fresh, s, v)
        for s in sorted(fresh):
            _bump(st.stock_in, s, fresh[s])
        st.head = ckpt["head"]
        st.controller = ckpt["controller"]
        self.pc = ckpt["pc"]
        self.reaction_outcomes = list(ckpt["outcomes"])
        self.db = ckpt["db"]
        del self.rule_events[ckpt["rule_events_len"]:]

    # -- finalization --------------------------------------------------------

    def finalize(self) -> ExecutionTrace:
        halt = self.halted if self.halted else worst_halt(self.reaction_outcomes)
        self.state.controller = halt
        ledger = build_ledger(self.state)
        halt_record = {
            "kind": "halt",
            "halt": halt,
            "step": self.state.step_count,
            "ledger": ledger.to_json_dict(),
            "rule_events": self.rule_events,
        }
        if self.halt_reason:
            halt_record["reason"] = self.halt_reason
        self.records.append(halt_record)
        return ExecutionTrace(self.records, halt, ledger, self.rule_events,
                              self.state, self.db)


def run(prog: ChemProgram, db: RuleDatabase, *, seed: int = 0,
        budget: int = DEFAULT_BUDGET, explore: bool = False,
        injector=None) -> ExecutionTrace:
    """Execute a program against a rule database and return the full trace.

    Infeasible moves (overdrawn flasks, unknown vessels) stop the machine
    at q_fail rather than raising: the trace stays a complete account of
    how far the run got.
    """
    machine = Machine(prog, db, seed=seed, explore=explore, budget=budget,
                      injector=injector)
    try:
        for i in range(len(prog.steps)):
            if machine.halted:
                break
            machine.execute_op(i)
    except MachineError as exc:
        machine.halted = "q_fail"
        machine.halt_reason = str(exc)
    return machine.finalize()
