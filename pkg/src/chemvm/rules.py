"""Declarative reaction knowledge and pathway planning.

A rule database is a JSON document with two collections, `species` and
`rules` (plus optional `latent` rules invisible to matching and planning
until discovered by exploration, and a `provenance` log). Rules are
checked for element-mass balance at load time: inputs must cover outputs
element-wise, and any surplus is booked per application to an implicit
byproduct that the machine routes to waste.

Matching is multiset-superset on the reagent pattern plus catalyst
presence plus the condition point lying inside the rule's process window;
ties go to higher priority, then lexicographically smaller rule id. A rule
observed twice stops being a prediction: `promote` increments the
occurrence counter and flips predicted/novel rules to characterised at the
second occurrence.

The planner searches rule sequences of minimal length (ties broken by
lexicographic rule-id sequence) that build a target species from stock,
then sizes input amounts backward through the declared yields.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .jsonio import dumps_stable, write_text_atomic

__all__ = [
    "Species",
    "ProcessWindow",
    "TransitionRule",
    "RuleDatabase",
    "RuleMatch",
    "Pathway",
    "PathwayStep",
    "RuleLoadError",
    "Unreachable",
    "UnstableTarget",
    "STATUSES",
    "PROMOTION_THRESHOLD",
    "load_rules",
    "loads_rules",
    "save_rules",
    "match_rule",
    "classify_outcome",
    "promote",
    "explore",
    "commit_discovery",
    "apply_rule_events",
    "plan_pathway",
    "pathway_to_program",
    "perfect_copy_fraction",
    "assembly_bounds_ok",
]

STATUSES = ("characterised", "predicted", "novel")
PROMOTION_THRESHOLD = 2

# Presence threshold: below this many mol a species counts as absent.
PRESENCE_EPS = 1e-12

# Nominal catalyst charge the planner allocates per step that needs one.
CATALYST_CHARGE_MOL = 0.05

_ID_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


class RuleLoadError(Exception):
    pass


class Unreachable(Exception):
    pass


class UnstableTarget(Exception):
    pass


@dataclass(frozen=True)
class Species:
    id: str
    name: str
    molar_mass: float
    element_counts: dict[str, int]
    stable: bool = True
    assembly_index: int | None = None
    bonds: int | None = None


@dataclass(frozen=True)
class ProcessWindow:
    temp_min: float
    temp_max: float
    duration_min: float
    duration_max: float

    def contains(self, temp: float, duration: float) -> bool:
        return (self.temp_min <= temp <= self.temp_max
                and self.duration_min <= duration <= self.duration_max)

    def midpoint(self) -> tuple[float, float]:
        return ((self.temp_min + self.temp_max) / 2.0,
                (self.duration_min + self.duration_max) / 2.0)


@dataclass(frozen=True)
class TransitionRule:
    id: str
    reagent_pattern: dict[str, float]   # species -> min amount ratio
    process_window: ProcessWindow
    products: dict[str, float]          # species -> coefficient per unit extent
    yield_fraction: float               # (0, 1]
    epsilon: float                      # [0, 1) per-application error probability
    status: str = "characterised"
    catalysts: tuple[str, ...] = ()
    occurrences: int = 0
    priority: int = 0
    # element surplus per unit extent, routed to waste as "<id>.byproduct"
    byproduct_elements: dict[str, float] = field(default_factory=dict)

    @property
    def byproduct_species(self) -> str | None:
        return f"{self.id}.byproduct" if self.byproduct_elements else None


@dataclass
class RuleDatabase:
    species: dict[str, Species]
    rules: dict[str, TransitionRule]
    latent: dict[str, TransitionRule] = field(default_factory=dict)
    provenance: list[dict] = field(default_factory=list)


@dataclass(frozen=True)
class RuleMatch:
    rule: TransitionRule
    extent: float       # limiting extent before yield
    limiting: str       # species id that limits the extent


# ---------------------------------------------------------------------------
# Load / save

def assembly_bounds_ok(assembly_index: int, bonds: int) -> bool:
    """Shortest-path assembly index bounds for an object with `bonds` parts:
    at least ceil(log2 bonds), at most bonds - 1."""
    if bonds < 2:
        return False
    return (bonds - 1).bit_length() <= assembly_index <= bonds - 1


def _require_keys(obj: dict, required: set[str], optional: set[str], where: str) -> None:
    missing = required - set(obj)
    if missing:
        raise RuleLoadError(f"{where}: missing field(s) {sorted(missing)}")
    unknown = set(obj) - required - optional
    if unknown:
        raise RuleLoadError(f"{where}: unknown field(s) {sorted(unknown)}")


def _parse_species(obj: dict) -> Species:
    where = f"species {obj.get('id', '?')!r}"
    _require_keys(obj, {"id", "name", "molar_mass", "element_counts"},
                  {"stable", "assembly_index", "bonds"}, where)
    sid = obj["id"]
    if not isinstance(sid, str) or not _ID_RE.match(sid):
        raise RuleLoadError(f"{where}: id must be an identifier")
    mm = obj["molar_mass"]
    if not isinstance(mm, (int, float)) or mm <= 0:
        raise RuleLoadError(f"{where}: molar_mass must be positive")
    counts = obj["element_counts"]
    if not isinstance(counts, dict) or not counts:
        raise RuleLoadError(f"{where}: element_counts must be a non-empty object")
    for el, n in counts.items():
        if not isinstance(n, int) or n <= 0:
            raise RuleLoadError(f"{where}: element count for {el!r} must be a positive integer")
    ai = obj.get("assembly_index")
    bonds = obj.get("bonds")
    if ai is not None:
        if not isinstance(ai, int) or ai < 1:
            raise RuleLoadError(f"{where}: assembly_index must be a positive integer")
        if bonds is not None and not assembly_bounds_ok(ai, bonds):
            lo = (bonds - 1).bit_length() if bonds >= 2 else None
            raise RuleLoadError(
                f"{where}: assembly_index {ai} outside [{lo}, {bonds - 1}] for {bonds} bonds"
            )
    return Species(sid, obj["name"], float(mm), dict(counts),
                   bool(obj.get("stable", True)), ai, bonds)


def _parse_rule(obj: dict, species: dict[str, Species]) -> TransitionRule:
    where = f"rule {obj.get('id', '?')!r}"
    _require_keys(
        obj,
        {"id", "reagent_pattern", "process_window", "products", "yield", "epsilon", "status"},
        {"catalysts", "occurrences", "priority"},
        where,
    )
    rid = obj["id"]
    if not isinstance(rid, str) or not rid:
        raise RuleLoadError(f"{where}: bad id")
    pattern = obj["reagent_pattern"]
    products = obj["products"]
    for label, mapping in (("reagent_pattern", pattern), ("products", products)):
        if not isinstance(mapping, dict) or not mapping:
            raise RuleLoadError(f"{where}: {label} must be a non-empty object")
        for sid, ratio in mapping.items():
            if sid not in species:
                raise RuleLoadError(f"{where}: unknown species {sid!r} in {label}")
            if not isinstance(ratio, (int, float)) or ratio <= 0:
                raise RuleLoadError(f"{where}: {label}[{sid!r}] must be positive")
    catalysts = obj.get("catalysts", [])
    if not isinstance(catalysts, list):
        raise RuleLoadError(f"{where}: catalysts must be a list")
    for k in catalysts:
        if k not in species:
            raise RuleLoadError(f"{where}: unknown catalyst species {k!r}")
        if k in pattern:
            raise RuleLoadError(f"{where}: catalyst {k!r} also appears in reagent_pattern")
    win = obj["process_window"]
    _require_keys(win, {"temp_min", "temp_max", "duration_min", "duration_max"}, set(),
                  f"{where} process_window")
    window = ProcessWindow(float(win["temp_min"]), float(win["temp_max"]),
                           float(win["duration_min"]), float(win["duration_max"]))
    if window.temp_min > window.temp_max or window.duration_min > window.duration_max:
        raise RuleLoadError(f"{where}: inverted process window")
    if window.duration_min < 0:
        raise RuleLoadError(f"{where}: negative duration window")
    y = obj["yield"]
    if not isinstance(y, (int, float)) or not (0 < y <= 1):
        raise RuleLoadError(f"{where}: yield must lie in (0, 1]")
    eps = obj["epsilon"]
    if not isinstance(eps, (int, float)) or not (0 <= eps < 1):
        raise RuleLoadError(f"{where}: epsilon must lie in [0, 1)")
    status = obj["status"]
    if status not in STATUSES:
        raise RuleLoadError(f"{where}: status must be one of {STATUSES}")
    occurrences = obj.get("occurrences", 0)
    if not isinstance(occurrences, int) or occurrences < 0:
        raise RuleLoadError(f"{where}: occurrences must be a non-negative integer")
    priority = obj.get("priority", 0)
    if not isinstance(priority, int):
        raise RuleLoadError(f"{where}: priority must be an integer")

    # Element-mass balance: inputs (catalysts excluded) must cover products.
    inputs_el: dict[str, float] = {}
    for sid, ratio in pattern.items():
        for el, n in species[sid].element_counts.items():
            inputs_el[el] = inputs_el.get(el, 0.0) + ratio * n
    outputs_el: dict[str, float] = {}
    for sid, coeff in products.items():
        for el, n in species[sid].element_counts.items():
            outputs_el[el] = outputs_el.get(el, 0.0) + coeff * n
    for el, n_out in outputs_el.items():
        if n_out > inputs_el.get(el, 0.0) + 1e-9:
            raise RuleLoadError(
                f"{where}: products contain more {el!r} ({n_out:g}) than inputs"
                f" supply ({inputs_el.get(el, 0.0):g})"
            )
    byproduct = {
        el: n_in - outputs_el.get(el, 0.0)
        for el, n_in in sorted(inputs_el.items())
        if n_in - outputs_el.get(el, 0.0) > 1e-12
    }
    return TransitionRule(
        rid, dict(pattern), window, dict(products), float(y), float(eps),
        status, tuple(catalysts), occurrences, priority, byproduct,
    )


def loads_rules(text: str, where: str = "<string>") -> RuleDatabase:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RuleLoadError(f"{where}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise RuleLoadError(f"{where}: top level must be an object")
    _require_keys(doc, {"species", "rules"}, {"latent", "provenance"}, where)
    if not isinstance(doc["species"], list) or not isinstance(doc["rules"], list):
        raise RuleLoadError(f"{where}: species and rules must be lists")
    species: dict[str, Species] = {}
    for obj in doc["species"]:
        sp = _parse_species(obj)
        if sp.id in species:
            raise RuleLoadError(f"duplicate species id {sp.id!r}")
        species[sp.id] = sp
    rules: dict[str, TransitionRule] = {}
    for obj in doc["rules"]:
        rule = _parse_rule(obj, species)
        if rule.id in rules:
            raise RuleLoadError(f"duplicate rule id {rule.id!r}")
        rules[rule.id] = rule
    latent: dict[str, TransitionRule] = {}
    for obj in doc.get("latent", []):
        rule = _parse_rule(obj, species)
        if rule.id in rules or rule.id in latent:
            raise RuleLoadError(f"duplicate rule id {rule.id!r} (latent)")
        latent[rule.id] = rule
    provenance = doc.get("provenance", [])
    if not isinstance(provenance, list):
        raise RuleLoadError(f"{where}: provenance must be a list")
    return RuleDatabase(species, rules, latent, list(provenance))


def load_rules(path: str | Path) -> RuleDatabase:
    path = Path(path)
    return loads_rules(path.read_text(encoding="utf-8"), where=str(path))


def _window_json(w: ProcessWindow) -> dict:
    return {"temp_min": w.temp_min, "temp_max": w.temp_max,
            "duration_min": w.duration_min, "duration_max": w.duration_max}


def _rule_json(r: TransitionRule) -> dict:
    out = {
        "id": r.id,
        "reagent_pattern": {k: r.reagent_pattern[k] for k in sorted(r.reagent_pattern)},
        "process_window": _window_json(r.process_window),
        "products": {k: r.products[k] for k in sorted(r.products)},
        "yield": r.yield_fraction,
        "epsilon": r.epsilon,
        "status": r.status,
        "occurrences": r.occurrences,
        "priority": r.priority,
    }
    if r.catalysts:
        out["catalysts"] = sorted(r.catalysts)
    return out


def _species_json(s: Species) -> dict:
    out = {
        "id": s.id,
        "name": s.name,
        "molar_mass": s.molar_mass,
        "element_counts": {k: s.element_counts[k] for k in sorted(s.element_counts)},
        "stable": s.stable,
    }
    if s.assembly_index is not None:
        out["assembly_index"] = s.assembly_index
    if s.bonds is not None:
        out["bonds"] = s.bonds
    return out


def save_rules(db: RuleDatabase, path: str | Path) -> None:
    """Atomic rewrite; this is the persistence layer for promotion."""
    doc: dict = {
        "species": [_species_json(db.species[k]) for k in sorted(db.species)],
        "rules": [_rule_json(db.rules[k]) for k in sorted(db.rules)],
    }
    if db.latent:
        doc["latent"] = [_rule_json(db.latent[k]) for k in sorted(db.latent)]
    if db.provenance:
        doc["provenance"] = db.provenance
    write_text_atomic(path, dumps_stable(doc, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Matching, outcome classification, promotion, exploration

def match_rule(db: RuleDatabase, contents: dict[str, float],
               conditions: tuple[float, float]) -> RuleMatch | None:
    """Best rule for the cell contents at (temperature C, duration s)."""
    temp, duration = conditions
    eligible = []
    for rule in db.rules.values():
        if not all(contents.get(s, 0.0) > PRESENCE_EPS for s in rule.reagent_pattern):
            continue
        if not all(contents.get(k, 0.0) > PRESENCE_EPS for k in rule.catalysts):
            continue
        if not rule.process_window.contains(temp, duration):
            continue
        eligible.append(rule)
    if not eligible:
        return None
    eligible.sort(key=lambda r: (-r.priority, r.id))
    rule = eligible[0]
    extents = {s: contents[s] / ratio for s, ratio in rule.reagent_pattern.items()}
    limiting = min(extents, key=lambda s: (extents[s], s))
    return RuleMatch(rule, extents[limiting], limiting)


def classify_outcome(match: RuleMatch | None, db: RuleDatabase, explore_flag: bool) -> str:
    """Halt classification for one reaction event. Call after promotion so a
    second occurrence already reads as characterised. A None match means no
    rule fired: with exploration off (or exploration that found nothing)
    the event is a failure."""
    if match is None:
        return "q_fail"
    status = db.rules.get(match.rule.id, match.rule).status
    return {"characterised": "q_out", "predicted": "q_uout", "novel": "q_nout"}[status]


def promote(db: RuleDatabase, rule_id: str) -> RuleDatabase:
    """Record one observed application. Copy-on-write: returns a new
    database; at the second occurrence a predicted/novel rule becomes
    characterised, with a provenance event either way."""
    rule = db.rules[rule_id]
    new_occ = rule.occurrences + 1
    status = rule.status
    event = {"event": "occurrence", "rule": rule_id, "occurrences": new_occ}
    if status in ("predicted", "novel") and new_occ >= PROMOTION_THRESHOLD:
        event = {"event": "promoted", "rule": rule_id, "occurrences": new_occ,
                 "from": status}
        status = "characterised"
    new_rule = replace(rule, occurrences=new_occ, status=status)
    rules = dict(db.rules)
    rules[rule_id] = new_rule
    return RuleDatabase(db.species, rules, db.latent, db.provenance + [event])


def explore(db: RuleDatabase, contents: dict[str, float],
            conditions: tuple[float, float], rng) -> TransitionRule | None:
    """Seeded draw of a latent rule consistent with the cell contents.

    Exploration models running an uncharacterised reaction anyway: any
    latent rule whose inputs are all present may reveal itself; the choice
    among several is a deterministic function of the rng stream.
    """
    candidates = [
        db.latent[k] for k in sorted(db.latent)
        if all(contents.get(s, 0.0) > PRESENCE_EPS for s in db.latent[k].reagent_pattern)
        and all(contents.get(c, 0.0) > PRESENCE_EPS for c in db.latent[k].catalysts)
    ]
    if not candidates:
        return None
    rule = candidates[rng.randrange(len(candidates))]
    return replace(rule, status="novel", occurrences=0)


def commit_discovery(db: RuleDatabase, rule: TransitionRule) -> RuleDatabase:
    """Move an explored rule into the visible database."""
    rules = dict(db.rules)
    rules[rule.id] = rule
    latent = {k: v for k, v in db.latent.items() if k != rule.id}
    event = {"event": "discovered", "rule": rule.id}
    return RuleDatabase(db.species, rules, latent, db.provenance + [event])


def apply_rule_events(db: RuleDatabase, events: list[dict]) -> RuleDatabase:
    """Replay a trace's rule events (discoveries and applications) onto a
    database; used to persist what a run learned."""
    for ev in events:
        if ev["kind"] == "discovered":
            if ev["rule_id"] not in db.rules:
                base = db.latent.get(ev["rule_id"])
                if base is None:
                    raise RuleLoadError(f"cannot replay discovery of {ev['rule_id']!r}")
                db = commit_discovery(db, replace(base, status="novel", occurrences=0))
        elif ev["kind"] == "applied":
            db = promote(db, ev["rule_id"])
        else:
            raise RuleLoadError(f"unknown rule event kind {ev.get('kind')!r}")
    return db


def perfect_copy_fraction(pathway: "Pathway") -> float:
    """Probability that one molecule comes through every step flawless."""
    out = 1.0
    for step in pathway.steps:
        out *= 1.0 - step.epsilon
    return out


# ---------------------------------------------------------------------------
# Planner

@dataclass(frozen=True)
class PathwayStep:
    rule_id: str
    inputs: dict[str, float]   # stock consumed by this step (catalysts included)
    extent: float              # planned reacted extent after yield
    epsilon: float


@dataclass(frozen=True)
class Pathway:
    target: str
    steps: tuple[PathwayStep, ...]

    def rule_ids(self) -> list[str]:
        return [s.rule_id for s in self.steps]

    def to_json(self) -> str:
        payload = {
            "target": self.target,
            "steps": [
                {
                    "rule_id": s.rule_id,
                    "inputs": {k: s.inputs[k] for k in sorted(s.inputs)},
                    "extent": s.extent,
                    "epsilon": s.epsilon,
                }
                for s in self.steps
            ],
        }
        return dumps_stable(payload, indent=2) + "\n"


def _applicable(rule: TransitionRule, available: frozenset[str]) -> bool:
    return (set(rule.reagent_pattern) <= available
            and set(rule.catalysts) <= available)


def plan_pathway(db: RuleDatabase, target: str, stock: set[str] | frozenset[str],
                 max_depth: int = 12) -> Pathway:
    """Minimal-length rule sequence making `target` from `stock`.

    Iterative deepening over rule applications, trying rules in id order at
    every position, so the first sequence found is the lexicographically
    smallest among those of minimal length. Raises `Unreachable` if no
    sequence within `max_depth` produces the target and `UnstableTarget`
    if the target species cannot be isolated.
    """
    if target not in db.species:
        raise KeyError(f"unknown species {target!r}")
    if not db.species[target].stable:
        raise UnstableTarget(target)
    stock = frozenset(stock)
    if target in stock:
        return Pathway(target, ())

    rule_ids = sorted(db.rules)
    for depth in range(1, max_depth + 1):
        dead: set[tuple[frozenset[str], int]] = set()

        def dfs(available: frozenset[str], remaining: int) -> list[str] | None:
            key = (available, remaining)
            if key in dead:
                return None
            for rid in rule_ids:
                rule = db.rules[rid]
                if not _applicable(rule, available):
                    continue
                new = available | set(rule.products)
                if new == available:
                    continue  # adds nothing; a minimal sequence never does this
                if target in new:
                    return [rid]
                if remaining > 1:
                    tail = dfs(new, remaining - 1)
                    if tail is not None:
                        return [rid] + tail
            dead.add(key)
            return None

        seq = dfs(stock, depth)
        if seq is not None:
            return _size_pathway(db, target, stock, seq)
    raise Unreachable(f"{target} not reachable from {sorted(stock)} within {max_depth} steps")


def _size_pathway(db: RuleDatabase, target: str, stock: frozenset[str],
                  seq: list[str], target_amount: float = 1.0) -> Pathway:
    """Backward pass: size each step's extent so later steps (and the final
    target demand) are covered through the declared yields."""
    need: dict[str, float] = {target: target_amount}
    extents: list[float] = [0.0] * len(seq)
    step_inputs: list[dict[str, float]] = [dict() for _ in seq]
    for i in range(len(seq) - 1, -1, -1):
        rule = db.rules[seq[i]]
        demanded = {p: need.pop(p) for p in rule.products if p in need}
        extent = 0.0
        for p, amt in demanded.items():
            extent = max(extent, amt / (rule.products[p] * rule.yield_fraction))
        if extent == 0.0:
            extent = target_amount  # defensive; minimal sequences always feed a need
        raw_extent = extent
        for s, ratio in rule.reagent_pattern.items():
            amount = ratio * raw_extent
            if s in stock:
                step_inputs[i][s] = step_inputs[i].get(s, 0.0) + amount
            else:
                need[s] = need.get(s, 0.0) + amount
        for c in rule.catalysts:
            step_inputs[i][c] = step_inputs[i].get(c, 0.0) + CATALYST_CHARGE_MOL
        extents[i] = raw_extent * rule.yield_fraction
    unmet = {s: amt for s, amt in need.items() if s not in stock and amt > PRESENCE_EPS}
    if unmet:
        raise Unreachable(f"sequence {seq} cannot source {sorted(unmet)}")
    steps = tuple(
        PathwayStep(seq[i], step_inputs[i], extents[i], db.rules[seq[i]].epsilon)
        for i in range(len(seq))
    )
    return Pathway(target, steps)


def pathway_to_program(pathway: Pathway, db: RuleDatabase, name: str | None = None):
    """Encode a pathway as a runnable program.

    Each step charges its stock inputs into the reactor RX1 and drives the
    rule at the midpoint of its process window. Selective moves happen on
    stations that can make them: after a step the whole reactor contents go
    to the filter F1, products that later steps consume are filtered off to
    storage S1 and the residue is washed to waste; a consuming step takes
    storage back in one transfer when it needs everything parked there, or
    picks species out via the chromatograph CH1 when it does not. The
    target is harvested on F1 by species, so the product vessel ends up
    pure.
    """
    from .chemlang import (
        ChemProgram, HardwareReq, OpKind, Quantity, ReagentDecl, UnitOperation,
    )

    def q(value: float, unit: str) -> Quantity:
        return Quantity(float(value), unit)

    prog_name = name or f"pathway_{pathway.target}"
    if not pathway.steps:
        # Target already in stock: dispense it straight through.
        decls = [ReagentDecl(pathway.target, pathway.target, q(1.0, "mol"), "R1")]
        steps = [
            UnitOperation(OpKind.ADD, {"vessel": "F1", "reagent": pathway.target,
                                       "reaction_step": 1}),
            UnitOperation(OpKind.FILTER, {"vessel": "F1", "species": pathway.target,
                                          "to": "product"}),
        ]
        return ChemProgram(prog_name, decls, [HardwareReq("F1", "filter")], steps,
                           {"target": pathway.target})

    # One flask per distinct stock species, R1, R2, ... in sorted order.
    totals: dict[str, float] = {}
    catalyst_only: set[str] = set()
    for step in pathway.steps:
        rule = db.rules[step.rule_id]
        for s, amt in step.inputs.items():
            totals[s] = totals.get(s, 0.0) + amt
            if s in rule.catalysts and s not in rule.reagent_pattern:
                catalyst_only.add(s)
    consumed_as_reagent = {
        s for step in pathway.steps
        for s in db.rules[step.rule_id].reagent_pattern if s in step.inputs
    }
    decls: list[ReagentDecl] = []
    for i, s in enumerate(sorted(totals), start=1):
        role = "catalyst" if s in catalyst_only and s not in consumed_as_reagent else "reagent"
        decls.append(ReagentDecl(s, s, q(totals[s], "mol"), f"R{i}", role))

    n_steps = len(pathway.steps)
    rules_seq = [db.rules[s.rule_id] for s in pathway.steps]
    # Non-stock inputs of each step come out of storage, where earlier
    # steps parked them.
    carried_in = [
        sorted(set(rules_seq[i].reagent_pattern) - set(pathway.steps[i].inputs))
        for i in range(n_steps)
    ]
    needed_later = [
        sorted({s for j in range(i + 1, n_steps) for s in carried_in[j]}
               & set(rules_seq[i].products))
        for i in range(n_steps)
    ]

    steps: list[UnitOperation] = []
    parked: set[str] = set()
    vessel_temp = 25.0
    for k, step in enumerate(pathway.steps, start=1):
        rule = rules_seq[k - 1]
        block_start = len(steps)
        carried = carried_in[k - 1]
        if carried:
            if set(carried) == parked:
                steps.append(UnitOperation(OpKind.TRANSFER, {
                    "from": "S1", "to": "RX1"}))
            else:
                # storage holds more than this step needs: pick species out
                # on the chromatograph and put the rest back
                steps.append(UnitOperation(OpKind.TRANSFER, {
                    "from": "S1", "to": "CH1"}))
                for s in carried:
                    steps.append(UnitOperation(OpKind.FILTER, {
                        "vessel": "CH1", "species": s, "to": "RX1"}))
                steps.append(UnitOperation(OpKind.TRANSFER, {
                    "from": "CH1", "to": "S1"}))
            parked -= set(carried)
        stock_inputs = sorted(step.inputs)
        for s in stock_inputs[:-1]:
            steps.append(UnitOperation(OpKind.ADD, {
                "vessel": "RX1", "reagent": s, "amount": q(step.inputs[s], "mol")}))
        temp, duration = rule.process_window.midpoint()
        # heating cannot cool: when the reactor is still hot from the last
        # block, the cold variants bring it down to the new setpoint
        if stock_inputs:
            react_kind = OpKind.REACT_HOT if temp >= vessel_temp else OpKind.REACT_COLD
            last = stock_inputs[-1]
            steps.append(UnitOperation(react_kind, {
                "vessel": "RX1", "reagent": last, "amount": q(step.inputs[last], "mol"),
                "temp": q(temp, "C"), "time": q(duration, "s")}))
        else:
            cond_kind = OpKind.HEAT_STIR if temp >= vessel_temp else OpKind.CHILL
            steps.append(UnitOperation(cond_kind, {
                "vessel": "RX1", "temp": q(temp, "C"), "time": q(duration, "s")}))
        vessel_temp = temp
        steps[block_start] = UnitOperation(
            steps[block_start].kind,
            {**steps[block_start].params, "reaction_step": k},
            steps[block_start].line,
        )
        steps.append(UnitOperation(OpKind.TRANSFER, {"from": "RX1", "to": "F1"}))
        if k < n_steps:
            for p in needed_later[k - 1]:
                steps.append(UnitOperation(OpKind.FILTER, {
                    "vessel": "F1", "species": p, "to": "S1"}))
            parked |= set(needed_later[k - 1])
        else:
            steps.append(UnitOperation(OpKind.FILTER, {
                "vessel": "F1", "species": pathway.target, "to": "product"}))
        steps.append(UnitOperation(OpKind.CLEAN, {"vessel": "F1"}))

    hardware = [HardwareReq("RX1", "reactor"), HardwareReq("F1", "filter")]
    mentioned = {v for op in steps for v in op.vessels()}
    if "S1" in mentioned:
        hardware.append(HardwareReq("S1", "storage"))
    if "CH1" in mentioned:
        hardware.append(HardwareReq("CH1", "chromatograph"))
    meta = {"target": pathway.target}
    return ChemProgram(prog_name, decls, hardware, steps, meta)
