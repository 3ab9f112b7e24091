"""Program generators: a fixed-template synthetic corpus for scaling
studies and a randomized generator for conservation property tests."""

from __future__ import annotations

import random

from .ast import ChemProgram, HardwareReq, OpKind, Quantity, ReagentDecl, UnitOperation

__all__ = ["synthetic_program", "random_program"]


def _q(value: float, unit: str) -> Quantity:
    return Quantity(float(value), unit)


# One repetition of the synthetic template; sliced/cycled to the requested
# per-step length so cumulative counts grow by exactly `ops_per_step`.
def _template_cycle() -> list[UnitOperation]:
    mk = UnitOperation
    return [
        mk(OpKind.ADD, {"vessel": "RX1", "reagent": "feed", "amount": _q(0.1, "mol")}),
        mk(OpKind.HEAT_STIR, {"vessel": "RX1", "temp": _q(40, "C"), "time": _q(300, "s")}),
        mk(OpKind.ADD, {"vessel": "RX1", "reagent": "act", "amount": _q(0.1, "mol")}),
        mk(OpKind.HEAT_STIR, {"vessel": "RX1", "temp": _q(60, "C"), "time": _q(300, "s")}),
        mk(OpKind.CHILL, {"vessel": "RX1", "temp": _q(20, "C"), "time": _q(300, "s")}),
        mk(OpKind.TRANSFER, {"from": "RX1", "to": "S1"}),
        mk(OpKind.TRANSFER, {"from": "S1", "to": "RX1"}),
        mk(OpKind.HEAT_STIR, {"vessel": "RX1", "temp": _q(50, "C"), "time": _q(300, "s")}),
        mk(OpKind.CHILL, {"vessel": "RX1", "temp": _q(15, "C"), "time": _q(300, "s")}),
        mk(OpKind.EVAPORATE, {"vessel": "RX1", "temp": _q(40, "C"), "time": _q(300, "s")}),
        mk(OpKind.HEAT_STIR, {"vessel": "RX1", "temp": _q(35, "C"), "time": _q(300, "s")}),
        mk(OpKind.CHILL, {"vessel": "RX1", "temp": _q(10, "C"), "time": _q(300, "s")}),
        mk(OpKind.TRANSFER, {"from": "RX1", "to": "S1"}),
        mk(OpKind.TRANSFER, {"from": "S1", "to": "RX1"}),
        mk(OpKind.CLEAN, {"vessel": "RX1"}),
    ]


def synthetic_program(reaction_steps: int, ops_per_step: int = 15) -> ChemProgram:
    """A program of `reaction_steps` stages, each exactly `ops_per_step`
    operations drawn from a fixed template, so the cumulative abstraction
    count after stage k is exactly k * ops_per_step."""
    if reaction_steps < 1 or ops_per_step < 1:
        raise ValueError("reaction_steps and ops_per_step must be >= 1")
    steps: list[UnitOperation] = []
    for stage in range(1, reaction_steps + 1):
        cycle = _template_cycle()
        for i in range(ops_per_step):
            op = cycle[i % len(cycle)]
            params = dict(op.params)
            if i == 0:
                params["reaction_step"] = stage
            steps.append(UnitOperation(op.kind, params))
    reagents = [
        ReagentDecl("feed", "feedstock", _q(1000, "mol"), "R1"),
        ReagentDecl("act", "activator", _q(1000, "mol"), "R2"),
    ]
    hardware = [HardwareReq("RX1", "reactor"), HardwareReq("S1", "storage")]
    return ChemProgram(f"synthetic_{reaction_steps}x{ops_per_step}", reagents, hardware, steps)


def random_program(rng: random.Random) -> ChemProgram:
    """A small random but well-formed program over the A/B/C species family.

    Used by conservation property tests: programs mix transfers, heating,
    separations and occasional reactions, all on vessels the default graph
    can host, so every generated program runs abstractly, compiles, and
    runs under error correction.
    """
    reagents = [
        ReagentDecl("a", "A", _q(1.0, "mol"), "R1"),
        ReagentDecl("b", "B", _q(1.0, "mol"), "R2"),
        ReagentDecl("c", "C", _q(1.0, "mol"), "R3"),
    ]
    steps: list[UnitOperation] = [
        UnitOperation(OpKind.ADD, {"vessel": "RX1", "reagent": "a",
                                   "amount": _q(round(rng.uniform(0.1, 0.9), 3), "mol")})
    ]
    n_more = rng.randint(2, 7)
    species_pool = ("a", "b", "c", "x", "t")
    for _ in range(n_more):
        pick = rng.randrange(8)
        if pick == 0:
            steps.append(UnitOperation(OpKind.ADD, {
                "vessel": "RX1", "reagent": rng.choice(("b", "c")),
                "amount": _q(round(rng.uniform(0.05, 0.5), 3), "mol")}))
        elif pick == 1:
            steps.append(UnitOperation(OpKind.HEAT_STIR, {
                "vessel": "RX1", "temp": _q(rng.randrange(30, 120, 10), "C"),
                "time": _q(rng.randrange(60, 600, 60), "s")}))
        elif pick == 2:
            steps.append(UnitOperation(OpKind.CHILL, {
                "vessel": "RX1", "temp": _q(rng.randrange(-20, 20, 5), "C"),
                "time": _q(rng.randrange(60, 600, 60), "s")}))
        elif pick == 3:
            steps.append(UnitOperation(OpKind.TRANSFER, {"from": "RX1", "to": "S1"}))
            steps.append(UnitOperation(OpKind.TRANSFER, {"from": "S1", "to": "RX1"}))
        elif pick == 4:
            # filtering needs the filter station, so route through F1
            steps.append(UnitOperation(OpKind.TRANSFER, {"from": "RX1", "to": "F1"}))
            steps.append(UnitOperation(OpKind.FILTER, {
                "vessel": "F1", "species": rng.choice(species_pool),
                "to": rng.choice(("S1", "waste"))}))
            steps.append(UnitOperation(OpKind.TRANSFER, {"from": "F1", "to": "RX1"}))
        elif pick == 5:
            # within r1's window often enough to exercise transitions
            steps.append(UnitOperation(OpKind.REACT_HOT, {
                "vessel": "RX1", "reagent": "b",
                "amount": _q(round(rng.uniform(0.05, 0.5), 3), "mol"),
                "temp": _q(80, "C"), "time": _q(600, "s")}))
        elif pick == 6:
            steps.append(UnitOperation(OpKind.EVAPORATE, {
                "vessel": "RX1", "temp": _q(50, "C"), "time": _q(300, "s")}))
        else:
            steps.append(UnitOperation(OpKind.CLEAN, {"vessel": "RX1"}))
    steps.append(UnitOperation(OpKind.TRANSFER, {"from": "RX1", "to": "product"}))
    hardware = [HardwareReq("RX1", "reactor"), HardwareReq("S1", "storage"),
                HardwareReq("F1", "filter")]
    name = f"random_{rng.randrange(1 << 30)}"
    return ChemProgram(name, reagents, hardware, steps)
