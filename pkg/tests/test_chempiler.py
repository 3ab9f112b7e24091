"""Hardware graphs, routing, compilation findings, stroked transfers,
runtime capacity enforcement, and the lowering view."""

import itertools
import json

import pytest

from chemvm.chemlang import parse_program
from chemvm.chempiler import (
    FLOW_KINDS,
    GraphError,
    RouteError,
    build_default_graph,
    chempile,
    execute_plan,
    graph_to_json,
    loads_graph,
    lowering_view,
    route,
    validate_graph,
)
from chemvm.cstm import run
from chemvm.rules import load_rules, loads_rules, plan_pathway

from _support import FIXTURES, fixture_text

CAPACITIES = {
    "SOLV": 1000.0, "R1": 500.0, "R2": 500.0, "R3": 500.0, "R4": 500.0,
    "V1": None, "V2": None, "V3": None, "P1": 25.0,
    "RX1": 250.0, "SEP1": 200.0, "RV1": 250.0, "F1": 100.0, "CH1": 100.0,
    "S1": 500.0, "W": 5000.0, "OUT": 500.0,
}


def _simple_graph(extra_nodes=(), edges=None):
    nodes = [
        {"id": "R1", "kind": "ReagentFlask", "capacity": 500.0},
        {"id": "V1", "kind": "Valve", "ports": 8},
        {"id": "RX1", "kind": "Reactor",
         "capabilities": ["react_hot", "heat_stir"], "capacity": 250.0},
        {"id": "W", "kind": "Waste", "capacity": 5000.0},
        {"id": "OUT", "kind": "Product", "capacity": 500.0},
    ] + list(extra_nodes)
    if edges is None:
        edges = [["R1", "V1"], ["V1", "RX1"], ["RX1", "V1"],
                 ["V1", "W"], ["V1", "OUT"]]
    return loads_graph(json.dumps({"nodes": nodes, "edges": edges}))


def test_default_graph_shape(default_graph):
    assert validate_graph(default_graph).ok
    assert {n: node.capacity for n, node in default_graph.nodes.items()} == CAPACITIES
    assert default_graph.nodes["RX1"].kind == "Reactor"
    assert "react_hot" in default_graph.nodes["RX1"].capabilities
    assert default_graph.nodes["P1"].kind == "Pump"


def test_default_graph_matches_fixture(default_graph):
    assert graph_to_json(default_graph) == fixture_text("default_rig.graph")


def test_graph_json_roundtrip(default_graph):
    text = graph_to_json(default_graph)
    assert graph_to_json(loads_graph(text)) == text


def test_graph_rejects_dangling_edge():
    doc = {"nodes": [{"id": "A", "kind": "Reactor"}], "edges": [["A", "B"]]}
    with pytest.raises(GraphError, match=r"edge \('A', 'B'\) references unknown node"):
        loads_graph(json.dumps(doc))


def test_pinned_route(default_graph):
    assert route(default_graph, "R1", "RX1") == ["R1", "V1", "P1", "V2", "RX1"]


def test_route_errors(default_graph):
    with pytest.raises(ValueError):
        route(default_graph, "RX1", "RX1")
    with pytest.raises(RouteError):
        route(default_graph, "R1", "XX9")
    cut = _simple_graph(edges=[["R1", "V1"], ["V1", "RX1"], ["V1", "W"]])
    with pytest.raises(RouteError):
        route(cut, "RX1", "W")


def test_route_interiors_are_flow_hardware(default_graph):
    stations = [n for n, node in default_graph.nodes.items()
                if node.kind not in FLOW_KINDS]
    for src, dst in itertools.permutations(stations, 2):
        try:
            path = route(default_graph, src, dst)
        except RouteError:
            continue
        for interior in path[1:-1]:
            assert default_graph.nodes[interior].kind in FLOW_KINDS


def test_compile_tiny(default_graph):
    prog = parse_program(fixture_text("tiny.chem"))
    plan = chempile(prog, default_graph)
    assert plan.feasible
    assert plan.bindings == {"waste": "W", "product": "OUT", "R1": "R1",
                             "R2": "R2", "RX1": "RX1", "F1": "F1"}
    assert plan.routes["R1->RX1"] == ["R1", "V1", "P1", "V2", "RX1"]
    assert plan.allocations == {1: ["RX1", "F1", "OUT"]}
    parsed = json.loads(plan.to_json())
    assert sorted(parsed) == ["allocations", "bindings", "cleaning",
                              "feasible", "findings", "routes", "source"]


def _finding_codes(plan):
    return [f.code for f in plan.report.findings]


def test_finding_vessel_class_exhausted(default_graph):
    decls = "".join(f"    r{i}: sp:r{i} 1 mol @RF{i} reagent\n" for i in range(1, 6))
    prog = parse_program(
        'procedure "x" {\n  reagents {\n' + decls + '  }\n'
        '  steps {\n    add(vessel=RX1, reagent=r1, amount=1 mol)\n  }\n}\n')
    plan = chempile(prog, default_graph)
    assert not plan.feasible
    assert "vessel_class_exhausted" in _finding_codes(plan)


def test_finding_missing_capability_and_no_route():
    g = _simple_graph()
    prog = parse_program(
        'procedure "x" {\n  steps {\n'
        '    sublime(vessel=RV1, species=a, to=F1, temp=120 C, cool_to=20 C)\n'
        '  }\n}\n')
    plan = chempile(prog, g)
    assert not plan.feasible
    assert "missing_capability" in _finding_codes(plan)


def test_finding_no_route():
    cut = _simple_graph(edges=[["R1", "V1"], ["V1", "RX1"],
                               ["RX1", "V1"], ["V1", "W"]])
    prog = parse_program(
        'procedure "x" {\n  reagents {\n    a: sp:a 1 mol @R1 reagent\n  }\n'
        '  steps {\n    add(vessel=RX1, reagent=a, amount=1 mol)\n'
        '    transfer(from=RX1, to=product)\n  }\n}\n')
    plan = chempile(prog, cut)
    assert not plan.feasible
    assert _finding_codes(plan) == ["no_route"]


def test_finding_static_capacity(default_graph):
    prog = parse_program(
        'procedure "x" {\n  reagents {\n    a: sp:a 600 mol @R1 reagent\n  }\n'
        '  steps {\n    add(vessel=RX1, reagent=a, amount=600 mol)\n  }\n}\n')
    plan = chempile(prog, default_graph)
    assert not plan.feasible
    assert _finding_codes(plan) == ["capacity_exceeded"]
    assert "R1 charged with 600" in plan.report.findings[0].message


def test_finding_no_reservoir():
    g = _simple_graph()
    prog = parse_program(
        'procedure "x" {\n  steps {\n'
        '    heat_stir(vessel=RX1, temp=60 C, time=600 s)\n'
        '    clean(vessel=RX1)\n  }\n}\n')
    plan = chempile(prog, g)
    assert not plan.feasible
    assert "no_reservoir" in _finding_codes(plan)


_MONO_DB = loads_rules(json.dumps({
    "species": [{"id": "a", "name": "a", "molar_mass": 10.0,
                 "element_counts": {"C": 1}}],
    "rules": [],
}))


def test_transfer_is_stroked_by_pump_capacity(default_graph):
    prog = parse_program(
        'procedure "x" {\n  reagents {\n    a: sp:a 60 mol @R1 reagent\n  }\n'
        '  hardware {\n    RX1: reactor\n  }\n'
        '  steps {\n    add(vessel=RX1, reagent=a, amount=60 mol)\n  }\n}\n')
    plan = chempile(prog, default_graph)
    trace = execute_plan(plan, _MONO_DB, seed=0)
    assert trace.halt == "q_out"
    moves = [r for r in trace.records
             if r.get("kind") == "transfer" and r["op_index"] == 0]
    assert [m["stroke"] for m in moves] == [1, 2, 3]
    assert all(m["strokes"] == 3 for m in moves)
    assert all(m["route"] == ["R1", "V1", "P1", "V2", "RX1"] for m in moves)
    assert sum(m["moved"] for m in moves) == pytest.approx(60.0)
    assert all(m["total"] == pytest.approx(60.0) for m in moves)


def test_runtime_capacity_enforced(default_graph):
    prog = parse_program(
        'procedure "x" {\n  reagents {\n    a: sp:a 120 mol @R1 reagent\n  }\n'
        '  hardware {\n    RX1: reactor\n  }\n'
        '  steps {\n    add(vessel=RX1, reagent=a, amount=120 mol)\n'
        '    transfer(from=RX1, to=F1)\n  }\n}\n')
    plan = chempile(prog, default_graph)
    assert plan.feasible  # static screen sees only declared flask charges
    trace = execute_plan(plan, _MONO_DB, seed=0)
    assert trace.halt == "q_fail"
    assert trace.records[-1]["reason"] == "F1 overfilled: 120 over capacity 100"
    deviations = [r for r in trace.records if r.get("kind") == "deviation"]
    assert deviations == [{
        "kind": "deviation", "code": "capacity_exceeded", "step": 3,
        "op_index": 1, "cell": "F1", "held": 120.0, "capacity": 100.0,
    }]


def test_cleaning_schedule(default_graph):
    plan = chempile(parse_program(fixture_text("alkynol_1step.chem")), default_graph)
    assert plan.cleaning == [
        {"op_index": 6, "vessel": "SEP1"},
        {"op_index": 10, "vessel": "RV1"},
        {"op_index": 12, "vessel": "F1"},
    ]


@pytest.mark.parametrize("prog_name, rules_name", [
    ("tiny.chem", "tiny.rules"),
    ("atropine_3step.chem", "default.rules"),
])
def test_lowering_matches_abstract_run(default_graph, prog_name, rules_name):
    prog = parse_program(fixture_text(prog_name))
    db = load_rules(FIXTURES / rules_name)
    abstract = run(prog, db, seed=0)
    plan = chempile(prog, default_graph)
    assert plan.feasible
    lowered = execute_plan(plan, db, seed=0)
    assert lowered.halt == abstract.halt
    assert lowering_view(lowered, plan.bindings) == lowering_view(abstract)
    assert lowered.ledger.residual <= 1e-9


def test_compile_pathway_requires_db(default_graph):
    db = load_rules(FIXTURES / "default.rules")
    pathway = plan_pathway(db, "atr", {"tro", "pha", "fml", "hyd"})
    with pytest.raises(ValueError):
        chempile(pathway, default_graph)
    plan = chempile(pathway, default_graph, db)
    assert plan.feasible
    trace = execute_plan(plan, db, seed=0)
    assert trace.halt == "q_out"
    assert trace.ledger.product_by_species.get("atr", 0.0) > 0.0
