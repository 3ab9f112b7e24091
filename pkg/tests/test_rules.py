"""Rule database: schema validation, matching, promotion, discovery,
event replay, and the backward-chaining planner."""

import json

import pytest

from chemvm.chemlang import parse_program
from chemvm.cstm import run
from chemvm.rules import (
    RuleLoadError,
    Unreachable,
    UnstableTarget,
    apply_rule_events,
    classify_outcome,
    commit_discovery,
    explore,
    load_rules,
    loads_rules,
    match_rule,
    pathway_to_program,
    perfect_copy_fraction,
    plan_pathway,
    promote,
    save_rules,
)

from _support import FIXTURES

import random


def _db_text(species=(), rules=(), latent=()):
    doc = {"species": list(species), "rules": list(rules)}
    if latent:
        doc["latent"] = list(latent)
    return json.dumps(doc)


def _sp(sid, elements, **extra):
    return {"id": sid, "name": sid, "molar_mass": 10.0,
            "element_counts": elements, **extra}


def _rule(rid, inputs, products, **extra):
    base = {
        "id": rid,
        "reagent_pattern": inputs,
        "process_window": {"temp_min": 0.0, "temp_max": 100.0,
                           "duration_min": 60.0, "duration_max": 7200.0},
        "products": products,
        "yield": 0.9,
        "epsilon": 0.05,
        "status": "characterised",
    }
    base.update(extra)
    return base


def test_load_save_roundtrip(tmp_path):
    db = load_rules(FIXTURES / "default.rules")
    out = tmp_path / "copy.rules"
    save_rules(db, out)
    text = out.read_text()
    save_rules(load_rules(out), out)
    assert out.read_text() == text
    db2 = load_rules(out)
    assert set(db2.rules) == set(db.rules)
    assert set(db2.species) == set(db.species)


def test_duplicate_rule_id_rejected():
    text = _db_text(
        [_sp("a", {"C": 1}), _sp("b", {"C": 1})],
        [_rule("r", {"a": 1}, {"b": 1}), _rule("r", {"b": 1}, {"a": 1})],
    )
    with pytest.raises(RuleLoadError, match="duplicate rule id 'r'"):
        loads_rules(text)


def test_element_imbalance_rejected():
    text = _db_text(
        [_sp("a", {"C": 1}), _sp("b", {"C": 2})],
        [_rule("r", {"a": 1}, {"b": 1})],
    )
    with pytest.raises(RuleLoadError,
                       match="products contain more 'C' \\(2\\) than inputs supply \\(1\\)"):
        loads_rules(text)


def test_surplus_inputs_become_byproduct():
    text = _db_text(
        [_sp("a", {"C": 2, "H": 2}), _sp("b", {"C": 2})],
        [_rule("r", {"a": 1}, {"b": 1})],
    )
    db = loads_rules(text)
    assert db.rules["r"].byproduct_elements == {"H": 2}


def test_assembly_index_must_fit_bond_bounds():
    bad = _db_text([_sp("a", {"C": 9}, assembly_index=9, bonds=8)])
    with pytest.raises(RuleLoadError, match="assembly"):
        loads_rules(bad)
    low = _db_text([_sp("a", {"C": 9}, assembly_index=2, bonds=8)])
    with pytest.raises(RuleLoadError, match="assembly"):
        loads_rules(low)
    ok = _db_text([_sp("a", {"C": 9}, assembly_index=3, bonds=8)])
    assert loads_rules(ok).species["a"].assembly_index == 3


def test_missing_fields_reported():
    with pytest.raises(RuleLoadError, match="element_counts"):
        loads_rules(json.dumps({
            "species": [{"id": "a", "name": "a", "molar_mass": 1.0}],
            "rules": [],
        }))


@pytest.fixture(scope="module")
def default_db():
    return load_rules(FIXTURES / "default.rules")


def test_match_window_boundaries_inclusive(default_db):
    have = {"tro": 1.0, "pha": 1.0}
    assert match_rule(default_db, have, (100.0, 1800.0)).rule.id == "r_est"
    assert match_rule(default_db, have, (140.0, 7200.0)).rule.id == "r_est"
    assert match_rule(default_db, have, (99.99, 3600.0)) is None
    assert match_rule(default_db, have, (140.01, 3600.0)) is None


def test_match_extent_and_limiting(default_db):
    m = match_rule(default_db, {"tro": 2.0, "pha": 0.5}, (120.0, 3600.0))
    assert m.extent == pytest.approx(0.5)
    assert m.limiting == "pha"


def test_match_priority_then_id_tiebreak():
    species = [_sp(s, {"C": 1}) for s in ("a", "b", "c")]
    rules = [
        _rule("r_b", {"a": 1}, {"b": 1}),
        _rule("r_a", {"a": 1}, {"c": 1}),
        _rule("r_hot", {"a": 1}, {"b": 1}, priority=5),
    ]
    db = loads_rules(_db_text(species, rules))
    m = match_rule(db, {"a": 1.0}, (50.0, 600.0))
    assert m.rule.id == "r_hot"
    db2 = loads_rules(_db_text(species, rules[:2]))
    assert match_rule(db2, {"a": 1.0}, (50.0, 600.0)).rule.id == "r_a"


def test_match_requires_catalyst_presence():
    species = [_sp(s, {"C": 1}) for s in ("a", "b", "k")]
    rules = [_rule("r", {"a": 1}, {"b": 1}, catalysts=["k"])]
    db = loads_rules(_db_text(species, rules))
    assert match_rule(db, {"a": 1.0}, (50.0, 600.0)) is None
    assert match_rule(db, {"a": 1.0, "k": 0.05}, (50.0, 600.0)).rule.id == "r"


def test_classify_outcome_by_status(default_db):
    m = match_rule(default_db, {"tro": 1.0, "pha": 1.0}, (120.0, 3600.0))
    assert classify_outcome(m, default_db, False) == "q_out"
    assert classify_outcome(None, default_db, False) == "q_fail"
    assert classify_outcome(None, default_db, True) == "q_fail"
    pdb = load_rules(FIXTURES / "predicted.rules")
    pm = match_rule(pdb, {"p": 1.0, "q": 1.0}, (70.0, 2700.0))
    assert classify_outcome(pm, pdb, False) == "q_uout"


def test_promote_twice_characterises():
    db = load_rules(FIXTURES / "predicted.rules")
    db1 = promote(db, "rp")
    assert (db1.rules["rp"].occurrences, db1.rules["rp"].status) == (1, "predicted")
    db2 = promote(db1, "rp")
    assert (db2.rules["rp"].occurrences, db2.rules["rp"].status) == (2, "characterised")
    # original copy untouched
    assert db.rules["rp"].occurrences == 0


def test_explore_and_commit_discovery():
    db = load_rules(FIXTURES / "explore.rules")
    assert db.latent and not db.rules
    cand = explore(db, {"e1": 1.0, "e2": 1.0}, (60.0, 2700.0), random.Random(0))
    assert (cand.id, cand.status, cand.occurrences) == ("le", "novel", 0)
    assert explore(db, {"e1": 1.0}, (60.0, 2700.0), random.Random(0)) is None
    db2 = commit_discovery(db, cand)
    assert "le" in db2.rules and not db2.latent


def test_apply_rule_events_replays_history():
    db = load_rules(FIXTURES / "explore.rules")
    events = [
        {"kind": "discovered", "rule_id": "le"},
        {"kind": "applied", "rule_id": "le", "occurrences": 1,
         "status_after": "novel"},
    ]
    db2 = apply_rule_events(db, events)
    assert (db2.rules["le"].occurrences, db2.rules["le"].status) == (1, "novel")


def test_plan_three_step_pathway(default_db):
    pw = plan_pathway(default_db, "atr", {"tro", "pha", "fml", "hyd"})
    assert [s.rule_id for s in pw.steps] == ["r_est", "r_man", "r_red"]
    assert pw.steps[-1].extent == pytest.approx(1.0)
    assert pw.steps[1].extent == pytest.approx(1.0 / 0.92)
    assert pw.steps[0].extent == pytest.approx(1.0 / 0.92 / 0.90)
    assert perfect_copy_fraction(pw) == pytest.approx(0.96 * 0.95 * 0.97)


def test_plan_single_step_and_in_stock(default_db):
    pw = plan_pathway(default_db, "ind", {"anl", "pyv"})
    assert [s.rule_id for s in pw.steps] == ["r_ind"]
    assert plan_pathway(default_db, "tro", {"tro"}).steps == ()


def test_plan_errors(default_db):
    with pytest.raises(KeyError, match="unknown species 'nope'"):
        plan_pathway(default_db, "nope", {"tro"})
    with pytest.raises(Unreachable):
        plan_pathway(default_db, "atr", {"tro"}, max_depth=2)
    unstable = loads_rules(_db_text([_sp("u", {"C": 1}, stable=False)]))
    with pytest.raises(UnstableTarget):
        plan_pathway(unstable, "u", set())


def test_pathway_program_executes(default_db):
    pw = plan_pathway(default_db, "atr", {"tro", "pha", "fml", "hyd"})
    prog = pathway_to_program(pw, default_db)
    tr = run(prog, default_db, seed=0)
    assert tr.halt == "q_out"
    assert tr.ledger.product_by_species.get("atr", 0.0) > 0.0
    assert tr.ledger.residual <= 1e-9


def test_pathway_program_for_stocked_target(default_db):
    pw = plan_pathway(default_db, "tro", {"tro"})
    prog = pathway_to_program(pw, default_db)
    tr = run(prog, default_db, seed=0)
    assert tr.halt == "q_out"
    assert tr.ledger.product_by_species.get("tro", 0.0) > 0.0
