"""Closed-loop error detection and correction around the machine.

Process errors are modelled at reaction time by an injector: with
probability epsilon an application misfires, losing 10% (minor), 25%
(intermediate) or all (major) of its expected extent. After every
reaction a sensor reads the achieved/expected yield ratio with Gaussian
noise; the relative gap is classified against the policy thresholds and
answered in kind:

    minor         tune: nudge the temperature toward the process window
                  midpoint and drive the reaction to completion
    intermediate  redose a fraction of the original charge and hold the
                  conditions again (bounded by max_redoses, then escalate)
    major         discard the workspace, restore the last validated
                  checkpoint, and re-run from there (bounded by
                  max_reverts, then q_fail)

A checkpoint is taken after every operation whose reactions all validated.
Reverting dumps the contaminated holdings to waste and re-credits the
restored inventory as fresh stock, so mass conservation holds across
timelines; re-execution draws fresh injector outcomes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .chemlang import ChemProgram
from .cstm import (
    DEFAULT_BUDGET, ExecutionTrace, Machine, MachineError, Primitive,
    apply_primitive, expand_unit_op,
)
from .rng import substream
from .rules import RuleDatabase

__all__ = [
    "CorrectionPolicy",
    "PolicyError",
    "load_policy",
    "loads_policy",
    "BernoulliInjector",
    "ScriptedInjector",
    "MODE_FACTORS",
    "Deviation",
    "sample_sensor",
    "classify_severity",
    "detect_deviation",
    "DecResult",
    "run_with_dec",
    "sign_test",
    "evaluate_correction",
]

# Yield factor that survives each injected error mode.
MODE_FACTORS = {"minor": 0.9, "intermediate": 0.75, "major": 0.0}
# Mode split within an error: 25% minor, 30% intermediate, 45% major.
_MODE_CUTS = ((0.25, "minor"), (0.55, "intermediate"), (1.0, "major"))


class PolicyError(Exception):
    pass


@dataclass(frozen=True)
class CorrectionPolicy:
    minor_threshold: float = 0.05
    intermediate_threshold: float = 0.15
    major_threshold: float = 0.35
    max_redoses: int = 3
    max_reverts: int = 3
    tune_temp_delta_c: float = 10.0
    redose_fraction: float = 0.5
    sensor_noise_sd: float = 0.005

    def __post_init__(self) -> None:
        if not (0.0 < self.minor_threshold < self.intermediate_threshold
                < self.major_threshold):
            raise PolicyError(
                "thresholds must satisfy 0 < minor < intermediate < major, got "
                f"{self.minor_threshold} / {self.intermediate_threshold} / "
                f"{self.major_threshold}")
        if not (0.0 < self.redose_fraction <= 1.0):
            raise PolicyError("redose_fraction must lie in (0, 1]")
        if self.max_redoses < 0 or self.max_reverts < 0:
            raise PolicyError("attempt bounds must be non-negative")
        if self.sensor_noise_sd < 0:
            raise PolicyError("sensor_noise_sd must be non-negative")
        if self.tune_temp_delta_c < 0:
            raise PolicyError("tune_temp_delta_c must be non-negative")


_POLICY_FIELDS = {
    "minor_threshold", "intermediate_threshold", "major_threshold",
    "max_redoses", "max_reverts", "tune_temp_delta_c", "redose_fraction",
    "sensor_noise_sd",
}


def loads_policy(text: str, where: str = "<string>") -> CorrectionPolicy:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PolicyError(f"{where}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise PolicyError(f"{where}: policy must be an object")
    unknown = set(doc) - _POLICY_FIELDS
    if unknown:
        raise PolicyError(f"{where}: unknown field(s) {sorted(unknown)}")
    try:
        return CorrectionPolicy(**doc)
    except TypeError as exc:
        raise PolicyError(f"{where}: {exc}") from exc


def load_policy(path: str | Path) -> CorrectionPolicy:
    path = Path(path)
    return loads_policy(path.read_text(encoding="utf-8"), where=str(path))


# ---------------------------------------------------------------------------
# Error injection and sensing

class BernoulliInjector:
    """Per-reaction-attempt error model. With `eps` (or, when eps is None,
    the rule's own epsilon) an attempt misfires; the mode split is fixed."""

    def __init__(self, rng, eps: float | None = None):
        self.rng = rng
        self.eps = eps

    def sample(self, rule) -> tuple[float, str | None]:
        eps = rule.epsilon if self.eps is None else self.eps
        if self.rng.random() >= eps:
            return 1.0, None
        w = self.rng.random()
        for cut, mode in _MODE_CUTS:
            if w < cut:
                return MODE_FACTORS[mode], mode
        return MODE_FACTORS["major"], "major"


class ScriptedInjector:
    """Deterministic sequence of outcomes (None or a mode name); perfect
    once the script runs out."""

    def __init__(self, modes):
        self.modes = list(modes)
        self._i = 0

    def sample(self, rule) -> tuple[float, str | None]:
        if self._i >= len(self.modes):
            return 1.0, None
        mode = self.modes[self._i]
        self._i += 1
        if mode is None:
            return 1.0, None
        return MODE_FACTORS[mode], mode


def sample_sensor(event: dict, rng, noise_sd: float) -> float:
    """Achieved/expected yield ratio for a reaction event, with noise."""
    expected = event.get("expected_yield") or 1.0
    achieved = event.get("achieved_yield", 0.0)
    return achieved / expected + (rng.gauss(0.0, noise_sd) if noise_sd else 0.0)


@dataclass(frozen=True)
class Deviation:
    gap: float          # relative shortfall, 0 = nominal
    severity: str       # minor | intermediate | major


def classify_severity(gap: float, policy: CorrectionPolicy) -> str | None:
    if gap < policy.minor_threshold:
        return None
    if gap < policy.intermediate_threshold:
        return "minor"
    if gap < policy.major_threshold:
        return "intermediate"
    return "major"


def detect_deviation(reading: float, policy: CorrectionPolicy) -> Deviation | None:
    gap = max(0.0, 1.0 - reading)
    severity = classify_severity(gap, policy)
    if severity is None:
        return None
    return Deviation(gap, severity)


# ---------------------------------------------------------------------------
# Corrections

def _tune(machine: Machine, event: dict, policy: CorrectionPolicy) -> dict:
    """Minor shortfall: nudge temperature toward the window midpoint and
    convert the missing extent at the declared yield."""
    state = machine.state
    cell = state.cells[state.index[event["cell"]]]
    rule = machine.db.rules[event["rule"]]
    mid = (rule.process_window.temp_min + rule.process_window.temp_max) / 2.0
    delta = max(-policy.tune_temp_delta_c,
                min(policy.tune_temp_delta_c, mid - cell.temp))
    if delta > 0:
        cell.temp += delta
        cell.energy_in += delta
    elif delta < 0:
        cell.temp += delta
        cell.energy_out += -delta

    want = rule.yield_fraction * event["extent_max"] - event["extent"]
    headroom = min(
        (cell.contents.get(s, 0.0) / ratio
         for s, ratio in rule.reagent_pattern.items()),
        default=0.0,
    )
    extra = max(0.0, min(want, headroom))
    for s in sorted(rule.reagent_pattern):
        take = rule.reagent_pattern[s] * extra
        left = cell.contents.get(s, 0.0) - take
        if left == 0.0:
            cell.contents.pop(s, None)
        else:
            cell.contents[s] = left
        if take:
            state.consumed[s] = state.consumed.get(s, 0.0) + take
    for s in sorted(rule.products):
        out = rule.products[s] * extra
        if out:
            cell.contents[s] = cell.contents.get(s, 0.0) + out
            state.produced[s] = state.produced.get(s, 0.0) + out
    bp = rule.byproduct_species
    if bp is not None and extra:
        state.produced[bp] = state.produced.get(bp, 0.0) + extra
        state.waste_cell.contents[bp] = state.waste_cell.contents.get(bp, 0.0) + extra
    for c in rule.catalysts:
        state.consumed[c] = state.consumed.get(c, 0.0) + extra
        state.produced[c] = state.produced.get(c, 0.0) + extra
    return {
        "kind": "action",
        "action": "tune",
        "op_index": event["op_index"],
        "rule": rule.id,
        "temp_delta": delta,
        "extent_added": extra,
        "cell": cell.name,
        "temp": cell.temp,
    }


def _redose_retrigger(machine: Machine, op, op_index: int,
                      policy: CorrectionPolicy) -> dict | None:
    """Intermediate shortfall: charge a fraction of the original dose and
    hold the conditions again. Returns the retriggered reaction event, or
    None when no redose is possible (missing reagent or empty flask)."""
    reagent = op.params.get("reagent")
    if not isinstance(reagent, str):
        return None
    decl = machine.decls.get(reagent)
    if decl is None:
        return None
    flask = machine.state.cell_named(decl.source_vessel)
    avail = flask.contents.get(decl.species, 0.0)
    amount = op.params.get("amount")
    base = amount.value if amount is not None else avail
    want = policy.redose_fraction * base
    take = min(want, avail)
    if take <= 1e-12:
        return None
    prims = expand_unit_op(op, op_index)
    energy = [p for p in prims if p.check_reaction]
    if not energy:
        return None
    eprim = energy[-1]
    redose = Primitive("AM", eprim.cell, op_index, op.kind,
                       source=("reagent", reagent), amount=take)
    machine.emit(apply_primitive(machine.state, redose, machine.decls))
    machine.emit(apply_primitive(machine.state, eprim, machine.decls))
    return machine.check_reaction(eprim)


# ---------------------------------------------------------------------------
# The loop

@dataclass
class DecResult:
    trace: ExecutionTrace
    halt: str
    product_total: float
    sensings: list[dict] = field(default_factory=list)
    deviations: list[dict] = field(default_factory=list)
    actions: list[dict] = field(default_factory=list)
    redoses: int = 0
    reverts: int = 0
    corrections_enabled: bool = True

    @property
    def success(self) -> bool:
        return self.halt == "q_out" and self.product_total > 0.0

    def summary(self) -> dict:
        return {
            "halt": self.halt,
            "success": self.success,
            "product_total": self.product_total,
            "sensings": len(self.sensings),
            "deviations": len(self.deviations),
            "actions": len(self.actions),
            "redoses": self.redoses,
            "reverts": self.reverts,
            "corrections_enabled": self.corrections_enabled,
        }


def run_with_dec(prog: ChemProgram, db: RuleDatabase, *,
                 policy: CorrectionPolicy | None = None, seed: int = 0,
                 eps: float | None = None, corrections_enabled: bool = True,
                 budget: int = DEFAULT_BUDGET, explore: bool = False,
                 injector=None) -> DecResult:
    """Execute a program under sensing and (optionally) correction.

    `eps` overrides every rule's epsilon for error injection; None uses the
    per-rule values. With corrections disabled the sensors still read and
    record, but nothing is done about deviations: that is the baseline arm
    of any comparison.
    """
    policy = policy or CorrectionPolicy()
    if injector is None:
        injector = BernoulliInjector(substream(seed, "inject"), eps)
    sense_rng = substream(seed, "sense")
    machine = Machine(prog, db, seed=seed, explore=explore, budget=budget,
                      injector=injector)
    result = DecResult(trace=None, halt="", product_total=0.0,
                       corrections_enabled=corrections_enabled)

    checkpoint = machine.checkpoint()
    machine.emit({"kind": "checkpoint", "op_index": -1, "pc": 0,
                  "step": machine.state.step_count})

    def handle_event(event: dict, op, op_index: int) -> str:
        """Sense one reaction event and correct until validated.
        Returns "ok", "reverted" or "failed"."""
        while True:
            if event.get("outcome") == "q_fail":
                return "failed"
            reading = sample_sensor(event, sense_rng, policy.sensor_noise_sd)
            sensing = {
                "kind": "sensing",
                "op_index": op_index,
                "rule": event.get("rule"),
                "reading": reading,
                "step": machine.state.step_count,
            }
            machine.emit(sensing)
            result.sensings.append(sensing)
            if not corrections_enabled:
                return "ok"
            deviation = detect_deviation(reading, policy)
            if deviation is None:
                return "ok"
            dev_record = {
                "kind": "deviation",
                "op_index": op_index,
                "rule": event.get("rule"),
                "gap": deviation.gap,
                "severity": deviation.severity,
                "step": machine.state.step_count,
            }
            machine.emit(dev_record)
            result.deviations.append(dev_record)

            if deviation.severity == "minor":
                action = _tune(machine, event, policy)
                machine.emit(action)
                result.actions.append(action)
                return "ok"

            if deviation.severity == "intermediate" \
                    and result.redoses < policy.max_redoses:
                result.redoses += 1
                action = {
                    "kind": "action",
                    "action": "redose_extend",
                    "op_index": op_index,
                    "rule": event.get("rule"),
                    "step": machine.state.step_count,
                }
                machine.emit(action)
                result.actions.append(action)
                retried = _redose_retrigger(machine, op, op_index, policy)
                if retried is None:
                    if machine.halted:
                        return "failed"
                    # nothing left to redose with; escalate below
                else:
                    event = retried
                    continue

            # major, or an intermediate with no redose budget left
            if result.reverts < policy.max_reverts:
                result.reverts += 1
                action = {
                    "kind": "action",
                    "action": "revert_replan",
                    "op_index": op_index,
                    "rule": event.get("rule"),
                    "step": machine.state.step_count,
                }
                machine.emit(action)
                result.actions.append(action)
                machine.restore(checkpoint)
                machine.emit({
                    "kind": "revert",
                    "op_index": op_index,
                    "to_pc": machine.pc,
                    "count": result.reverts,
                    "step": machine.state.step_count,
                })
                return "reverted"

            machine.halted = "q_fail"
            machine.halt_reason = "revert budget exhausted"
            return "failed"

    try:
        while machine.pc < len(prog.steps) and not machine.halted:
            op_index = machine.pc
            op = prog.steps[op_index]
            events = machine.execute_op(op_index)
            status = "ok"
            for event in events:
                status = handle_event(event, op, op_index)
                if status != "ok":
                    break
            if machine.halted or status == "failed":
                break
            if status == "reverted":
                continue
            if events and corrections_enabled:
                checkpoint = machine.checkpoint()
                machine.emit({"kind": "checkpoint", "op_index": op_index,
                              "pc": machine.pc,
                              "step": machine.state.step_count})
    except MachineError as exc:
        machine.halted = "q_fail"
        machine.halt_reason = str(exc)

    trace = machine.finalize()
    result.trace = trace
    result.halt = trace.halt
    result.product_total = trace.ledger.total_product
    return result


# ---------------------------------------------------------------------------
# Paired evaluation

def sign_test(b: int, c: int) -> float:
    """One-sided exact sign test on discordant pairs: probability of at
    least `b` successes out of b + c fair coin flips."""
    n = b + c
    if n == 0:
        return 1.0
    total = sum(math.comb(n, k) for k in range(b, n + 1))
    return total / 2.0 ** n


def evaluate_correction(prog: ChemProgram, db: RuleDatabase, *,
                        policy: CorrectionPolicy | None = None,
                        eps: float | None = None, n_seeds: int = 200,
                        seed0: int = 0) -> dict:
    """Paired comparison, same seeds with and without correction. Returns
    success rates, the discordant counts and the exact sign-test p-value
    for "correction helps"."""
    policy = policy or CorrectionPolicy()
    b = 0  # corrected succeeded where baseline failed
    c = 0  # baseline succeeded where corrected failed
    wins_on = 0
    wins_off = 0
    for k in range(n_seeds):
        seed = seed0 + k
        on = run_with_dec(prog, db, policy=policy, seed=seed, eps=eps,
                          corrections_enabled=True)
        off = run_with_dec(prog, db, policy=policy, seed=seed, eps=eps,
                           corrections_enabled=False)
        wins_on += on.success
        wins_off += off.success
        if on.success and not off.success:
            b += 1
        elif off.success and not on.success:
            c += 1
    return {
        "n": n_seeds,
        "rate_corrected": wins_on / n_seeds,
        "rate_baseline": wins_off / n_seeds,
        "discordant_better": b,
        "discordant_worse": c,
        "p_value": sign_test(b, c),
    }
