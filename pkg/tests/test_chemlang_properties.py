"""Property tests for the program corpus: formatting is a fixpoint and the
step histogram obeys its counting invariants on arbitrary generated programs."""

import random

from hypothesis import given, settings, strategies as st

from chemvm.chemlang import classify_steps, format_program, parse_program
from chemvm.chemlang.corpus import random_program, synthetic_program


@settings(deadline=None, max_examples=60)
@given(st.integers(min_value=0, max_value=10_000))
def test_format_parse_fixpoint(seed):
    prog = random_program(random.Random(seed))
    text = format_program(prog)
    assert format_program(parse_program(text)) == text


@settings(deadline=None, max_examples=60)
@given(st.integers(min_value=0, max_value=10_000))
def test_histogram_invariants(seed):
    prog = random_program(random.Random(seed))
    hist = classify_steps(prog)
    assert hist.cumulative == sorted(hist.cumulative)
    assert hist.cumulative[-1] == len(prog.steps)
    totals = hist.totals()
    composites = totals["Composite"]
    assert sum(totals.values()) - composites == len(prog.steps)
    assert hist.total_ops == len(prog.steps)


@settings(deadline=None, max_examples=20)
@given(st.integers(min_value=1, max_value=8), st.integers(min_value=2, max_value=20))
def test_synthetic_program_is_linear(k, t):
    hist = classify_steps(synthetic_program(k, t))
    assert hist.cumulative == [t * (i + 1) for i in range(k)]
