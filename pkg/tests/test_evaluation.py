import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rnnt_ilm import evaluation as E
from oracles import exhaustive_edit_costs

seqs = st.lists(st.integers(0, 2), max_size=6)


def test_worked_example():
    c = E.edit_align("abcd", "acc")
    assert (c.substitutions, c.deletions, c.insertions, c.ref_len) == (1, 1, 0, 4)
    assert c.wer == 0.5


def test_identical_and_empty():
    assert E.edit_align([1, 2, 3], [1, 2, 3]).errors == 0
    c = E.edit_align([], ["a", "a"])
    assert c.insertions == 2 and c.ref_len == 0 and c.undefined and math.isnan(c.wer)


def test_tie_prefers_substitution():
    c = E.edit_align("ab", "ba")
    assert (c.substitutions, c.deletions, c.insertions) == (2, 0, 0)


@settings(max_examples=300, deadline=None)
@given(seqs, seqs)
def test_cost_matches_exhaustive_alignments(ref, hyp):
    c = E.edit_align(ref, hyp)
    oracle = exhaustive_edit_costs(np.array([ref]).reshape(1, len(ref)), np.array([hyp]).reshape(1, len(hyp)))[0]
    assert c.errors == oracle
    assert c.deletions - c.insertions == len(ref) - len(hyp)


@settings(max_examples=100, deadline=None)
@given(seqs, seqs, st.permutations([0, 1, 2]))
def test_relabeling_invariance(ref, hyp, perm):
    a = E.edit_align(ref, hyp)
    b = E.edit_align([perm[x] for x in ref], [perm[x] for x in hyp])
    assert a == b


def test_corpus_wer_sums_counts():
    refs = {"u1": "abcd", "u2": "abcdef"}
    hyps = {"u1": "xbcd", "u2": "bcdefg"}
    c = E.corpus_wer(refs, hyps)
    assert (c.substitutions, c.deletions, c.insertions) == (1, 1, 1)
    assert c.wer == pytest.approx(3 / 10)
    # per-utterance mean would be (1/4 + 2/6) / 2
    assert c.wer != pytest.approx((1 / 4 + 2 / 6) / 2)


def test_corpus_wer_order_and_ids():
    refs = {f"u{i}": [i % 3] * (i + 1) for i in range(6)}
    hyps = {k: v[:-1] for k, v in refs.items()}
    shuffled = dict(random.Random(0).sample(sorted(hyps.items()), len(hyps)))
    assert E.corpus_wer(refs, hyps) == E.corpus_wer(refs, shuffled)
    with pytest.raises(KeyError):
        E.corpus_wer(refs, {"u0": [0]})


def test_equal_lengths_mean_equals_corpus():
    refs = {"a": [1, 2, 3], "b": [3, 2, 1]}
    hyps = {"a": [1, 2], "b": [0, 0, 0, 0]}
    per = [E.edit_align(refs[k], hyps[k]).wer for k in refs]
    assert E.corpus_wer(refs, hyps).wer == pytest.approx(np.mean(per))


# ---------------------------------------------------------------------------
# Sweeps and reports
# ---------------------------------------------------------------------------

REFS = {"u": list(range(10))}


def bowl(a, b, at=(0.6, 0.4)):
    """Mock decoder whose error count grows with the distance from ``at``."""
    k = int(round(20 * (abs(a - at[0]) + abs(b - at[1]))))
    return {"u": list(range(max(0, 10 - k)))}


def test_sweep_finds_mock_optimum_and_grid_size():
    res = E.sweep_scales(bowl, REFS)
    assert res.best == (0.6, 0.4) and res.best_counts.errors == 0
    assert len(res.cells) == 25 * 17 == res.grid().size
    assert res.grid().shape == (25, 17)
    assert res.to_csv().count("\n") == 1 + 25 * 17
    again = E.sweep_scales(bowl, REFS)
    assert again.cells == res.cells


def test_sweep_ties_prefer_smaller_scales():
    res = E.sweep_scales(lambda a, b: {"u": REFS["u"]}, REFS, (0, 0.2), (0, 0.2), 0.1)
    assert res.best == (0.0, 0.0)


def test_sweep_failure_names_cell():
    def flaky(a, b):
        if (a, b) == (0.1, 0.2):
            raise RuntimeError("boom")
        return REFS

    with pytest.raises(E.SweepError) as e:
        E.sweep_scales(flaky, REFS, (0, 0.2), (0, 0.2), 0.1)
    assert e.value.cell == (0.1, 0.2)


def test_scale_range():
    assert E.scale_range(0, 1.2, 0.05)[-1] == 1.2
    assert len(E.scale_range(0, 0.8, 0.05)) == 17
    assert E.scale_range(0.3, 0.3, 0.1) == [0.3]


def test_analysis_report_rows():
    refs = {"u": [1, 2, 3, 4]}

    def dec(a, b, rho):
        # more reward -> fewer deletions; scales unused
        return {"u": [1, 2, 3, 4][: min(4, 2 + int(rho))]}

    systems = [
        E.AnalysisSystem("sf", dec, [0.0, 0.5]),
        E.AnalysisSystem("sf+reward", dec, [0.0, 0.5], length_rewards=[0.0, 1.0, 2.0]),
        E.AnalysisSystem("renorm", dec, [0.0, 0.5], [0.0]),
    ]
    rows, text, csv_text = E.analysis_report(systems, refs)
    assert [r.name for r in rows] == ["sf", "sf+reward", "renorm"]
    assert rows[0].counts == rows[2].counts
    assert rows[1].length_reward == 2.0 and rows[1].counts.errors == 0
    assert rows[0].counts.deletions == 2
    assert csv_text.splitlines()[0] == ",".join(E.REPORT_HEADER)
    assert len(text.splitlines()) == 2 + len(rows)
