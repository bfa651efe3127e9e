"""Word error rates with substitution/deletion/insertion counts, scale grid search and report tables."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class ErrorCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def undefined(self) -> bool:
        """True when there is no reference token to normalize by."""
        return self.ref_len == 0

    @property
    def wer(self) -> float:
        return float("nan") if self.ref_len == 0 else self.errors / self.ref_len

    def rate(self, kind: str) -> float:
        n = {"sub": self.substitutions, "del": self.deletions, "ins": self.insertions}[kind]
        return float("nan") if self.ref_len == 0 else n / self.ref_len

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(self.substitutions + other.substitutions, self.deletions + other.deletions,
                           self.insertions + other.insertions, self.ref_len + other.ref_len)


def edit_align(ref: Sequence, hyp: Sequence) -> ErrorCounts:
    """Unit-cost Levenshtein alignment.

    The backtrace prefers substitution (or match), then deletion, then
    insertion whenever several moves reach the same minimal cost, which makes
    the sub/del/ins split deterministic.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    i, j, sub, dele, ins = n, m, 0, 0, 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return ErrorCounts(int(sub), dele, ins, n)


def corpus_wer(refs: Mapping[str, Sequence], hyps: Mapping[str, Sequence]) -> ErrorCounts:
    """Sum counts over utterances (matched by id) before dividing."""
    if set(refs) != set(hyps):
        missing = sorted(set(refs) ^ set(hyps))
        raise KeyError(f"reference/hypothesis ids differ: {missing[:5]}")
    total = ErrorCounts()
    for uid in sorted(refs):
        total = total + edit_align(refs[uid], hyps[uid])
    return total


# ---------------------------------------------------------------------------
# Grid search over (lm_scale, ilm_scale)
# ---------------------------------------------------------------------------

class SweepError(RuntimeError):
    def __init__(self, cell, cause):
        super().__init__(f"decoding failed at lm_scale={cell[0]}, ilm_scale={cell[1]}: {cause}")
        self.cell = cell


@dataclass
class SweepResult:
    lm_scales: List[float]
    ilm_scales: List[float]
    cells: Dict[Tuple[float, float], ErrorCounts] = field(default_factory=dict)

    @property
    def best(self) -> Tuple[float, float]:
        # Minimal WER; ties go to the smaller lm_scale, then the smaller ilm_scale.
        return min(self.cells, key=lambda c: (self.cells[c].wer, c[0], c[1]))

    @property
    def best_counts(self) -> ErrorCounts:
        return self.cells[self.best]

    def grid(self) -> np.ndarray:
        """WER matrix with rows indexed by lm_scale and columns by ilm_scale."""
        return np.array([[self.cells[(a, b)].wer for b in self.ilm_scales] for a in self.lm_scales])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lm_scale", "ilm_scale", "wer", "sub", "del", "ins", "ref_len"])
        for a in self.lm_scales:
            for b in self.ilm_scales:
                c = self.cells[(a, b)]
                w.writerow([f"{a:g}", f"{b:g}", f"{c.wer:.6f}", c.substitutions, c.deletions,
                            c.insertions, c.ref_len])
        return buf.getvalue()


def scale_range(lo: float, hi: float, step: float) -> List[float]:
    """Inclusive grid ``lo, lo+step, ..., hi`` rounded to suppress float drift."""
    if step <= 0:
        return [round(lo, 10)]
    n = int(np.floor((hi - lo) / step + 1e-9))
    return [round(lo + i * step, 10) for i in range(n + 1)]


DEFAULT_LM_RANGE = (0.0, 1.2)
DEFAULT_ILM_RANGE = (0.0, 0.8)
DEFAULT_STEP = 0.05


def sweep_scales(decode_fn: Callable[[float, float], Mapping[str, Sequence]], refs: Mapping[str, Sequence],
                 lm_range: Tuple[float, float] = DEFAULT_LM_RANGE,
                 ilm_range: Tuple[float, float] = DEFAULT_ILM_RANGE,
                 step: float = DEFAULT_STEP, lm_step: Optional[float] = None,
                 ilm_step: Optional[float] = None) -> SweepResult:
    """Evaluate ``decode_fn(lm_scale, ilm_scale) -> {id: labels}`` on every grid cell."""
    lm_scales = scale_range(*lm_range, step if lm_step is None else lm_step)
    ilm_scales = scale_range(*ilm_range, step if ilm_step is None else ilm_step)
    if not lm_scales or not ilm_scales:
        raise ValueError("empty scale range")
    out = SweepResult(lm_scales, ilm_scales)
    for a in lm_scales:
        for b in ilm_scales:
            try:
                hyps = decode_fn(a, b)
            except Exception as e:
                raise SweepError((a, b), e) from e
            out.cells[(a, b)] = corpus_wer(refs, hyps)
    return out


# ---------------------------------------------------------------------------
# Report tables
# ---------------------------------------------------------------------------

@dataclass
class ReportRow:
    name: str
    lm_scale: float
    ilm_scale: float
    length_reward: float
    counts: ErrorCounts


REPORT_HEADER = ["system", "lm_scale", "ilm_scale", "length_reward", "wer", "sub", "del", "ins"]


def _cells(r: ReportRow) -> List[str]:
    c = r.counts
    return [r.name, f"{r.lm_scale:.2f}", f"{r.ilm_scale:.2f}", f"{r.length_reward:.2f}",
            f"{100 * c.wer:.2f}", f"{100 * c.rate('sub'):.2f}", f"{100 * c.rate('del'):.2f}",
            f"{100 * c.rate('ins'):.2f}"]


def format_table(rows: Sequence[ReportRow]) -> str:
    """Aligned plain-text table; error columns are percentages of reference tokens."""
    body = [REPORT_HEADER] + [_cells(r) for r in rows]
    widths = [max(len(line[i]) for line in body) for i in range(len(REPORT_HEADER))]
    lines = []
    for k, line in enumerate(body):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths))))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def format_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in rows:
        w.writerow(_cells(r))
    return buf.getvalue()


@dataclass
class AnalysisSystem:
    """One row of the analysis: how to decode at given scales and which scales to search.

    ``decode_fn(lm_scale, ilm_scale, length_reward) -> {id: labels}``.
    """

    name: str
    decode_fn: Callable[[float, float, float], Mapping[str, Sequence]]
    lm_scales: Sequence[float]
    ilm_scales: Sequence[float] = (0.0,)
    length_rewards: Sequence[float] = (0.0,)


def tune(system: AnalysisSystem, refs: Mapping[str, Sequence]) -> ReportRow:
    """Exhaustive search over the system's grid; ties prefer smaller scales in (lm, ilm, reward) order."""
    best = None
    for a in system.lm_scales:
        for b in system.ilm_scales:
            for rho in system.length_rewards:
                c = corpus_wer(refs, system.decode_fn(a, b, rho))
                key = (c.wer, a, b, rho)
                if best is None or key < best[0]:
                    best = (key, ReportRow(system.name, a, b, rho, c))
    return best[1]


def analysis_report(systems: Sequence[AnalysisSystem], refs: Mapping[str, Sequence]
                    ) -> Tuple[List[ReportRow], str, str]:
    """Tune every system on ``refs``; return rows plus text and CSV renderings."""
    rows = [tune(s, refs) for s in systems]
    return rows, format_table(rows), format_csv(rows)
