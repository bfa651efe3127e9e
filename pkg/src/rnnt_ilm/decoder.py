"""Alignment-synchronous beam search with LM fusion and ILM correction.

Every search step multiplies the transducer node probability by a factor
that is 1 for blank and ``P_LM^l1 / P_ILM^l2`` (times a length reward) for a
label.  All scores are natural-log.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numeric as nm
from .ilm import VARIANTS, IlmVariant, ilm_init, ilm_step
from .lattice import Topology
from .model import (START, ExternalLm, RnntModel, enc_projection, encode, joint_from_projections,
                    joint_logits, lm_step, pred_projection, predict_step)

NEG_INF = -math.inf

# Default (lm_scale, ilm_scale) preset for the zero-vector ILM.
HZERO_PRESET = (0.85, 0.4)


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    lm_scale: float = 0.0
    ilm_scale: float = 0.0
    length_reward: float = 0.0
    ilm_variant: str = "none"
    renorm_eps: bool = False
    beam: int = 128
    score_beam: float = 12.0
    recombination: str = "logsumexp"
    max_label_len: Optional[int] = None

    def __post_init__(self):
        if self.lm_scale < 0 or self.ilm_scale < 0:
            raise ValueError("LM and ILM scales must be >= 0")
        if self.beam < 1:
            raise ValueError("beam limit must be >= 1")
        if self.ilm_variant not in VARIANTS:
            raise ValueError(f"unknown ILM variant {self.ilm_variant!r}")
        if self.recombination not in ("logsumexp", "max"):
            raise ValueError("recombination must be 'logsumexp' or 'max'")
        if self.ilm_scale > 0 and self.ilm_variant == "none":
            raise ValueError("a positive ILM scale needs an ILM variant")

    @property
    def uses_ilm(self) -> bool:
        return self.ilm_variant != "none" and self.ilm_scale != 0


# ---------------------------------------------------------------------------
# Step scores
# ---------------------------------------------------------------------------

def _logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    if m == NEG_INF:
        return NEG_INF
    return m + math.log(float(np.sum(np.exp(x - m))))


def step_score(node: np.ndarray, lm: Optional[np.ndarray], ilm: Optional[np.ndarray],
               cfg: FusionConfig) -> np.ndarray:
    """Per-symbol search score over V+blank (blank last).

    ``node`` is the transducer log-distribution, ``lm`` the external LM
    log-distribution over V+EOS (or None) and ``ilm`` the ILM log-distribution
    over V (or None).  The blank score is never modified.
    """
    if cfg.renorm_eps and cfg.uses_ilm:
        return renorm_eps_score(node, lm, ilm, cfg)
    V = node.shape[0] - 1
    out = np.array(node, dtype=np.float64)
    if lm is not None and cfg.lm_scale != 0:
        out[:V] += cfg.lm_scale * lm[:V]
    if cfg.uses_ilm:
        out[:V] -= cfg.ilm_scale * ilm
    if cfg.length_reward != 0:
        out[:V] += cfg.length_reward
    return out


def renorm_eps_score(node: np.ndarray, lm: Optional[np.ndarray], ilm: Optional[np.ndarray],
                     cfg: FusionConfig) -> np.ndarray:
    """Label scores ``log[(1 - P(blank)) * P_norm(a)] + l1 log P_LM(a) + rho``.

    ``P_norm`` renormalizes ``P(a) / P_ILM(a)^l2`` over V, which keeps the
    rebalanced label distribution but restores the transducer's blank/label
    mass split.  With ``l2 = 0`` this is plain shallow fusion.
    """
    if not cfg.uses_ilm:
        return step_score(node, lm, ilm, FusionConfig(
            lm_scale=cfg.lm_scale, length_reward=cfg.length_reward, beam=cfg.beam,
            score_beam=cfg.score_beam, recombination=cfg.recombination))
    V = node.shape[0] - 1
    out = np.array(node, dtype=np.float64)
    label_mass = _logsumexp(node[:V])
    if label_mass == NEG_INF:
        out[:V] = NEG_INF
        return out
    r = node[:V] - cfg.ilm_scale * ilm
    out[:V] = label_mass + (r - _logsumexp(r))
    if lm is not None and cfg.lm_scale != 0:
        out[:V] += cfg.lm_scale * lm[:V]
    if cfg.length_reward != 0:
        out[:V] += cfg.length_reward
    return out


# ---------------------------------------------------------------------------
# Per-utterance memoized scorer
# ---------------------------------------------------------------------------

class UtteranceScorer:
    """Caches transducer, LM and ILM distributions by label history for one utterance.

    Distributions depend only on the history, so caches can be shared by all
    fusion configurations decoded on the same utterance (e.g. a scale sweep).
    """

    def __init__(self, model: RnntModel, features: np.ndarray, lm: Optional[ExternalLm] = None,
                 ilm: Optional[IlmVariant] = None, H: Optional[np.ndarray] = None):
        self.model = model
        self.H = encode(model, features) if H is None else H
        self.num_frames = self.H.shape[0]
        self.lm = lm
        self.ilm = ilm
        self._enc_proj = enc_projection(model, self.H)
        self._pred: Dict[Tuple[int, ...], Tuple[Any, np.ndarray]] = {}
        self._lm: Dict[Tuple[int, ...], Tuple[Any, np.ndarray]] = {}
        self._ilm: Dict[Tuple[int, ...], Tuple[Any, np.ndarray]] = {}

    def _pred_entry(self, hist):
        hit = self._pred.get(hist)
        if hit is None:
            parent = None if not hist else self._pred_entry(hist[:-1])[0]
            state, g = predict_step(self.model, parent, hist[-1] if hist else START)
            logits = joint_from_projections(self.model, self._enc_proj, pred_projection(self.model, g))
            hit = (state, nm.log_softmax_np(logits))
            self._pred[hist] = hit
        return hit

    def node(self, hist: Tuple[int, ...]) -> np.ndarray:
        """Transducer log-distributions for ``hist`` at every frame, (T', V+1)."""
        return self._pred_entry(hist)[1]

    def lm_dist(self, hist: Tuple[int, ...]) -> Optional[np.ndarray]:
        if self.lm is None:
            return None
        hit = self._lm.get(hist)
        if hit is None:
            parent = None if not hist else self._lm_entry_state(hist[:-1])
            hit = lm_step(self.lm, parent, hist[-1] if hist else START)
            self._lm[hist] = hit
        return hit[1]

    def _lm_entry_state(self, hist):
        self.lm_dist(hist)
        return self._lm[hist][0]

    def ilm_dist(self, hist: Tuple[int, ...]) -> Optional[np.ndarray]:
        if self.ilm is None or self.ilm.kind == "none":
            return None
        hit = self._ilm.get(hist)
        if hit is None:
            if not hist:
                hit = ilm_init(self.ilm, self.model, self.H)
            else:
                self.ilm_dist(hist[:-1])
                hit = ilm_step(self.ilm, self.model, self._ilm[hist[:-1]][0], hist[-1])
            self._ilm[hist] = hit
        return hit[1]

    def scores(self, hist: Tuple[int, ...], t: int, cfg: FusionConfig) -> np.ndarray:
        return step_score(self.node(hist)[t], self.lm_dist(hist) if cfg.lm_scale != 0 else None,
                          self.ilm_dist(hist) if cfg.uses_ilm else None, cfg)

    def final_score(self, hist: Tuple[int, ...], cfg: FusionConfig) -> float:
        """Sentence-end term: only the external LM contributes, scaled by ``lm_scale``."""
        if self.lm is None or cfg.lm_scale == 0:
            return 0.0
        return cfg.lm_scale * float(self.lm_dist(hist)[-1])


# ---------------------------------------------------------------------------
# Beam search
# ---------------------------------------------------------------------------

@dataclass
class Hypothesis:
    labels: Tuple[int, ...]
    t: int
    score: float
    pred_state: Any = None
    lm_state: Any = None
    ilm_state: Any = None

    @property
    def s(self) -> int:
        return len(self.labels)


@dataclass
class DecodeResult:
    labels: Tuple[int, ...]
    score: float
    nbest: List[Tuple[Tuple[int, ...], float]] = field(default_factory=list)


def _combine(a: Optional[float], b: float, mode: str) -> float:
    if a is None:
        return b
    if mode == "max":
        return a if a >= b else b
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    hi, lo = (a, b) if a >= b else (b, a)
    return hi + math.log1p(math.exp(lo - hi))


def _check_vocab(model: RnntModel, lm, ilm: Optional[IlmVariant], cfg: FusionConfig):
    if lm is not None and lm.vocab_size != model.vocab_size:
        raise DecodeError(f"LM vocabulary ({lm.vocab_size}) differs from the transducer's ({model.vocab_size})")
    if cfg.uses_ilm:
        if ilm is None or ilm.kind != cfg.ilm_variant:
            raise DecodeError(f"ILM variant {cfg.ilm_variant!r} requested but not provided")
        res = ilm.resource
        if res is not None and res.vocab_size != model.vocab_size:
            raise DecodeError("ILM vocabulary differs from the transducer's")


def default_max_label_len(model: RnntModel, num_frames: int, topology, cfg: FusionConfig) -> int:
    if cfg.max_label_len is not None:
        return cfg.max_label_len
    if Topology(topology) is Topology.MONOTONIC:
        return num_frames
    return num_frames * model.config.subsampling


def beam_search_decode(model: RnntModel, features: Optional[np.ndarray], lm: Optional[ExternalLm] = None,
                       cfg: FusionConfig = FusionConfig(), topology="monotonic",
                       ilm: Optional[IlmVariant] = None,
                       scorer: Optional[UtteranceScorer] = None) -> DecodeResult:
    """Decode one utterance.

    Hypotheses advance one alignment symbol per iteration.  Hypotheses with
    the same frame and label history are recombined (log-sum-exp or max),
    then the beam keeps at most ``cfg.beam`` hypotheses within
    ``cfg.score_beam`` of the best.  Ties are ordered by label history.
    """
    topology = Topology(topology)
    _check_vocab(model, lm, ilm, cfg)
    if scorer is None:
        if features is None or len(features) == 0:
            raise DecodeError("empty feature sequence")
        scorer = UtteranceScorer(model, features, lm, ilm if cfg.uses_ilm else None)
    T = scorer.num_frames
    V = model.vocab_size
    max_len = default_max_label_len(model, T, topology, cfg)
    mono = topology is Topology.MONOTONIC
    mode = cfg.recombination
    k = min(cfg.beam, V)

    beam: Dict[Tuple[Tuple[int, ...], int], float] = {((), 0): 0.0}
    ended: Dict[Tuple[int, ...], float] = {}
    while beam:
        cand: Dict[Tuple[Tuple[int, ...], int], float] = {}
        for (hist, t), score in beam.items():
            sc = scorer.scores(hist, t, cfg)
            nt = t + 1
            total = score + float(sc[V])
            if total == NEG_INF:
                pass
            elif nt == T:
                ended[hist] = _combine(ended.get(hist), total, mode)
            else:
                key = (hist, nt)
                cand[key] = _combine(cand.get(key), total, mode)
            if len(hist) >= max_len:
                continue
            lab = sc[:V]
            picks = range(V) if k == V else np.argpartition(-lab, k - 1)[:k]
            lt = t + 1 if mono else t
            for a in picks:
                v = lab[a]
                if v == NEG_INF:
                    continue
                nh = hist + (int(a),)
                total = score + float(v)
                if lt == T:
                    ended[nh] = _combine(ended.get(nh), total, mode)
                else:
                    key = (nh, lt)
                    cand[key] = _combine(cand.get(key), total, mode)
        if not cand:
            break
        ranked = sorted(cand.items(), key=lambda kv: (-kv[1], kv[0][0]))
        floor = ranked[0][1] - cfg.score_beam
        beam = {key: s for key, s in ranked[: cfg.beam] if s >= floor}

    if not ended:
        raise DecodeError("search ended without a complete hypothesis")
    finals = [(hist, s + scorer.final_score(hist, cfg)) for hist, s in ended.items()]
    finals.sort(key=lambda kv: (-kv[1], kv[0]))
    return DecodeResult(finals[0][0], finals[0][1], finals)


def hypothesis_states(scorer: UtteranceScorer, hyp: Hypothesis) -> Hypothesis:
    """Fill the network states of ``hyp`` from the scorer caches."""
    h = hyp.labels
    scorer.node(h)
    hyp.pred_state = scorer._pred[h][0]
    if scorer.lm is not None:
        scorer.lm_dist(h)
        hyp.lm_state = scorer._lm[h][0]
    if scorer.ilm is not None:
        scorer.ilm_dist(h)
        hyp.ilm_state = scorer._ilm[h][0]
    return hyp


# ---------------------------------------------------------------------------
# Exhaustive reference decoder
# ---------------------------------------------------------------------------

def count_alignments(num_frames: int, vocab_size: int, max_len: int, topology) -> int:
    if Topology(topology) is Topology.MONOTONIC:
        return sum(math.comb(num_frames, s) * vocab_size ** s for s in range(min(max_len, num_frames) + 1))
    return sum(math.comb(num_frames - 1 + s, s) * vocab_size ** s for s in range(max_len + 1))


def exhaustive_decode(model: RnntModel, features: np.ndarray, lm: Optional[ExternalLm] = None,
                      cfg: FusionConfig = FusionConfig(), topology="monotonic",
                      ilm: Optional[IlmVariant] = None, size_guard: int = 10 ** 6) -> DecodeResult:
    """MAP decoding by enumerating every alignment string (tiny inputs only).

    Path scores are aggregated per label sequence with ``cfg.recombination``;
    this is the reference the beam search must reproduce at a saturated beam.
    """
    topology = Topology(topology)
    _check_vocab(model, lm, ilm, cfg)
    if features is None or len(features) == 0:
        raise DecodeError("empty feature sequence")
    H = encode(model, features)
    T, V = H.shape[0], model.vocab_size
    max_len = default_max_label_len(model, T, topology, cfg)
    n = count_alignments(T, V, max_len, topology)
    if n > size_guard:
        raise DecodeError(f"{n} alignments exceed the size guard {size_guard}")

    nodes: Dict[Tuple[int, ...], np.ndarray] = {}
    states: Dict[Tuple[int, ...], Any] = {}
    lms: Dict[Tuple[int, ...], Tuple[Any, np.ndarray]] = {}
    ilms: Dict[Tuple[int, ...], Tuple[Any, np.ndarray]] = {}

    def node(hist):
        if hist not in nodes:
            prev = states[hist[:-1]] if hist else None
            st, g = predict_step(model, prev, hist[-1] if hist else START)
            states[hist] = st
            nodes[hist] = nm.log_softmax_np(joint_logits(model, g, H))
        return nodes[hist]

    def lm_d(hist):
        if lm is None:
            return None
        if hist not in lms:
            lms[hist] = lm_step(lm, lms[hist[:-1]][0] if hist else None, hist[-1] if hist else START)
        return lms[hist][1]

    def ilm_d(hist):
        if not cfg.uses_ilm:
            return None
        if hist not in ilms:
            ilms[hist] = (ilm_init(ilm, model, H) if not hist
                          else ilm_step(ilm, model, ilms[hist[:-1]][0], hist[-1]))
        return ilms[hist][1]

    totals: Dict[Tuple[int, ...], float] = {}
    mono = topology is Topology.MONOTONIC

    def visit(hist, t, score):
        if t == T:
            totals[hist] = _combine(totals.get(hist), score, cfg.recombination)
            return
        sc = step_score(node(hist)[t], lm_d(hist) if cfg.lm_scale != 0 else None, ilm_d(hist), cfg)
        visit(hist, t + 1, score + float(sc[V]))
        if len(hist) < max_len:
            for a in range(V):
                if sc[a] > NEG_INF:
                    visit(hist + (a,), t + 1 if mono else t, score + float(sc[a]))

    node(())
    lm_d(())
    visit((), 0, 0.0)
    finals = []
    for hist, s in totals.items():
        if lm is not None and cfg.lm_scale != 0:
            s = s + cfg.lm_scale * float(lm_d(hist)[-1])
        finals.append((hist, s))
    finals.sort(key=lambda kv: (-kv[1], kv[0]))
    return DecodeResult(finals[0][0], finals[0][1], finals)


# ---------------------------------------------------------------------------
# Corpus-level helpers
# ---------------------------------------------------------------------------

def decode_corpus(model: RnntModel, utterances, lm, cfg: FusionConfig, topology, ilm=None,
                  scorers: Optional[Dict[str, UtteranceScorer]] = None) -> Dict[str, DecodeResult]:
    """Decode every utterance; ``scorers`` (id -> scorer) are created on demand and reused."""
    out = {}
    for u in utterances:
        sc = None
        if scorers is not None:
            sc = scorers.get(u.id)
            if sc is None:
                sc = scorers[u.id] = UtteranceScorer(model, u.features, lm, ilm)
        out[u.id] = beam_search_decode(model, u.features, lm, cfg, topology, ilm, scorer=sc)
    return out


def write_nbest(results: Dict[str, DecodeResult], vocab: Sequence[str], path, n: int = 1) -> None:
    """Tab-separated: utterance id, rank, score, label ids, label strings."""
    with open(path, "w") as f:
        for uid in sorted(results):
            for rank, (labels, score) in enumerate(results[uid].nbest[:n], 1):
                f.write(f"{uid}\t{rank}\t{score:.10f}\t{' '.join(map(str, labels))}\t"
                        f"{' '.join(vocab[a] for a in labels)}\n")


def read_nbest(path) -> Dict[str, List[Tuple[int, float, Tuple[int, ...]]]]:
    out: Dict[str, list] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields")
            uid, rank, score, ids, _ = parts
            out.setdefault(uid, []).append((int(rank), float(score), tuple(int(x) for x in ids.split())))
    return out
