"""Transducer lattice: full-sum posterior, Viterbi alignment and training losses.

Lattice nodes are ``(t, s)`` with frame ``t`` (0-based) and ``s`` labels
emitted so far.  Two topologies are supported:

* ``standard``: blank advances ``t``, a label advances ``s`` only; an
  alignment has ``T' + S`` symbols and ends with the blank leaving the last
  frame.
* ``monotonic``: every symbol advances ``t``; a label also advances ``s``;
  an alignment has exactly ``T'`` symbols, so ``S <= T'`` is required.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import numeric as nm
from .corpus import Batch, pad_labels
from .model import (MiniIlmNet, RecurrentLm, RnntModel, encode, encode_batch, encoded_length,
                    joint_tensor, mini_ilm_batch, predict_batch, recurrent_lm_logprobs)
from .numeric import Tensor

NEG_INF = -math.inf


class Topology(str, Enum):
    STANDARD = "standard"
    MONOTONIC = "monotonic"


class InfeasibleTopologyError(ValueError):
    pass


class InfeasibleAlignmentWarning(RuntimeWarning):
    pass


def feasible(num_frames: int, num_labels: int, topology) -> bool:
    return Topology(topology) is Topology.STANDARD or num_labels <= num_frames


# ---------------------------------------------------------------------------
# Posterior grid
# ---------------------------------------------------------------------------

def posterior_grid(model: RnntModel, features: np.ndarray, labels: Sequence[int], topology) -> np.ndarray:
    """Log-distributions over V+blank at every node, shape ``(T', S+1, |V|+1)``."""
    labels = list(labels)
    if len(labels) < 1:
        raise ValueError("posterior_grid needs S >= 1")
    h = encode(model, features)
    if not feasible(h.shape[0], len(labels), topology):
        raise InfeasibleTopologyError(f"monotonic topology needs S <= T' (S={len(labels)}, T'={h.shape[0]})")
    with nm.no_grad():
        g = predict_batch(model, np.array([labels])).value[0]
        logits = joint_tensor(model, nm.const(g[None, :, :]), nm.const(h[:, None, :])).value
    return nm.log_softmax_np(logits)


def _blank_emit(logprobs: np.ndarray, labels: np.ndarray, label_lens: np.ndarray, blank: int):
    """Split (B, T, U, V+1) log-probs into blank (B, T, U) and label-emission (B, T, U) scores.

    ``emit[b, t, s]`` is the score of emitting ``a_{s+1}`` from node (t, s);
    it is -inf for ``s >= S_b``.
    """
    b, t, u, _ = logprobs.shape
    blank_lp = logprobs[..., blank]
    idx = np.zeros((b, u), dtype=np.int64)
    idx[:, : u - 1] = labels[:, : u - 1]
    emit = np.take_along_axis(logprobs, np.broadcast_to(idx[:, None, :, None], (b, t, u, 1)), axis=-1)[..., 0]
    s_idx = np.arange(u)[None, None, :]
    emit = np.where(s_idx >= np.asarray(label_lens)[:, None, None], NEG_INF, emit)
    return blank_lp, emit


def _forward_backward(blank, emit, t_lens, s_lens, topology):
    """Log-space alpha/beta recursions over a padded batch.

    Returns ``(alpha, beta, logp)``; for the monotonic topology alpha/beta have
    ``T+1`` frame rows (node rows 0..T).
    """
    topology = Topology(topology)
    B, T, U = blank.shape
    bi = np.arange(B)
    with np.errstate(invalid="ignore"):
        if topology is Topology.MONOTONIC:
            alpha = np.full((B, T + 1, U), NEG_INF)
            alpha[:, 0, 0] = 0.0
            for t in range(T):
                stay = alpha[:, t] + blank[:, t]
                move = np.full((B, U), NEG_INF)
                move[:, 1:] = alpha[:, t, :-1] + emit[:, t, :-1]
                alpha[:, t + 1] = np.logaddexp(stay, move)
            logp = alpha[bi, t_lens, s_lens]
            beta = np.full((B, T + 1, U), NEG_INF)
            beta[bi, t_lens, s_lens] = 0.0
            final = beta.copy()
            for t in range(T - 1, -1, -1):
                stay = blank[:, t] + beta[:, t + 1]
                move = np.full((B, U), NEG_INF)
                move[:, :-1] = emit[:, t, :-1] + beta[:, t + 1, 1:]
                row = np.logaddexp(stay, move)
                done = (t >= t_lens)[:, None]
                beta[:, t] = np.where(done, final[:, t], row)
            return alpha, beta, logp

        alpha = np.full((B, T, U), NEG_INF)
        for t in range(T):
            for s in range(U):
                if t == 0 and s == 0:
                    alpha[:, 0, 0] = 0.0
                    continue
                a = alpha[:, t - 1, s] + blank[:, t - 1, s] if t > 0 else np.full(B, NEG_INF)
                e = alpha[:, t, s - 1] + emit[:, t, s - 1] if s > 0 else np.full(B, NEG_INF)
                alpha[:, t, s] = np.logaddexp(a, e)
        last_t = t_lens - 1
        logp = alpha[bi, last_t, s_lens] + blank[bi, last_t, s_lens]
        beta = np.full((B, T, U), NEG_INF)
        for t in range(T - 1, -1, -1):
            for s in range(U - 1, -1, -1):
                a = blank[:, t, s] + beta[:, t + 1, s] if t + 1 < T else np.full(B, NEG_INF)
                e = emit[:, t, s] + beta[:, t, s + 1] if s + 1 < U else np.full(B, NEG_INF)
                val = np.logaddexp(a, e)
                term = (last_t == t) & (s_lens == s)
                val = np.where(term, blank[:, t, s], val)
                beyond = (t > last_t) | (s > s_lens)
                beta[:, t, s] = np.where(beyond, NEG_INF, val)
        return alpha, beta, logp


def _occupancy_grads(alpha, beta, blank, emit, logp, t_lens, s_lens, topology):
    """d logP / d blank and d logP / d emit, both (B, T, U)."""
    topology = Topology(topology)
    B, T, U = blank.shape
    lp = logp[:, None, None]
    with np.errstate(invalid="ignore", over="ignore"):
        if topology is Topology.MONOTONIC:
            nb = beta[:, 1:, :]
            ne = np.full((B, T, U), NEG_INF)
            ne[:, :, :-1] = beta[:, 1:, 1:]
            a = alpha[:, :T]
        else:
            nb = np.full((B, T, U), NEG_INF)
            nb[:, :-1] = beta[:, 1:]
            bi = np.arange(B)
            nb[bi, t_lens - 1, s_lens] = 0.0
            ne = np.full((B, T, U), NEG_INF)
            ne[:, :, :-1] = beta[:, :, 1:]
            a = alpha
        g_blank = np.exp(a + blank + nb - lp)
        g_emit = np.exp(a + emit + ne - lp)
    return np.nan_to_num(g_blank, nan=0.0), np.nan_to_num(g_emit, nan=0.0)


def rnnt_logprob_op(logprobs: Tensor, labels: np.ndarray, t_lens: np.ndarray, s_lens: np.ndarray,
                    topology, blank: int) -> Tensor:
    """Per-utterance ``log P(a_1^S | X)`` as a (B,) tensor, differentiable in ``logprobs``."""
    topology = Topology(topology)
    t_lens = np.asarray(t_lens, dtype=np.int64)
    s_lens = np.asarray(s_lens, dtype=np.int64)
    if topology is Topology.MONOTONIC and np.any(s_lens > t_lens):
        raise InfeasibleTopologyError("monotonic topology needs S <= T' for every utterance")
    lp = logprobs.value
    bl, em = _blank_emit(lp, labels, s_lens, blank)
    alpha, beta, logp = _forward_backward(bl, em, t_lens, s_lens, topology)
    if not np.all(np.isfinite(logp)):
        raise nm.NonFiniteError("full-sum log-probability is not finite")
    B, T, U, _ = lp.shape

    def backward(g):
        gb, ge = _occupancy_grads(alpha, beta, bl, em, logp, t_lens, s_lens, topology)
        gb = gb * g[:, None, None]
        ge = ge * g[:, None, None]
        out = np.zeros_like(lp)
        out[..., blank] += gb
        idx = np.zeros((B, U), dtype=np.int64)
        idx[:, : U - 1] = labels[:, : U - 1]
        # label indices are < blank and unique per node, so a put is an add here
        np.put_along_axis(out, np.broadcast_to(idx[:, None, :, None], (B, T, U, 1)), ge[..., None], axis=-1)
        return (out,)

    return nm.custom_op("rnnt-full-sum", logp, (logprobs,), backward)


def full_sum_logprob(grid: np.ndarray, labels: Sequence[int], topology) -> float:
    """``log P(a_1^S | X)`` summed over all alignments of one posterior grid.

    Returns ``-inf`` (with an :class:`InfeasibleAlignmentWarning`) when the
    topology admits no alignment.
    """
    grid = np.asarray(grid, dtype=np.float64)
    T, U, V1 = grid.shape
    S = len(labels)
    if U != S + 1:
        raise ValueError(f"grid has {U} label positions, transcription needs {S + 1}")
    if not feasible(T, S, topology):
        warnings.warn(f"no {Topology(topology).value} alignment for S={S}, T'={T}", InfeasibleAlignmentWarning)
        return NEG_INF
    labels_arr = np.zeros((1, max(S, 1)), dtype=np.int64)
    labels_arr[0, :S] = labels
    bl, em = _blank_emit(grid[None], labels_arr, np.array([S]), V1 - 1)
    _, _, logp = _forward_backward(bl, em, np.array([T]), np.array([S]), topology)
    return float(logp[0])


# ---------------------------------------------------------------------------
# Explicit alignments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AlignmentPath:
    """An alignment string over V+blank with the emission frame of each label."""

    symbols: Tuple[int, ...]
    frames: Tuple[int, ...]
    blank: int

    def collapse(self) -> Tuple[int, ...]:
        return tuple(y for y in self.symbols if y != self.blank)


def enumerate_alignments(num_frames: int, labels: Sequence[int], topology, blank: int) -> Iterator[AlignmentPath]:
    """All alignment strings that collapse to ``labels``."""
    topology = Topology(topology)
    S = len(labels)
    if topology is Topology.STANDARD:
        U = num_frames + S
        for label_pos in itertools.combinations(range(U), S):
            if U - 1 in label_pos:
                continue  # the final symbol must be the blank leaving the last frame
            syms, frames, t, k = [], [], 0, 0
            for u in range(U):
                if k < S and u == label_pos[k]:
                    syms.append(labels[k]); frames.append(t); k += 1
                else:
                    syms.append(blank); t += 1
            yield AlignmentPath(tuple(syms), tuple(frames), blank)
    else:
        for label_pos in itertools.combinations(range(num_frames), S):
            syms = [blank] * num_frames
            for k, t in enumerate(label_pos):
                syms[t] = labels[k]
            yield AlignmentPath(tuple(syms), tuple(label_pos), blank)


def path_logprob(grid: np.ndarray, path: AlignmentPath, topology) -> float:
    topology = Topology(topology)
    t = s = 0
    total = 0.0
    for y in path.symbols:
        total += float(grid[t, s, y])
        if y == path.blank:
            t += 1
        else:
            s += 1
            if topology is Topology.MONOTONIC:
                t += 1
    return total


def brute_force_logprob(grid: np.ndarray, labels: Sequence[int], topology) -> float:
    """Reference value for :func:`full_sum_logprob` by explicit path enumeration."""
    grid = np.asarray(grid, dtype=np.float64)
    T, _, V1 = grid.shape
    if T > 8 or len(labels) > 6:
        raise ValueError(f"brute force limited to T' <= 8, S <= 6 (got T'={T}, S={len(labels)})")
    scores = [path_logprob(grid, p, topology) for p in enumerate_alignments(T, labels, topology, V1 - 1)]
    if not scores:
        return NEG_INF
    m = max(scores)
    return m + math.log(sum(math.exp(x - m) for x in scores))


def viterbi_align(grid: np.ndarray, labels: Sequence[int], topology) -> AlignmentPath:
    """Best single alignment; on exact ties the blank (frame-advancing) predecessor wins."""
    topology = Topology(topology)
    grid = np.asarray(grid, dtype=np.float64)
    T, U, V1 = grid.shape
    S = len(labels)
    blank = V1 - 1
    if not feasible(T, S, topology):
        raise InfeasibleTopologyError(f"monotonic topology needs S <= T' (S={S}, T'={T})")
    bl = grid[:, :, blank]
    em = np.full((T, U), NEG_INF)
    for s in range(S):
        em[:, s] = grid[:, s, labels[s]]
    rows = T + 1 if topology is Topology.MONOTONIC else T
    score = np.full((rows, U), NEG_INF)
    from_blank = np.zeros((rows, U), dtype=bool)
    score[0, 0] = 0.0
    for t in range(rows):
        for s in range(U):
            if t == 0 and s == 0:
                continue
            if topology is Topology.MONOTONIC:
                via_b = score[t - 1, s] + bl[t - 1, s] if t > 0 else NEG_INF
                via_e = score[t - 1, s - 1] + em[t - 1, s - 1] if t > 0 and s > 0 else NEG_INF
            else:
                via_b = score[t - 1, s] + bl[t - 1, s] if t > 0 else NEG_INF
                via_e = score[t, s - 1] + em[t, s - 1] if s > 0 else NEG_INF
            from_blank[t, s] = via_b >= via_e
            score[t, s] = max(via_b, via_e)
    syms: List[int] = []
    frames: List[int] = []
    if topology is Topology.MONOTONIC:
        t, s = T, S
        while t > 0:
            if from_blank[t, s]:
                syms.append(blank)
            else:
                syms.append(labels[s - 1]); frames.append(t - 1); s -= 1
            t -= 1
    else:
        syms.append(blank)
        t, s = T - 1, S
        while t > 0 or s > 0:
            if from_blank[t, s]:
                syms.append(blank); t -= 1
            else:
                syms.append(labels[s - 1]); frames.append(t); s -= 1
    return AlignmentPath(tuple(reversed(syms)), tuple(reversed(frames)), blank)


# ---------------------------------------------------------------------------
# Parameter freezing helpers
# ---------------------------------------------------------------------------

def frozen(model, names: Optional[Sequence[str]] = None):
    """A view of ``model`` whose parameters ``names`` (default: all) are constants."""
    names = set(model.params) if names is None else set(names)
    params = {k: (nm.const(v.value) if k in names else v) for k, v in model.params.items()}
    return replace(model, params=params)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _grid_logprobs(model: RnntModel, enc: Tensor, labels: np.ndarray) -> Tensor:
    B, T, H = enc.shape
    g = predict_batch(model, labels)
    U = g.shape[1]
    logits = joint_tensor(model, nm.reshape(g, (B, 1, U, g.shape[2])), nm.reshape(enc, (B, T, 1, H)))
    return nm.log_softmax(logits)


def rnnt_logprobs(model: RnntModel, batch: Batch, topology, enc: Optional[Tensor] = None) -> Tensor:
    """Per-utterance full-sum log-probabilities, (B,) tensor."""
    if enc is None:
        enc = encode_batch(model, batch.feats)
    t_lens = np.array([encoded_length(int(n), model.config.subsampling) for n in batch.feat_lens])
    lp = _grid_logprobs(model, enc, batch.labels)
    return rnnt_logprob_op(lp, batch.labels, t_lens, batch.label_lens, topology, model.blank)


def loss_rnnt(model: RnntModel, batch: Batch, topology, enc: Optional[Tensor] = None) -> Tensor:
    """Mean over the batch of ``-log P_RNNT(a_1^S | X)``."""
    logp = rnnt_logprobs(model, batch, topology, enc)
    return nm.scale(nm.sum_all(logp), -1.0 / len(batch))


def _label_mask(label_lens: np.ndarray, s_max: int) -> np.ndarray:
    return (np.arange(s_max)[None, :] < np.asarray(label_lens)[:, None]).astype(np.float64)


def utterance_mean_encoding(enc: np.ndarray, t_lens: Sequence[int]) -> np.ndarray:
    """Per-utterance mean of valid encoder frames, (B, H)."""
    return np.stack([enc[i, : int(n)].mean(axis=0) for i, n in enumerate(t_lens)])


def ilm_position_logprobs(variant, model: RnntModel, labels: np.ndarray,
                          enc_mean: Optional[np.ndarray] = None) -> Tensor:
    """log P_ILM(a_s | a_1^{s-1}) over V for every position, (B, S, |V|)."""
    B, S = labels.shape
    kind = variant.kind
    V = model.vocab_size
    if kind == "density-ratio":
        lm: RecurrentLm = variant.resource
        full = recurrent_lm_logprobs(lm, labels)
        return nm.log_softmax(nm.slice_last(nm.take(full, np.arange(S), axis=1), 0, V))
    g = nm.take(predict_batch(model, labels), np.arange(S), axis=1)
    if kind == "zero":
        h = nm.const(np.zeros((1, 1, model.enc_dim)))
    elif kind == "avg":
        if enc_mean is None:
            raise ValueError("the avg ILM variant needs encoder outputs (features)")
        h = nm.const(np.asarray(enc_mean)[:, None, :])
    elif kind == "mini-lstm":
        net: MiniIlmNet = variant.resource
        h = mini_ilm_batch(net, labels)
    else:
        raise ValueError(f"ILM variant {kind!r} has no label distribution")
    return nm.log_softmax(nm.slice_last(joint_tensor(model, g, h), 0, V))


def loss_ilm(variant, labels: np.ndarray, label_lens: np.ndarray, model: RnntModel,
             enc_mean: Optional[np.ndarray] = None) -> Tensor:
    """Mean over sequences of ``-log P_ILM(a_1^S)``."""
    labels = np.asarray(labels, dtype=np.int64)
    lp = ilm_position_logprobs(variant, model, labels, enc_mean)
    picked = nm.gather(lp, labels)
    masked = nm.mul(picked, _label_mask(label_lens, labels.shape[1]))
    return nm.scale(nm.sum_all(masked), -1.0 / labels.shape[0])


def loss_ilmt(model: RnntModel, batch: Batch, alpha: float, variant, topology) -> Tensor:
    """``L_RNNT + alpha * L_ILM`` with the encoder treated as frozen."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    m = frozen(model, model.encoder_params())
    enc = encode_batch(m, batch.feats)
    l_rnnt = loss_rnnt(m, batch, topology, enc=enc)
    if alpha == 0:
        return l_rnnt
    enc_mean = None
    if variant.kind == "avg":
        t_lens = [encoded_length(int(n), model.config.subsampling) for n in batch.feat_lens]
        enc_mean = utterance_mean_encoding(enc.value, t_lens)
    l_ilm = loss_ilm(variant, batch.labels, batch.label_lens, m, enc_mean)
    return nm.add(l_rnnt, nm.scale(l_ilm, alpha))


@dataclass
class AlignedBatch:
    """Transcriptions with per-label frame indices and the encoder frames they point at."""

    labels: np.ndarray
    label_lens: np.ndarray
    frame_enc: np.ndarray  # (B, S_max, H): h_{t(s)} for each label position


def make_aligned_batch(model: RnntModel, feats: Sequence[np.ndarray], label_seqs: Sequence[Sequence[int]],
                       frames: Sequence[Sequence[int]]) -> AlignedBatch:
    if any(f is None for f in frames):
        raise ValueError("missing alignment for an utterance")
    labels, lens = pad_labels(label_seqs)
    sel = np.zeros((len(label_seqs), labels.shape[1], model.enc_dim))
    for i, (x, fr) in enumerate(zip(feats, frames)):
        if len(fr) != len(label_seqs[i]):
            raise ValueError("alignment length does not match transcription")
        h = encode(model, x)
        sel[i, : len(fr)] = h[list(fr)]
    return AlignedBatch(labels, lens, sel)


def jprime_target(model: RnntModel, batch: AlignedBatch) -> np.ndarray:
    """softmax(J_without_blank(f_pred(a_1^{s-1}), h_{t(s)})) for each aligned position."""
    S = batch.labels.shape[1]
    with nm.no_grad():
        g = nm.take(predict_batch(model, batch.labels), np.arange(S), axis=1)
        logits = joint_tensor(model, g, nm.const(batch.frame_enc)).value[..., : model.vocab_size]
    return np.exp(nm.log_softmax_np(logits))


def loss_jprime(model: RnntModel, mini_ilm: MiniIlmNet, batch: AlignedBatch) -> Tensor:
    """Cross entropy between the aligned-frame label distribution and J'(a_1^{s-1}).

    ``J'(a_1^{s-1}) = J_without_blank(f_pred(a_1^{s-1}), f_ILM(a_1^{s-1}))``; only
    the mini ILM network receives gradients.  Averaged over aligned positions.
    """
    m = frozen(model)
    target = jprime_target(m, batch)
    S = batch.labels.shape[1]
    g = nm.take(predict_batch(m, batch.labels), np.arange(S), axis=1)
    h = mini_ilm_batch(mini_ilm, batch.labels)
    logq = nm.log_softmax(nm.slice_last(joint_tensor(m, g, h), 0, m.vocab_size))
    mask = _label_mask(batch.label_lens, S)
    weighted = nm.mul(logq, target * mask[..., None])
    return nm.scale(nm.sum_all(weighted), -1.0 / mask.sum())


def loss_exact_ilm(model: RnntModel, mini_ilm: MiniIlmNet, batch: AlignedBatch, alpha: float) -> Tensor:
    """``L_ILM + alpha * L_J'`` for the mini-LSTM ILM; the transducer stays frozen."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    m = frozen(model)
    variant = _MiniVariant(mini_ilm)
    l_ilm = loss_ilm(variant, batch.labels, batch.label_lens, m)
    if alpha == 0:
        return l_ilm
    return nm.add(l_ilm, nm.scale(loss_jprime(m, mini_ilm, batch), alpha))


@dataclass
class _MiniVariant:
    resource: MiniIlmNet
    kind: str = "mini-lstm"


# ---------------------------------------------------------------------------
# Alignment cache
# ---------------------------------------------------------------------------

def save_alignments(records: Dict[str, Tuple[str, Sequence[Tuple[int, int]]]], path) -> None:
    """``records``: utterance id -> (topology, [(label, frame), ...])."""
    with open(path, "w") as f:
        for uid in sorted(records):
            topo, pairs = records[uid]
            f.write(f"{uid}\t{Topology(topo).value}\t" + " ".join(f"{a}:{t}" for a, t in pairs) + "\n")


def load_alignments(path) -> Dict[str, Tuple[str, List[Tuple[int, int]]]]:
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            uid, topo, body = parts
            try:
                pairs = [tuple(int(x) for x in tok.split(":")) for tok in body.split()]
                Topology(topo)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed alignment record") from None
            out[uid] = (topo, pairs)
    return out
