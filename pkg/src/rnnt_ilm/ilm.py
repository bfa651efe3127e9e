"""Internal-LM estimators: density ratio, h'_zero, h'_avg and mini-LSTM.

Every network-based estimator feeds some vector ``h'`` into the encoder slot
of the joint network, drops the blank logit and renormalizes over V.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from . import numeric as nm
from .corpus import Utterance, pad_labels
from .lattice import AlignedBatch, frozen, loss_exact_ilm, loss_ilm
from .model import (START, DensityRatioLm, MiniIlmConfig, MiniIlmNet, RecurrentLm, RecurrentLmConfig,
                    RnntModel, encode, init_mini_ilm, joint_logits_no_blank, lm_step, mini_ilm_step,
                    predict_step)
from .training import TrainConfig, TrainCurve, sgd_train, train_recurrent_lm

VARIANTS = ("none", "density-ratio", "zero", "avg", "mini-lstm")


class MissingAlignmentError(ValueError):
    pass


@dataclass
class IlmVariant:
    kind: str
    resource: Union[DensityRatioLm, MiniIlmNet, None] = None

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ValueError(f"unknown ILM variant {self.kind!r}; choose from {VARIANTS}")
        if self.kind == "density-ratio" and not isinstance(self.resource, RecurrentLm):
            raise ValueError("density-ratio ILM needs a trained density-ratio LM")
        if self.kind == "mini-lstm" and not isinstance(self.resource, MiniIlmNet):
            raise ValueError("mini-lstm ILM needs a trained MiniIlmNet")

    @property
    def needs_features(self) -> bool:
        return self.kind == "avg"


@dataclass
class IlmState:
    """Recurrent state behind P_ILM(. | a_1^s) for ``history_len = s``."""

    history_len: int
    inner: Any
    h_prime: Optional[np.ndarray] = None


def _renormalized(model: RnntModel, g: np.ndarray, h: np.ndarray) -> np.ndarray:
    return nm.log_softmax_np(joint_logits_no_blank(model, g, h))


def _drop_eos(logdist: np.ndarray) -> np.ndarray:
    return nm.log_softmax_np(logdist[:-1])


def ilm_init(variant: IlmVariant, model: RnntModel, H: Optional[np.ndarray] = None
             ) -> Tuple[IlmState, np.ndarray]:
    """State at the empty history and ``log P_ILM(. | empty)`` over V."""
    kind = variant.kind
    if kind == "none":
        raise ValueError("the 'none' variant has no ILM distribution")
    if kind == "density-ratio":
        st, dist = lm_step(variant.resource, None, START)
        return IlmState(0, st), _drop_eos(dist)
    pst, g = predict_step(model, None, START)
    if kind == "zero":
        h = np.zeros(model.enc_dim)
        return IlmState(0, pst, h), _renormalized(model, g, h)
    if kind == "avg":
        if H is None:
            raise ValueError("the avg ILM variant needs encoder outputs")
        h = np.asarray(H, dtype=np.float64).mean(axis=0)
        return IlmState(0, pst, h), _renormalized(model, g, h)
    ist, h = mini_ilm_step(variant.resource, None, START)
    return IlmState(0, (pst, ist)), _renormalized(model, g, h)


def ilm_step(variant: IlmVariant, model: RnntModel, state: IlmState, label: int
             ) -> Tuple[IlmState, np.ndarray]:
    """Consume ``label``; return the new state and ``log P_ILM(. | history + label)``."""
    if not 0 <= label < model.vocab_size:
        raise IndexError(f"label {label} out of range for |V|={model.vocab_size}")
    kind = variant.kind
    n = state.history_len + 1
    if kind == "density-ratio":
        st, dist = lm_step(variant.resource, state.inner, label)
        return IlmState(n, st), _drop_eos(dist)
    if kind in ("zero", "avg"):
        pst, g = predict_step(model, state.inner, label)
        return IlmState(n, pst, state.h_prime), _renormalized(model, g, state.h_prime)
    pst, g = predict_step(model, state.inner[0], label)
    ist, h = mini_ilm_step(variant.resource, state.inner[1], label)
    return IlmState(n, (pst, ist)), _renormalized(model, g, h)


def ilm_sequence_logprob(variant: IlmVariant, model: RnntModel, labels: Sequence[int],
                         H: Optional[np.ndarray] = None) -> float:
    """``log P_ILM(a_1^S)`` as a sum of per-step log-probabilities (no sentence end)."""
    state, dist = ilm_init(variant, model, H)
    total = 0.0
    for a in labels:
        total += float(dist[a])
        state, dist = ilm_step(variant, model, state, a)
    return total


def ilm_perplexity(variant: IlmVariant, model: RnntModel, sentences: Sequence[Sequence[int]]) -> float:
    lp = sum(ilm_sequence_logprob(variant, model, s) for s in sentences)
    return float(np.exp(-lp / sum(len(s) for s in sentences)))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_density_ratio_lm(sentences: Sequence[Sequence[int]], config: RecurrentLmConfig,
                           train_cfg: TrainConfig, seed: int,
                           heldout: Optional[Sequence[Sequence[int]]] = None) -> Tuple[DensityRatioLm, TrainCurve]:
    """Separate LM on the acoustic transcriptions (same structure family as the prediction net)."""
    return train_recurrent_lm(sentences, config, train_cfg, seed, kind="density-ratio-lm", heldout=heldout)


def _as_label_seqs(items) -> list:
    return [tuple(u.labels) if isinstance(u, Utterance) else tuple(u) for u in items]


def train_mini_ilm(model: RnntModel, corpus: Sequence, loss_kind: str = "plain", alpha: float = 1.0,
                   alignments: Optional[Dict[str, Sequence[int]]] = None,
                   config: Optional[MiniIlmConfig] = None, train_cfg: Optional[TrainConfig] = None,
                   seed: int = 0, heldout: Optional[Sequence[Sequence[int]]] = None
                   ) -> Tuple[MiniIlmNet, TrainCurve]:
    """Train the mini-LSTM ILM network on top of a frozen transducer.

    ``corpus`` holds utterances (or plain label sequences in ``plain`` mode).
    ``exact`` mode additionally needs ``alignments``: utterance id -> emission
    frame of every label, taken from a reference (usually the same) model.
    Held-out ILM perplexity drives early stopping when ``heldout`` is given.
    """
    if loss_kind not in ("plain", "exact"):
        raise ValueError(f"loss kind must be 'plain' or 'exact', got {loss_kind!r}")
    config = config or MiniIlmConfig(model.vocab_size, model.enc_dim)
    train_cfg = train_cfg or TrainConfig()
    net = init_mini_ilm(config, seed)
    fixed = frozen(model)
    seqs = _as_label_seqs(corpus)
    frame_enc = None
    if loss_kind == "exact":
        if alignments is None:
            raise MissingAlignmentError("exact ILM training needs an alignment cache")
        frame_enc = []
        for u in corpus:
            if not isinstance(u, Utterance) or u.id not in alignments:
                raise MissingAlignmentError(f"no alignment for utterance {getattr(u, 'id', u)!r}")
            frames = list(alignments[u.id])
            if len(frames) != len(u.labels):
                raise MissingAlignmentError(f"alignment of {u.id} does not match its transcription")
            frame_enc.append(encode(model, u.features)[frames])
    items = list(range(len(seqs)))
    variant = IlmVariant("mini-lstm", net)

    def loss_fn(chunk):
        labels, lens = pad_labels([seqs[i] for i in chunk])
        if loss_kind == "plain":
            return loss_ilm(variant, labels, lens, fixed)
        sel = np.zeros((len(chunk), labels.shape[1], model.enc_dim))
        for r, i in enumerate(chunk):
            sel[r, : len(seqs[i])] = frame_enc[i]
        return loss_exact_ilm(fixed, net, AlignedBatch(labels, lens, sel), alpha)

    hf = (lambda: ilm_perplexity(variant, model, heldout)) if heldout else None
    curve = sgd_train(net.params, list(net.params), items, loss_fn, train_cfg, seed, hf)
    return net, curve
