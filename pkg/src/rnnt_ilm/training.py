"""SGD training loops for the transducer, its ILMT fine-tuning and the label LMs."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import numeric as nm
from .corpus import Utterance, collate, pad_labels
from .lattice import loss_ilmt, loss_rnnt
from .model import (NGramLm, RecurrentLm, RecurrentLmConfig, RnntModel, init_recurrent_lm,
                    recurrent_lm_logprobs)
from .numeric import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.5
    clip: float = 5.0
    epochs: int = 10
    batch_size: int = 32
    patience: Optional[int] = None


@dataclass
class TrainCurve:
    """Per-epoch training record; ``best_epoch`` is the restored checkpoint (1-based, 0 = init)."""

    train_loss: List[float] = field(default_factory=list)
    heldout: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None


def sgd_train(params: Dict[str, Tensor], trainable: Sequence[str], items: Sequence,
              loss_fn: Callable[[Sequence], Tensor], cfg: TrainConfig, seed: int,
              heldout_fn: Optional[Callable[[], float]] = None) -> TrainCurve:
    """Mini-batch SGD over ``items`` with global-norm clipping.

    When ``heldout_fn`` is given it is evaluated after every epoch (lower is
    better); the best checkpoint is restored at the end and ``cfg.patience``
    epochs without improvement stop training early.
    """
    rng = np.random.default_rng(seed)
    curve = TrainCurve()
    trainable = list(trainable)
    best = None
    if heldout_fn is not None:
        best = (heldout_fn(), 0, {k: params[k].value.copy() for k in trainable})
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(items))
        total, n = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            chunk = [items[j] for j in order[i:i + cfg.batch_size]]
            loss = loss_fn(chunk)
            grads = nm.backward(loss, {k: params[k] for k in trainable})
            nm.sgd_update(params, grads, cfg.lr, cfg.clip, names=trainable)
            total += float(loss.value)
            n += 1
        curve.train_loss.append(total / max(n, 1))
        if heldout_fn is not None:
            score = heldout_fn()
            curve.heldout.append(score)
            log.info("epoch %d train %.4f heldout %.4f", epoch, curve.train_loss[-1], score)
            if score < best[0]:
                best = (score, epoch, {k: params[k].value.copy() for k in trainable})
            elif cfg.patience is not None and epoch - best[1] >= cfg.patience:
                break
        else:
            log.info("epoch %d train %.4f", epoch, curve.train_loss[-1])
    if best is not None:
        for k, v in best[2].items():
            params[k].value = v
        curve.best_epoch = best[1]
    return curve


def train_rnnt(model: RnntModel, train: Sequence[Utterance], cfg: TrainConfig, seed: int, topology,
               heldout_fn: Optional[Callable[[RnntModel], float]] = None) -> TrainCurve:
    """Full-sum training of all transducer parameters."""
    hf = (lambda: heldout_fn(model)) if heldout_fn is not None else None
    return sgd_train(model.params, list(model.params), train,
                     lambda chunk: loss_rnnt(model, collate(chunk), topology), cfg, seed, hf)


def train_ilmt(model: RnntModel, train: Sequence[Utterance], variant, alpha: float, cfg: TrainConfig,
               seed: int, topology, heldout_fn: Optional[Callable[[RnntModel], float]] = None) -> TrainCurve:
    """ILMT fine-tuning: prediction and joint networks (and a mini ILM) move, the encoder is frozen."""
    names = model.pred_joint_params()
    params = dict(model.params)
    if variant.kind == "mini-lstm":
        for k, v in variant.resource.params.items():
            params["ilm." + k] = v
            names.append("ilm." + k)
    hf = (lambda: heldout_fn(model)) if heldout_fn is not None else None

    def loss_fn(chunk):
        return loss_ilmt(model, collate(chunk), alpha, variant, topology)

    curve = sgd_train(params, names, train, loss_fn, cfg, seed, hf)
    if variant.kind == "mini-lstm":
        for k in variant.resource.params:
            variant.resource.params[k] = params["ilm." + k]
    return curve


# ---------------------------------------------------------------------------
# Label LMs
# ---------------------------------------------------------------------------

def lm_nll(lm: RecurrentLm, sentences: Sequence[Sequence[int]]) -> Tensor:
    """Mean over sentences of -log P(a_1^S, EOS)."""
    labels, lens = pad_labels(sentences)
    lp = recurrent_lm_logprobs(lm, labels)
    S1 = labels.shape[1] + 1
    targets = np.zeros((len(sentences), S1), dtype=np.int64)
    targets[:, :-1] = labels
    targets[np.arange(len(sentences)), lens] = lm.eos
    mask = (np.arange(S1)[None, :] <= lens[:, None]).astype(np.float64)
    picked = nm.mul(nm.gather(lp, targets), mask)
    return nm.scale(nm.sum_all(picked), -1.0 / len(sentences))


def corpus_perplexity(total_logprob: float, num_tokens: int) -> float:
    return math.exp(-total_logprob / num_tokens)


def recurrent_lm_perplexity(lm: RecurrentLm, sentences: Sequence[Sequence[int]]) -> float:
    """Per-token perplexity including the sentence-end token."""
    with nm.no_grad():
        nll = float(lm_nll(lm, sentences).value) * len(sentences)
    return corpus_perplexity(-nll, sum(len(s) + 1 for s in sentences))


def train_recurrent_lm(sentences: Sequence[Sequence[int]], config: RecurrentLmConfig, cfg: TrainConfig,
                       seed: int, kind: str = "lm",
                       heldout: Optional[Sequence[Sequence[int]]] = None) -> (RecurrentLm, TrainCurve):
    if not sentences:
        raise ValueError("empty training corpus")
    lm = init_recurrent_lm(config, seed, kind=kind)
    hf = None
    if heldout:
        hf = lambda: recurrent_lm_perplexity(lm, heldout)
    curve = sgd_train(lm.params, list(lm.params), list(sentences), lambda chunk: lm_nll(lm, chunk),
                      cfg, seed, hf)
    return lm, curve


def train_ngram_lm(sentences: Sequence[Sequence[int]], vocab_size: int, order: int = 2,
                   delta: float = 0.1) -> NGramLm:
    if not sentences:
        raise ValueError("empty training corpus")
    return NGramLm(order, vocab_size, delta).fit(sentences)
