"""End-to-end experiment steps shared by the command line and the acceptance suite."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import lattice as L
from .config import ExperimentConfig, OptimSettings
from .corpus import Corpus, Utterance, gen_corpus, gen_text_corpus, make_domain_pair
from .decoder import FusionConfig, UtteranceScorer, beam_search_decode
from .evaluation import AnalysisSystem, ErrorCounts, ReportRow, SweepResult, analysis_report, corpus_wer, scale_range
from .ilm import IlmVariant, train_density_ratio_lm, train_mini_ilm
from .model import MiniIlmConfig, NGramLm, RecurrentLmConfig, RnntConfig, RnntModel, init_rnnt
from .training import TrainConfig, TrainCurve, train_ilmt, train_ngram_lm, train_rnnt

log = logging.getLogger(__name__)

Hyps = Dict[str, Tuple[int, ...]]


def train_config(o: OptimSettings) -> TrainConfig:
    return TrainConfig(lr=o.lr, clip=o.clip, epochs=o.epochs, batch_size=o.batch_size, patience=o.patience)


def refs_of(utts: Sequence[Utterance]) -> Hyps:
    return {u.id: tuple(u.labels) for u in utts}


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass
class TaskData:
    in_domain: Corpus
    cross: Corpus  # only its dev and test splits are used
    text_in: List[Tuple[int, ...]]
    text_cross: List[Tuple[int, ...]]

    @property
    def vocab(self) -> List[str]:
        return self.in_domain.vocab


def build_task(cfg: ExperimentConfig) -> TaskData:
    t, seed = cfg.task, cfg.seed
    ind, cross = make_domain_pair(seed, t.vocab_size, t.feat_dim, t.noise, t.group, t.spread, t.successors,
                                  t.peak, tuple(t.length_range), tuple(t.durations))
    n_in = t.n_train + t.n_dev + t.n_test
    corp = gen_corpus(ind, n_in, seed * 10 + 1, splits=(t.n_train, t.n_dev, t.n_test))
    xc = gen_corpus(cross, 1 + t.n_cross_dev + t.n_cross_test, seed * 10 + 2,
                    splits=(1, t.n_cross_dev, t.n_cross_test), prefix="x")
    return TaskData(corp, xc, gen_text_corpus(ind, t.n_text, seed * 10 + 4),
                    gen_text_corpus(cross, t.n_text, seed * 10 + 3))


# ---------------------------------------------------------------------------
# Decoding helpers
# ---------------------------------------------------------------------------

def decode_labels(model: RnntModel, utts: Sequence[Utterance], cfg: FusionConfig, topology,
                  lm=None, ilm: Optional[IlmVariant] = None,
                  scorers: Optional[Dict[str, UtteranceScorer]] = None) -> Hyps:
    out = {}
    for u in utts:
        sc = None
        if scorers is not None:
            sc = scorers.get(u.id)
            if sc is None:
                sc = scorers[u.id] = UtteranceScorer(model, u.features, lm, ilm)
        out[u.id] = beam_search_decode(model, u.features, lm, cfg, topology, ilm, scorer=sc).labels
    return out


def fusion_config(base: FusionConfig, lm_scale: float, ilm_scale: float, length_reward: float = 0.0,
                  variant: str = "none", renorm_eps: bool = False) -> FusionConfig:
    return FusionConfig(lm_scale=lm_scale, ilm_scale=ilm_scale, length_reward=length_reward,
                        ilm_variant=variant if ilm_scale else "none", renorm_eps=renorm_eps,
                        beam=base.beam, score_beam=base.score_beam, recombination=base.recombination)


def _grid_chunk(args):
    model, utts, lm, ilm, base, topology, cells, renorm = args
    scorers: Dict[str, UtteranceScorer] = {}
    variant = ilm.kind if ilm is not None else "none"
    return {cell: decode_labels(model, utts, fusion_config(base, cell[0], cell[1], cell[2], variant,
                                                           cell[3] if len(cell) > 3 else renorm),
                                topology, lm, ilm, scorers) for cell in cells}


def decode_grid(model, utts, lm, ilm, base: FusionConfig, topology, cells, renorm_eps=False,
                workers: int = 1) -> Dict[Tuple[float, float, float], Hyps]:
    """Hypotheses for every (lm_scale, ilm_scale, length_reward[, renorm_eps]) cell.

    Utterances are split across ``workers`` processes; each worker decodes the
    whole grid on its share so per-utterance caches are reused across cells.
    """
    cells = list(cells)
    if workers <= 1 or len(utts) < 2:
        return _grid_chunk((model, list(utts), lm, ilm, base, topology, cells, renorm_eps))
    chunks = [list(c) for c in np.array_split(np.arange(len(utts)), workers) if len(c)]
    jobs = [(model, [utts[i] for i in c], lm, ilm, base, topology, cells, renorm_eps) for c in chunks]
    out: Dict = {cell: {} for cell in cells}
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(_grid_chunk, jobs):
            for cell, hyps in part.items():
                out[cell].update(hyps)
    return out


def sweep_fusion(model, utts, lm, ilm, base: FusionConfig, topology, lm_range, ilm_range, step,
                 workers: int = 1, length_reward: float = 0.0, renorm_eps: bool = False) -> SweepResult:
    """Grid search of (lm_scale, ilm_scale) on ``utts``; the grid is decoded up front."""
    from .evaluation import sweep_scales
    lms, ilms = scale_range(*lm_range, step), scale_range(*ilm_range, step)
    grid = decode_grid(model, utts, lm, ilm, base, topology,
                       [(a, b, length_reward) for a in lms for b in ilms], renorm_eps, workers)
    return sweep_scales(lambda a, b: grid[(a, b, length_reward)], refs_of(utts), lm_range, ilm_range, step)


# ---------------------------------------------------------------------------
# Training steps
# ---------------------------------------------------------------------------

def rnnt_config(cfg: ExperimentConfig, vocab_size: int, feat_dim: int) -> RnntConfig:
    m = cfg.model
    return RnntConfig(vocab_size, feat_dim, m.enc_layers, m.enc_units, m.subsampling, m.pred_layers,
                      m.pred_units, m.embed_dim, m.joint_units)


def selection_config(cfg: ExperimentConfig) -> FusionConfig:
    return FusionConfig(beam=cfg.fusion.select_beam, score_beam=min(cfg.fusion.score_beam, 8.0))


def train_base(cfg: ExperimentConfig, corpus: Corpus) -> Tuple[RnntModel, TrainCurve]:
    """Full-sum training; the checkpoint with the best no-LM dev WER is kept."""
    model = init_rnnt(rnnt_config(cfg, len(corpus.vocab), corpus.feat_dim), cfg.seed)
    sel, refs = selection_config(cfg), refs_of(corpus.dev)

    def dev_wer(m):
        return corpus_wer(refs, decode_labels(m, corpus.dev, sel, cfg.topology)).wer

    curve = train_rnnt(model, corpus.train, train_config(cfg.rnnt_train), cfg.seed, cfg.topology, dev_wer)
    return model, curve


def finetune_ilmt(cfg: ExperimentConfig, model: RnntModel, corpus: Corpus, variant: IlmVariant,
                  alpha: Optional[float] = None) -> TrainCurve:
    sel, refs = selection_config(cfg), refs_of(corpus.dev)
    alpha = cfg.ilmt_alpha if alpha is None else alpha
    return train_ilmt(model, corpus.train, variant, alpha, train_config(cfg.ilmt_train), cfg.seed, cfg.topology,
                      lambda m: corpus_wer(refs, decode_labels(m, corpus.dev, sel, cfg.topology)).wer)


def train_external_lm(cfg: ExperimentConfig, sentences, vocab_size: int) -> NGramLm:
    return train_ngram_lm(sentences, vocab_size, cfg.lm_order, cfg.lm_delta)


def train_dr_lm(cfg: ExperimentConfig, corpus: Corpus):
    sents = [u.labels for u in corpus.train]
    lm, _ = train_density_ratio_lm(sents, RecurrentLmConfig(len(corpus.vocab), units=cfg.dr_lm_units),
                                   train_config(cfg.dr_lm_train), cfg.seed)
    return lm


def viterbi_frames(model: RnntModel, utts: Sequence[Utterance], topology) -> Dict[str, Tuple[int, ...]]:
    """Emission frame of every reference label along the best alignment."""
    out = {}
    for u in utts:
        grid = L.posterior_grid(model, u.features, u.labels, topology)
        out[u.id] = L.viterbi_align(grid, u.labels, topology).frames
    return out


def train_mini(cfg: ExperimentConfig, model: RnntModel, corpus: Corpus, loss: str = "plain",
               alpha: Optional[float] = None, alignments=None):
    alpha = cfg.exact_alpha if alpha is None else alpha
    net_cfg = MiniIlmConfig(model.vocab_size, model.enc_dim, units=cfg.mini_ilm_units)
    net, _ = train_mini_ilm(model, corpus.train, loss, alpha, alignments, net_cfg,
                            train_config(cfg.mini_ilm_train), cfg.seed)
    return net


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass
class TunedSystem:
    name: str
    lm_scale: float
    ilm_scale: float
    dev: ErrorCounts
    test: ErrorCounts


@dataclass
class TrendResult:
    systems: Dict[str, TunedSystem] = field(default_factory=dict)

    def wer(self, name: str) -> float:
        return self.systems[name].test.wer

    def checks(self) -> Dict[str, bool]:
        h_best = min(self.wer(k) for k in ("zero", "avg", "mini-plain", "mini-exact"))
        return {
            "no-LM > SF": self.wer("no-lm") > self.wer("sf"),
            "SF >= density-ratio": self.wer("sf") >= self.wer("density-ratio"),
            "density-ratio >= best h'": self.wer("density-ratio") >= h_best,
            "exact <= plain": self.wer("mini-exact") <= self.wer("mini-plain"),
        }

    def table(self) -> str:
        lines = [f"{'system':<14}{'lm':>6}{'ilm':>6}{'dev WER':>9}{'test WER':>9}"]
        for s in self.systems.values():
            lines.append(f"{s.name:<14}{s.lm_scale:>6.2f}{s.ilm_scale:>6.2f}"
                         f"{100 * s.dev.wer:>9.2f}{100 * s.test.wer:>9.2f}")
        return "\n".join(lines) + "\n"


@dataclass
class Artifacts:
    model: RnntModel
    lm: NGramLm
    variants: Dict[str, IlmVariant]
    base_curve: Optional[TrainCurve] = None


def build_artifacts(cfg: ExperimentConfig, data: TaskData) -> Artifacts:
    model, curve = train_base(cfg, data.in_domain)
    log.info("base model dev WER per epoch %s", curve.heldout)
    lm = train_external_lm(cfg, data.text_cross, len(data.vocab))
    dr = train_dr_lm(cfg, data.in_domain)
    frames = viterbi_frames(model, data.in_domain.train, cfg.topology)
    plain = train_mini(cfg, model, data.in_domain, "plain")
    exact = train_mini(cfg, model, data.in_domain, "exact", alignments=frames)
    variants = {
        "density-ratio": IlmVariant("density-ratio", dr),
        "zero": IlmVariant("zero"),
        "avg": IlmVariant("avg"),
        "mini-plain": IlmVariant("mini-lstm", plain),
        "mini-exact": IlmVariant("mini-lstm", exact),
    }
    return Artifacts(model, lm, variants, curve)


def trend_experiment(cfg: ExperimentConfig, data: TaskData, art: Artifacts) -> TrendResult:
    """Tune every fusion system on cross-domain dev, then score cross-domain test at the optimum."""
    base = FusionConfig(beam=cfg.fusion.beam, score_beam=cfg.fusion.score_beam,
                        recombination=cfg.fusion.recombination)
    dev, test = data.cross.dev, data.cross.test
    m, topo = art.model, cfg.topology
    sw = cfg.sweep
    out = TrendResult()

    nolm = fusion_config(base, 0, 0)
    out.systems["no-lm"] = TunedSystem("no-lm", 0, 0, corpus_wer(refs_of(dev), decode_labels(m, dev, nolm, topo)),
                                       corpus_wer(refs_of(test), decode_labels(m, test, nolm, topo)))
    rows = [("sf", None, (0.0, 0.0))] + [(k, v, sw.ilm_range) for k, v in art.variants.items()]
    for name, variant, ilm_range in rows:
        res = sweep_fusion(m, dev, art.lm, variant, base, topo, sw.lm_range, ilm_range, sw.step)
        a, b = res.best
        kind = variant.kind if variant is not None else "none"
        hyps = decode_labels(m, test, fusion_config(base, a, b, 0.0, kind), topo, art.lm, variant)
        out.systems[name] = TunedSystem(name, a, b, res.best_counts, corpus_wer(refs_of(test), hyps))
        log.info("%s tuned at (%.2f, %.2f): dev %.4f test %.4f", name, a, b, res.best_counts.wer,
                 out.systems[name].test.wer)
    return out


ANALYSIS_ROWS = ("sf", "sf+reward", "renorm-eps", "renorm-eps+reward", "ilm-correction")


def analysis(cfg: ExperimentConfig, model: RnntModel, utts: Sequence[Utterance], lm, variant: IlmVariant,
             workers: int = 1) -> Tuple[List[ReportRow], str, str]:
    """Tuned rows for SF, SF + reward, renorm-eps, renorm-eps + reward and full ILM correction."""
    base = FusionConfig(beam=cfg.fusion.beam, score_beam=cfg.fusion.score_beam,
                        recombination=cfg.fusion.recombination)
    sw = cfg.sweep
    lms, rhos = scale_range(*sw.lm_range, sw.step), list(sw.length_rewards)
    # an ILM scale of 0 would turn the renorm-eps and ILM rows back into shallow fusion
    ilms = [b for b in scale_range(*sw.ilm_range, sw.step) if b > 0]
    if not ilms:
        raise ValueError("the analysis needs at least one positive ILM scale")
    plan = {
        "sf": (lms, [0.0], [0.0], False),
        "sf+reward": (lms, [0.0], rhos, False),
        "renorm-eps": (lms, ilms, [0.0], True),
        "renorm-eps+reward": (lms, ilms, rhos, True),
        "ilm-correction": (lms, ilms, [0.0], False),
    }
    cells = sorted({(a, b, r, p[3]) for p in plan.values() for a in p[0] for b in p[1] for r in p[2]})
    grid = decode_grid(model, utts, lm, variant, base, cfg.topology, cells, workers=workers)
    systems = [AnalysisSystem(name, lambda a, b, r, renorm=plan[name][3]: grid[(a, b, r, renorm)], *plan[name][:3])
               for name in ANALYSIS_ROWS]
    return analysis_report(systems, refs_of(utts))


def analysis_checks(rows: Sequence[ReportRow]) -> Dict[str, bool]:
    r = {row.name: row.counts for row in rows}
    return {
        "reward lowers deletions at equal-or-better WER":
            r["sf+reward"].deletions < r["sf"].deletions and r["sf+reward"].wer <= r["sf"].wer,
        "renorm-eps lowers substitutions": r["renorm-eps"].substitutions < r["sf"].substitutions,
        "ILM correction matches or beats renorm-eps + reward": r["ilm-correction"].wer <= r["renorm-eps+reward"].wer,
    }
