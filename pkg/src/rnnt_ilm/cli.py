"""Command-line entry point: ``rnnt-ilm <command> [flags]``.

Every command writes ``<out>.config.json`` (resolved configuration) and
``<out>.manifest.json`` (digests of inputs and outputs) next to its output.
Re-running a command whose manifest matches is a no-op.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional

from . import config as C
from . import corpus as K
from . import decoder as D
from . import evaluation as E
from . import ilm as I
from . import lattice as L
from . import manifest as MF
from . import model as M
from . import pipeline as P

log = logging.getLogger("rnnt_ilm")

EXIT_OK = 0
EXIT_USAGE = 2  # argparse: unknown flag or bad value
EXIT_MISSING_INPUT = 3
EXIT_VOCAB_MISMATCH = 4
EXIT_BAD_FORMAT = 5
EXIT_FAILED = 6
EXIT_UNWRITABLE = 7


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------------------
# Input helpers
# ---------------------------------------------------------------------------

def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING_INPUT, f"missing {what}: {p}")
    return p


def _corpus(path) -> K.Corpus:
    _need(Path(path) / "manifest.json", "corpus manifest")
    return K.load_corpus(path)


def _split(corpus: K.Corpus, name: str):
    if name not in corpus.splits:
        raise CliError(EXIT_MISSING_INPUT, f"corpus has no split {name!r}")
    return corpus.splits[name]


def _model(path, kind=None, vocab: Optional[List[str]] = None):
    _need(path, "model file")
    obj = M.load_model(path, kind=kind)
    stored = M.model_vocab(path)
    if vocab is not None:
        if obj.vocab_size != len(vocab) or (stored is not None and stored != list(vocab)):
            raise CliError(EXIT_VOCAB_MISMATCH, f"{path}: vocabulary does not match the corpus")
    return obj


def _variant(args, model, vocab) -> Optional[I.IlmVariant]:
    kind = args.ilm_variant
    if kind == "none":
        return None
    if kind in ("zero", "avg"):
        return I.IlmVariant(kind)
    if not args.ilm_model:
        raise CliError(EXIT_MISSING_INPUT, f"--ilm-variant {kind} needs --ilm-model")
    want = "density-ratio-lm" if kind == "density-ratio" else "mini-ilm"
    return I.IlmVariant(kind, _model(args.ilm_model, want, vocab))


def _base_cfg(args, cfg: C.ExperimentConfig) -> D.FusionConfig:
    return D.FusionConfig(beam=args.beam, score_beam=args.score_beam,
                          recombination="logsumexp" if args.recomb == "sum" else "max")


# ---------------------------------------------------------------------------
# Commands; each returns (inputs, outputs, body)
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    out = Path(args.out)

    def body():
        data = P.build_task(cfg)
        K.save_corpus(data.in_domain, out / "in")
        K.save_corpus(data.cross, out / "cross")
        K.save_text_corpus(data.text_in, data.vocab, out / "text_in.txt")
        K.save_text_corpus(data.text_cross, data.vocab, out / "text_cross.txt")
        print(f"wrote {out}: {len(data.in_domain.train)} train utterances, "
              f"{len(data.cross.test)} cross-domain test utterances")
        return [out / "in", out / "cross", out / "text_in.txt", out / "text_cross.txt"]
    return [], body


def cmd_train_rnnt(args, cfg):
    corpus = _corpus(args.data)

    def body():
        model, curve = P.train_base(cfg, corpus)
        M.save_model(model, args.out, vocab=corpus.vocab)
        print(f"dev WER per epoch: {[round(w, 4) for w in curve.heldout]}; kept epoch {curve.best_epoch}")
        return [args.out]
    return [args.data], body


def cmd_train_ilmt(args, cfg):
    corpus = _corpus(args.data)
    model = _model(args.model, "rnnt", corpus.vocab)
    inputs = [args.data, args.model]
    if args.variant == "mini-lstm":
        if not args.ilm_model:
            raise CliError(EXIT_MISSING_INPUT, "--variant mini-lstm needs --ilm-model")
        variant = I.IlmVariant("mini-lstm", _model(args.ilm_model, "mini-ilm", corpus.vocab))
        inputs.append(args.ilm_model)
    else:
        variant = I.IlmVariant(args.variant)

    def body():
        curve = P.finetune_ilmt(cfg, model, corpus, variant, args.alpha)
        M.save_model(model, args.out, vocab=corpus.vocab)
        print(f"dev WER per epoch: {[round(w, 4) for w in curve.heldout]}; kept epoch {curve.best_epoch}")
        return [args.out]
    return inputs, body


def _vocab_from(path) -> List[str]:
    return _corpus(path).vocab


def cmd_train_lm(args, cfg):
    _need(args.text, "text corpus")
    vocab = _vocab_from(args.data)

    def body():
        sents = K.load_text_corpus(args.text, vocab)
        lm = P.train_external_lm(cfg, sents, len(vocab))
        M.save_model(lm, args.out, vocab=vocab)
        print(f"{cfg.lm_order}-gram LM on {len(sents)} sentences")
        return [args.out]
    return [args.text, args.data], body


def cmd_train_dr_lm(args, cfg):
    corpus = _corpus(args.data)

    def body():
        lm = P.train_dr_lm(cfg, corpus)
        M.save_model(lm, args.out, vocab=corpus.vocab)
        return [args.out]
    return [args.data], body


def cmd_align(args, cfg):
    corpus = _corpus(args.data)
    model = _model(args.model, "rnnt", corpus.vocab)

    def body():
        utts = _split(corpus, args.split)
        frames = P.viterbi_frames(model, utts, cfg.topology)
        records = {u.id: (cfg.topology, list(zip(u.labels, frames[u.id]))) for u in utts}
        MF.ensure_writable(args.out)
        L.save_alignments(records, args.out)
        return [args.out]
    return [args.data, args.model], body


def cmd_train_ilm(args, cfg):
    corpus = _corpus(args.data)
    model = _model(args.model, "rnnt", corpus.vocab)
    inputs = [args.data, args.model]
    frames = None
    if args.loss == "exact":
        if not args.alignments:
            raise CliError(EXIT_MISSING_INPUT, "--loss exact needs --alignments")
        _need(args.alignments, "alignment file")
        inputs.append(args.alignments)
        frames = {uid: [t for _, t in pairs] for uid, (_, pairs) in L.load_alignments(args.alignments).items()}

    def body():
        net = P.train_mini(cfg, model, corpus, args.loss, args.alpha, frames)
        M.save_model(net, args.out, vocab=corpus.vocab)
        v = I.IlmVariant("mini-lstm", net)
        print(f"held-out ILM perplexity {I.ilm_perplexity(v, model, [u.labels for u in corpus.dev]):.3f}")
        return [args.out]
    return inputs, body


def _decode_inputs(args):
    corpus = _corpus(args.data)
    model = _model(args.model, "rnnt", corpus.vocab)
    lm = _model(args.lm, None, corpus.vocab) if args.lm else None
    variant = _variant(args, model, corpus.vocab)
    inputs = [args.data, args.model] + [p for p in (args.lm, args.ilm_model) if p]
    return corpus, model, lm, variant, inputs


def cmd_decode(args, cfg):
    corpus, model, lm, variant, inputs = _decode_inputs(args)
    base = _base_cfg(args, cfg)
    try:
        fcfg = D.FusionConfig(lm_scale=args.lm_scale, ilm_scale=args.ilm_scale, length_reward=args.length_reward,
                              ilm_variant=args.ilm_variant, renorm_eps=args.renorm_eps, beam=base.beam,
                              score_beam=base.score_beam, recombination=base.recombination)
    except ValueError as e:
        raise CliError(EXIT_USAGE, str(e)) from e
    if fcfg.lm_scale and lm is None:
        raise CliError(EXIT_MISSING_INPUT, "--lm-scale > 0 needs --lm")

    def body():
        utts = _split(corpus, args.split)
        results = {}
        for u in utts:
            results[u.id] = D.beam_search_decode(model, u.features, lm, fcfg, cfg.topology, variant)
        MF.ensure_writable(args.out)
        D.write_nbest(results, corpus.vocab, args.out, n=args.nbest)
        c = E.corpus_wer(P.refs_of(utts), {k: r.labels for k, r in results.items()})
        print(f"WER {100 * c.wer:.2f}  sub {c.substitutions}  del {c.deletions}  ins {c.insertions}  "
              f"ref {c.ref_len}")
        return [args.out]
    return inputs, body


def cmd_sweep(args, cfg):
    corpus, model, lm, variant, inputs = _decode_inputs(args)
    if lm is None:
        raise CliError(EXIT_MISSING_INPUT, "sweep needs --lm")
    base = _base_cfg(args, cfg)
    ilm_range = tuple(args.ilm_range) if variant is not None else (0.0, 0.0)

    def body():
        res = P.sweep_fusion(model, _split(corpus, args.split), lm, variant, base, cfg.topology,
                             tuple(args.lm_range), ilm_range, args.step, args.workers, args.length_reward,
                             args.renorm_eps)
        MF.ensure_writable(args.out)
        Path(args.out).write_text(res.to_csv())
        a, b = res.best
        best = {"lm_scale": a, "ilm_scale": b, "wer": res.best_counts.wer,
                "cells": len(res.cells)}
        best_path = Path(str(args.out) + ".best.json")
        best_path.write_text(json.dumps(best, indent=2) + "\n")
        print(f"best lm_scale {a:g} ilm_scale {b:g}: WER {100 * res.best_counts.wer:.2f} "
              f"over {len(res.cells)} cells")
        return [args.out, best_path]
    return inputs, body


def cmd_evaluate(args, cfg):
    corpus = _corpus(args.data)
    _need(args.hyp, "hypothesis file")

    def body():
        try:
            nbest = D.read_nbest(args.hyp)
        except ValueError as e:
            raise CliError(EXIT_BAD_FORMAT, str(e)) from e
        hyps = {uid: min(rows)[2] for uid, rows in nbest.items()}
        refs = P.refs_of(_split(corpus, args.split))
        try:
            c = E.corpus_wer(refs, hyps)
        except KeyError as e:
            raise CliError(EXIT_BAD_FORMAT, str(e)) from e
        report = {"wer": c.wer, "substitutions": c.substitutions, "deletions": c.deletions,
                  "insertions": c.insertions, "ref_len": c.ref_len}
        MF.ensure_writable(args.out)
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
        print(f"WER {100 * c.wer:.2f}  sub {c.substitutions}  del {c.deletions}  ins {c.insertions}  "
              f"ref {c.ref_len}")
        return [args.out]
    return [args.data, args.hyp], body


def cmd_analyze(args, cfg):
    corpus, model, lm, variant, inputs = _decode_inputs(args)
    if lm is None or variant is None:
        raise CliError(EXIT_MISSING_INPUT, "analyze needs --lm and an --ilm-variant")
    cfg.sweep.lm_range, cfg.sweep.ilm_range, cfg.sweep.step = tuple(args.lm_range), tuple(args.ilm_range), args.step
    cfg.sweep.length_rewards = list(args.length_rewards)
    cfg.fusion.beam, cfg.fusion.score_beam = args.beam, args.score_beam
    cfg.fusion.recombination = "logsumexp" if args.recomb == "sum" else "max"
    out = Path(args.out)

    def body():
        rows, text, csv_text = P.analysis(cfg, model, _split(corpus, args.split), lm, variant, args.workers)
        out.mkdir(parents=True, exist_ok=True)
        (out / "analysis.txt").write_text(text)
        (out / "analysis.csv").write_text(csv_text)
        print(text, end="")
        return [out / "analysis.txt", out / "analysis.csv"]
    return inputs, body


COMMANDS: Dict[str, Callable] = {
    "gen-data": cmd_gen_data, "train-rnnt": cmd_train_rnnt, "train-ilmt": cmd_train_ilmt,
    "train-lm": cmd_train_lm, "train-dr-lm": cmd_train_dr_lm, "train-ilm": cmd_train_ilm,
    "align": cmd_align, "decode": cmd_decode, "sweep": cmd_sweep, "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _fusion_flags(p, scales=True):
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--split", default="test")
    p.add_argument("--model", required=True)
    p.add_argument("--lm", help="external LM model file")
    p.add_argument("--ilm-variant", default="none", choices=I.VARIANTS)
    p.add_argument("--ilm-model", help="density-ratio LM or mini-ILM model file")
    p.add_argument("--length-reward", type=float, default=0.0)
    p.add_argument("--renorm-eps", action="store_true")
    p.add_argument("--beam", type=int, default=128)
    p.add_argument("--score-beam", type=float, default=12.0)
    p.add_argument("--recomb", choices=("sum", "max"), default="sum")
    p.add_argument("--workers", type=int, default=1)
    if scales:
        p.add_argument("--lm-scale", type=float, default=0.0)
        p.add_argument("--ilm-scale", type=float, default=0.0)


def _range_flags(p):
    p.add_argument("--lm-range", type=float, nargs=2, default=list(E.DEFAULT_LM_RANGE), metavar=("LO", "HI"))
    p.add_argument("--ilm-range", type=float, nargs=2, default=list(E.DEFAULT_ILM_RANGE), metavar=("LO", "HI"))
    p.add_argument("--step", type=float, default=E.DEFAULT_STEP)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rnnt-ilm", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int)
    common.add_argument("--topology", choices=("standard", "monotonic"))
    common.add_argument("--out", required=True)
    common.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common])

    p = sub.add_parser("train-rnnt", parents=[common])
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("train-ilmt", parents=[common])
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--variant", choices=("zero", "avg", "mini-lstm"), default="zero")
    p.add_argument("--ilm-model")
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--epochs", type=int, default=5)

    p = sub.add_parser("train-lm", parents=[common])
    p.add_argument("--text", required=True)
    p.add_argument("--data", required=True, help="corpus directory providing the vocabulary")
    p.add_argument("--order", type=int)

    p = sub.add_parser("train-dr-lm", parents=[common])
    p.add_argument("--data", required=True)

    p = sub.add_parser("align", parents=[common])
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="train")

    p = sub.add_parser("train-ilm", parents=[common])
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--loss", choices=("plain", "exact"), default="plain")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--alignments")

    p = sub.add_parser("decode", parents=[common])
    _fusion_flags(p)
    p.add_argument("--nbest", type=int, default=1)

    p = sub.add_parser("sweep", parents=[common])
    _fusion_flags(p, scales=False)
    _range_flags(p)
    p.set_defaults(split="dev")

    p = sub.add_parser("evaluate", parents=[common])
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--hyp", required=True)

    p = sub.add_parser("analyze", parents=[common])
    _fusion_flags(p, scales=False)
    _range_flags(p)
    p.add_argument("--length-rewards", type=float, nargs="+", default=[1.0, 2.0, 3.0, 4.0])
    p.set_defaults(split="dev", ilm_variant="zero")
    return ap


_NOT_ARGS = {"command", "config", "log_level", "workers", "out"}


def _resolve_config(args) -> C.ExperimentConfig:
    if args.config:
        _need(args.config, "config file")
    cfg = C.load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.topology:
        cfg.topology = args.topology
    if args.command == "train-rnnt":
        for flag, attr in (("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size")):
            if getattr(args, flag) is not None:
                setattr(cfg.rnnt_train, attr, getattr(args, flag))
    if args.command == "train-ilmt":
        cfg.ilmt_train.epochs = args.epochs
        cfg.ilmt_alpha = args.alpha
    if args.command == "train-ilm" and args.loss == "exact":
        cfg.exact_alpha = args.alpha
    if args.command == "train-lm" and args.order:
        cfg.lm_order = args.order
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        inputs, body = COMMANDS[args.command](args, cfg)
        cfg_dict = cfg.to_dict()
        arg_dict = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_ARGS}
        in_digests = MF.digests(inputs)
        key = MF.run_key(args.command, arg_dict, cfg_dict, in_digests)
        if MF.up_to_date(args.out, key):
            print(f"{args.out}: up to date")
            return EXIT_OK
        MF.ensure_writable(MF.manifest_path(args.out))
        t0 = time.time()
        outputs = body()
        MF.write_manifest(args.out, args.command, arg_dict, cfg_dict, {"seed": cfg.seed}, in_digests,
                          outputs, time.time() - t0, key)
        return EXIT_OK
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (FileNotFoundError, I.MissingAlignmentError) as e:
        print(f"error: missing input: {e}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except M.DimensionMismatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VOCAB_MISMATCH
    except (M.ModelFileError, K.CorpusFormatError, K.CorpusValidationError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_FORMAT
    except (MF.UnwritableError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_UNWRITABLE
    except (D.DecodeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
