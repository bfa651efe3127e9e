"""Synthetic transduction corpora and their on-disk format.

A domain is a Markov chain over a label vocabulary plus one acoustic
prototype vector per label.  Each label is rendered as its prototype repeated
for a random number of frames, with Gaussian noise on top.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

CORPUS_FORMAT_VERSION = 1


class CorpusFormatError(ValueError):
    def __init__(self, path, lineno: Optional[int], msg: str):
        self.path, self.lineno = str(path), lineno
        where = f"{path}:{lineno}" if lineno is not None else str(path)
        super().__init__(f"{where}: {msg}")


class CorpusValidationError(CorpusFormatError):
    pass


@dataclass
class DomainSpec:
    vocab: List[str]
    transitions: np.ndarray
    prototypes: np.ndarray
    initial: Optional[np.ndarray] = None
    length_range: Tuple[int, int] = (3, 10)
    durations: Tuple[int, ...] = (1, 2, 3)
    noise: float = 0.0
    order: int = 1

    def __post_init__(self):
        v = len(self.vocab)
        if v == 0:
            raise ValueError("degenerate domain: empty vocabulary")
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        expected = (v + 1,) * (self.order - 1) + (v, v)
        if self.order not in (1, 2) or self.transitions.shape != expected:
            raise ValueError(f"transitions must have shape {expected} for order {self.order}")
        if not np.allclose(self.transitions.sum(axis=-1), 1.0, atol=1e-12):
            raise ValueError("Markov rows must sum to 1")
        if self.prototypes.shape[0] != v:
            raise ValueError("one prototype per label required")
        if len({tuple(p) for p in self.prototypes}) != v:
            raise ValueError("prototypes must be pairwise distinct")
        if min(self.durations) < 1:
            raise ValueError("durations must be >= 1")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad length range {self.length_range}")
        if self.initial is None:
            first = self.transitions if self.order == 1 else self.transitions[v]
            self.initial = stationary_distribution(first)
        self.initial = np.asarray(self.initial, dtype=np.float64)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def feat_dim(self) -> int:
        return self.prototypes.shape[1]


@dataclass
class Utterance:
    id: str
    labels: Tuple[int, ...]
    features: np.ndarray

    def __post_init__(self):
        if len(self.labels) < 1:
            raise CorpusValidationError("<memory>", None, f"utterance {self.id} has an empty transcription")


@dataclass
class Corpus:
    vocab: List[str]
    feat_dim: int
    splits: Dict[str, List[Utterance]] = field(default_factory=dict)

    @property
    def train(self) -> List[Utterance]:
        return self.splits["train"]

    @property
    def dev(self) -> List[Utterance]:
        return self.splits["dev"]

    @property
    def test(self) -> List[Utterance]:
        return self.splits["test"]


def stationary_distribution(transitions: np.ndarray) -> np.ndarray:
    """Left eigenvector of a row-stochastic matrix for eigenvalue 1."""
    vals, vecs = np.linalg.eig(np.asarray(transitions).T)
    k = int(np.argmin(np.abs(vals - 1.0)))
    pi = np.real(vecs[:, k])
    return pi / pi.sum()


def sample_sentence(spec: DomainSpec, rng: np.random.Generator) -> Tuple[int, ...]:
    v = spec.vocab_size
    lo, hi = spec.length_range
    n = int(rng.integers(lo, hi + 1))
    out = [int(rng.choice(v, p=spec.initial))]
    while len(out) < n:
        if spec.order == 1:
            row = spec.transitions[out[-1]]
        else:
            prev2 = out[-2] if len(out) >= 2 else v
            row = spec.transitions[prev2, out[-1]]
        out.append(int(rng.choice(v, p=row)))
    return tuple(out)


def render_features(spec: DomainSpec, labels: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    durs = rng.choice(spec.durations, size=len(labels))
    frames = np.repeat(spec.prototypes[list(labels)], durs, axis=0)
    if spec.noise > 0:
        frames = frames + rng.normal(0.0, spec.noise, size=frames.shape)
    return frames


def gen_corpus(spec: DomainSpec, n_utterances: int, seed: int,
               splits: Optional[Tuple[int, int, int]] = None, prefix: str = "utt") -> Corpus:
    """Sample a corpus and split it into train/dev/test (disjoint by construction).

    ``splits`` gives explicit (train, dev, test) sizes; by default dev and
    test each get a twelfth of the utterances.
    """
    if n_utterances < 3:
        raise ValueError("need at least 3 utterances (one per split)")
    if splits is None:
        held = max(1, n_utterances // 12)
        splits = (n_utterances - 2 * held, held, held)
    if sum(splits) != n_utterances or min(splits) < 1:
        raise ValueError(f"bad split sizes {splits} for {n_utterances} utterances")
    rng = np.random.default_rng(seed)
    utts = []
    for i in range(n_utterances):
        labels = sample_sentence(spec, rng)
        utts.append(Utterance(f"{prefix}{i:05d}", labels, render_features(spec, labels, rng)))
    n_train, n_dev, _ = splits
    return Corpus(list(spec.vocab), spec.feat_dim, {
        "train": utts[:n_train],
        "dev": utts[n_train:n_train + n_dev],
        "test": utts[n_train + n_dev:],
    })


def gen_text_corpus(spec: DomainSpec, n_sentences: int, seed: int) -> List[Tuple[int, ...]]:
    rng = np.random.default_rng(seed)
    return [sample_sentence(spec, rng) for _ in range(n_sentences)]


# ---------------------------------------------------------------------------
# Synthetic domain construction
# ---------------------------------------------------------------------------

def peaked_chain(rng: np.random.Generator, v: int, successors: int, peak: float) -> np.ndarray:
    """Each label prefers ``successors`` random next labels carrying ``peak`` mass.

    Self-transitions get zero mass: a repeated label with a shared prototype
    would be acoustically indistinguishable from one longer segment.
    """
    if not 1 <= successors <= v - 1:
        raise ValueError("successors must lie in [1, v - 1]")
    rest = v - 1 - successors
    t = np.zeros((v, v))
    for a in range(v):
        others = np.array([b for b in range(v) if b != a])
        t[a, others] = (1.0 - peak) / rest if rest else 0.0
        t[a, rng.choice(others, size=successors, replace=False)] = peak / successors if rest else 1.0 / successors
    return t / t.sum(axis=1, keepdims=True)


def confusable_prototypes(rng: np.random.Generator, v: int, d: int, group: int, spread: float) -> np.ndarray:
    """Labels come in groups of ``group`` whose prototypes lie ``spread`` apart."""
    n_groups = -(-v // group)
    centers = rng.normal(0.0, 1.0, size=(n_groups, d))
    protos = np.repeat(centers, group, axis=0)[:v]
    return protos + rng.normal(0.0, spread, size=(v, d))


def make_domain_pair(seed: int, vocab_size: int = 20, feat_dim: int = 8, noise: float = 0.0,
                     group: int = 1, spread: float = 1.0, successors: int = 2, peak: float = 0.9,
                     length_range: Tuple[int, int] = (3, 10),
                     durations: Tuple[int, ...] = (1, 2, 3)) -> Tuple[DomainSpec, DomainSpec]:
    """An in-domain and a cross-domain spec sharing vocabulary and acoustics.

    Only the label Markov chain differs between the two domains.
    """
    rng = np.random.default_rng(seed)
    vocab = [f"w{i}" for i in range(vocab_size)]
    protos = confusable_prototypes(rng, vocab_size, feat_dim, group, spread)
    common = dict(prototypes=protos, length_range=length_range, durations=durations, noise=noise)
    in_dom = DomainSpec(vocab, peaked_chain(rng, vocab_size, successors, peak), **common)
    cross = DomainSpec(vocab, peaked_chain(rng, vocab_size, successors, peak), **common)
    return in_dom, cross


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    ids: List[str]
    feats: np.ndarray
    feat_lens: np.ndarray
    labels: np.ndarray
    label_lens: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def collate(utts: Sequence[Utterance]) -> Batch:
    b = len(utts)
    t_max = max(u.features.shape[0] for u in utts)
    s_max = max(len(u.labels) for u in utts)
    d = utts[0].features.shape[1]
    feats = np.zeros((b, t_max, d))
    labels = np.zeros((b, s_max), dtype=np.int64)
    for i, u in enumerate(utts):
        feats[i, : u.features.shape[0]] = u.features
        labels[i, : len(u.labels)] = u.labels
    return Batch([u.id for u in utts], feats,
                 np.array([u.features.shape[0] for u in utts]),
                 labels, np.array([len(u.labels) for u in utts]))


def pad_labels(seqs: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    s_max = max(len(s) for s in seqs)
    out = np.zeros((len(seqs), s_max), dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, np.array([len(s) for s in seqs])


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _parse_labels(path, lineno, tokens, index) -> Tuple[int, ...]:
    if not tokens:
        raise CorpusValidationError(path, lineno, "empty transcription")
    try:
        return tuple(index[t] for t in tokens)
    except KeyError as exc:
        raise CorpusFormatError(path, lineno, f"unknown label {exc.args[0]!r}") from None


def save_corpus(corpus: Corpus, directory) -> Path:
    """Write ``manifest.json`` plus one transcription and one feature file per split."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": CORPUS_FORMAT_VERSION, "vocab": corpus.vocab,
                "feat_dim": corpus.feat_dim, "splits": {}}
    for name, utts in corpus.splits.items():
        text_name, feat_name = f"{name}.txt", f"{name}.feats"
        with open(directory / text_name, "w") as f:
            for u in utts:
                f.write(u.id + " " + " ".join(corpus.vocab[a] for a in u.labels) + "\n")
        with open(directory / feat_name, "w") as f:
            for u in utts:
                f.write(f"# {u.id} {u.features.shape[0]}\n")
                for row in u.features:
                    f.write(" ".join(_fmt(x) for x in row) + "\n")
        manifest["splits"][name] = {"text": text_name, "feats": feat_name}
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    return directory / "manifest.json"


def _read_transcriptions(path, index) -> Dict[str, Tuple[int, ...]]:
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            tokens = line.split()
            if not tokens:
                raise CorpusValidationError(path, lineno, "empty line")
            out[tokens[0]] = _parse_labels(path, lineno, tokens[1:], index)
    return out


def _read_features(path, feat_dim) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    with open(path) as f:
        lines = f.readlines()
    i = 0
    while i < len(lines):
        head = lines[i].split()
        if len(head) != 3 or head[0] != "#":
            raise CorpusFormatError(path, i + 1, "expected '# <id> <frames>' header")
        try:
            n = int(head[2])
        except ValueError:
            raise CorpusFormatError(path, i + 1, f"bad frame count {head[2]!r}") from None
        if n < 1:
            raise CorpusValidationError(path, i + 1, "utterance without frames")
        rows = []
        for k in range(n):
            lineno = i + 2 + k
            if lineno > len(lines):
                raise CorpusFormatError(path, lineno, f"truncated: expected {n} frames for {head[1]}")
            parts = lines[lineno - 1].split()
            if len(parts) != feat_dim:
                raise CorpusFormatError(path, lineno, f"expected {feat_dim} values, got {len(parts)}")
            try:
                rows.append([float(x) for x in parts])
            except ValueError:
                raise CorpusFormatError(path, lineno, "non-numeric feature value") from None
        out[head[1]] = np.array(rows)
        i += n + 1
    return out


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(mpath, exc.lineno, f"malformed manifest ({exc.msg})") from None
    if manifest.get("format_version") != CORPUS_FORMAT_VERSION:
        raise CorpusFormatError(mpath, None, f"unsupported format version {manifest.get('format_version')}")
    vocab = manifest["vocab"]
    index = {w: i for i, w in enumerate(vocab)}
    corpus = Corpus(vocab, manifest["feat_dim"])
    for name, files in manifest["splits"].items():
        texts = _read_transcriptions(directory / files["text"], index)
        feats = _read_features(directory / files["feats"], corpus.feat_dim)
        if set(texts) != set(feats):
            raise CorpusFormatError(directory / files["feats"], None,
                                    f"ids in {files['text']} and {files['feats']} differ")
        corpus.splits[name] = [Utterance(uid, texts[uid], feats[uid]) for uid in texts]
    return corpus


def save_text_corpus(sentences: Sequence[Sequence[int]], vocab: Sequence[str], path) -> None:
    with open(path, "w") as f:
        for s in sentences:
            f.write(" ".join(vocab[a] for a in s) + "\n")


def load_text_corpus(path, vocab: Sequence[str]) -> List[Tuple[int, ...]]:
    index = {w: i for i, w in enumerate(vocab)}
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            out.append(_parse_labels(path, lineno, line.split(), index))
    return out
