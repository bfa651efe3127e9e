"""Transducer networks, label language models and the mini ILM network.

The transducer joint produces ``|V| + 1`` logits; the last index is blank.
Label-history networks (prediction network, recurrent LMs, mini ILM) read a
dedicated start symbol, stored as the last embedding row.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import numeric as nm
from .numeric import LstmParams, Tensor

START = -1
FORMAT_MAGIC = "rnnt-ilm-model"
FORMAT_VERSION = 1


class ModelFileError(Exception):
    """Base class for model-file problems."""


class ModelFormatError(ModelFileError):
    pass


class TruncatedModelError(ModelFileError):
    pass


class VersionMismatchError(ModelFileError):
    pass


class DimensionMismatchError(ModelFileError):
    pass


# ---------------------------------------------------------------------------
# Shared recurrent helpers
# ---------------------------------------------------------------------------

def _lstm_params(params: Dict[str, Tensor], prefix: str) -> LstmParams:
    return LstmParams(params[prefix + ".w_x"], params[prefix + ".w_h"], params[prefix + ".b"])


def _init_lstm(params, rng, prefix, d_in, units):
    params[prefix + ".w_x"] = nm.init_uniform(rng, (d_in, 4 * units))
    params[prefix + ".w_h"] = nm.init_uniform(rng, (units, 4 * units))
    params[prefix + ".b"] = nm.init_uniform(rng, (4 * units,))


def _zero_state(units: int, batch: Optional[int]) -> Tuple[Tensor, Tensor]:
    shape = (units,) if batch is None else (batch, units)
    return nm.const(np.zeros(shape)), nm.const(np.zeros(shape))


def _run_layer(layer: LstmParams, steps: Sequence[Tensor], batch: Optional[int]) -> List[Tensor]:
    state = _zero_state(layer.hidden, batch)
    out = []
    for x in steps:
        h, state = nm.lstm_cell_step(layer, x, state)
        out.append(h)
    return out


def _history_inputs(labels: np.ndarray, vocab_size: int) -> np.ndarray:
    """(B, S) labels -> (B, S+1) embedding ids: start row, then a_1..a_S."""
    labels = np.asarray(labels, dtype=np.int64)
    start = np.full((labels.shape[0], 1), vocab_size, dtype=np.int64)
    return np.concatenate([start, labels], axis=1)


def _check_label(label: int, vocab_size: int):
    if label != START and not 0 <= label < vocab_size:
        raise IndexError(f"label {label} out of range for |V|={vocab_size}")


def _step_stack(layers: List[LstmParams], state, x: np.ndarray):
    """Advance a layer stack by one step on a 1-D input (inference only).

    ``state=None`` is the zero state; states are lists of ``(h, c)`` arrays.
    """
    if state is None:
        state = [(np.zeros(l.hidden), np.zeros(l.hidden)) for l in layers]
    new_state = []
    for layer, s in zip(layers, state):
        x, s = nm.lstm_cell_step_np(layer, x, s)
        new_state.append(s)
    return new_state, x


# ---------------------------------------------------------------------------
# RNN-T
# ---------------------------------------------------------------------------

@dataclass
class RnntConfig:
    vocab_size: int
    feat_dim: int
    enc_layers: int = 2
    enc_units: int = 32
    subsampling: int = 1
    pred_layers: int = 1
    pred_units: int = 32
    embed_dim: int = 16
    joint_units: int = 32
    joint_activation: str = "tanh"

    def __post_init__(self):
        if self.vocab_size < 1 or self.feat_dim < 1 or self.subsampling < 1:
            raise ValueError(f"invalid RnntConfig {self}")
        if self.joint_activation not in ("tanh", "identity"):
            raise ValueError(f"unknown joint activation {self.joint_activation!r}")

    @property
    def blank(self) -> int:
        return self.vocab_size


@dataclass
class RnntModel:
    config: RnntConfig
    params: Dict[str, Tensor]
    seed: Optional[int] = None
    kind: str = field(default="rnnt", init=False)

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def blank(self) -> int:
        return self.config.vocab_size

    @property
    def enc_dim(self) -> int:
        return self.config.enc_units

    def encoder_params(self) -> List[str]:
        return [k for k in self.params if k.startswith("enc.")]

    def pred_joint_params(self) -> List[str]:
        return [k for k in self.params if k.startswith(("pred.", "joint."))]

    def set_trainable(self, names: Sequence[str]):
        keep = set(names)
        for k, p in self.params.items():
            p.requires_grad = k in keep


def init_rnnt(config: RnntConfig, seed: int) -> RnntModel:
    rng = np.random.default_rng(seed)
    p: Dict[str, Tensor] = {}
    d_in = config.feat_dim
    for i in range(config.enc_layers):
        _init_lstm(p, rng, f"enc.{i}", d_in, config.enc_units)
        d_in = config.enc_units
    p["pred.embed"] = nm.init_uniform(rng, (config.vocab_size + 1, config.embed_dim))
    d_in = config.embed_dim
    for i in range(config.pred_layers):
        _init_lstm(p, rng, f"pred.{i}", d_in, config.pred_units)
        d_in = config.pred_units
    p["joint.w_enc"] = nm.init_uniform(rng, (config.enc_units, config.joint_units))
    p["joint.w_pred"] = nm.init_uniform(rng, (config.pred_units, config.joint_units))
    p["joint.b"] = nm.init_uniform(rng, (config.joint_units,))
    p["joint.w_out"] = nm.init_uniform(rng, (config.joint_units, config.vocab_size + 1))
    p["joint.b_out"] = nm.init_uniform(rng, (config.vocab_size + 1,))
    return RnntModel(config, p, seed)


def encoded_length(num_frames: int, subsampling: int) -> int:
    return -(-num_frames // subsampling)


def encode_batch(model: RnntModel, feats: np.ndarray) -> Tensor:
    """(B, T, d) padded features -> encoder output tensor (B, T', H)."""
    feats = np.asarray(feats, dtype=np.float64)
    cfg = model.config
    if feats.ndim != 3 or feats.shape[2] != cfg.feat_dim:
        raise nm.ShapeError("encode", feats.shape, detail=f"expected (B, T, {cfg.feat_dim})")
    if feats.shape[1] == 0:
        raise ValueError("encode: empty feature sequence")
    batch = feats.shape[0]
    steps = [nm.const(feats[:, t]) for t in range(feats.shape[1])]
    for i in range(cfg.enc_layers):
        steps = _run_layer(_lstm_params(model.params, f"enc.{i}"), steps, batch)
        if i == 0 and cfg.subsampling > 1:
            steps = steps[::cfg.subsampling]
    return nm.stack(steps, axis=1)


def encode(model: RnntModel, features: np.ndarray) -> np.ndarray:
    """Encode one utterance (T, d) -> (T', H)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError(f"encode: expected a non-empty (T, d) matrix, got shape {features.shape}")
    with nm.no_grad():
        return encode_batch(model, features[None]).value[0]


def _pred_layers(model: RnntModel) -> List[LstmParams]:
    return [_lstm_params(model.params, f"pred.{i}") for i in range(model.config.pred_layers)]


def predict_batch(model: RnntModel, labels: np.ndarray) -> Tensor:
    """(B, S) padded labels -> prediction outputs (B, S+1, P) for histories a_1^0 .. a_1^S."""
    ids = _history_inputs(labels, model.vocab_size)
    steps = [nm.embed(model.params["pred.embed"], ids[:, s]) for s in range(ids.shape[1])]
    for layer in _pred_layers(model):
        steps = _run_layer(layer, steps, ids.shape[0])
    return nm.stack(steps, axis=1)


def predict_step(model: RnntModel, state, label: int):
    """Consume ``label`` (or ``START``) and return ``(new_state, g)``.

    ``state`` is ``None`` before the start symbol has been read.
    """
    _check_label(label, model.vocab_size)
    row = model.vocab_size if label == START else label
    return _step_stack(_pred_layers(model), state, model.params["pred.embed"].value[row])


def joint_tensor(model: RnntModel, g: Tensor, h: Tensor) -> Tensor:
    """Joint logits for broadcast-compatible ``g`` (..., P) and ``h`` (..., H)."""
    p = model.params
    if g.shape[-1] != model.config.pred_units or h.shape[-1] != model.config.enc_units:
        raise nm.ShapeError("joint", g.shape, h.shape)
    z = nm.add(nm.add(nm.matmul(h, p["joint.w_enc"]), nm.matmul(g, p["joint.w_pred"])), p["joint.b"])
    if model.config.joint_activation == "tanh":
        z = nm.tanh(z)
    return nm.add(nm.matmul(z, p["joint.w_out"]), p["joint.b_out"])


def pred_projection(model: RnntModel, g: np.ndarray) -> np.ndarray:
    p = model.params
    return g @ p["joint.w_pred"].value + p["joint.b"].value


def enc_projection(model: RnntModel, h: np.ndarray) -> np.ndarray:
    return h @ model.params["joint.w_enc"].value


def joint_from_projections(model: RnntModel, enc_proj: np.ndarray, pred_proj: np.ndarray) -> np.ndarray:
    """Numpy fast path: logits from pre-projected encoder/prediction vectors."""
    z = enc_proj + pred_proj
    if model.config.joint_activation == "tanh":
        z = np.tanh(z)
    return z @ model.params["joint.w_out"].value + model.params["joint.b_out"].value


def joint_logits(model: RnntModel, g, h) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if g.shape[-1] != model.config.pred_units or h.shape[-1] != model.config.enc_units:
        raise nm.ShapeError("joint", g.shape, h.shape)
    return joint_from_projections(model, enc_projection(model, h), pred_projection(model, g))


def joint_logits_no_blank(model: RnntModel, g, h) -> np.ndarray:
    return joint_logits(model, g, h)[..., :model.vocab_size]


# ---------------------------------------------------------------------------
# Label language models
# ---------------------------------------------------------------------------

@dataclass
class RecurrentLmConfig:
    vocab_size: int
    embed_dim: int = 16
    units: int = 32
    layers: int = 1


@dataclass
class RecurrentLm:
    """LSTM LM over V with a sentence-end token at index |V|.

    Used both as external LM (``kind="lm"``) and as density-ratio ILM
    (``kind="density-ratio-lm"``), which shares the prediction network's
    structure.
    """

    config: RecurrentLmConfig
    params: Dict[str, Tensor]
    seed: Optional[int] = None
    kind: str = "lm"

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def eos(self) -> int:
        return self.config.vocab_size


DensityRatioLm = RecurrentLm


def init_recurrent_lm(config: RecurrentLmConfig, seed: int, kind: str = "lm") -> RecurrentLm:
    rng = np.random.default_rng(seed)
    p: Dict[str, Tensor] = {"embed": nm.init_uniform(rng, (config.vocab_size + 1, config.embed_dim))}
    d_in = config.embed_dim
    for i in range(config.layers):
        _init_lstm(p, rng, f"l{i}", d_in, config.units)
        d_in = config.units
    p["out.w"] = nm.init_uniform(rng, (config.units, config.vocab_size + 1))
    p["out.b"] = nm.init_uniform(rng, (config.vocab_size + 1,))
    return RecurrentLm(config, p, seed, kind)


def _lm_layers(lm) -> List[LstmParams]:
    return [_lstm_params(lm.params, f"l{i}") for i in range(lm.config.layers)]


def recurrent_lm_logprobs(lm: RecurrentLm, labels: np.ndarray) -> Tensor:
    """(B, S) labels -> log-distributions over V+EOS after each history, (B, S+1, V+1)."""
    ids = _history_inputs(labels, lm.vocab_size)
    steps = [nm.embed(lm.params["embed"], ids[:, s]) for s in range(ids.shape[1])]
    for layer in _lm_layers(lm):
        steps = _run_layer(layer, steps, ids.shape[0])
    hid = nm.stack(steps, axis=1)
    return nm.log_softmax(nm.add(nm.matmul(hid, lm.params["out.w"]), lm.params["out.b"]))


@dataclass
class NGramLm:
    """Additively smoothed n-gram LM over V + EOS."""

    order: int
    vocab_size: int
    delta: float = 1.0
    counts: Dict[Tuple[int, ...], np.ndarray] = field(default_factory=dict)
    kind: str = field(default="ngram-lm", init=False)

    @property
    def eos(self) -> int:
        return self.vocab_size

    def fit(self, sentences: Sequence[Sequence[int]]) -> "NGramLm":
        for sent in sentences:
            ctx = (START,) * (self.order - 1)
            for tok in list(sent) + [self.eos]:
                row = self.counts.setdefault(ctx, np.zeros(self.vocab_size + 1))
                row[tok] += 1
                ctx = (ctx + (tok,))[1:] if self.order > 1 else ()
        return self

    def logprobs(self, ctx: Tuple[int, ...]) -> np.ndarray:
        row = self.counts.get(ctx)
        n = self.vocab_size + 1
        if row is None:
            row = np.zeros(n)
        denom = row.sum() + self.delta * n
        if denom <= 0:
            return np.full(n, -math.log(n))
        with np.errstate(divide="ignore"):
            return np.log((row + self.delta) / denom)


ExternalLm = Union[RecurrentLm, NGramLm]


def lm_step(lm: ExternalLm, state, label: int):
    """Consume ``label`` (or ``START`` with ``state=None``).

    Returns ``(new_state, log-distribution over V + EOS)``.
    """
    _check_label(label, lm.vocab_size)
    if isinstance(lm, NGramLm):
        if label == START:
            ctx = (START,) * (lm.order - 1)
        else:
            ctx = (state + (label,))[1:] if lm.order > 1 else ()
        return ctx, lm.logprobs(ctx)
    row = lm.vocab_size if label == START else label
    new_state, out = _step_stack(_lm_layers(lm), state, lm.params["embed"].value[row])
    logits = out @ lm.params["out.w"].value + lm.params["out.b"].value
    return new_state, nm.log_softmax_np(logits)


def lm_sequence_logprob(lm: ExternalLm, labels: Sequence[int], with_eos: bool = True) -> float:
    state, dist = lm_step(lm, None, START)
    total = 0.0
    for a in labels:
        total += float(dist[a])
        state, dist = lm_step(lm, state, a)
    if with_eos:
        total += float(dist[lm.eos])
    return total


# ---------------------------------------------------------------------------
# Mini ILM network
# ---------------------------------------------------------------------------

@dataclass
class MiniIlmConfig:
    vocab_size: int
    enc_dim: int
    embed_dim: int = 16
    units: int = 16


@dataclass
class MiniIlmNet:
    """Maps a label history to a vector in the encoder-output space."""

    config: MiniIlmConfig
    params: Dict[str, Tensor]
    seed: Optional[int] = None
    kind: str = field(default="mini-ilm", init=False)

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size


def init_mini_ilm(config: MiniIlmConfig, seed: int) -> MiniIlmNet:
    rng = np.random.default_rng(seed)
    p = {"embed": nm.init_uniform(rng, (config.vocab_size + 1, config.embed_dim))}
    _init_lstm(p, rng, "l0", config.embed_dim, config.units)
    p["out.w"] = nm.init_uniform(rng, (config.units, config.enc_dim))
    p["out.b"] = nm.init_uniform(rng, (config.enc_dim,))
    return MiniIlmNet(config, p, seed)


def mini_ilm_batch(net: MiniIlmNet, labels: np.ndarray) -> Tensor:
    """(B, S) labels -> h' vectors (B, S, enc_dim) for histories a_1^0 .. a_1^{S-1}."""
    labels = np.asarray(labels, dtype=np.int64)
    ids = _history_inputs(labels, net.vocab_size)[:, : labels.shape[1]]
    steps = [nm.embed(net.params["embed"], ids[:, s]) for s in range(ids.shape[1])]
    steps = _run_layer(_lstm_params(net.params, "l0"), steps, ids.shape[0])
    hid = nm.stack(steps, axis=1)
    return nm.add(nm.matmul(hid, net.params["out.w"]), net.params["out.b"])


def mini_ilm_step(net: MiniIlmNet, state, label: int):
    """Consume ``label`` (or ``START``) and return ``(new_state, h')``."""
    _check_label(label, net.vocab_size)
    row = net.vocab_size if label == START else label
    new_state, out = _step_stack([_lstm_params(net.params, "l0")], state, net.params["embed"].value[row])
    h = out @ net.params["out.w"].value + net.params["out.b"].value
    return new_state, h


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

AnyModel = Union[RnntModel, RecurrentLm, NGramLm, MiniIlmNet]


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _dims(obj) -> dict:
    if isinstance(obj, NGramLm):
        return {"order": obj.order, "vocab_size": obj.vocab_size, "delta": obj.delta}
    return asdict(obj.config)


def save_model(obj: AnyModel, path: Union[str, os.PathLike], vocab: Optional[Sequence[str]] = None) -> None:
    """Write a model as a JSON document; floats are rendered with 17 significant digits."""
    header = {
        "magic": FORMAT_MAGIC,
        "format_version": FORMAT_VERSION,
        "kind": obj.kind,
        "dims": _dims(obj),
        "vocab": list(vocab) if vocab is not None else None,
        "seed": getattr(obj, "seed", None),
    }
    arrays = []
    if isinstance(obj, NGramLm):
        items = [(" ".join(str(c) for c in ctx), row) for ctx, row in sorted(obj.counts.items())]
        header["counts"] = {}
        for key, row in items:
            header["counts"][key] = f"@@{len(arrays)}@@"
            arrays.append(row)
    else:
        header["params"] = {}
        for name, t in obj.params.items():
            header["params"][name] = {"shape": list(t.shape), "data": f"@@{len(arrays)}@@"}
            arrays.append(t.value)
    text = json.dumps(header, indent=1)
    for i, arr in enumerate(arrays):
        text = text.replace(f'"@@{i}@@"', "[" + ", ".join(_fmt(v) for v in np.ravel(arr)) + "]", 1)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(text + "\n")
    os.replace(tmp, path)


def read_model_header(path) -> dict:
    with open(path) as f:
        text = f.read()
    stripped = text.lstrip()
    if not stripped.startswith("{"):
        raise ModelFormatError(f"{path}: not a model file")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        if '"magic"' in text[:200] and FORMAT_MAGIC not in text[:200]:
            raise ModelFormatError(f"{path}: wrong magic header") from exc
        raise TruncatedModelError(f"{path}: truncated or corrupt model file ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("magic") != FORMAT_MAGIC:
        raise ModelFormatError(f"{path}: wrong magic header {doc.get('magic') if isinstance(doc, dict) else None!r}")
    if doc.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {doc.get('format_version')} != {FORMAT_VERSION}")
    return doc


def load_model(path, kind: Optional[str] = None, vocab_size: Optional[int] = None) -> AnyModel:
    """Load any model file; optionally enforce its ``kind`` and vocabulary size."""
    doc = read_model_header(path)
    k = doc.get("kind")
    if kind is not None and k != kind:
        raise ModelFormatError(f"{path}: expected kind {kind!r}, found {k!r}")
    dims = doc["dims"]
    if vocab_size is not None and dims.get("vocab_size") != vocab_size:
        raise DimensionMismatchError(
            f"{path}: vocab size {dims.get('vocab_size')} does not match expected {vocab_size}")
    if k == "ngram-lm":
        lm = NGramLm(dims["order"], dims["vocab_size"], dims["delta"])
        for key, row in doc["counts"].items():
            ctx = tuple(int(c) for c in key.split()) if key else ()
            lm.counts[ctx] = np.array(row, dtype=np.float64)
        return lm
    if k == "rnnt":
        obj = init_rnnt(RnntConfig(**dims), seed=0)
    elif k in ("lm", "density-ratio-lm"):
        obj = init_recurrent_lm(RecurrentLmConfig(**dims), seed=0, kind=k)
    elif k == "mini-ilm":
        obj = init_mini_ilm(MiniIlmConfig(**dims), seed=0)
    else:
        raise ModelFormatError(f"{path}: unknown model kind {k!r}")
    stored = doc["params"]
    if set(stored) != set(obj.params):
        raise DimensionMismatchError(f"{path}: parameter set does not match dims")
    for name, entry in stored.items():
        arr = np.array(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if shape != obj.params[name].shape or arr.size != int(np.prod(shape)):
            raise DimensionMismatchError(f"{path}: parameter {name} has shape {shape}, "
                                         f"expected {obj.params[name].shape}")
        obj.params[name] = nm.param(arr.reshape(shape))
    obj.seed = doc.get("seed")
    return obj


def model_vocab(path) -> Optional[List[str]]:
    return read_model_header(path).get("vocab")
