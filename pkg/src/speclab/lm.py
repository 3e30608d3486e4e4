"""Small trainable language models with hand-derived gradients.

Two families share one interface (``forward`` over a token context,
plus gradient and update helpers):

* :class:`NGramLogitLM` keeps one logit row per length-n context in a
  dense table. Rows start at zero, so unseen contexts score uniform.
* :class:`TinyNeuralLM` is a one-hidden-layer MLP over concatenated
  token embeddings with tanh activation.

Gradients are computed analytically; ``tests/`` check them against
central finite differences, so the two routes stay independent.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, NumericError
from .sampling import make_rng

FAMILY_NGRAM = "ngram-logit"
FAMILY_NEURAL = "tiny-neural"

CHECKPOINT_FORMAT = "speclab-model"
CHECKPOINT_VERSION = 1

# Probability floor used when evaluating log(student) inside the forward
# KL divergence; keeps the loss finite when the student starves a token.
FKL_PROB_FLOOR = 1e-12

# Gradients are plain dicts: ngram models map context-row index -> row
# gradient, neural models map parameter name -> dense gradient array.
GradientBundle = dict


@dataclass(frozen=True)
class Vocab:
    """Token inventory with distinguished begin and end markers."""

    size: int
    bos_id: int
    eos_id: int

    def __post_init__(self):
        if self.size < 2:
            raise DomainError(f"vocab size must be >= 2, got {self.size}")
        for name, tid in (("bos_id", self.bos_id), ("eos_id", self.eos_id)):
            if not 0 <= tid < self.size:
                raise DomainError(f"{name}={tid} outside vocab of size {self.size}")
        if self.bos_id == self.eos_id:
            raise DomainError("bos_id and eos_id must differ")


def _check_token(tid: int, size: int) -> int:
    t = int(tid)
    if not 0 <= t < size:
        raise DomainError(f"token id {t} outside vocab of size {size}")
    return t


@dataclass
class NGramLogitLM:
    """Logit-table model conditioning on the last ``order`` tokens.

    The table is dense with one row per possible context (``size**order``
    rows); contexts shorter than ``order`` are left-padded with bos.
    A row that has never been updated is all zeros, i.e. uniform after
    the softmax.
    """

    vocab: Vocab
    order: int
    table: np.ndarray

    @classmethod
    def create(cls, vocab: Vocab, order: int, *, init_scale: float = 0.0,
               init_seed: int = 0) -> "NGramLogitLM":
        """Fresh model; zero (uniform) rows unless ``init_scale`` > 0.

        A positive ``init_scale`` fills the table with seeded Gaussian
        logits of that standard deviation, giving an untrained model
        with arbitrary peaked preferences rather than a uniform one.
        """
        if order < 1:
            raise DomainError(f"order must be >= 1, got {order}")
        if init_scale < 0:
            raise DomainError("init_scale must be >= 0")
        shape = (vocab.size**order, vocab.size)
        if init_scale > 0:
            table = init_scale * make_rng(init_seed).standard_normal(shape)
        else:
            table = np.zeros(shape)
        return cls(vocab=vocab, order=order, table=table)

    @property
    def family(self) -> str:
        return FAMILY_NGRAM

    def context_index(self, context) -> int:
        """Row index for a context, validating every token id."""
        size = self.vocab.size
        n = self.order
        k = len(context)
        if k >= n:
            window = context[k - n :]
        else:
            window = [self.vocab.bos_id] * (n - k) + list(context)
        idx = 0
        for t in window:
            idx = idx * size + _check_token(t, size)
        return idx

    def forward(self, context) -> np.ndarray:
        """Next-token logits after ``context``. Pure; returns a copy."""
        return self.table[self.context_index(context)].copy()

    def forward_batch(self, contexts) -> np.ndarray:
        """Stacked logits for several contexts in one table gather."""
        idx = np.fromiter(
            (self.context_index(c) for c in contexts), dtype=np.int64, count=len(contexts)
        )
        return self.table[idx]


@dataclass
class TinyNeuralLM:
    """One-hidden-layer MLP over ``context_size`` concatenated embeddings.

    forward: logits = tanh(concat(emb[window]) @ w1 + b1) @ w2 + b2
    """

    vocab: Vocab
    context_size: int
    d_emb: int
    d_hid: int
    embedding: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    PARAM_NAMES = ("embedding", "w1", "b1", "w2", "b2")

    @classmethod
    def create(
        cls,
        vocab: Vocab,
        context_size: int = 3,
        d_emb: int = 16,
        d_hid: int = 64,
        seed: int = 0,
    ) -> "TinyNeuralLM":
        if context_size < 1:
            raise DomainError(f"context_size must be >= 1, got {context_size}")
        rng = make_rng(seed)
        # Weights drawn uniform in [-0.1, 0.1]; biases start at zero.
        emb = rng.uniform(-0.1, 0.1, size=(vocab.size, d_emb))
        w1 = rng.uniform(-0.1, 0.1, size=(context_size * d_emb, d_hid))
        w2 = rng.uniform(-0.1, 0.1, size=(d_hid, vocab.size))
        return cls(
            vocab=vocab,
            context_size=context_size,
            d_emb=d_emb,
            d_hid=d_hid,
            embedding=emb,
            w1=w1,
            b1=np.zeros(d_hid),
            w2=w2,
            b2=np.zeros(vocab.size),
        )

    @property
    def family(self) -> str:
        return FAMILY_NEURAL

    def _window(self, context) -> list[int]:
        size = self.vocab.size
        n = self.context_size
        k = len(context)
        if k >= n:
            window = context[k - n :]
        else:
            window = [self.vocab.bos_id] * (n - k) + list(context)
        return [_check_token(t, size) for t in window]

    def _forward_cached(self, context):
        window = self._window(context)
        x = self.embedding[window].ravel()
        h = np.tanh(x @ self.w1 + self.b1)
        logits = h @ self.w2 + self.b2
        return logits, (window, x, h)

    def forward(self, context) -> np.ndarray:
        """Next-token logits after ``context``. Pure; returns a fresh array."""
        logits, _ = self._forward_cached(context)
        return logits

    def forward_batch(self, contexts) -> np.ndarray:
        windows = np.array([self._window(c) for c in contexts], dtype=np.int64)
        x = self.embedding[windows].reshape(len(contexts), -1)
        h = np.tanh(x @ self.w1 + self.b1)
        return h @ self.w2 + self.b2

    def _backprop(self, cache, dlogits: np.ndarray) -> GradientBundle:
        """Gradients of a scalar loss given its gradient w.r.t. the logits."""
        window, x, h = cache
        dw2 = np.outer(h, dlogits)
        db2 = dlogits
        dh = self.w2 @ dlogits
        dpre = dh * (1.0 - h * h)
        dw1 = np.outer(x, dpre)
        db1 = dpre
        dx = (self.w1 @ dpre).reshape(self.context_size, self.d_emb)
        demb = np.zeros_like(self.embedding)
        for i, t in enumerate(window):
            demb[t] += dx[i]
        return {"embedding": demb, "w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


LanguageModel = NGramLogitLM | TinyNeuralLM


def _stable_log_softmax(logits: np.ndarray):
    m = logits.max()
    shifted = logits - m
    lse = m + np.log(np.exp(shifted).sum())
    return logits - lse, lse


def ce_gradient(model: LanguageModel, context, target: int):
    """Cross-entropy loss -log p(target | context) and its gradients.

    Returns ``(loss, gradients)`` where the gradient of the loss with
    respect to the logit row is softmax(logits) - onehot(target).
    """
    target = _check_token(target, model.vocab.size)
    if isinstance(model, NGramLogitLM):
        idx = model.context_index(context)
        logits = model.table[idx]
        log_p, _ = _stable_log_softmax(logits)
        loss = -log_p[target]
        g = np.exp(log_p)
        g[target] -= 1.0
        return float(loss), {idx: g}
    logits, cache = model._forward_cached(context)
    log_p, _ = _stable_log_softmax(logits)
    loss = -log_p[target]
    g = np.exp(log_p)
    g[target] -= 1.0
    return float(loss), model._backprop(cache, g)


def fkl_value(teacher_probs: np.ndarray, student_probs: np.ndarray) -> float:
    """Forward KL divergence sum p_t * log(p_t / p_s).

    Terms with p_t == 0 contribute zero; the student probability is
    floored at ``FKL_PROB_FLOOR`` inside the log so the value is finite.
    """
    clamped = np.maximum(student_probs, FKL_PROB_FLOOR)
    active = teacher_probs > 0
    pt = teacher_probs[active]
    return float(np.sum(pt * (np.log(pt) - np.log(clamped[active]))))


def _fkl_logit_grad(teacher_probs: np.ndarray, student_probs: np.ndarray) -> np.ndarray:
    # Exact gradient of the floored divergence w.r.t. the student logits.
    # Where no flooring is active this reduces to student - teacher.
    unfloored = (student_probs > FKL_PROB_FLOOR).astype(float)
    weight = float(np.sum(teacher_probs * unfloored))
    return student_probs * weight - teacher_probs * unfloored


def fkl_gradient(model: LanguageModel, context, teacher_probs: np.ndarray):
    """Forward KL against a fixed teacher distribution, with gradients.

    ``teacher_probs`` is the teacher's next-token distribution for the
    same context. Returns ``(divergence, gradients)``.
    """
    if isinstance(model, NGramLogitLM):
        idx = model.context_index(context)
        logits = model.table[idx]
        log_p, _ = _stable_log_softmax(logits)
        p_s = np.exp(log_p)
        return fkl_value(teacher_probs, p_s), {idx: _fkl_logit_grad(teacher_probs, p_s)}
    logits, cache = model._forward_cached(context)
    log_p, _ = _stable_log_softmax(logits)
    p_s = np.exp(log_p)
    div = fkl_value(teacher_probs, p_s)
    return div, model._backprop(cache, _fkl_logit_grad(teacher_probs, p_s))


def apply_update(model: LanguageModel, grads: GradientBundle, lr: float) -> LanguageModel:
    """In-place SGD step: parameter <- parameter - lr * gradient."""
    if isinstance(model, NGramLogitLM):
        for idx, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for context row {idx}")
            model.table[idx] -= lr * g
        return model
    for name, g in grads.items():
        param = getattr(model, name)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
        param -= lr * g
    return model


def accumulate_gradients(total: GradientBundle, part: GradientBundle, scale: float = 1.0):
    """Add ``scale * part`` into ``total`` (both from the same family)."""
    for key, g in part.items():
        if key in total:
            total[key] = total[key] + scale * g
        else:
            total[key] = scale * g
    return total


def parameter_vector(model: LanguageModel) -> np.ndarray:
    """All parameters flattened into one vector (copy)."""
    if isinstance(model, NGramLogitLM):
        return model.table.ravel().copy()
    return np.concatenate([getattr(model, n).ravel() for n in TinyNeuralLM.PARAM_NAMES])


def set_parameter_vector(model: LanguageModel, vec: np.ndarray) -> LanguageModel:
    """Write a flat vector produced by :func:`parameter_vector` back."""
    if isinstance(model, NGramLogitLM):
        if vec.size != model.table.size:
            raise DomainError("parameter vector length mismatch")
        model.table[...] = vec.reshape(model.table.shape)
        return model
    offset = 0
    for name in TinyNeuralLM.PARAM_NAMES:
        param = getattr(model, name)
        part = vec[offset : offset + param.size]
        if part.size != param.size:
            raise DomainError("parameter vector length mismatch")
        param[...] = part.reshape(param.shape)
        offset += param.size
    if offset != vec.size:
        raise DomainError("parameter vector length mismatch")
    return model


def gradient_vector(model: LanguageModel, grads: GradientBundle) -> np.ndarray:
    """Gradients flattened into the :func:`parameter_vector` layout."""
    if isinstance(model, NGramLogitLM):
        flat = np.zeros(model.table.size)
        size = model.vocab.size
        for idx, g in grads.items():
            flat[idx * size : (idx + 1) * size] = g
        return flat
    parts = []
    for name in TinyNeuralLM.PARAM_NAMES:
        param = getattr(model, name)
        g = grads.get(name)
        parts.append(np.zeros(param.size) if g is None else np.asarray(g).ravel())
    return np.concatenate(parts)


def _encode_array(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr)
    return {
        "dtype": a.dtype.str,
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def _decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    arr = np.frombuffer(raw, dtype=np.dtype(obj["dtype"]))
    return arr.reshape(obj["shape"]).copy()


def checkpoint_bytes(model: LanguageModel) -> bytes:
    """Serialize a model to a deterministic, bit-exact byte string."""
    if isinstance(model, NGramLogitLM):
        hyper = {"order": model.order}
        params = {"table": _encode_array(model.table)}
    else:
        hyper = {
            "context_size": model.context_size,
            "d_emb": model.d_emb,
            "d_hid": model.d_hid,
        }
        params = {n: _encode_array(getattr(model, n)) for n in TinyNeuralLM.PARAM_NAMES}
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "family": model.family,
        "vocab": {
            "size": model.vocab.size,
            "bos_id": model.vocab.bos_id,
            "eos_id": model.vocab.eos_id,
        },
        "hyper": hyper,
        "params": params,
    }
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode("ascii")


def save_checkpoint(model: LanguageModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> LanguageModel:
    """Load a model saved by :func:`save_checkpoint`; bit-exact round trip."""
    try:
        doc = json.loads(Path(path).read_bytes())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"unreadable checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"not a model checkpoint: {path}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
    vocab = Vocab(**doc["vocab"])
    family = doc["family"]
    hyper = doc["hyper"]
    params = doc["params"]
    if family == FAMILY_NGRAM:
        model = NGramLogitLM(vocab=vocab, order=int(hyper["order"]), table=_decode_array(params["table"]))
        expect = (vocab.size ** model.order, vocab.size)
        if model.table.shape != expect:
            raise ConfigError(f"checkpoint table shape {model.table.shape} != {expect}")
        return model
    if family == FAMILY_NEURAL:
        return TinyNeuralLM(
            vocab=vocab,
            context_size=int(hyper["context_size"]),
            d_emb=int(hyper["d_emb"]),
            d_hid=int(hyper["d_hid"]),
            **{n: _decode_array(params[n]) for n in TinyNeuralLM.PARAM_NAMES},
        )
    raise ConfigError(f"unknown model family '{family}'")
