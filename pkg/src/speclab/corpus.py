"""Synthetic corpora: Markov ground truths and pretrained teachers.

A corpus is defined by an order-m Markov chain over a shared vocabulary
whose transition rows are Dirichlet draws with one concentration value
``c`` for every symbol. Low ``c`` gives peaky, highly predictable rows,
high ``c`` gives near-uniform ones, so a single knob moves the corpus
between an easy and a hard domain.

Token id convention: id 0 is the begin marker, id 1 the end marker, and
the remaining ids are content tokens. Prompts contain content tokens
only. The ground truth for a spec is always built from
``make_rng(spec.seed)``, so every consumer reconstructs the same chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, TrainingError
from .lm import LanguageModel, NGramLogitLM, Vocab, apply_update, ce_gradient
from .sampling import (
    STREAM_HELDOUT,
    derive_seed,
    make_rng,
    sample,
    softmax_rows_with_temperature,
    softmax_with_temperature,
)
from .specdec import GenerationConfig, generate_autoregressive

BOS_ID = 0
EOS_ID = 1

# Probability floor applied to Dirichlet draws before taking logs, so
# ground-truth logit rows stay finite even when a coordinate underflows.
_ROW_FLOOR = 1e-300


@dataclass(frozen=True)
class CorpusSpec:
    """Parameters of one synthetic corpus."""

    vocab_size: int = 32
    order: int = 2
    concentration: float = 1.0
    n_prompts: int = 200
    prompt_len: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 4:
            raise DomainError("vocab_size must be >= 4 (bos, eos, content)")
        if self.order < 1:
            raise DomainError("order must be >= 1")
        if self.concentration <= 0:
            raise DomainError("concentration must be > 0")
        if self.prompt_len < 1:
            raise DomainError("prompt_len must be >= 1")
        if self.n_prompts < 0:
            raise DomainError("n_prompts must be >= 0")

    def vocab(self) -> Vocab:
        return Vocab(size=self.vocab_size, bos_id=BOS_ID, eos_id=EOS_ID)


def build_ground_truth(spec: CorpusSpec, rng: np.random.Generator) -> NGramLogitLM:
    """Order-m chain whose softmax rows are Dirichlet(c, ..., c) draws.

    Rows are drawn in context-index order, one per possible context, and
    stored as log-probabilities, so the model's tau=1 softmax reproduces
    the drawn distributions exactly.
    """
    vocab = spec.vocab()
    model = NGramLogitLM.create(vocab, spec.order)
    alpha = np.full(spec.vocab_size, spec.concentration)
    rows = rng.dirichlet(alpha, size=model.table.shape[0])
    model.table[...] = np.log(np.maximum(rows, _ROW_FLOOR))
    return model


def sample_sequence(model: LanguageModel, rng, max_len: int, prompt=()) -> list[int]:
    """One tau=1 rollout from the model, starting at the bos context."""
    cfg = GenerationConfig(tau=1.0, max_new_tokens=max_len)
    return generate_autoregressive(model, list(prompt), cfg, rng)


def sample_prompt(model: LanguageModel, prompt_len: int, rng) -> list[int]:
    """Prompt of content tokens from the model's own process.

    The begin and end markers are masked out of each step's distribution
    (renormalized), so prompts never terminate early.
    """
    vocab = model.vocab
    seq: list[int] = []
    for _ in range(prompt_len):
        dist = softmax_with_temperature(model.forward(seq), 1.0)
        dist[vocab.bos_id] = 0.0
        dist[vocab.eos_id] = 0.0
        mass = dist.sum()
        if mass <= 0.0:
            dist = np.ones(vocab.size)
            dist[vocab.bos_id] = 0.0
            dist[vocab.eos_id] = 0.0
            mass = dist.sum()
        seq.append(sample(dist / mass, rng))
    return seq


def collect_heldout_contexts(
    model: LanguageModel, rng, n_sequences: int = 48, seq_len: int = 40
) -> list[tuple[int, ...]]:
    """Contexts visited by fresh rollouts, for exact evaluation.

    Every prefix of every rollout contributes one context (the empty
    prefix included, since generation starts there too).
    """
    contexts: list[tuple[int, ...]] = []
    for _ in range(n_sequences):
        seq = sample_sequence(model, rng, seq_len)
        prefix: list[int] = []
        contexts.append(tuple(prefix))
        for tok in seq[:-1]:
            prefix.append(tok)
            contexts.append(tuple(prefix[-8:]))
    return contexts


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def heldout_scores(
    reference: LanguageModel, model: LanguageModel, contexts
) -> tuple[float, float]:
    """Exact per-context cross entropy of ``model`` under ``reference``.

    Returns ``(cross_entropy, entropy)`` in nats per token, averaged
    over the context list. Both are computed from full distributions,
    not sampled tokens, so repeated evaluation is deterministic and the
    Gibbs bound cross_entropy >= entropy holds exactly.
    """
    p = softmax_rows_with_temperature(reference.forward_batch(contexts), 1.0)
    log_q = _log_softmax_rows(model.forward_batch(contexts))
    ce = float(np.mean(-(p * log_q).sum(axis=1)))
    safe = np.maximum(p, _ROW_FLOOR)
    ent = float(np.mean(-(p * np.log(safe)).sum(axis=1)))
    return ce, ent


def pretrain_teacher(
    ground_truth: NGramLogitLM,
    spec: CorpusSpec,
    steps: int,
    rng,
    *,
    order: int | None = None,
    tolerance: float = 0.05,
    seq_len: int = 40,
    check_every: int = 8192,
    lr_start: float = 0.8,
    lr_stages: int = 6,
) -> NGramLogitLM:
    """Fit a teacher to the ground truth by cross entropy on its samples.

    ``steps`` is a token budget. Each sampled token applies one SGD
    update; the learning rate starts at ``lr_start`` and halves at each
    of ``lr_stages`` equal slices of the budget, which lets the rows
    travel fast early and settle tightly late. Training stops once the
    exact held-out cross entropy is within ``tolerance`` of the held-out
    entropy rate; exhausting the budget first raises
    :class:`TrainingError` with the final gap.
    """
    vocab = spec.vocab()
    teacher = NGramLogitLM.create(vocab, order if order is not None else ground_truth.order)
    heldout = collect_heldout_contexts(
        ground_truth, make_rng(derive_seed(spec.seed, STREAM_HELDOUT))
    )
    _, entropy = heldout_scores(ground_truth, ground_truth, heldout)
    target_ce = (1.0 + tolerance) * entropy
    used = 0
    since_check = 0
    while used < steps:
        seq = sample_sequence(ground_truth, rng, seq_len)
        prefix: list[int] = []
        for tok in seq:
            lr = lr_start * 0.5 ** int(lr_stages * used / steps)
            _, grads = ce_gradient(teacher, prefix, tok)
            apply_update(teacher, grads, lr)
            prefix.append(tok)
            used += 1
            since_check += 1
            if used >= steps:
                break
        if since_check >= check_every:
            since_check = 0
            ce, _ = heldout_scores(ground_truth, teacher, heldout)
            if ce <= target_ce:
                return teacher
    ce, _ = heldout_scores(ground_truth, teacher, heldout)
    if ce <= target_ce:
        return teacher
    raise TrainingError(
        f"teacher not converged in {steps} tokens: held-out CE {ce:.4f} vs "
        f"entropy rate {entropy:.4f} (target {target_ce:.4f})"
    )


def make_prompt_sets(
    spec_in: CorpusSpec, spec_out: CorpusSpec, rng
) -> tuple[list[list[int]], list[list[int]]]:
    """Prompt lists drawn from two ground truths over a shared vocabulary."""
    if spec_in.vocab_size != spec_out.vocab_size:
        raise DomainError("prompt sets must share one vocabulary")
    gt_in = build_ground_truth(spec_in, make_rng(spec_in.seed))
    gt_out = build_ground_truth(spec_out, make_rng(spec_out.seed))
    seed_in = int(rng.integers(1 << 62))
    seed_out = int(rng.integers(1 << 62))
    rng_in = make_rng(seed_in)
    rng_out = make_rng(seed_out)
    prompts_in = [sample_prompt(gt_in, spec_in.prompt_len, rng_in) for _ in range(spec_in.n_prompts)]
    prompts_out = [sample_prompt(gt_out, spec_out.prompt_len, rng_out) for _ in range(spec_out.n_prompts)]
    return prompts_in, prompts_out


def save_prompts(prompts: list[list[int]], path) -> None:
    """One prompt per line, token ids comma-separated."""
    with open(path, "w") as fh:
        for prompt in prompts:
            fh.write(",".join(str(t) for t in prompt) + "\n")


def load_prompts(path) -> list[list[int]]:
    prompts = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                prompts.append([int(t) for t in line.split(",")])
    return prompts


@dataclass
class CorpusBundle:
    """Everything one experiment needs: chain, teacher, prompts."""

    spec: CorpusSpec
    vocab: Vocab
    ground_truth: NGramLogitLM
    teacher: NGramLogitLM
    prompts: list[list[int]]
    heldout_contexts: list[tuple[int, ...]]
    teacher_ce: float
    entropy_rate: float


# Stream tags for the independent corpus sub-streams.
_TAG_TEACHER = 11
_TAG_PROMPTS = 12


def canonical_prompts(ground_truth: NGramLogitLM, spec: CorpusSpec) -> list[list[int]]:
    """The prompt set :func:`build_corpus` would sample for this spec."""
    rng = make_rng(derive_seed(spec.seed, _TAG_PROMPTS))
    return [sample_prompt(ground_truth, spec.prompt_len, rng) for _ in range(spec.n_prompts)]


def build_corpus(
    spec: CorpusSpec,
    *,
    teacher_order: int | None = None,
    pretrain_budget: int = 800_000,
    tolerance: float = 0.05,
) -> CorpusBundle:
    """Build the chain, pretrain its teacher, and sample prompts."""
    ground_truth = build_ground_truth(spec, make_rng(spec.seed))
    teacher = pretrain_teacher(
        ground_truth,
        spec,
        pretrain_budget,
        make_rng(derive_seed(spec.seed, _TAG_TEACHER)),
        order=teacher_order,
        tolerance=tolerance,
    )
    prompts = canonical_prompts(ground_truth, spec)
    heldout = collect_heldout_contexts(
        ground_truth, make_rng(derive_seed(spec.seed, STREAM_HELDOUT))
    )
    ce, entropy = heldout_scores(ground_truth, teacher, heldout)
    return CorpusBundle(
        spec=spec,
        vocab=spec.vocab(),
        ground_truth=ground_truth,
        teacher=teacher,
        prompts=prompts,
        heldout_contexts=heldout,
        teacher_ce=ce,
        entropy_rate=entropy,
    )
