"""Exact draft-verify decoding.

A cheap draft model proposes a block of tokens; the target model scores
the whole block in one batched forward sweep and accepts each proposed
token x with probability min(1, p(x) / q(x)), where p and q are the
temperature-scaled target and draft distributions at that position. On
the first rejection the token is resampled from the normalized residual
max(0, p - q); if the whole block survives, one bonus token is drawn
from the target's distribution after the block. This acceptance rule is
lossless: the emitted sequence is distributed exactly as if the target
had been sampled token by token.

Randomness contract: a single generator drives one generation. Each
round consumes, in order, one draw per proposed token (draft sampling),
one uniform per verified position, and one draw for the correction
sample when a correction is drawn. Replaying with the same seed
reproduces the trace exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, VerificationError
from .sampling import sample, softmax_rows_with_temperature, softmax_with_temperature

_KIND_NAMES = {"resample": "resample", "bonus": "bonus", None: "eos"}


@dataclass
class GenerationConfig:
    """Decoding knobs shared by the baseline and speculative paths."""

    tau: float = 1.0
    block_size: int = 4
    max_new_tokens: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.tau < 0:
            raise DomainError(f"tau must be >= 0, got {self.tau}")
        if self.block_size < 1:
            raise DomainError(f"block_size must be >= 1, got {self.block_size}")
        if self.max_new_tokens < 1:
            raise DomainError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")


@dataclass
class RoundRecord:
    """Verification outcome of one draft block."""

    proposed: list[int]
    accepted_count: int
    correction_token: int | None
    correction_kind: str | None  # "resample", "bonus", or None when the
    # round ended at an accepted end-of-sequence token.


@dataclass
class SpeculationTrace:
    """Per-round records plus totals over one generation."""

    rounds: list[RoundRecord] = field(default_factory=list)
    draft_proposed: int = 0
    draft_accepted: int = 0

    def record(self, rnd: RoundRecord) -> None:
        self.rounds.append(rnd)
        self.draft_proposed += len(rnd.proposed)
        self.draft_accepted += rnd.accepted_count

    def alpha(self) -> float:
        """Accepted draft tokens over proposed draft tokens.

        Correction tokens (resampled or bonus) count toward neither side.
        """
        if self.draft_proposed == 0:
            raise DomainError("no proposed tokens: alpha undefined")
        return self.draft_accepted / self.draft_proposed


def residual_distribution(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Normalized positive part of p - q; the exact rejection kernel."""
    r = np.maximum(p - q, 0.0)
    mass = r.sum()
    if mass <= 0.0:
        raise DomainError("residual undefined: target places no mass above the draft")
    return r / mass

def acceptance_probability(p: np.ndarray, q: np.ndarray) -> float:
    """Analytic per-position acceptance rate sum_x min(p(x), q(x))."""
    return float(np.minimum(p, q).sum())


def induced_distribution(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Marginal law of the token emitted at one verified position.

    accept-part + reject-mass * residual; equals p up to rounding, which
    is the losslessness identity the tests pin down.
    """
    overlap = np.minimum(p, q)
    r = np.maximum(p - q, 0.0)
    rmass = r.sum()
    if rmass <= 0.0:
        # q covers p everywhere: every token is accepted.
        return overlap / overlap.sum()
    return overlap + (1.0 - overlap.sum()) * (r / rmass)


def verify_block(target_dists, draft_dists, proposed, rng) -> tuple[int, int | None, str | None]:
    """Scan one proposed block left to right with the acceptance rule.

    ``draft_dists`` and ``proposed`` have one entry per proposed token;
    ``target_dists`` carries either the same count or one extra final
    entry, the target's distribution after the block, from which the
    bonus token is drawn when every proposal is accepted. Without the
    extra entry a fully accepted block returns ``(m, None, None)``.

    Returns ``(accepted_count, correction_token, correction_kind)``.
    Consumes one uniform per verified position, then one draw for the
    correction sample if any.
    """
    m = len(proposed)
    if len(draft_dists) != m or len(target_dists) not in (m, m + 1):
        raise DomainError("verify_block: mismatched block lengths")
    for i in range(m):
        x = proposed[i]
        p_x = target_dists[i][x]
        q_x = draft_dists[i][x]
        if q_x <= 0.0:
            raise VerificationError(
                f"proposed token {x} has zero draft probability at position {i}"
            )
        ratio = p_x / q_x
        if rng.random() < (1.0 if ratio >= 1.0 else ratio):
            continue
        correction = sample(residual_distribution(target_dists[i], draft_dists[i]), rng)
        return i, correction, "resample"
    if len(target_dists) == m + 1:
        return m, sample(target_dists[m], rng), "bonus"
    return m, None, None


def generate_autoregressive(model, prompt, config: GenerationConfig, rng) -> list[int]:
    """Plain temperature sampling from one model; the timing baseline.

    Returns the continuation only. The end-of-sequence token, when
    drawn, is included as the final element.
    """
    eos = model.vocab.eos_id
    seq = list(prompt)
    out: list[int] = []
    for _ in range(config.max_new_tokens):
        dist = softmax_with_temperature(model.forward(seq), config.tau)
        tok = sample(dist, rng)
        out.append(tok)
        seq.append(tok)
        if tok == eos:
            break
    return out


def speculative_generate(target, draft, prompt, config: GenerationConfig, rng):
    """Draft-verify decoding of one continuation.

    Returns ``(tokens, trace)``. The token stream is distributed exactly
    as :func:`generate_autoregressive` run on the target alone; the
    trace records every verification round.
    """
    if target.vocab != draft.vocab:
        raise ConfigError("target and draft must share a vocabulary")
    eos = target.vocab.eos_id
    tau = config.tau
    cap = config.max_new_tokens
    out: list[int] = []
    trace = SpeculationTrace()
    prompt = list(prompt)
    while len(out) < cap:
        seq = prompt + out
        base = len(seq)
        # Draft proposes up to block_size tokens, stopping if it emits eos.
        proposed: list[int] = []
        draft_dists: list[np.ndarray] = []
        for _ in range(min(config.block_size, cap - len(out))):
            q = softmax_with_temperature(draft.forward(seq), tau)
            tok = sample(q, rng)
            proposed.append(tok)
            draft_dists.append(q)
            seq.append(tok)
            if tok == eos:
                break
        m = len(proposed)
        # One batched target sweep over the block prefixes, including the
        # position after the block (the bonus position).
        contexts = [seq[: base + i] for i in range(m + 1)]
        target_dists = softmax_rows_with_temperature(target.forward_batch(contexts), tau)
        if proposed[-1] == eos:
            # An accepted final eos ends the generation, so no bonus
            # distribution is offered for this block.
            target_dists = target_dists[:m]
        accepted, correction, kind = verify_block(target_dists, draft_dists, proposed, rng)
        trace.record(RoundRecord(proposed, accepted, correction, kind))
        committed = proposed[:accepted]
        if correction is not None:
            committed.append(correction)
        stop = False
        for tok in committed:
            if len(out) == cap:
                break
            out.append(tok)
            if tok == eos:
                stop = True
                break
        if stop:
            break
    return out, trace


def dump_trace(trace: SpeculationTrace) -> str:
    """Plain-text trace, one verification round per line."""
    lines = []
    for i, rnd in enumerate(trace.rounds):
        corr = "none" if rnd.correction_token is None else str(rnd.correction_token)
        lines.append(
            f"round={i}"
            f" proposed={','.join(str(t) for t in rnd.proposed)}"
            f" accepted={rnd.accepted_count}"
            f" correction={corr}"
            f" kind={_KIND_NAMES[rnd.correction_kind]}"
        )
    return "".join(line + "\n" for line in lines)


def parse_trace(text: str) -> SpeculationTrace:
    """Inverse of :func:`dump_trace`; validates the line structure."""
    trace = SpeculationTrace()
    for lineno, line in enumerate(text.splitlines()):
        fields = dict(part.split("=", 1) for part in line.split())
        if set(fields) != {"round", "proposed", "accepted", "correction", "kind"}:
            raise DomainError(f"trace line {lineno}: unexpected fields")
        if int(fields["round"]) != lineno:
            raise DomainError(f"trace line {lineno}: round index {fields['round']}")
        proposed = [int(t) for t in fields["proposed"].split(",") if t != ""]
        correction = None if fields["correction"] == "none" else int(fields["correction"])
        kind = fields["kind"]
        if kind == "eos":
            rec_kind = None
        elif kind in ("resample", "bonus"):
            rec_kind = kind
        else:
            raise DomainError(f"trace line {lineno}: unknown kind '{kind}'")
        if rec_kind is None and correction is not None:
            raise DomainError(f"trace line {lineno}: eos round carries a correction")
        trace.record(RoundRecord(proposed, int(fields["accepted"]), correction, rec_kind))
    return trace
