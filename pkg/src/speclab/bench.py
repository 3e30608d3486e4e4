"""Acceptance-rate and wall-time metrics, temperature sweeps, comparisons.

The sweep runner trains one draft per distillation temperature, then
measures every (distillation temperature, decoding temperature) cell
with per-seed decoding runs. Acceptance counts are pooled exactly, so
an alpha recomputed from dumped traces matches the reported one bit for
bit; wall times come from a monotonic clock and are the only
non-deterministic output.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from time import perf_counter

import numpy as np

from .corpus import CorpusBundle
from .distill import KDConfig, make_kd_dataset, train_offline, train_online
from .errors import DomainError, TrainingError
from .lm import NGramLogitLM, load_checkpoint, save_checkpoint
from .sampling import STREAM_EVAL, derive_seed, make_rng
from .specdec import (
    GenerationConfig,
    dump_trace,
    generate_autoregressive,
    parse_trace,
    speculative_generate,
)

DEFAULT_KD_TAUS = tuple(round(0.1 * i, 1) for i in range(11))
DEFAULT_DECODE_TAUS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
EXTENDED_DECODE_TAUS = DEFAULT_DECODE_TAUS + (1.5, 2.0)

SWEEP_CSV_HEADER = "kd_tau,decode_tau,seed,alpha,speedup,tokens_out,wall_spec_s,wall_base_s"

_TAG_SWEEP_DATA = 21
_TAG_SWEEP_TRAIN = 22
_TAG_SWEEP_CELL = 23
_TAG_ARM_CELL = 24


@dataclass(frozen=True)
class DecodeStats:
    """Pooled decoding metrics for one evaluation setting.

    ``alpha`` is accepted draft tokens over proposed draft tokens,
    pooled across every run and prompt; bonus and correction tokens are
    outside both counts. ``speedup`` is total baseline wall time over
    total speculative wall time, which equals the ratio of means since
    both sides decode the same prompt set the same number of times.
    """

    alpha: float
    speedup: float
    tokens_out: int
    wall_time_spec: float
    wall_time_base: float
    runs: int = 5
    draft_proposed: int = 0
    draft_accepted: int = 0

    def __post_init__(self):
        if self.runs < 1:
            raise DomainError("runs must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError("alpha must lie in [0, 1]")
        if self.speedup <= 0:
            raise DomainError("speedup must be > 0")
        if self.tokens_out < 0 or self.draft_proposed < 0 or self.draft_accepted < 0:
            raise DomainError("counts must be >= 0")
        if self.draft_accepted > self.draft_proposed:
            raise DomainError("accepted count exceeds proposed count")


def merge_decode_stats(parts) -> DecodeStats:
    """Pool several DecodeStats into one; counts add, walls add."""
    parts = list(parts)
    if not parts:
        raise DomainError("nothing to merge")
    proposed = sum(p.draft_proposed for p in parts)
    accepted = sum(p.draft_accepted for p in parts)
    if proposed == 0:
        raise DomainError("no draft proposals recorded")
    wall_spec = sum(p.wall_time_spec for p in parts)
    wall_base = sum(p.wall_time_base for p in parts)
    return DecodeStats(
        alpha=accepted / proposed,
        speedup=wall_base / wall_spec,
        tokens_out=sum(p.tokens_out for p in parts),
        wall_time_spec=wall_spec,
        wall_time_base=wall_base,
        runs=sum(p.runs for p in parts),
        draft_proposed=proposed,
        draft_accepted=accepted,
    )


def measure_decode(target, draft, prompts, config: GenerationConfig, runs: int = 5,
                   *, on_trace=None) -> DecodeStats:
    """Decode every prompt ``runs`` times speculatively and plainly.

    Each (run, prompt) pair gets its own child seed derived from
    ``config.seed``, so results are independent of evaluation order.
    ``on_trace(run, prompt_index, trace)``, when given, observes every
    speculative trace outside the timed regions.
    """
    if runs < 1:
        raise DomainError("runs must be >= 1")
    prompts = list(prompts)
    if not prompts:
        raise DomainError("prompt list is empty")
    proposed = accepted = tokens = 0
    wall_spec = wall_base = 0.0
    for run in range(runs):
        for j, prompt in enumerate(prompts):
            seed = derive_seed(config.seed, STREAM_EVAL, run, j)
            rng = make_rng(seed)
            start = perf_counter()
            out, trace = speculative_generate(target, draft, prompt, config, rng)
            wall_spec += perf_counter() - start
            rng = make_rng(derive_seed(seed, 1))
            start = perf_counter()
            generate_autoregressive(target, prompt, config, rng)
            wall_base += perf_counter() - start
            proposed += trace.draft_proposed
            accepted += trace.draft_accepted
            tokens += len(out)
            if on_trace is not None:
                on_trace(run, j, trace)
    if proposed == 0:
        raise DomainError("no draft proposals recorded")
    return DecodeStats(
        alpha=accepted / proposed,
        speedup=wall_base / wall_spec,
        tokens_out=tokens,
        wall_time_spec=wall_spec,
        wall_time_base=wall_base,
        runs=runs,
        draft_proposed=proposed,
        draft_accepted=accepted,
    )


@dataclass(frozen=True)
class SweepResult:
    """Grid of decode metrics over (distillation tau, decoding tau).

    ``cells[i][j]`` pools every seed for ``kd_taus[i]`` ×
    ``decode_taus[j]``; ``seed_stats`` keeps the per-seed breakdown as
    ``(kd_tau, decode_tau, seed, stats)`` rows sorted in that key order.
    """

    kd_taus: tuple
    decode_taus: tuple
    cells: tuple
    seed_stats: tuple
    metadata: dict

    def __post_init__(self):
        if len(self.cells) != len(self.kd_taus):
            raise DomainError("cell matrix row count mismatch")
        for row in self.cells:
            if len(row) != len(self.decode_taus):
                raise DomainError("cell matrix column count mismatch")


def _corpus_label(spec) -> str:
    return (
        f"vocab{spec.vocab_size}-order{spec.order}"
        f"-c{spec.concentration:g}-seed{spec.seed}"
    )


def train_sweep_draft(corpus: CorpusBundle, kd_mode: str, kd_tau: float,
                      template: KDConfig, kd_index: int = 0,
                      cache_dir=None, draft_factory=None):
    """Train (or load from cache) the draft for one distillation tau.

    The cache file name keys on mode and temperature only; reuse a
    cache directory across different step counts or learning rates and
    it will serve stale drafts, so give each sweep configuration its
    own directory.
    """
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"draft_{kd_mode}_tau{kd_tau:.2f}.ckpt"
        if path.exists():
            return load_checkpoint(path)
    if draft_factory is None:
        student = NGramLogitLM.create(corpus.vocab, 1)
    else:
        student = draft_factory()
    data_rng = make_rng(derive_seed(template.seed, _TAG_SWEEP_DATA, kd_index))
    dataset = make_kd_dataset(
        corpus.teacher,
        corpus.prompts,
        kd_tau,
        data_rng,
        repeats=template.data_repeats,
        max_len=template.gen_max_len,
    )
    cfg = replace(
        template,
        mode=kd_mode,
        tau_gen=kd_tau,
        seed=derive_seed(template.seed, _TAG_SWEEP_TRAIN, kd_index),
    )
    if kd_mode == "offline":
        train_offline(student, dataset, cfg)
    else:
        train_online(student, corpus.teacher, dataset, cfg)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(student, path)
    return student


def run_sweep(kd_taus, decode_taus, kd_mode, corpus: CorpusBundle,
              base_config: GenerationConfig, seeds, *, kd_template: KDConfig | None = None,
              runs_per_seed: int = 1, cache_dir=None, jobs: int = 1,
              draft_factory=None, trace_sink=None) -> SweepResult:
    """Train one draft per distillation tau, then measure every cell.

    Every (cell, seed) evaluation uses the child seed
    ``derive_seed(base_config.seed, tag, kd_index, decode_index, seed)``
    so cells are independent and reruns reproduce bit for bit. Drafts
    train sequentially; with ``jobs > 1`` the decode evaluations run in
    a thread pool (identical results, but wall times then include
    scheduling noise, so keep ``jobs=1`` when timing matters).
    ``trace_sink(kd_tau, decode_tau, seed, text)``, when given, receives
    the concatenated traces of each evaluation.
    """
    kd_taus = tuple(sorted(float(t) for t in kd_taus))
    decode_taus = tuple(sorted(float(t) for t in decode_taus))
    seeds = tuple(int(s) for s in seeds)
    if not kd_taus or not decode_taus:
        raise DomainError("temperature lists must be non-empty")
    if not seeds:
        raise DomainError("seed list must be non-empty")
    if len(set(seeds)) != len(seeds):
        raise DomainError("seeds must be distinct")
    if jobs < 1:
        raise DomainError("jobs must be >= 1")
    if kd_mode not in ("offline", "online"):
        raise DomainError(f"unknown distillation mode '{kd_mode}'")
    if kd_template is None:
        kd_template = KDConfig(mode=kd_mode)

    drafts = []
    for ki, kd_tau in enumerate(kd_taus):
        try:
            drafts.append(
                train_sweep_draft(
                    corpus, kd_mode, kd_tau, kd_template, ki, cache_dir, draft_factory
                )
            )
        except TrainingError as exc:
            raise TrainingError(f"sweep aborted at kd_tau={kd_tau:g}: {exc}") from exc

    def eval_cell(ki: int, di: int, seed: int):
        cfg = replace(
            base_config,
            tau=decode_taus[di],
            seed=derive_seed(base_config.seed, _TAG_SWEEP_CELL, ki, di, seed),
        )
        blocks: list[str] = []
        sink = None
        if trace_sink is not None:
            sink = lambda run, j, trace: blocks.append(dump_trace(trace))
        stats = measure_decode(
            corpus.teacher, drafts[ki], corpus.prompts, cfg, runs_per_seed, on_trace=sink
        )
        if trace_sink is not None:
            trace_sink(kd_taus[ki], decode_taus[di], seed, "\n".join(blocks))
        return stats

    keys = [
        (ki, di, seed)
        for ki in range(len(kd_taus))
        for di in range(len(decode_taus))
        for seed in sorted(seeds)
    ]
    if jobs == 1:
        results = {key: eval_cell(*key) for key in keys}
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {key: pool.submit(eval_cell, *key) for key in keys}
            results = {key: fut.result() for key, fut in futures.items()}

    cells = tuple(
        tuple(
            merge_decode_stats(
                results[(ki, di, seed)] for seed in sorted(seeds)
            )
            for di in range(len(decode_taus))
        )
        for ki in range(len(kd_taus))
    )
    seed_stats = tuple(
        (kd_taus[ki], decode_taus[di], seed, results[(ki, di, seed)])
        for ki in range(len(kd_taus))
        for di in range(len(decode_taus))
        for seed in sorted(seeds)
    )
    metadata = {
        "block_size": base_config.block_size,
        "max_new_tokens": base_config.max_new_tokens,
        "seeds": seeds,
        "runs_per_seed": runs_per_seed,
        "corpus": _corpus_label(corpus.spec),
        "kd_mode": kd_mode,
    }
    return SweepResult(kd_taus, decode_taus, cells, seed_stats, metadata)


def best_kd_per_decode(result: SweepResult) -> list[tuple[float, float]]:
    """Distillation tau with the highest pooled alpha, per decode tau.

    Ties resolve to the lowest temperature.
    """
    out = []
    for di, decode_tau in enumerate(result.decode_taus):
        best = max(
            range(len(result.kd_taus)),
            key=lambda ki: (result.cells[ki][di].alpha, -ki),
        )
        out.append((decode_tau, result.kd_taus[best]))
    return out


def sweep_csv_text(result: SweepResult, *, no_timing: bool = False) -> str:
    """Render per-seed rows; ``no_timing`` zeroes clock-derived fields."""
    lines = [SWEEP_CSV_HEADER]
    for kd_tau, decode_tau, seed, stats in result.seed_stats:
        speedup = 0.0 if no_timing else stats.speedup
        wall_spec = 0.0 if no_timing else stats.wall_time_spec
        wall_base = 0.0 if no_timing else stats.wall_time_base
        lines.append(
            f"{kd_tau:.6f},{decode_tau:.6f},{seed},{stats.alpha:.6f},"
            f"{speedup:.6f},{stats.tokens_out},{wall_spec:.6f},{wall_base:.6f}"
        )
    return "".join(line + "\n" for line in lines)


def parse_sweep_csv(text: str) -> list[dict]:
    """Typed rows from sweep CSV text; rejects unknown layouts."""
    lines = text.splitlines()
    if not lines or lines[0] != SWEEP_CSV_HEADER:
        raise DomainError("unrecognized sweep CSV header")
    names = SWEEP_CSV_HEADER.split(",")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(names):
            raise DomainError(f"line {lineno}: expected {len(names)} fields")
        try:
            rows.append(
                {
                    "kd_tau": float(parts[0]),
                    "decode_tau": float(parts[1]),
                    "seed": int(parts[2]),
                    "alpha": float(parts[3]),
                    "speedup": float(parts[4]),
                    "tokens_out": int(parts[5]),
                    "wall_spec_s": float(parts[6]),
                    "wall_base_s": float(parts[7]),
                }
            )
        except ValueError as exc:
            raise DomainError(f"line {lineno}: {exc}") from exc
    return rows


def recount_alpha(trace_text: str) -> float:
    """Pooled acceptance recomputed from dumped traces.

    ``trace_text`` holds one or more dumped traces separated by blank
    lines, as written by the sweep and decode trace sinks.
    """
    proposed = accepted = 0
    for block in trace_text.split("\n\n"):
        if not block.strip():
            continue
        trace = parse_trace(block)
        proposed += trace.draft_proposed
        accepted += trace.draft_accepted
    if proposed == 0:
        raise DomainError("no draft proposals recorded")
    return accepted / proposed


@dataclass(frozen=True)
class ArmStats:
    """Per-seed decode metrics for one draft across decode temperatures.

    ``cells`` holds ``(decode_tau, seed, stats)`` rows sorted by
    (decode_tau, seed). The prompt digest pins down which prompt set
    produced the numbers so two arms can refuse an apples-to-oranges
    comparison.
    """

    label: str
    prompt_digest: str
    seeds: tuple
    cells: tuple


@dataclass(frozen=True)
class ComparisonRow:
    decode_tau: float
    seed: int
    delta_alpha: float
    delta_speedup: float


def prompt_digest(prompts) -> str:
    """Stable fingerprint of a prompt set (order-sensitive)."""
    text = ";".join(",".join(str(t) for t in p) for p in prompts)
    return hashlib.sha256(text.encode("ascii")).hexdigest()[:16]


def evaluate_arm(target, draft, prompts, decode_taus, base_config: GenerationConfig,
                 seeds, label: str, runs_per_seed: int = 1) -> ArmStats:
    """Measure one draft over decode temperatures with per-seed runs.

    ``draft`` is either a model or a callable mapping a seed to a model
    (for arms whose draft was trained per seed). Cell seeds depend only
    on (base seed, decode tau index, seed), not on the draft, so two
    arms built from the same ``base_config`` see identical decoding
    randomness and compare pairwise.
    """
    prompts = list(prompts)
    if not prompts:
        raise DomainError("prompt list is empty")
    decode_taus = tuple(sorted(float(t) for t in decode_taus))
    seeds = tuple(sorted(int(s) for s in seeds))
    if not decode_taus or not seeds:
        raise DomainError("decode temperatures and seeds must be non-empty")
    draft_for = draft if callable(draft) else (lambda seed: draft)
    cells = []
    for di, decode_tau in enumerate(decode_taus):
        for seed in seeds:
            cfg = replace(
                base_config,
                tau=decode_tau,
                seed=derive_seed(base_config.seed, _TAG_ARM_CELL, di, seed),
            )
            stats = measure_decode(target, draft_for(seed), prompts, cfg, runs_per_seed)
            cells.append((decode_tau, seed, stats))
    return ArmStats(label, prompt_digest(prompts), seeds, tuple(cells))


def compare_composition(single_tau_stats: ArmStats, composed_stats: ArmStats) -> list[ComparisonRow]:
    """Delta rows (composed minus single) per decode temperature and seed."""
    if single_tau_stats.prompt_digest != composed_stats.prompt_digest:
        raise DomainError("comparison requires identical prompt sets")
    if single_tau_stats.seeds != composed_stats.seeds:
        raise DomainError("comparison requires identical seed lists")
    left = {(tau, seed): stats for tau, seed, stats in single_tau_stats.cells}
    right = {(tau, seed): stats for tau, seed, stats in composed_stats.cells}
    if left.keys() != right.keys():
        raise DomainError("comparison requires identical decode temperature grids")
    rows = []
    for (tau, seed) in sorted(left):
        rows.append(
            ComparisonRow(
                decode_tau=tau,
                seed=seed,
                delta_alpha=right[(tau, seed)].alpha - left[(tau, seed)].alpha,
                delta_speedup=right[(tau, seed)].speedup - left[(tau, seed)].speedup,
            )
        )
    return rows


@dataclass(frozen=True)
class LengthHistogram:
    """Continuation-length histogram with fixed-width integer buckets."""

    edges: tuple
    frequencies: tuple

    def __post_init__(self):
        if len(self.edges) != len(self.frequencies) + 1:
            raise DomainError("edges must outnumber frequencies by one")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise DomainError("edges must be strictly increasing")
        if any(f < 0 for f in self.frequencies):
            raise DomainError("frequencies must be >= 0")


def token_length_stats(generations, bucket_width: int = 8) -> LengthHistogram:
    """Histogram of continuation lengths (token counts to eos or cap)."""
    if bucket_width < 1:
        raise DomainError("bucket_width must be >= 1")
    lengths = [len(g) for g in generations]
    top = max(lengths, default=0)
    n_buckets = top // bucket_width + 1
    frequencies = [0] * n_buckets
    for length in lengths:
        frequencies[length // bucket_width] += 1
    edges = tuple(bucket_width * i for i in range(n_buckets + 1))
    return LengthHistogram(edges, tuple(frequencies))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    """Rank correlation with average ranks on ties."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise DomainError("need two equal-length sequences of at least 2 points")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = float(np.sqrt((rx ** 2).sum() * (ry ** 2).sum()))
    if denom == 0.0:
        raise DomainError("rank correlation undefined for constant input")
    return float((rx * ry).sum() / denom)
