"""Command-line entry point: reproducible experiment runs from config files.

Commands: ``corpus`` (build chain, teacher, prompt sets), ``distill``
(train a draft), ``decode`` (measure one decoding setting), ``sweep``
(distillation-tau x decoding-tau grid), ``compose`` (mixed-temperature
dataset vs single-temperature), ``report`` (text summary of sweep CSVs).
Every command is deterministic given its config; wall-clock fields are
the one exception and the ``--no-timing`` flag zeroes them so reruns
compare byte for byte.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from .bench import (
    DEFAULT_DECODE_TAUS,
    DEFAULT_KD_TAUS,
    evaluate_arm,
    compare_composition,
    measure_decode,
    parse_sweep_csv,
    recount_alpha,
    run_sweep,
    spearman,
    sweep_csv_text,
)
from .corpus import (
    CorpusBundle,
    CorpusSpec,
    build_corpus,
    build_ground_truth,
    canonical_prompts,
    load_prompts,
    save_prompts,
)
from .distill import (
    KDConfig,
    compose_dataset,
    make_kd_dataset,
    save_dataset,
    train_log_rows,
    train_offline,
    train_online,
)
from .errors import ConfigError, DomainError, NumericError, TrainingError, VerificationError
from .lm import (
    FAMILY_NEURAL,
    FAMILY_NGRAM,
    NGramLogitLM,
    TinyNeuralLM,
    load_checkpoint,
    save_checkpoint,
)
from .sampling import derive_seed, make_rng
from .specdec import GenerationConfig, dump_trace

_TAG_DRAFT_INIT = 31
_TAG_DATA = 32


def _parse_int(text: str) -> int:
    return int(text)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_str(text: str) -> str:
    return text


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float_list(text: str) -> tuple:
    return tuple(float(part) for part in text.split(",") if part.strip() != "")


def _parse_int_list(text: str) -> tuple:
    return tuple(int(part) for part in text.split(",") if part.strip() != "")


# Flat `section.key = value` schema: parser and default per key.
_SCHEMA = {
    "corpus.vocab_size": (_parse_int, 32),
    "corpus.order": (_parse_int, 2),
    "corpus.concentration": (_parse_float, 0.5),
    "corpus.out_concentration": (_parse_float, 0.05),
    "corpus.n_prompts": (_parse_int, 200),
    "corpus.prompt_len": (_parse_int, 8),
    "corpus.seed": (_parse_int, 0),
    "corpus.pretrain_budget": (_parse_int, 800_000),
    "corpus.tolerance": (_parse_float, 0.05),
    "models.teacher_family": (_parse_str, FAMILY_NGRAM),
    "models.teacher_order": (_parse_int, 2),
    "models.draft_family": (_parse_str, FAMILY_NGRAM),
    "models.draft_order": (_parse_int, 1),
    "models.draft_init_scale": (_parse_float, 2.0),
    "models.draft_context_size": (_parse_int, 3),
    "models.draft_d_emb": (_parse_int, 16),
    "models.draft_d_hid": (_parse_int, 64),
    "kd.mode": (_parse_str, "offline"),
    "kd.tau_gen": (_parse_float, 1.0),
    "kd.on_policy_frac": (_parse_float, 0.5),
    "kd.loss_ratio": (_parse_float, 1.0),
    "kd.learning_rate": (_parse_float, 0.3),
    "kd.steps": (_parse_int, 3000),
    "kd.seed": (_parse_int, 0),
    "kd.gen_max_len": (_parse_int, 64),
    "kd.data_repeats": (_parse_int, 5),
    "decode.tau": (_parse_float, 1.0),
    "decode.block_size": (_parse_int, 4),
    "decode.max_new_tokens": (_parse_int, 64),
    "decode.seed": (_parse_int, 0),
    "decode.runs": (_parse_int, 5),
    "sweep.kd_taus": (_parse_float_list, DEFAULT_KD_TAUS),
    "sweep.decode_taus": (_parse_float_list, DEFAULT_DECODE_TAUS),
    "sweep.seeds": (_parse_int_list, (1, 2, 3, 4, 5)),
    "sweep.runs_per_seed": (_parse_int, 1),
    "sweep.traces": (_parse_bool, False),
    "compose.tau_set": (_parse_float_list, (1.0, 0.9, 0.8)),
    "compose.single_tau": (_parse_float, 1.0),
    "compose.decode_taus": (_parse_float_list, (1.0,)),
    "compose.seeds": (_parse_int_list, (1, 2, 3, 4, 5)),
    "compose.data_repeats": (_parse_int, 1),
    "io.output_dir": (_parse_str, "runs/default"),
}


@dataclass
class RunConfig:
    """Typed view of one config file."""

    corpus: CorpusSpec
    out_concentration: float
    pretrain_budget: int
    tolerance: float
    models: dict
    kd: KDConfig
    decode: GenerationConfig
    decode_runs: int
    sweep: dict
    compose: dict
    output_dir: Path


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat `section.key = value` lines into a fully defaulted dict."""
    values = {key: default for key, (_, default) in _SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        parser_fn, _ = _SCHEMA[key]
        try:
            values[key] = parser_fn(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for '{key}': {exc}") from exc
    return values


def _build_run_config(values: dict, seed_override: int | None) -> RunConfig:
    if seed_override is not None:
        values = dict(values)
        values["corpus.seed"] = seed_override
        values["kd.seed"] = seed_override
        values["decode.seed"] = seed_override
    corpus = CorpusSpec(
        vocab_size=values["corpus.vocab_size"],
        order=values["corpus.order"],
        concentration=values["corpus.concentration"],
        n_prompts=values["corpus.n_prompts"],
        prompt_len=values["corpus.prompt_len"],
        seed=values["corpus.seed"],
    )
    models = {
        key.split(".", 1)[1]: values[key] for key in _SCHEMA if key.startswith("models.")
    }
    if models["teacher_family"] != FAMILY_NGRAM:
        raise ConfigError(
            f"models.teacher_family must be '{FAMILY_NGRAM}' (teacher pretraining "
            "fits a logit table)"
        )
    if models["draft_family"] not in (FAMILY_NGRAM, FAMILY_NEURAL):
        raise ConfigError(f"unknown models.draft_family '{models['draft_family']}'")
    kd = KDConfig(
        mode=values["kd.mode"],
        tau_gen=values["kd.tau_gen"],
        on_policy_frac=values["kd.on_policy_frac"],
        loss_ratio=values["kd.loss_ratio"],
        learning_rate=values["kd.learning_rate"],
        steps=values["kd.steps"],
        seed=values["kd.seed"],
        gen_max_len=values["kd.gen_max_len"],
        data_repeats=values["kd.data_repeats"],
    )
    decode = GenerationConfig(
        tau=values["decode.tau"],
        block_size=values["decode.block_size"],
        max_new_tokens=values["decode.max_new_tokens"],
        seed=values["decode.seed"],
    )
    sweep = {
        key.split(".", 1)[1]: values[key] for key in _SCHEMA if key.startswith("sweep.")
    }
    compose = {
        key.split(".", 1)[1]: values[key] for key in _SCHEMA if key.startswith("compose.")
    }
    return RunConfig(
        corpus=corpus,
        out_concentration=values["corpus.out_concentration"],
        pretrain_budget=values["corpus.pretrain_budget"],
        tolerance=values["corpus.tolerance"],
        models=models,
        kd=kd,
        decode=decode,
        decode_runs=values["decode.runs"],
        sweep=sweep,
        compose=compose,
        output_dir=Path(values["io.output_dir"]),
    )


def load_config(path, seed_override: int | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = parse_config_text(path.read_text(), source=str(path))
    return _build_run_config(values, seed_override)


def _draft_factory(config: RunConfig):
    """Student constructor; the same initialization every call."""
    models = config.models
    vocab = config.corpus.vocab()
    init_seed = derive_seed(config.kd.seed, _TAG_DRAFT_INIT)
    if models["draft_family"] == FAMILY_NGRAM:
        return lambda: NGramLogitLM.create(
            vocab,
            models["draft_order"],
            init_scale=models["draft_init_scale"],
            init_seed=init_seed,
        )
    return lambda: TinyNeuralLM.create(
        vocab,
        context_size=models["draft_context_size"],
        d_emb=models["draft_d_emb"],
        d_hid=models["draft_d_hid"],
        seed=init_seed,
    )


def _require_artifact(path: Path, producer: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"missing artifact {path}; run the {producer} command first")
    return path


def _load_eval_bundle(config: RunConfig) -> CorpusBundle:
    """Bundle backed by saved artifacts; enough for decoding work.

    The ground truth and held-out fields are not reloaded; commands
    that only decode never touch them.
    """
    out = config.output_dir
    teacher = load_checkpoint(_require_artifact(out / "teacher.ckpt", "corpus"))
    prompts = load_prompts(_require_artifact(out / "prompts_in.txt", "corpus"))
    return CorpusBundle(
        spec=config.corpus,
        vocab=config.corpus.vocab(),
        ground_truth=None,
        teacher=teacher,
        prompts=prompts,
        heldout_contexts=[],
        teacher_ce=float("nan"),
        entropy_rate=float("nan"),
    )


def cmd_corpus(config: RunConfig) -> int:
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    bundle = build_corpus(
        config.corpus,
        teacher_order=config.models["teacher_order"],
        pretrain_budget=config.pretrain_budget,
        tolerance=config.tolerance,
    )
    save_checkpoint(bundle.ground_truth, out / "ground_truth.ckpt")
    save_checkpoint(bundle.teacher, out / "teacher.ckpt")
    save_prompts(bundle.prompts, out / "prompts_in.txt")
    spec_out = replace(config.corpus, concentration=config.out_concentration)
    gt_out = build_ground_truth(spec_out, make_rng(spec_out.seed))
    save_prompts(canonical_prompts(gt_out, spec_out), out / "prompts_out.txt")
    meta = (
        f"vocab_size = {config.corpus.vocab_size}\n"
        f"order = {config.corpus.order}\n"
        f"concentration = {config.corpus.concentration!r}\n"
        f"out_concentration = {config.out_concentration!r}\n"
        f"seed = {config.corpus.seed}\n"
        f"teacher_heldout_ce = {bundle.teacher_ce:.12f}\n"
        f"heldout_entropy_rate = {bundle.entropy_rate:.12f}\n"
    )
    (out / "corpus_meta.txt").write_text(meta)
    for name in ("ground_truth.ckpt", "teacher.ckpt"):
        load_checkpoint(out / name)
    if load_prompts(out / "prompts_in.txt") != bundle.prompts:
        raise VerificationError("prompt file round trip mismatch")
    print(
        f"corpus written to {out} (teacher held-out CE {bundle.teacher_ce:.6f}, "
        f"entropy rate {bundle.entropy_rate:.6f})"
    )
    return 0


def cmd_distill(config: RunConfig) -> int:
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    bundle = _load_eval_bundle(config)
    student = _draft_factory(config)()
    data_rng = make_rng(derive_seed(config.kd.seed, _TAG_DATA))
    dataset = make_kd_dataset(
        bundle.teacher,
        bundle.prompts,
        config.kd.tau_gen,
        data_rng,
        repeats=config.kd.data_repeats,
        max_len=config.kd.gen_max_len,
    )
    save_dataset(dataset, out / "kd_dataset.txt")
    if config.kd.mode == "offline":
        log = train_offline(student, dataset, config.kd)
    else:
        log = train_online(student, bundle.teacher, dataset, config.kd)
    save_checkpoint(student, out / "draft.ckpt")
    (out / "train_log.csv").write_text("".join(row + "\n" for row in train_log_rows(log)))
    load_checkpoint(out / "draft.ckpt")
    if len(log) != config.kd.steps:
        raise VerificationError("training log row count does not match steps")
    last = log[-1].lm_loss if log else float("nan")
    print(f"draft written to {out / 'draft.ckpt'} ({config.kd.mode}, final lm_loss {last:.6f})")
    return 0


def cmd_decode(config: RunConfig, no_timing: bool = False) -> int:
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    bundle = _load_eval_bundle(config)
    draft = load_checkpoint(_require_artifact(out / "draft.ckpt", "distill"))
    blocks: list[str] = []
    stats = measure_decode(
        bundle.teacher,
        draft,
        bundle.prompts,
        config.decode,
        config.decode_runs,
        on_trace=lambda run, j, trace: blocks.append(dump_trace(trace)),
    )
    traces_dir = out / "traces"
    traces_dir.mkdir(exist_ok=True)
    trace_text = "\n".join(blocks)
    (traces_dir / "decode_traces.txt").write_text(trace_text)
    if recount_alpha(trace_text) != stats.alpha:
        raise VerificationError("trace-recomputed alpha does not match measured alpha")
    speedup = 0.0 if no_timing else stats.speedup
    wall_spec = 0.0 if no_timing else stats.wall_time_spec
    wall_base = 0.0 if no_timing else stats.wall_time_base
    stats_text = (
        f"alpha = {stats.alpha:.6f}\n"
        f"speedup = {speedup:.6f}\n"
        f"tokens_out = {stats.tokens_out}\n"
        f"wall_spec_s = {wall_spec:.6f}\n"
        f"wall_base_s = {wall_base:.6f}\n"
        f"runs = {stats.runs}\n"
        f"draft_proposed = {stats.draft_proposed}\n"
        f"draft_accepted = {stats.draft_accepted}\n"
    )
    (out / "decode_stats.txt").write_text(stats_text)
    print(f"decode stats written to {out / 'decode_stats.txt'} (alpha {stats.alpha:.6f})")
    return 0


def cmd_sweep(config: RunConfig, jobs: int = 1, no_timing: bool = False) -> int:
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    bundle = _load_eval_bundle(config)
    sweep = config.sweep
    trace_sink = None
    if sweep["traces"]:
        traces_dir = out / "traces"
        traces_dir.mkdir(exist_ok=True)

        def trace_sink(kd_tau, decode_tau, seed, text):
            name = f"sweep_kd{kd_tau:.2f}_dec{decode_tau:.2f}_seed{seed}.txt"
            (traces_dir / name).write_text(text)

    result = run_sweep(
        sweep["kd_taus"],
        sweep["decode_taus"],
        config.kd.mode,
        bundle,
        config.decode,
        sweep["seeds"],
        kd_template=config.kd,
        runs_per_seed=sweep["runs_per_seed"],
        cache_dir=out / "drafts",
        jobs=jobs,
        draft_factory=_draft_factory(config),
        trace_sink=trace_sink,
    )
    csv_text = sweep_csv_text(result, no_timing=no_timing)
    (out / "sweep.csv").write_text(csv_text)
    rows = parse_sweep_csv(csv_text)
    expected = len(result.kd_taus) * len(result.decode_taus) * len(sweep["seeds"])
    if len(rows) != expected:
        raise VerificationError("sweep CSV row count does not match the grid")
    print(f"sweep written to {out / 'sweep.csv'} ({len(rows)} rows)")
    return 0


def cmd_compose(config: RunConfig, no_timing: bool = False) -> int:
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    bundle = _load_eval_bundle(config)
    comp = config.compose
    factory = _draft_factory(config)

    def train_pair(seed: int):
        ds_seed = derive_seed(config.kd.seed, _TAG_DATA, seed)
        kd_cfg = replace(
            config.kd,
            mode="offline",
            seed=derive_seed(config.kd.seed, seed),
        )
        single = factory()
        single_data = make_kd_dataset(
            bundle.teacher,
            bundle.prompts,
            comp["single_tau"],
            make_rng(ds_seed),
            repeats=comp["data_repeats"],
            max_len=config.kd.gen_max_len,
        )
        train_offline(single, single_data, replace(kd_cfg, tau_gen=comp["single_tau"]))
        composed = factory()
        # Mirror make_kd_dataset so a singleton tau_set reproduces the
        # single arm's dataset byte for byte. Both arms see the same data
        # volume; the default single pass keeps per-transition estimates
        # noisy enough that the mixture's cleaner low-temperature samples
        # can show up in the comparison.
        composed_rng = make_rng(ds_seed)
        composed_data = []
        for _ in range(comp["data_repeats"]):
            composed_data.extend(
                compose_dataset(
                    bundle.teacher,
                    comp["tau_set"],
                    bundle.prompts,
                    composed_rng,
                    max_len=config.kd.gen_max_len,
                )
            )
        train_offline(composed, composed_data, kd_cfg)
        return single, composed

    drafts = {seed: train_pair(seed) for seed in comp["seeds"]}
    arm_single = evaluate_arm(
        bundle.teacher,
        lambda seed: drafts[seed][0],
        bundle.prompts,
        comp["decode_taus"],
        config.decode,
        comp["seeds"],
        label=f"single_tau={comp['single_tau']:g}",
    )
    arm_composed = evaluate_arm(
        bundle.teacher,
        lambda seed: drafts[seed][1],
        bundle.prompts,
        comp["decode_taus"],
        config.decode,
        comp["seeds"],
        label="composed_{" + ",".join(f"{t:g}" for t in comp["tau_set"]) + "}",
    )
    rows = compare_composition(arm_single, arm_composed)
    lines = ["decode_tau,seed,delta_alpha,delta_speedup"]
    for row in rows:
        delta_speedup = 0.0 if no_timing else row.delta_speedup
        lines.append(
            f"{row.decode_tau:.6f},{row.seed},{row.delta_alpha:.6f},{delta_speedup:.6f}"
        )
    (out / "comparison.csv").write_text("".join(line + "\n" for line in lines))
    wins = sum(row.delta_alpha >= 0 for row in rows)
    print(
        f"comparison written to {out / 'comparison.csv'} "
        f"({wins}/{len(rows)} rows with delta_alpha >= 0)"
    )
    return 0


def _report_section(path: Path) -> str:
    rows = parse_sweep_csv(path.read_text())
    if not rows:
        raise DomainError(f"{path}: no data rows")
    kd_taus = sorted({r["kd_tau"] for r in rows})
    decode_taus = sorted({r["decode_tau"] for r in rows})
    seeds = sorted({r["seed"] for r in rows})
    cell_alpha: dict = {}
    cell_speedup: dict = {}
    for kd in kd_taus:
        for dec in decode_taus:
            group = [r for r in rows if r["kd_tau"] == kd and r["decode_tau"] == dec]
            if group:
                cell_alpha[(kd, dec)] = sum(r["alpha"] for r in group) / len(group)
                cell_speedup[(kd, dec)] = sum(r["speedup"] for r in group) / len(group)
    lines = [f"# sweep report: {path}"]
    lines.append(
        f"rows: {len(rows)}  seeds: {len(seeds)}  cells: {len(cell_alpha)}  "
        f"kd_taus: {len(kd_taus)}  decode_taus: {len(decode_taus)}"
    )
    lines.append("mean alpha per cell (rows kd_tau, columns decode_tau):")
    header = "  kd\\dec |" + "".join(f" {dec:8.2f}" for dec in decode_taus)
    lines.append(header)
    for kd in kd_taus:
        row = f"  {kd:6.2f} |" + "".join(
            f" {cell_alpha.get((kd, dec), float('nan')):8.6f}" for dec in decode_taus
        )
        lines.append(row)
    lines.append("best kd_tau per decode_tau (mean alpha over seeds):")
    for dec in decode_taus:
        candidates = [(kd, cell_alpha[(kd, dec)]) for kd in kd_taus if (kd, dec) in cell_alpha]
        best_kd, best_alpha = max(candidates, key=lambda item: (item[1], -item[0]))
        lines.append(f"  decode {dec:.2f} -> kd {best_kd:.2f} (alpha {best_alpha:.6f})")
    lines.append("decode-temperature view (means over all kd rows and seeds):")
    for dec in decode_taus:
        group = [r for r in rows if r["decode_tau"] == dec]
        mean_alpha = sum(r["alpha"] for r in group) / len(group)
        mean_speedup = sum(r["speedup"] for r in group) / len(group)
        lines.append(f"  decode {dec:.2f}: alpha {mean_alpha:.6f}  speedup {mean_speedup:.6f}")
    sym_pairs = [
        (a, b)
        for a in kd_taus
        for b in decode_taus
        if a < b and (a, b) in cell_alpha and (b, a) in cell_alpha
    ]
    if sym_pairs:
        lines.append("swapped-temperature pairs (mean alpha):")
        for a, b in sym_pairs:
            lines.append(
                f"  kd {a:.2f} / decode {b:.2f}: {cell_alpha[(a, b)]:.6f}  vs  "
                f"kd {b:.2f} / decode {a:.2f}: {cell_alpha[(b, a)]:.6f}"
            )
    if any(r["speedup"] != 0.0 for r in rows) and len(rows) >= 2:
        try:
            corr = spearman([r["alpha"] for r in rows], [r["speedup"] for r in rows])
            lines.append(f"spearman(alpha, speedup) over rows = {corr:.4f}")
        except DomainError:
            lines.append("spearman(alpha, speedup): undefined (constant input)")
    else:
        lines.append("spearman(alpha, speedup): omitted (timings zeroed)")
    return "".join(line + "\n" for line in lines)


def cmd_report(paths, out_path=None) -> int:
    sections = [_report_section(Path(p)) for p in paths]
    text = "\n".join(sections)
    if out_path is not None:
        Path(out_path).write_text(text)
        print(f"report written to {out_path}")
    else:
        sys.stdout.write(text)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speclab",
        description="Desk-scale speculative decoding and distillation lab.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="path to a run config file")
        p.add_argument("--seed", type=int, default=None, help="override corpus/kd/decode seeds")
        p.add_argument("--jobs", type=int, default=1, help="worker cap for sweep evaluation")
        p.add_argument("--no-timing", action="store_true", help="zero wall-clock fields")

    for name in ("corpus", "distill", "decode", "sweep", "compose"):
        add_common(sub.add_parser(name, help=f"run the {name} stage"))
    report = sub.add_parser("report", help="summarize sweep CSVs as text")
    report.add_argument("csvs", nargs="+", help="sweep CSV paths")
    report.add_argument("--out", default=None, help="write the report here instead of stdout")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.csvs, args.out)
        config = load_config(args.config, seed_override=args.seed)
        if args.command == "corpus":
            return cmd_corpus(config)
        if args.command == "distill":
            return cmd_distill(config)
        if args.command == "decode":
            return cmd_decode(config, no_timing=args.no_timing)
        if args.command == "sweep":
            return cmd_sweep(config, jobs=args.jobs, no_timing=args.no_timing)
        if args.command == "compose":
            return cmd_compose(config, no_timing=args.no_timing)
        raise ConfigError(f"unknown command '{args.command}'")
    except (
        ConfigError,
        DomainError,
        TrainingError,
        NumericError,
        VerificationError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
