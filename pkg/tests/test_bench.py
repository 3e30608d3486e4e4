import numpy as np
import pytest

from speclab.bench import (
    DEFAULT_DECODE_TAUS,
    DEFAULT_KD_TAUS,
    SWEEP_CSV_HEADER,
    ArmStats,
    DecodeStats,
    LengthHistogram,
    SweepResult,
    best_kd_per_decode,
    compare_composition,
    evaluate_arm,
    measure_decode,
    merge_decode_stats,
    parse_sweep_csv,
    prompt_digest,
    recount_alpha,
    run_sweep,
    spearman,
    sweep_csv_text,
    token_length_stats,
)
from speclab.corpus import CorpusBundle, CorpusSpec, build_ground_truth
from speclab.distill import KDConfig
from speclab.errors import DomainError, TrainingError
from speclab.lm import NGramLogitLM, Vocab
from speclab.sampling import make_rng
from speclab.specdec import GenerationConfig, dump_trace

V8 = Vocab(size=8, bos_id=0, eos_id=1)


def random_lm(seed: int, scale: float = 2.0, order: int = 1) -> NGramLogitLM:
    return NGramLogitLM.create(V8, order, init_scale=scale, init_seed=seed)


def tiny_bundle(concentration: float = 1.0, n_prompts: int = 6) -> CorpusBundle:
    """A corpus bundle with a stand-in teacher, no pretraining involved."""
    spec = CorpusSpec(vocab_size=8, order=1, concentration=concentration,
                      n_prompts=n_prompts, prompt_len=3, seed=5)
    gt = build_ground_truth(spec, make_rng(spec.seed))
    rng = make_rng(44)
    prompts = [[int(rng.integers(2, 8)) for _ in range(3)] for _ in range(n_prompts)]
    return CorpusBundle(spec=spec, vocab=spec.vocab(), ground_truth=gt, teacher=gt,
                        prompts=prompts, heldout_contexts=[], teacher_ce=0.0,
                        entropy_rate=0.0)


def small_config(tau: float = 1.0, seed: int = 0) -> GenerationConfig:
    return GenerationConfig(tau=tau, block_size=3, max_new_tokens=12, seed=seed)


def stats_with(alpha: float, proposed: int = 100, runs: int = 1,
               speedup: float = 1.0) -> DecodeStats:
    accepted = round(alpha * proposed)
    return DecodeStats(alpha=accepted / proposed, speedup=speedup, tokens_out=50,
                       wall_time_spec=1.0, wall_time_base=speedup, runs=runs,
                       draft_proposed=proposed, draft_accepted=accepted)


def test_decode_stats_validation():
    with pytest.raises(DomainError):
        DecodeStats(alpha=1.2, speedup=1.0, tokens_out=1, wall_time_spec=1.0,
                    wall_time_base=1.0)
    with pytest.raises(DomainError):
        DecodeStats(alpha=0.5, speedup=0.0, tokens_out=1, wall_time_spec=1.0,
                    wall_time_base=1.0)
    with pytest.raises(DomainError):
        DecodeStats(alpha=0.5, speedup=1.0, tokens_out=1, wall_time_spec=1.0,
                    wall_time_base=1.0, runs=0)
    with pytest.raises(DomainError):
        DecodeStats(alpha=0.5, speedup=1.0, tokens_out=1, wall_time_spec=1.0,
                    wall_time_base=1.0, draft_proposed=5, draft_accepted=6)


def test_merge_decode_stats_pools_counts_exactly():
    a = DecodeStats(alpha=0.25, speedup=2.0, tokens_out=10, wall_time_spec=1.0,
                    wall_time_base=2.0, runs=1, draft_proposed=40, draft_accepted=10)
    b = DecodeStats(alpha=0.75, speedup=0.5, tokens_out=30, wall_time_spec=2.0,
                    wall_time_base=1.0, runs=2, draft_proposed=40, draft_accepted=30)
    merged = merge_decode_stats([a, b])
    assert merged.alpha == 40 / 80
    assert merged.speedup == 3.0 / 3.0
    assert merged.tokens_out == 40
    assert merged.runs == 3
    assert merged.draft_proposed == 80 and merged.draft_accepted == 40


def test_merge_decode_stats_rejects_empty():
    with pytest.raises(DomainError):
        merge_decode_stats([])


def test_measure_decode_draft_equal_to_target_gives_alpha_one():
    model = random_lm(seed=9)
    prompts = [[2, 3], [4, 5], [6]]
    stats = measure_decode(model, model, prompts, small_config(), runs=2)
    assert stats.alpha == 1.0
    assert stats.draft_accepted == stats.draft_proposed > 0
    assert stats.speedup > 0
    assert stats.runs == 2


def test_measure_decode_disjoint_argmax_greedy_gives_alpha_zero():
    # At tau=0 the verifier's distribution is one-hot; a draft whose argmax
    # never matches gets every proposal rejected.
    target = NGramLogitLM.create(V8, 1)
    draft = NGramLogitLM.create(V8, 1)
    target.table[:, 2] = 5.0
    draft.table[:, 3] = 5.0
    stats = measure_decode(target, draft, [[4], [5]], small_config(tau=0.0), runs=1)
    assert stats.alpha == 0.0
    assert stats.draft_accepted == 0


def test_measure_decode_validation():
    model = random_lm(seed=9)
    with pytest.raises(DomainError):
        measure_decode(model, model, [], small_config(), runs=1)
    with pytest.raises(DomainError):
        measure_decode(model, model, [[2]], small_config(), runs=0)


def test_measure_decode_deterministic_counts():
    target = random_lm(seed=9)
    draft = random_lm(seed=10)
    prompts = [[2, 3], [4]]
    a = measure_decode(target, draft, prompts, small_config(seed=3), runs=2)
    b = measure_decode(target, draft, prompts, small_config(seed=3), runs=2)
    assert (a.alpha, a.tokens_out, a.draft_proposed, a.draft_accepted) == (
        b.alpha, b.tokens_out, b.draft_proposed, b.draft_accepted
    )


def test_measure_decode_trace_recount_matches_alpha():
    target = random_lm(seed=9)
    draft = random_lm(seed=10)
    blocks = []
    stats = measure_decode(target, draft, [[2], [3], [4]], small_config(seed=1),
                           runs=2, on_trace=lambda run, j, tr: blocks.append(dump_trace(tr)))
    assert len(blocks) == 2 * 3
    assert recount_alpha("\n".join(blocks)) == stats.alpha


def test_recount_alpha_rejects_empty_text():
    with pytest.raises(DomainError):
        recount_alpha("\n\n")


def make_result(alphas, kd_taus, decode_taus):
    cells = tuple(
        tuple(stats_with(alphas[ki][di]) for di in range(len(decode_taus)))
        for ki in range(len(kd_taus))
    )
    seed_stats = tuple(
        (kd_taus[ki], decode_taus[di], 1, cells[ki][di])
        for ki in range(len(kd_taus))
        for di in range(len(decode_taus))
    )
    return SweepResult(kd_taus, decode_taus, cells, seed_stats, {})


def test_best_kd_per_decode_picks_column_max():
    result = make_result([[0.30, 0.60], [0.50, 0.40]], (0.0, 0.5), (0.2, 1.0))
    assert best_kd_per_decode(result) == [(0.2, 0.5), (1.0, 0.0)]


def test_best_kd_per_decode_tie_goes_to_lowest_kd():
    result = make_result([[0.50], [0.50]], (0.1, 0.9), (1.0,))
    assert best_kd_per_decode(result) == [(1.0, 0.1)]


def test_sweep_result_dimension_validation():
    cell = stats_with(0.5)
    with pytest.raises(DomainError, match="row count"):
        SweepResult((0.0, 1.0), (1.0,), ((cell,),), (), {})
    with pytest.raises(DomainError, match="column count"):
        SweepResult((0.0,), (1.0,), ((cell, cell),), (), {})


def test_sweep_csv_round_trip_and_formatting():
    result = make_result([[0.125]], (0.3,), (0.7,))
    text = sweep_csv_text(result)
    lines = text.splitlines()
    assert lines[0] == SWEEP_CSV_HEADER
    assert lines[1] == "0.300000,0.700000,1,0.120000,1.000000,50,1.000000,1.000000"
    rows = parse_sweep_csv(text)
    assert rows[0]["kd_tau"] == 0.3 and rows[0]["seed"] == 1
    assert rows[0]["tokens_out"] == 50


def test_sweep_csv_no_timing_zeroes_clock_fields():
    result = make_result([[0.125]], (0.3,), (0.7,))
    row = sweep_csv_text(result, no_timing=True).splitlines()[1]
    assert row.split(",")[4:] == ["0.000000", "50", "0.000000", "0.000000"]


def test_parse_sweep_csv_rejects_bad_input():
    with pytest.raises(DomainError, match="header"):
        parse_sweep_csv("alpha,beta\n")
    good = SWEEP_CSV_HEADER + "\n"
    with pytest.raises(DomainError, match="line 2"):
        parse_sweep_csv(good + "0.1,0.2,1\n")
    with pytest.raises(DomainError, match="line 2"):
        parse_sweep_csv(good + "0.1,0.2,x,0.5,1.0,10,1.0,1.0\n")


def test_run_sweep_validation():
    bundle = tiny_bundle()
    cfg = small_config()
    with pytest.raises(DomainError):
        run_sweep((), (1.0,), "offline", bundle, cfg, (1,))
    with pytest.raises(DomainError):
        run_sweep((0.5,), (1.0,), "offline", bundle, cfg, ())
    with pytest.raises(DomainError):
        run_sweep((0.5,), (1.0,), "offline", bundle, cfg, (1, 1))
    with pytest.raises(DomainError):
        run_sweep((0.5,), (1.0,), "hybrid", bundle, cfg, (1,))
    with pytest.raises(DomainError):
        run_sweep((0.5,), (1.0,), "offline", bundle, cfg, (1,), jobs=0)


@pytest.fixture(scope="module")
def small_sweep():
    bundle = tiny_bundle()
    template = KDConfig(mode="offline", learning_rate=0.4, steps=120, seed=2)
    result = run_sweep((0.0, 1.0), (0.0, 1.0), "offline", bundle, small_config(seed=6),
                       (1, 2), kd_template=template,
                       draft_factory=lambda: random_lm(seed=77))
    return bundle, template, result


def test_run_sweep_shapes_and_metadata(small_sweep):
    bundle, template, result = small_sweep
    assert result.kd_taus == (0.0, 1.0)
    assert result.decode_taus == (0.0, 1.0)
    assert len(result.seed_stats) == 2 * 2 * 2
    assert result.metadata["kd_mode"] == "offline"
    assert result.metadata["seeds"] == (1, 2)
    assert result.metadata["corpus"] == "vocab8-order1-c1-seed5"


def test_run_sweep_cells_pool_their_seed_stats(small_sweep):
    _, _, result = small_sweep
    for ki, kd in enumerate(result.kd_taus):
        for di, dec in enumerate(result.decode_taus):
            parts = [s for k, d, _, s in result.seed_stats if k == kd and d == dec]
            pooled = merge_decode_stats(parts)
            cell = result.cells[ki][di]
            assert cell.alpha == pooled.alpha
            assert cell.draft_proposed == pooled.draft_proposed
            assert cell.runs == pooled.runs


def test_run_sweep_rerun_is_byte_identical(small_sweep):
    bundle, template, result = small_sweep
    again = run_sweep((0.0, 1.0), (0.0, 1.0), "offline", bundle, small_config(seed=6),
                      (1, 2), kd_template=template,
                      draft_factory=lambda: random_lm(seed=77))
    assert sweep_csv_text(result, no_timing=True) == sweep_csv_text(again, no_timing=True)


def test_run_sweep_parallel_matches_serial(small_sweep):
    bundle, template, result = small_sweep
    parallel = run_sweep((0.0, 1.0), (0.0, 1.0), "offline", bundle,
                         small_config(seed=6), (1, 2), kd_template=template,
                         draft_factory=lambda: random_lm(seed=77), jobs=3)
    assert sweep_csv_text(result, no_timing=True) == sweep_csv_text(parallel, no_timing=True)


def test_run_sweep_trace_sink_recounts_to_seed_stats(small_sweep):
    bundle, template, _ = small_sweep
    captured = {}
    result = run_sweep((0.5,), (1.0,), "offline", bundle, small_config(seed=6),
                       (1, 2), kd_template=template,
                       draft_factory=lambda: random_lm(seed=77),
                       trace_sink=lambda kd, dec, seed, text: captured.__setitem__(
                           (kd, dec, seed), text))
    assert set(captured) == {(0.5, 1.0, 1), (0.5, 1.0, 2)}
    for (kd, dec, seed), text in captured.items():
        row = [s for k, d, sd, s in result.seed_stats if (k, d, sd) == (kd, dec, seed)]
        assert recount_alpha(text) == row[0].alpha


def test_run_sweep_cache_dir_skips_retraining(small_sweep, tmp_path):
    bundle, template, result = small_sweep
    first = run_sweep((0.0, 1.0), (0.0, 1.0), "offline", bundle, small_config(seed=6),
                      (1, 2), kd_template=template, cache_dir=tmp_path,
                      draft_factory=lambda: random_lm(seed=77))
    assert (tmp_path / "draft_offline_tau0.00.ckpt").exists()
    assert (tmp_path / "draft_offline_tau1.00.ckpt").exists()
    # A factory that would diverge proves the cache short-circuits training.
    def poisoned():
        model = random_lm(seed=77)
        model.table[...] = np.inf
        return model

    second = run_sweep((0.0, 1.0), (0.0, 1.0), "offline", bundle, small_config(seed=6),
                       (1, 2), kd_template=template, cache_dir=tmp_path,
                       draft_factory=poisoned)
    assert sweep_csv_text(first, no_timing=True) == sweep_csv_text(second, no_timing=True)
    assert sweep_csv_text(first, no_timing=True) == sweep_csv_text(result, no_timing=True)


def test_run_sweep_training_failure_names_the_cell():
    bundle = tiny_bundle()

    def poisoned():
        model = random_lm(seed=77)
        model.table[...] = np.inf
        return model

    with np.errstate(invalid="ignore"):
        with pytest.raises(TrainingError, match=r"sweep aborted at kd_tau=0\.5"):
            run_sweep((0.5,), (1.0,), "offline", bundle, small_config(),
                      (1,), kd_template=KDConfig(mode="offline", steps=10, seed=1),
                      draft_factory=poisoned)


def test_evaluate_arm_model_and_callable_agree():
    bundle = tiny_bundle()
    draft = random_lm(seed=12)
    direct = evaluate_arm(bundle.teacher, draft, bundle.prompts, (0.5, 1.0),
                          small_config(seed=4), (1, 2), label="direct")
    via_callable = evaluate_arm(bundle.teacher, lambda seed: draft, bundle.prompts,
                                (0.5, 1.0), small_config(seed=4), (1, 2),
                                label="callable")
    for (ta, sa, stats_a), (tb, sb, stats_b) in zip(direct.cells, via_callable.cells):
        assert (ta, sa) == (tb, sb)
        assert stats_a.alpha == stats_b.alpha


def test_compare_composition_same_draft_all_deltas_zero():
    bundle = tiny_bundle()
    draft = random_lm(seed=12)
    a = evaluate_arm(bundle.teacher, draft, bundle.prompts, (1.0,),
                     small_config(seed=4), (1, 2, 3), label="a")
    b = evaluate_arm(bundle.teacher, draft, bundle.prompts, (1.0,),
                     small_config(seed=4), (1, 2, 3), label="b")
    rows = compare_composition(a, b)
    assert len(rows) == 3
    assert all(r.delta_alpha == 0.0 for r in rows)
    assert [(r.decode_tau, r.seed) for r in rows] == [(1.0, 1), (1.0, 2), (1.0, 3)]


def test_compare_composition_rejects_mismatched_arms():
    bundle = tiny_bundle()
    draft = random_lm(seed=12)
    base = evaluate_arm(bundle.teacher, draft, bundle.prompts, (1.0,),
                        small_config(seed=4), (1, 2), label="base")
    other_prompts = evaluate_arm(bundle.teacher, draft, [[2, 2, 2]], (1.0,),
                                 small_config(seed=4), (1, 2), label="p")
    with pytest.raises(DomainError, match="prompt"):
        compare_composition(base, other_prompts)
    other_seeds = evaluate_arm(bundle.teacher, draft, bundle.prompts, (1.0,),
                               small_config(seed=4), (1, 3), label="s")
    with pytest.raises(DomainError, match="seed"):
        compare_composition(base, other_seeds)
    other_grid = evaluate_arm(bundle.teacher, draft, bundle.prompts, (0.5,),
                              small_config(seed=4), (1, 2), label="g")
    with pytest.raises(DomainError, match="temperature"):
        compare_composition(base, other_grid)


def test_prompt_digest_is_order_sensitive():
    assert prompt_digest([[1, 2], [3]]) != prompt_digest([[3], [1, 2]])
    assert prompt_digest([[1, 2]]) == prompt_digest([[1, 2]])


def test_token_length_stats_buckets():
    hist = token_length_stats([[0] * 3, [0] * 8, [0] * 17], bucket_width=8)
    assert hist.edges == (0, 8, 16, 24)
    assert hist.frequencies == (1, 1, 1)


def test_token_length_stats_empty_and_validation():
    hist = token_length_stats([], bucket_width=8)
    assert hist.edges == (0, 8)
    assert hist.frequencies == (0,)
    with pytest.raises(DomainError):
        token_length_stats([[0]], bucket_width=0)
    with pytest.raises(DomainError):
        LengthHistogram(edges=(0, 8), frequencies=(1, 2))


def test_spearman_known_values():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
    assert spearman([1, 2, 3, 4], [8, 6, 4, 2]) == -1.0
    # Hand value: ranks x = (1,2,3), ranks y = (2,1,3) -> rho = 1 - 6*2/(3*8) = 0.5
    assert abs(spearman([1, 2, 3], [5, 4, 9]) - 0.5) < 1e-12


def test_spearman_ties_use_average_ranks():
    # x ranks: (1.5, 1.5, 3); y ranks: (1, 2, 3). Centered rank products sum
    # to 1.5; the norms multiply to sqrt(1.5 * 2), so rho = sqrt(3)/2.
    got = spearman([7, 7, 9], [1, 2, 3])
    assert abs(got - 1.5 / (1.5 * 2.0) ** 0.5) < 1e-12


def test_spearman_validation():
    with pytest.raises(DomainError):
        spearman([1.0], [2.0])
    with pytest.raises(DomainError):
        spearman([1, 2], [3, 4, 5])
    with pytest.raises(DomainError):
        spearman([2, 2, 2], [1, 2, 3])


def test_default_grids():
    assert DEFAULT_KD_TAUS == (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    assert DEFAULT_DECODE_TAUS == (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
