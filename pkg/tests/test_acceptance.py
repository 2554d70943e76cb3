"""Release gate: the eight shipping criteria, one test per criterion.

Each test asserts its stated tolerance and pushes the measured magnitudes
through the ``note`` fixture, so a verbose run shows one pass/fail line per
criterion followed by a "reported magnitudes" summary section.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from time import perf_counter

import numpy as np
import pytest

from helpers import gradcheck_worst_error, ref_decode
from sneakyflip.attack import (
    AttackConfig,
    Ranker,
    Termination,
    best_report,
    run_attack,
    run_attack_seeds,
    transfer_eval,
)
from sneakyflip.bitcodec import BF16, FP16, decode, decode_array, encode, encode_array
from sneakyflip.bundle import AttackMode, quantize_int8
from sneakyflip.nnet import STREAM_GRAD, compute_gradients, loss_and_grads, make_task
from sneakyflip.report import export_run
from sneakyflip.search import exhaustive_topk, skip_search


def _csv_parts(path: Path) -> tuple[dict, list, list]:
    """Independent parse of a delimited artifact: echo dict, header, rows."""
    echo, data = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            echo[key] = value
        else:
            data.append(line)
    parsed = list(csv.reader(data))
    return echo, parsed[0], parsed[1:]


# ---------------------------------------------------------------------------
# Shared expensive runs


@pytest.fixture(scope="module")
def bf16_attacks(mlp_bf16, toy4):
    """Sneaky-mode runs on the BF16 victim, one per configured seed."""
    return run_attack_seeds(mlp_bf16, toy4, AttackConfig(max_iterations=20))


@pytest.fixture(scope="module")
def fp32_contrast(mlp_fp32, toy4):
    """Sneaky vs. unconstrained vs. range-respecting runs on the FP32 victim."""
    runs = {}
    for ranker in (Ranker.SNEAKY, Ranker.NO_RANGE, Ranker.IN_RANGE):
        config = AttackConfig(ranker=ranker, max_iterations=20)
        runs[ranker] = run_attack_seeds(mlp_fp32, toy4, config)
    return runs


# ---------------------------------------------------------------------------
# A1: codec exactness


def test_a1_codec_round_trip(note):
    started = perf_counter()
    for fmt in (FP16, BF16):
        words = np.arange(1 << 16, dtype=np.uint32)
        values = decode_array(words, fmt)
        back = encode_array(values, fmt)
        nans = np.isnan(values)
        assert np.array_equal(back[~nans].astype(np.uint32), words[~nans])
        assert bool(np.isnan(decode_array(back[nans], fmt)).all())
    elapsed = perf_counter() - started
    assert elapsed < 1.0

    assert encode(0.5, FP16) == 0x3800
    assert decode(0x3800 ^ (1 << 14), FP16) == 32768.0
    assert decode(0x3800 ^ 1, FP16) == 0.50048828125
    assert decode(0x3800 ^ (1 << 15), FP16) == -0.5
    note(
        f"A1: 2 x 65,536-pattern decode/encode round trip bit-identical "
        f"in {elapsed * 1000:.1f} ms; worked values exact"
    )


# ---------------------------------------------------------------------------
# A2: early-exit search equals the exhaustive ranking


def _ranked(queue):
    return [
        (c.ref.tensor, c.ref.flat_index, c.bit_position, c.new_raw, c.score)
        for c in queue.candidates()
    ]


def test_a2_search_soundness(mlp_victims, attn_trained, toy4, note):
    roster = []
    for seed in (1, 2, 3):
        bundle = mlp_victims[seed][0]
        roster.append((f"mlp seed {seed}", bundle, toy4, AttackMode.FLOAT, seed))
        quantized = quantize_int8(bundle)
        roster.append((f"mlp-int8 seed {seed}", quantized, toy4, AttackMode.INT8, seed))
        roster.append((f"mlp-int8 seed {seed}", quantized, toy4, AttackMode.MIXED, seed))
    attn_task, attn_bundle, _ = attn_trained
    roster.append(("attn seed 1", attn_bundle, attn_task, AttackMode.FLOAT, 1))

    distinct_models = set()
    for label, bundle, task, mode, grad_seed in roster:
        work = bundle.copy()
        compute_gradients(work, task.sample(200, STREAM_GRAD, run_seed=grad_seed))
        queue, stats = skip_search(work, mode, k=100)
        exact = exhaustive_topk(work, mode, k=100)
        assert _ranked(queue) == _ranked(exact), f"{label} / {mode.value}"
        assert stats.reduction_factor > 1.0, f"{label} / {mode.value}"
        distinct_models.add(id(bundle))
        note(
            f"A2 {label} [{mode.value}]: top-100 identical to exhaustive; "
            f"scored {stats.weights_scored}/{stats.weights_total} weights "
            f"(reduction {stats.reduction_factor:.1f}x)"
        )
    assert len(distinct_models) >= 5


# ---------------------------------------------------------------------------
# A3: end-to-end collapse of the BF16 victim


def test_a3_end_to_end_attack(bf16_attacks, note):
    successes = 0
    for report in bf16_attacks:
        assert report.pre_acc >= 0.90
        assert report.threshold == 0.25
        if (
            report.termination is Termination.BELOW_THRESHOLD
            and report.post_acc < report.threshold
            and report.num_flips <= 20
        ):
            successes += 1
        for flip in report.applied_flips:
            assert flip.in_range
            assert flip.range_low <= flip.new_value <= flip.range_high
            assert flip.old_raw ^ flip.new_raw == 1 << flip.bit_position
            assert ref_decode(flip.new_raw, BF16) == flip.new_value
        note(
            f"A3 seed {report.seed}: pre {report.pre_acc:.2f} -> "
            f"post {report.post_acc:.2f} in {report.num_flips} flips "
            f"({report.termination.value})"
        )
    assert successes >= 1


# ---------------------------------------------------------------------------
# A4: gradient fidelity against central finite differences


def test_a4_gradient_fidelity(mlp_bf16, attn_trained, toy4, note):
    attn_task, attn_bundle, _ = attn_trained
    for label, bundle, task in (("mlp", mlp_bf16, toy4), ("attn", attn_bundle, attn_task)):
        arch = bundle.arch
        params = {name: arr.copy() for name, arr in bundle.effective.items()}
        batch = task.sample(64, STREAM_GRAD, run_seed=5)
        _, grads = loss_and_grads(arch, params, batch)
        worst, worst_at, straddled = gradcheck_worst_error(
            arch, params, batch, grads, n_samples=1000, seed=11
        )
        assert worst <= 1e-4, f"{label}: worst {worst:.3e} at {worst_at}"
        note(
            f"A4 {label}: worst relative gradient error {worst:.2e} over "
            f"1000 kink-free sampled weights (h=1e-4, {straddled} "
            f"rectifier-straddling probes resampled)"
        )


# ---------------------------------------------------------------------------
# A5: baseline contrast on the FP32 victim


def test_a5_baseline_contrast(fp32_contrast, note):
    crossed = lambda r: r.termination is Termination.BELOW_THRESHOLD
    for sneaky, no_range, in_range in zip(
        fp32_contrast[Ranker.SNEAKY],
        fp32_contrast[Ranker.NO_RANGE],
        fp32_contrast[Ranker.IN_RANGE],
    ):
        nonfinite_ranked = sum(
             1
            for it in no_range.iterations
            for cand in it.evaluated
            if not cand.finite
        )
        more_flips = crossed(sneaky) and (
            not crossed(no_range) or no_range.num_flips > sneaky.num_flips
        )
        assert nonfinite_ranked > 0 or more_flips

        for it in in_range.iterations:
            for cand in it.evaluated:
                assert cand.finite
                assert math.isfinite(cand.new_value)
                assert cand.error_tensor is None
        assert in_range.termination is not Termination.NUMERICAL_ERROR
        for flip in in_range.applied_flips:
            assert flip.accuracy_after is not None

        note(
            f"A5 seed {sneaky.seed}: sneaky {sneaky.num_flips} flips "
            f"({sneaky.termination.value}); no-range {no_range.num_flips} flips "
            f"({no_range.termination.value}, {nonfinite_ranked} non-finite "
            f"candidates ranked); in-range {in_range.num_flips} flips "
            f"({in_range.termination.value}, 0 non-finite)"
        )


# ---------------------------------------------------------------------------
# A6: census recount from the persisted per-candidate table


def test_a6_census_recount(tmp_path, mlp_bf16, toy4, note):
    # Seed 2 evaluates pre-attack at exactly the 0.94 threshold, so the run
    # proceeds and the first sweep leaves a populated census.
    config = AttackConfig(critical_threshold=0.94, max_iterations=3)
    report = run_attack(mlp_bf16.copy(), toy4, config, seed=2)
    export_run(report, tmp_path)

    echo, header, rows = _csv_parts(tmp_path / "census.csv")
    threshold = float(echo["threshold"])
    acc = header.index("accuracy")
    crit = header.index("critical")
    tensor = header.index("tensor")
    recount = sum(1 for r in rows if r[acc] != "" and float(r[acc]) < threshold)
    assert recount == int(echo["crit_1flip_count"]) == report.crit_1flip_count
    assert recount == sum(1 for r in rows if r[crit] == "1")
    assert 0 < recount <= int(echo["k"])

    taxonomy = json.loads((tmp_path / "report.json").read_text())["config"]["tensors"]
    regrouped: dict[tuple[int, str], int] = {}
    for r in rows:
        if r[crit] == "1":
            layer_index, kind = taxonomy[r[tensor]]
            key = (int(layer_index), kind)
            regrouped[key] = regrouped.get(key, 0) + 1
    _, dist_header, dist_rows = _csv_parts(tmp_path / "distribution.csv")
    assert dist_header == ["layer_index", "param_kind", "count"]
    persisted = {(int(li), kind): int(n) for li, kind, n in dist_rows}
    assert persisted == regrouped
    assert sum(persisted.values()) == recount
    note(
        f"A6: census recount {recount} == reported crit_1flip_count; "
        f"distribution rows {sorted(persisted)} partition the total"
    )


# ---------------------------------------------------------------------------
# A7: byte-identical artifacts for identical config and seed


def test_a7_determinism(tmp_path, mlp_bf16, toy4, note):
    config = AttackConfig(critical_threshold=0.9, max_iterations=3)
    first = run_attack(mlp_bf16.copy(), toy4, config, seed=2)
    second = run_attack(mlp_bf16.copy(), toy4, config, seed=2)
    assert first.to_json() == second.to_json()

    dir_a, dir_b = tmp_path / "a", tmp_path / "b"
    export_run(first, dir_a)
    export_run(second, dir_b)
    for name in ("report.json", "flips.csv", "census.csv", "distribution.csv"):
        assert (dir_a / name).read_bytes() == (dir_b / name).read_bytes(), name

    # Wall-clock durations legitimately differ; the timing table's shape,
    # config echo, and phase labels must not.
    echo_a, head_a, rows_a = _csv_parts(dir_a / "timings.csv")
    echo_b, head_b, rows_b = _csv_parts(dir_b / "timings.csv")
    assert (echo_a, head_a, [r[0] for r in rows_a]) == (
        echo_b,
        head_b,
        [r[0] for r in rows_b],
    )
    digest = hashlib.sha256((dir_a / "report.json").read_bytes()).hexdigest()
    note(
        f"A7: report.json ({(dir_a / 'report.json').stat().st_size} bytes, "
        f"sha256 {digest[:12]}) and all semantic tables byte-identical across runs"
    )


# ---------------------------------------------------------------------------
# A8: flips transfer to the regrouped two-class task


def test_a8_transfer_direction(bf16_attacks, mlp_bf16, toy4, toy2, note):
    best = best_report(bf16_attacks)
    assert best.applied_flips
    held = make_task("toy4-held", toy4.input_dim)
    results = {r.task: r for r in transfer_eval(mlp_bf16, best, [toy4, toy2, held])}

    assert results["toy4"].post_acc == best.post_acc
    assert results["toy2"].post_acc <= results["toy2"].pre_acc
    for r in results.values():
        note(
            f"A8 {r.task}: pre {r.pre_acc:.2f} -> post {r.post_acc:.2f} "
            f"(delta {r.post_acc - r.pre_acc:+.2f})"
        )
