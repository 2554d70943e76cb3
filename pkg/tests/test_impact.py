"""Impact scoring against a brute-force enumeration oracle."""

from __future__ import annotations

import math

import numpy as np
import pytest

from helpers import oracle_best_flip, random_bundle
from sneakyflip.bitcodec import FP16
from sneakyflip.bundle import LayerStats, ModelBundle, WeightRef, row_scale
from sneakyflip.impact import best_sneaky_flip, is_sneaky


def grads_like(bundle, rng):
    return {m.name: rng.normal(0, 1.0, m.shape) for m in bundle.metas}


# ---------------------------------------------------------------------------
# is_sneaky


def test_is_sneaky_worked_cases():
    stats = LayerStats(-1.0, 1.0)
    assert not is_sneaky(0.5, 32768.0 - 0.5, stats)  # exponent-top escape
    assert is_sneaky(0.5, -1.0, stats)  # sign flip to -0.5
    assert is_sneaky(0.5, 0.0, stats)  # no-move stays in range
    assert is_sneaky(0.5, 0.5, stats)  # inclusive upper bound
    assert not is_sneaky(0.5, 0.5000001, stats)
    assert not is_sneaky(0.5, math.inf, stats)
    assert not is_sneaky(0.5, math.nan, stats)


def test_is_sneaky_boundary_weight():
    stats = LayerStats(-0.25, 1.0)
    assert is_sneaky(1.0, 0.0, stats)
    assert not is_sneaky(1.0, 1e-9, stats)
    assert is_sneaky(1.0, -1.25, stats)


# ---------------------------------------------------------------------------
# best_sneaky_flip


def test_sign_flip_wins_on_symmetric_range():
    vals = np.array([[0.5, -1.0, 1.0]])
    bundle = ModelBundle.from_float([("w", 0, "head", vals)], FP16)
    bundle.gradients = {"w": np.array([[0.3, 0.0, 0.0]])}
    cand = best_sneaky_flip(bundle, WeightRef("w", 0))
    assert cand.bit_position == FP16.sign_bit
    assert cand.new_value == -0.5
    assert cand.delta == -1.0
    assert cand.score == pytest.approx(0.3, rel=1e-15)
    assert cand.finite


def test_zero_gradient_keeps_candidate_with_zero_score():
    vals = np.array([[0.5, -1.0, 1.0]])
    bundle = ModelBundle.from_float([("w", 0, "head", vals)], FP16)
    bundle.gradients = {"w": np.zeros((1, 3))}
    cand = best_sneaky_flip(bundle, WeightRef("w", 0))
    assert cand is not None
    assert cand.score == 0.0
    assert abs(cand.delta) > 0.0


def test_boundary_weight_with_only_outward_flips_yields_none():
    bundle = ModelBundle.from_float([("w", 0, "head", np.array([[1.0]]))], FP16)
    bundle.gradients = {"w": np.ones((1, 1))}
    assert bundle.stats["w"] == LayerStats(1.0, 1.0)
    assert best_sneaky_flip(bundle, WeightRef("w", 0)) is None


def test_nonfinite_outcomes_never_selected():
    # 32768 can flip an exponent bit into inf; range is wide enough to tempt.
    vals = np.array([[32768.0, 65504.0, -65504.0]])
    bundle = ModelBundle.from_float([("w", 0, "head", vals)], FP16)
    bundle.gradients = {"w": np.ones((1, 3))}
    cand = best_sneaky_flip(bundle, WeightRef("w", 0))
    assert cand is not None
    assert math.isfinite(cand.new_value)
    assert cand.finite


def test_tie_breaks_to_lower_bit_position():
    # Zero-scale quantized row: every flip lands on 0.0 with delta 0.
    b = ModelBundle.from_float(
        [("w", 0, "k", np.array([[0.0, 0.0], [1.0, -1.0]]))], FP16
    )
    from sneakyflip.bundle import quantize_int8

    q = quantize_int8(b)
    q.gradients = {"w": np.ones((2, 2))}
    cand = best_sneaky_flip(q, WeightRef("w", 0))
    assert cand is not None
    assert cand.bit_position == 0
    assert cand.delta == 0.0 and cand.score == 0.0


@pytest.mark.parametrize("quantize", [False, True], ids=["float", "int8"])
def test_matches_bruteforce_oracle_everywhere(quantize):
    for seed in (0, 1, 2):
        bundle = random_bundle(seed=seed, quantize=quantize)
        for meta in bundle.metas:
            for flat in range(int(np.prod(meta.shape))):
                got = best_sneaky_flip(bundle, WeightRef(meta.name, flat))
                want = oracle_best_flip(bundle, meta.name, flat)
                if want is None:
                    assert got is None, (meta.name, flat)
                    continue
                abs_delta, bit, new_value = want
                assert got is not None, (meta.name, flat)
                assert got.bit_position == bit
                assert abs(got.delta) == abs_delta
                assert got.new_value == new_value
                g = abs(bundle.gradients[meta.name].flat[flat])
                assert got.score == g * abs_delta


def test_score_bounded_by_grad_times_range_width():
    for seed in (3, 4):
        for quantize in (False, True):
            bundle = random_bundle(seed=seed, quantize=quantize)
            for meta in bundle.metas:
                width = bundle.stats[meta.name].width
                for flat in range(int(np.prod(meta.shape))):
                    cand = best_sneaky_flip(bundle, WeightRef(meta.name, flat))
                    if cand is None:
                        continue
                    g = abs(bundle.gradients[meta.name].flat[flat])
                    assert cand.score <= g * width


def test_scores_scale_linearly_with_gradients():
    bundle = random_bundle(seed=5)
    refs = [WeightRef(m.name, i) for m in bundle.metas for i in (0, 3)]
    base = {r: best_sneaky_flip(bundle, r) for r in refs}
    bundle.gradients = {k: 2.5 * v for k, v in bundle.gradients.items()}
    for r in refs:
        scaled = best_sneaky_flip(bundle, r)
        if base[r] is None:
            assert scaled is None
            continue
        assert scaled.bit_position == base[r].bit_position
        assert scaled.score == pytest.approx(2.5 * base[r].score, rel=1e-12)


def test_quantized_candidate_consistent_with_apply(tmp_path):
    bundle = random_bundle(seed=6, quantize=True)
    from sneakyflip.bundle import apply_flip, effective_value, undo_flip

    found = 0
    for meta in bundle.metas:
        if not meta.quantized:
            continue
        for flat in range(0, int(np.prod(meta.shape)), 5):
            ref = WeightRef(meta.name, flat)
            cand = best_sneaky_flip(bundle, ref)
            if cand is None:
                continue
            token = apply_flip(bundle, ref, cand.bit_position)
            assert effective_value(bundle, ref) == cand.new_value
            undo_flip(bundle, token)
            found += 1
    assert found > 20
