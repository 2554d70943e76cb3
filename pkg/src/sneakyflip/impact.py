"""Range-constrained flip scoring.

A flip is sneaky when the post-flip effective value stays inside the benign
per-tensor range [w_min, w_max], bounds inclusive; non-finite outcomes never
qualify. A weight's impact score is |gradient| times the largest sneaky
|delta| over its bit positions. Deltas for quantized tensors live in the
dequantized domain, so INT8 and float candidates compare on one scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .bitcodec import enumerate_flips
from .bundle import LayerStats, ModelBundle, WeightRef, effective_value, raw_word, row_scale


@dataclass(frozen=True)
class FlipCandidate:
    """One weight's chosen flip: addressing, values, and its score."""

    ref: WeightRef
    bit_position: int
    old_raw: int
    new_raw: int
    old_value: float
    new_value: float
    delta: float
    grad: float
    score: float
    finite: bool = True


def is_sneaky(old_value: float, delta: float, stats: LayerStats) -> bool:
    """True iff old + delta lands inside [w_min, w_max]; NaN/inf never do."""
    candidate = old_value + delta
    if not math.isfinite(candidate):
        return False
    return stats.w_min <= candidate <= stats.w_max


def best_sneaky_flip(bundle: ModelBundle, ref: WeightRef) -> FlipCandidate | None:
    """Highest-|delta| in-range flip of one weight, or None if every flip escapes.

    Ties on |delta| resolve to the lower bit position. A zero gradient still
    yields a candidate (score 0). The range check runs on the post-flip
    effective value, which is exactly what apply_flip would store.
    """
    meta = bundle.meta(ref.tensor)
    raw = raw_word(bundle, ref)
    old_eff = effective_value(bundle, ref)
    stats = bundle.stats[ref.tensor]
    scale = row_scale(bundle, ref) if meta.quantized else 1.0
    grad = float(bundle.gradients[ref.tensor].flat[ref.flat_index])
    best = None
    best_abs = -1.0
    for out in enumerate_flips(raw, meta.fmt):
        new_eff = out.new_value * scale if meta.quantized else out.new_value
        if not math.isfinite(new_eff):
            continue
        if not stats.w_min <= new_eff <= stats.w_max:
            continue
        delta = new_eff - old_eff
        if abs(delta) > best_abs:
            best_abs = abs(delta)
            best = (out, new_eff, delta)
    if best is None:
        return None
    out, new_eff, delta = best
    return FlipCandidate(
        ref=ref,
        bit_position=out.bit_position,
        old_raw=raw,
        new_raw=out.new_raw,
        old_value=old_eff,
        new_value=new_eff,
        delta=delta,
        grad=grad,
        score=abs(grad) * abs(delta),
        finite=True,
    )
