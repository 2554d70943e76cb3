"""Candidate search: top-k queue, early-exit ranking, and baseline rankers.

The early-exit walk visits each tensor's weights in descending |gradient|.
Once the queue is full, a weight whose |gradient| times the tensor's range
width falls strictly below the k-th score cannot enter the queue (any
in-range flip moves between two points of [w_min, w_max], so |delta| is at
most the width), and neither can the rest of the tensor, so the walk breaks
out. Queue ordering is total: score descending, then (tensor_id, flat_index,
bit_position) ascending, which makes the kept set unique and lets the
exhaustive scan serve as a set-equality oracle.
"""

from __future__ import annotations

import math
from bisect import insort
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .bitcodec import enumerate_flips
from .bundle import AttackMode, ModelBundle, WeightRef, effective_value, raw_word, row_scale
from .impact import FlipCandidate, best_sneaky_flip


class TopKQueue:
    """Fixed-capacity queue kept sorted by (-score, tensor_id, flat, bit)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._entries: list[tuple[tuple, FlipCandidate]] = []

    @staticmethod
    def _key(tensor_id: int, cand: FlipCandidate) -> tuple:
        return (-cand.score, tensor_id, cand.ref.flat_index, cand.bit_position)

    @property
    def full(self) -> bool:
        return len(self._entries) >= self.capacity

    @property
    def kth_score(self) -> float:
        """Score of the current k-th entry; -inf while the queue has room."""
        if not self.full:
            return -math.inf
        return self._entries[-1][1].score

    def insert(self, tensor_id: int, cand: FlipCandidate) -> bool:
        """Insert if the candidate outranks the worst entry; prune to capacity."""
        key = self._key(tensor_id, cand)
        if self.full and key >= self._entries[-1][0]:
            return False
        insort(self._entries, (key, cand))
        if len(self._entries) > self.capacity:
            self._entries.pop()
        return True

    def candidates(self) -> list[FlipCandidate]:
        return [c for _, c in self._entries]

    def __len__(self) -> int:
        return len(self._entries)


@dataclass
class BreakRecord:
    """Why one tensor's walk stopped early."""

    tensor: str
    bound: float
    kth_score: float
    weights_skipped: int


@dataclass
class SearchStats:
    weights_total: int = 0
    weights_scored: int = 0
    layers_total: int = 0
    layers_broken: int = 0
    breaks: list[BreakRecord] = field(default_factory=list)

    @property
    def reduction_factor(self) -> float:
        return self.weights_total / max(1, self.weights_scored)


def _require_gradients(bundle: ModelBundle) -> None:
    if bundle.gradients is None:
        raise ValueError("bundle has no gradients; compute them before ranking")


def skip_search(
    bundle: ModelBundle,
    mode: AttackMode,
    k: int,
    exclude: tuple[str, ...] = (),
) -> tuple[TopKQueue, SearchStats]:
    """Gradient-descending walk with the sound per-tensor early exit."""
    _require_gradients(bundle)
    queue = TopKQueue(k)
    stats = SearchStats()
    for meta in bundle.target_tensors(mode, exclude):
        stats.layers_total += 1
        size = int(np.prod(meta.shape))
        stats.weights_total += size
        grads = np.abs(bundle.gradients[meta.name]).ravel()
        order = np.argsort(-grads, kind="stable")
        width = bundle.stats[meta.name].width
        tensor_id = bundle.tensor_id(meta.name)
        for visited, flat in enumerate(order):
            bound = float(grads[flat]) * width
            if queue.full and bound < queue.kth_score:
                stats.layers_broken += 1
                stats.breaks.append(
                    BreakRecord(meta.name, bound, queue.kth_score, size - visited)
                )
                break
            cand = best_sneaky_flip(bundle, WeightRef(meta.name, int(flat)))
            stats.weights_scored += 1
            if cand is not None:
                queue.insert(tensor_id, cand)
    return queue, stats


def exhaustive_topk(
    bundle: ModelBundle,
    mode: AttackMode,
    k: int,
    exclude: tuple[str, ...] = (),
) -> TopKQueue:
    """Reference ranking: scores every targetable weight, no early exit."""
    _require_gradients(bundle)
    queue = TopKQueue(k)
    for meta in bundle.target_tensors(mode, exclude):
        tensor_id = bundle.tensor_id(meta.name)
        for flat in range(int(np.prod(meta.shape))):
            cand = best_sneaky_flip(bundle, WeightRef(meta.name, flat))
            if cand is not None:
                queue.insert(tensor_id, cand)
    return queue


class BaselineVariant(Enum):
    NO_RANGE = "no-range"
    IN_RANGE = "in-range"
    SIGN_ONLY = "sign-only"


def _unconstrained_flip(bundle: ModelBundle, ref: WeightRef, sign_only: bool) -> FlipCandidate | None:
    """Classic gradient-times-delta pick; no range filter.

    Non-finite outcomes rank as infinitely large |delta| and stay flagged, so
    exponent-top flips win whenever they escape to inf/nan.
    """
    meta = bundle.meta(ref.tensor)
    raw = raw_word(bundle, ref)
    old_eff = effective_value(bundle, ref)
    scale = row_scale(bundle, ref) if meta.quantized else 1.0
    grad = float(bundle.gradients[ref.tensor].flat[ref.flat_index])
    best = None
    best_rank = -1.0
    for out in enumerate_flips(raw, meta.fmt):
        if sign_only and out.bit_position != meta.fmt.sign_bit:
            continue
        new_eff = out.new_value * scale if meta.quantized else out.new_value
        finite = math.isfinite(new_eff)
        rank = abs(new_eff - old_eff) if finite else math.inf
        if rank > best_rank:
            best_rank = rank
            best = (out, new_eff, finite)
    if best is None:
        return None
    out, new_eff, finite = best
    delta = new_eff - old_eff
    magnitude = abs(delta) if finite else math.inf
    score = 0.0 if grad == 0.0 else abs(grad) * magnitude
    return FlipCandidate(
        ref=ref,
        bit_position=out.bit_position,
        old_raw=raw,
        new_raw=out.new_raw,
        old_value=old_eff,
        new_value=new_eff,
        delta=delta,
        grad=grad,
        score=score,
        finite=finite,
    )


def baseline_rank(
    bundle: ModelBundle,
    variant: BaselineVariant,
    k: int,
    mode: AttackMode = AttackMode.FLOAT,
    exclude: tuple[str, ...] = (),
) -> TopKQueue:
    """Full-scan ranking for the comparison attacks."""
    _require_gradients(bundle)
    queue = TopKQueue(k)
    for meta in bundle.target_tensors(mode, exclude):
        tensor_id = bundle.tensor_id(meta.name)
        for flat in range(int(np.prod(meta.shape))):
            ref = WeightRef(meta.name, flat)
            if variant is BaselineVariant.IN_RANGE:
                cand = best_sneaky_flip(bundle, ref)
            elif variant is BaselineVariant.NO_RANGE:
                cand = _unconstrained_flip(bundle, ref, sign_only=False)
            elif variant is BaselineVariant.SIGN_ONLY:
                cand = _unconstrained_flip(bundle, ref, sign_only=True)
            else:
                raise ValueError(f"unknown baseline {variant!r}")
            if cand is not None:
                queue.insert(tensor_id, cand)
    return queue
