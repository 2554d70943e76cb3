"""Greedy bit-flip attack loop, plus the census, distribution, and transfer
analyses built on its records.

One iteration has four phases: setup happens once up front (task batches,
pre-attack accuracy), then per iteration the loop recomputes gradients on
the gradient split, ranks the top-k flip candidates, and sweeps the queue by
applying each candidate, measuring accuracy on the evaluation split, and
undoing it. The candidate with the lowest measured accuracy is applied
permanently (ties go to the earlier queue position) and the loop repeats
until accuracy drops strictly below the critical threshold, the iteration
budget runs out, or a numerical failure ends the run.

A numerical failure during a candidate sweep only skips that candidate; the
run itself stops only when a permanently applied state (or the gradient
pass that follows it) goes non-finite.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from time import perf_counter

from .bundle import AttackMode, ModelBundle, WeightRef, apply_flip, raw_word, undo_flip
from .impact import FlipCandidate
from .nnet import (
    STREAM_EVAL,
    STREAM_GRAD,
    Batch,
    NumericalRuntimeError,
    TaskSpec,
    arch_input_dim,
    compute_gradients,
    evaluate,
)
from .search import BaselineVariant, baseline_rank, skip_search


class Ranker(Enum):
    """Which candidate ranking the loop uses."""

    SNEAKY = "sneaky"
    NO_RANGE = "no-range"
    IN_RANGE = "in-range"
    SIGN_ONLY = "sign-only"


_BASELINE_OF = {
    Ranker.NO_RANGE: BaselineVariant.NO_RANGE,
    Ranker.IN_RANGE: BaselineVariant.IN_RANGE,
    Ranker.SIGN_ONLY: BaselineVariant.SIGN_ONLY,
}


class Termination(Enum):
    BELOW_THRESHOLD = "BELOW_THRESHOLD"
    MAX_ITER = "MAX_ITER"
    NUMERICAL_ERROR = "NUMERICAL_ERROR"


EXIT_CODES = {
    Termination.BELOW_THRESHOLD: 0,
    Termination.MAX_ITER: 2,
    Termination.NUMERICAL_ERROR: 3,
}

PHASES = ("setup", "gradients", "ranking", "evaluation")


@dataclass(frozen=True)
class AttackConfig:
    """Loop parameters; defaults give k=100 ranking, 500-iteration budget."""

    mode: AttackMode = AttackMode.FLOAT
    ranker: Ranker = Ranker.SNEAKY
    k: int = 100
    grad_samples: int = 200
    eval_samples: int = 100
    critical_threshold: float | None = None
    max_iterations: int = 500
    seeds: tuple[int, ...] = (1, 2, 3)
    exclusions: tuple[str, ...] = ()
    freeze_range: bool = False
    fast_eval: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.workers < 1:
            raise ValueError("workers must be positive")
        if self.critical_threshold is not None and not (
            0.0 < self.critical_threshold < 1.0
        ):
            raise ValueError("critical_threshold must lie in (0, 1)")

    def resolve_threshold(self, task: TaskSpec) -> float:
        if self.critical_threshold is None:
            return task.chance_level
        return self.critical_threshold


@dataclass
class CandidateEval:
    """One sweep measurement: a candidate flip and the accuracy it caused.

    ``accuracy`` is None when the evaluation hit a numerical failure; the
    tensor that went non-finite is then recorded in ``error_tensor``.
    ``in_range`` is the range audit of the post-flip value against the layer
    stats in force when the candidate was measured.
    """

    tensor: str
    flat_index: int
    bit_position: int
    old_raw: int
    new_raw: int
    old_value: float
    new_value: float
    delta: float
    grad: float
    score: float
    finite: bool
    in_range: bool
    range_low: float
    range_high: float
    accuracy: float | None
    error_tensor: str | None


@dataclass
class AppliedFlip:
    """A permanently applied flip and the accuracy measured right after it."""

    iteration: int
    tensor: str
    flat_index: int
    bit_position: int
    old_raw: int
    new_raw: int
    old_value: float
    new_value: float
    delta: float
    grad: float
    score: float
    in_range: bool
    range_low: float
    range_high: float
    accuracy_after: float | None


@dataclass
class IterationRecord:
    iteration: int
    evaluated: list[CandidateEval]
    chosen_index: int | None
    accuracy: float | None
    search: dict | None


@dataclass
class AttackReport:
    """Full audit trail of one attack run."""

    config: dict
    seed: int
    threshold: float
    pre_acc: float | None
    post_acc: float | None
    termination: Termination
    termination_detail: str
    applied_flips: list[AppliedFlip]
    iterations: list[IterationRecord]
    crit_1flip_count: int | None
    phase_timings: dict[str, float] = field(default_factory=dict)

    @property
    def num_flips(self) -> int:
        return len(self.applied_flips)

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.termination]

    @property
    def crit_1flip_label(self) -> str:
        if self.crit_1flip_count is None:
            return ""
        return census_label(self.crit_1flip_count)

    def to_dict(self) -> dict:
        """JSON-ready form. Wall-clock timings are deliberately left out so
        that identical config and seed reproduce the file byte for byte."""
        return {
            "config": self.config,
            "seed": self.seed,
            "threshold": self.threshold,
            "pre_acc": self.pre_acc,
            "post_acc": self.post_acc,
            "termination": self.termination.value,
            "termination_detail": self.termination_detail,
            "num_flips": self.num_flips,
            "crit_1flip_count": self.crit_1flip_count,
            "crit_1flip_label": self.crit_1flip_label,
            "applied_flips": [vars(f).copy() for f in self.applied_flips],
            "iterations": [
                {
                    "iteration": it.iteration,
                    "evaluated": [vars(e).copy() for e in it.evaluated],
                    "chosen_index": it.chosen_index,
                    "accuracy": it.accuracy,
                    "search": it.search,
                }
                for it in self.iterations
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def from_dict(cls, data: dict) -> "AttackReport":
        flips = [AppliedFlip(**f) for f in data["applied_flips"]]
        iters = [
            IterationRecord(
                iteration=it["iteration"],
                evaluated=[CandidateEval(**e) for e in it["evaluated"]],
                chosen_index=it["chosen_index"],
                accuracy=it["accuracy"],
                search=it["search"],
            )
            for it in data["iterations"]
        ]
        return cls(
            config=data["config"],
            seed=data["seed"],
            threshold=data["threshold"],
            pre_acc=data["pre_acc"],
            post_acc=data["post_acc"],
            termination=Termination(data["termination"]),
            termination_detail=data["termination_detail"],
            applied_flips=flips,
            iterations=iters,
            crit_1flip_count=data["crit_1flip_count"],
        )

    @classmethod
    def load(cls, path: str | Path) -> "AttackReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Candidate sweep


def _audit(bundle: ModelBundle, cand: FlipCandidate) -> tuple[bool, float, float]:
    """Range audit of the post-flip value against the current layer stats."""
    st = bundle.stats[cand.ref.tensor]
    ok = math.isfinite(cand.new_value) and st.w_min <= cand.new_value <= st.w_max
    return ok, st.w_min, st.w_max


def _measure_slice(
    bundle: ModelBundle,
    task: TaskSpec,
    cands: list[FlipCandidate],
    batch: Batch,
) -> list[tuple[float | None, str | None]]:
    out = []
    for cand in cands:
        token = apply_flip(bundle, cand.ref, cand.bit_position, refresh_stats=False)
        try:
            out.append((evaluate(bundle, task, batch), None))
        except NumericalRuntimeError as err:
            out.append((None, err.tensor))
        finally:
            undo_flip(bundle, token)
    return out


def _sweep(
    bundle: ModelBundle,
    task: TaskSpec,
    cands: list[FlipCandidate],
    batch: Batch,
    workers: int,
) -> list[tuple[float | None, str | None]]:
    """Measure every candidate; results come back in queue order.

    Each accuracy is a pure function of the start-of-iteration bundle state
    and one candidate, so splitting the queue across isolated bundle copies
    cannot change any value, only the wall-clock time.
    """
    if workers <= 1 or len(cands) <= 1:
        return _measure_slice(bundle, task, cands, batch)
    n = min(workers, len(cands))
    chunks = [cands[i::n] for i in range(n)]
    copies = [bundle.copy() for _ in range(n)]
    with ThreadPoolExecutor(max_workers=n) as pool:
        futures = [
            pool.submit(_measure_slice, copies[i], task, chunks[i], batch)
            for i in range(n)
        ]
        parts = [f.result() for f in futures]
    merged: list[tuple[float | None, str | None]] = [None] * len(cands)  # type: ignore[list-item]
    for i, part in enumerate(parts):
        merged[i :: n] = part
    return merged


# ---------------------------------------------------------------------------
# The attack loop


def _check_compat(bundle: ModelBundle, task: TaskSpec) -> None:
    if not bundle.arch:
        raise ValueError("bundle carries no architecture description")
    if arch_input_dim(bundle.arch) != task.input_dim:
        raise ValueError(
            f"task {task.name!r} input dim {task.input_dim} does not match "
            f"the bundle architecture"
        )
    if bundle.arch["classes"] != task.components:
        raise ValueError(
            f"task {task.name!r} has {task.components} components but the "
            f"model head is {bundle.arch['classes']}-way"
        )


def _config_echo(config: AttackConfig, task: TaskSpec, bundle: ModelBundle) -> dict:
    return {
        "task": task.name,
        "arch": bundle.arch.get("kind", ""),
        "mode": config.mode.value,
        "ranker": config.ranker.value,
        "k": config.k,
        "grad_samples": config.grad_samples,
        "eval_samples": config.eval_samples,
        "max_iterations": config.max_iterations,
        "exclusions": list(config.exclusions),
        "freeze_range": config.freeze_range,
        "fast_eval": config.fast_eval,
        "tensors": {m.name: [m.layer_index, m.param_kind] for m in bundle.metas},
    }


def run_attack(
    bundle: ModelBundle,
    task: TaskSpec,
    config: AttackConfig,
    seed: int | None = None,
    setup_seconds: float = 0.0,
) -> AttackReport:
    """Run the loop on the bundle in place and return its audit trail.

    The bundle is mutated: applied flips stay in. Use ``bundle.copy()`` to
    keep a pristine victim around. Failure modes never propagate as
    exceptions; they land in ``termination``.
    """
    seed = config.seeds[0] if seed is None else seed
    timings = dict.fromkeys(PHASES, 0.0)
    timings["setup"] = setup_seconds
    t0 = perf_counter()

    _check_compat(bundle, task)
    if not bundle.target_tensors(config.mode, config.exclusions):
        raise ValueError("exclusion patterns leave no tensor to attack")
    threshold = config.resolve_threshold(task)
    grad_batch = task.sample(config.grad_samples, STREAM_GRAD, run_seed=seed)
    eval_batch = task.sample(config.eval_samples, STREAM_EVAL, run_seed=seed)
    if 0 < config.fast_eval < config.eval_samples:
        sweep_batch = Batch(
            eval_batch.x[: config.fast_eval], eval_batch.y[: config.fast_eval]
        )
    else:
        sweep_batch = eval_batch

    report = AttackReport(
        config=_config_echo(config, task, bundle),
        seed=seed,
        threshold=threshold,
        pre_acc=None,
        post_acc=None,
        termination=Termination.MAX_ITER,
        termination_detail="",
        applied_flips=[],
        iterations=[],
        crit_1flip_count=None,
        phase_timings=timings,
    )

    try:
        accuracy = evaluate(bundle, task, eval_batch)
    except NumericalRuntimeError as err:
        report.termination = Termination.NUMERICAL_ERROR
        report.termination_detail = err.tensor
        timings["setup"] += perf_counter() - t0
        return report
    report.pre_acc = accuracy
    report.post_acc = accuracy
    timings["setup"] += perf_counter() - t0

    if accuracy < threshold:
        report.termination = Termination.BELOW_THRESHOLD
        report.termination_detail = "pre-attack accuracy already below threshold"
        return report

    termination = None
    detail = ""
    iteration = 0
    while iteration < config.max_iterations:
        iteration += 1

        t = perf_counter()
        try:
            compute_gradients(bundle, grad_batch)
        except NumericalRuntimeError as err:
            timings["gradients"] += perf_counter() - t
            termination = Termination.NUMERICAL_ERROR
            detail = err.tensor
            break
        timings["gradients"] += perf_counter() - t

        t = perf_counter()
        if config.ranker is Ranker.SNEAKY:
            queue, stats = skip_search(bundle, config.mode, config.k, config.exclusions)
            search_summary = {
                "weights_total": stats.weights_total,
                "weights_scored": stats.weights_scored,
                "layers_total": stats.layers_total,
                "layers_broken": stats.layers_broken,
                "reduction_factor": stats.reduction_factor,
            }
        else:
            queue = baseline_rank(
                bundle,
                _BASELINE_OF[config.ranker],
                config.k,
                config.mode,
                config.exclusions,
            )
            search_summary = None
        timings["ranking"] += perf_counter() - t
        cands = queue.candidates()
        if not cands:
            termination = Termination.MAX_ITER
            detail = "no flip candidates available"
            break

        t = perf_counter()
        results = _sweep(bundle, task, cands, sweep_batch, config.workers)
        evaluated = []
        best_index = None
        best_acc = math.inf
        for i, (cand, (acc, err_tensor)) in enumerate(zip(cands, results)):
            ok, lo, hi = _audit(bundle, cand)
            if config.ranker is Ranker.SNEAKY and not ok:
                raise RuntimeError(
                    f"range audit failed for {cand.ref.tensor}[{cand.ref.flat_index}]"
                )
            evaluated.append(
                CandidateEval(
                    tensor=cand.ref.tensor,
                    flat_index=cand.ref.flat_index,
                    bit_position=cand.bit_position,
                    old_raw=cand.old_raw,
                    new_raw=cand.new_raw,
                    old_value=cand.old_value,
                    new_value=cand.new_value,
                    delta=cand.delta,
                    grad=cand.grad,
                    score=cand.score,
                    finite=cand.finite,
                    in_range=ok,
                    range_low=lo,
                    range_high=hi,
                    accuracy=acc,
                    error_tensor=err_tensor,
                )
            )
            if acc is not None and acc < best_acc:
                best_acc = acc
                best_index = i

        if best_index is None:
            timings["evaluation"] += perf_counter() - t
            report.iterations.append(
                IterationRecord(iteration, evaluated, None, accuracy, search_summary)
            )
            termination = Termination.NUMERICAL_ERROR
            detail = next(e.error_tensor for e in evaluated if e.error_tensor)
            break

        chosen = cands[best_index]
        apply_flip(
            bundle,
            chosen.ref,
            chosen.bit_position,
            refresh_stats=not config.freeze_range,
        )
        if sweep_batch is eval_batch:
            accuracy = best_acc
        else:
            try:
                accuracy = evaluate(bundle, task, eval_batch)
            except NumericalRuntimeError as err:
                accuracy = None
                termination = Termination.NUMERICAL_ERROR
                detail = err.tensor
        rec = evaluated[best_index]
        report.applied_flips.append(
            AppliedFlip(
                iteration=iteration,
                tensor=rec.tensor,
                flat_index=rec.flat_index,
                bit_position=rec.bit_position,
                old_raw=rec.old_raw,
                new_raw=rec.new_raw,
                old_value=rec.old_value,
                new_value=rec.new_value,
                delta=rec.delta,
                grad=rec.grad,
                score=rec.score,
                in_range=rec.in_range,
                range_low=rec.range_low,
                range_high=rec.range_high,
                accuracy_after=accuracy,
            )
        )
        report.iterations.append(
            IterationRecord(iteration, evaluated, best_index, accuracy, search_summary)
        )
        timings["evaluation"] += perf_counter() - t

        if accuracy is not None:
            report.post_acc = accuracy
        if termination is not None:
            break
        if accuracy < threshold:
            termination = Termination.BELOW_THRESHOLD
            break

    report.termination = termination or Termination.MAX_ITER
    report.termination_detail = detail
    if report.iterations:
        report.crit_1flip_count = census_count(
            report.iterations[0].evaluated, threshold
        )
    return report


def run_attack_seeds(
    bundle: ModelBundle,
    task: TaskSpec,
    config: AttackConfig,
    setup_seconds: float = 0.0,
) -> list[AttackReport]:
    """One run per configured seed, each on a fresh copy of the bundle."""
    return [
        run_attack(bundle.copy(), task, config, seed=s, setup_seconds=setup_seconds)
        for s in config.seeds
    ]


def best_report(reports: list[AttackReport]) -> AttackReport:
    """Best outcome: lowest post accuracy, then fewest flips, then lowest seed."""
    if not reports:
        raise ValueError("no reports to choose from")

    def rank(r: AttackReport):
        post = math.inf if r.post_acc is None else r.post_acc
        return (post, r.num_flips, r.seed)

    return min(reports, key=rank)


# ---------------------------------------------------------------------------
# Census, distribution, transfer


def census_count(table: list[CandidateEval], threshold: float) -> int:
    """How many measured candidates individually push accuracy below the
    threshold."""
    return sum(
        1 for e in table if e.accuracy is not None and e.accuracy < threshold
    )


def census_label(count: int) -> str:
    """Table convention: a count of zero is printed as "F" (no single flip
    succeeds)."""
    return "F" if count == 0 else str(count)


def census_crit_1flip(
    bundle: ModelBundle,
    task: TaskSpec,
    config: AttackConfig,
    seed: int | None = None,
) -> tuple[int, list[CandidateEval]]:
    """First-iteration census on a copy of the bundle; the victim is left
    untouched."""
    probe = replace(config, max_iterations=1)
    report = run_attack(bundle.copy(), task, probe, seed=seed)
    if not report.iterations:
        raise ValueError(
            f"census needs one sweep iteration; run ended with "
            f"{report.termination.value} before any sweep"
        )
    table = report.iterations[0].evaluated
    return census_count(table, report.threshold), table


def distribution_rows(
    table: list[CandidateEval],
    taxonomy: dict[str, tuple[int, str]],
    threshold: float,
) -> list[tuple[int, str, int]]:
    groups: dict[tuple[int, str], int] = {}
    for e in table:
        if e.accuracy is None or e.accuracy >= threshold:
            continue
        li, kind = taxonomy[e.tensor]
        key = (int(li), kind)
        groups[key] = groups.get(key, 0) + 1
    return [(li, kind, n) for (li, kind), n in sorted(groups.items())]


def distribution_report(
    table: list[CandidateEval],
    bundle: ModelBundle,
    threshold: float,
) -> list[tuple[int, str, int]]:
    """Critical candidates grouped by (layer_index, param_kind); the counts
    partition the census total."""
    taxonomy = {m.name: (m.layer_index, m.param_kind) for m in bundle.metas}
    return distribution_rows(table, taxonomy, threshold)


@dataclass(frozen=True)
class TransferResult:
    task: str
    pre_acc: float
    post_acc: float


def transfer_eval(
    bundle: ModelBundle,
    report: AttackReport,
    tasks: list[TaskSpec],
    seed: int | None = None,
) -> list[TransferResult]:
    """Apply the recorded flips to a fresh copy of the pre-attack bundle and
    measure each task before and after.

    The default seed is the one the source run used, so evaluating the
    source task reproduces its post-attack accuracy exactly.
    """
    seed = report.seed if seed is None else seed
    for task in tasks:
        _check_compat(bundle, task)
    batches = {
        t.name: t.sample(report.config["eval_samples"], STREAM_EVAL, run_seed=seed)
        for t in tasks
    }
    clean = bundle.copy()
    pre = {t.name: evaluate(clean, t, batches[t.name]) for t in tasks}
    for f in report.applied_flips:
        ref = WeightRef(f.tensor, f.flat_index)
        apply_flip(clean, ref, f.bit_position, refresh_stats=False)
        got = raw_word(clean, ref)
        if got != f.new_raw:
            raise ValueError(
                f"recorded flip on {f.tensor}[{f.flat_index}] does not reproduce "
                f"on this bundle (raw 0x{got:X}, expected 0x{f.new_raw:X}); "
                f"the bundle is not the pre-attack victim"
            )
    results = []
    for t in tasks:
        try:
            post = evaluate(clean, t, batches[t.name])
        except NumericalRuntimeError:
            post = float("nan")
        results.append(TransferResult(t.name, pre[t.name], post))
    return results
