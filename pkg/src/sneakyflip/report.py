"""Persisted run artifacts: delimited exports, timing sidecars, and figures.

Every delimited file starts with ``# key=value`` provenance lines echoing the
scalar run configuration, then a header row, then the data. Numbers are
written with ``repr`` so a re-export from the same report reproduces the file
byte for byte. Wall-clock timings live in their own pair of files
(``timings.json`` and ``timings.csv``) because they vary run to run; all the
other artifacts are deterministic functions of config and seed.

Figures are rendered only by :func:`render_figures`, which imports matplotlib
lazily, so the rest of the package works without a graphics stack loaded.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .attack import (
    AttackReport,
    CandidateEval,
    TransferResult,
    census_label,
    distribution_rows,
)

REPORT_NAME = "report.json"
TIMINGS_SIDECAR = "timings.json"
TRANSFER_SIDECAR = "transfer.json"


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _echo_lines(report: AttackReport) -> list[str]:
    fields = dict(report.config)
    fields.pop("tensors", None)
    fields["exclusions"] = ",".join(fields.get("exclusions", []))
    fields["seed"] = report.seed
    fields["threshold"] = report.threshold
    return [f"# {key}={_fmt(fields[key])}" for key in sorted(fields)]


def _write_csv(path: Path, report: AttackReport, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        for line in _echo_lines(report):
            fh.write(line + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def write_flips_csv(report: AttackReport, path: str | Path) -> Path:
    header = [
        "iteration",
        "tensor",
        "flat_index",
        "bit_position",
        "old_raw",
        "new_raw",
        "old_value",
        "new_value",
        "delta",
        "grad",
        "score",
        "in_range",
        "range_low",
        "range_high",
        "accuracy_after",
    ]
    rows = [
        [
            f.iteration,
            f.tensor,
            f.flat_index,
            f.bit_position,
            f"0x{f.old_raw:X}",
            f"0x{f.new_raw:X}",
            f.old_value,
            f.new_value,
            f.delta,
            f.grad,
            f.score,
            f.in_range,
            f.range_low,
            f.range_high,
            f.accuracy_after,
        ]
        for f in report.applied_flips
    ]
    return _write_csv(Path(path), report, header, rows)


def _census_table(report: AttackReport) -> list[CandidateEval]:
    if not report.iterations:
        raise ValueError("report holds no sweep iterations; census unavailable")
    return report.iterations[0].evaluated


def write_census_csv(report: AttackReport, path: str | Path) -> Path:
    """First-iteration candidate table; one row per measured or skipped
    candidate, with the criticality verdict made explicit per row."""
    table = _census_table(report)
    header = [
        "tensor",
        "flat_index",
        "bit_position",
        "score",
        "accuracy",
        "critical",
        "skipped",
        "error_tensor",
    ]
    rows = []
    for e in table:
        critical = e.accuracy is not None and e.accuracy < report.threshold
        rows.append(
            [
                e.tensor,
                e.flat_index,
                e.bit_position,
                e.score,
                e.accuracy,
                critical,
                e.accuracy is None,
                e.error_tensor,
            ]
        )
    path = Path(path)
    with open(path, "w", newline="") as fh:
        for line in _echo_lines(report):
            fh.write(line + "\n")
        fh.write(f"# crit_1flip_count={report.crit_1flip_count}\n")
        fh.write(f"# crit_1flip_label={report.crit_1flip_label}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def write_distribution_csv(report: AttackReport, path: str | Path) -> Path:
    table = _census_table(report)
    taxonomy = {
        name: (li, kind) for name, (li, kind) in report.config["tensors"].items()
    }
    rows = distribution_rows(table, taxonomy, report.threshold)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        for line in _echo_lines(report):
            fh.write(line + "\n")
        fh.write(f"# crit_1flip_count={report.crit_1flip_count}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer_index", "param_kind", "count"])
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def save_timings(report: AttackReport, directory: str | Path) -> Path:
    path = Path(directory) / TIMINGS_SIDECAR
    path.write_text(json.dumps(report.phase_timings, sort_keys=True, indent=2) + "\n")
    return path


def write_timings_csv(
    report: AttackReport, path: str | Path, timings: dict | None = None
) -> Path:
    timings = report.phase_timings if timings is None else timings
    rows = [[phase, timings[phase]] for phase in sorted(timings)]
    return _write_csv(Path(path), report, ["phase", "seconds"], rows)


def save_transfer(
    results: list[TransferResult], directory: str | Path
) -> Path:
    path = Path(directory) / TRANSFER_SIDECAR
    data = [vars(r).copy() for r in results]
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n")
    return path


def load_transfer(directory: str | Path) -> list[TransferResult]:
    path = Path(directory) / TRANSFER_SIDECAR
    return [TransferResult(**row) for row in json.loads(path.read_text())]


def write_transfer_csv(
    report: AttackReport, results: list[TransferResult], path: str | Path
) -> Path:
    rows = [[r.task, r.pre_acc, r.post_acc] for r in results]
    return _write_csv(Path(path), report, ["task", "pre_acc", "post_acc"], rows)


def export_run(
    report: AttackReport,
    directory: str | Path,
    transfer: list[TransferResult] | None = None,
    include_timings: bool = True,
) -> dict[str, Path]:
    """Write the report and every derivable delimited file into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {"report": report.save(directory / REPORT_NAME)}
    paths["flips"] = write_flips_csv(report, directory / "flips.csv")
    if report.iterations:
        paths["census"] = write_census_csv(report, directory / "census.csv")
        paths["distribution"] = write_distribution_csv(
            report, directory / "distribution.csv"
        )
    if include_timings:
        paths["timings_sidecar"] = save_timings(report, directory)
        paths["timings"] = write_timings_csv(report, directory / "timings.csv")
    if transfer is not None:
        paths["transfer_sidecar"] = save_transfer(transfer, directory)
        paths["transfer"] = write_transfer_csv(
            report, transfer, directory / "transfer.csv"
        )
    return paths


def regenerate(directory: str | Path) -> dict[str, Path]:
    """Rebuild every delimited file in a run directory from the persisted
    report and sidecars. Byte-identical to the originals by construction."""
    directory = Path(directory)
    report = AttackReport.load(directory / REPORT_NAME)
    paths = {"flips": write_flips_csv(report, directory / "flips.csv")}
    if report.iterations:
        paths["census"] = write_census_csv(report, directory / "census.csv")
        paths["distribution"] = write_distribution_csv(
            report, directory / "distribution.csv"
        )
    timings_path = directory / TIMINGS_SIDECAR
    if timings_path.exists():
        timings = json.loads(timings_path.read_text())
        paths["timings"] = write_timings_csv(
            report, directory / "timings.csv", timings
        )
    if (directory / TRANSFER_SIDECAR).exists():
        paths["transfer"] = write_transfer_csv(
            report, load_transfer(directory), directory / "transfer.csv"
        )
    return paths


# ---------------------------------------------------------------------------
# Figures


def render_figures(report: AttackReport, directory: str | Path) -> list[Path]:
    """Render the accuracy trajectory and the critical-flip distribution as
    PNG files next to the delimited exports."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []

    accs = [report.pre_acc] + [f.accuracy_after for f in report.applied_flips]
    xs = [i for i, a in enumerate(accs) if a is not None]
    ys = [a for a in accs if a is not None]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, ys, marker="o", lw=1.5)
    ax.axhline(report.threshold, color="crimson", ls="--", lw=1, label="threshold")
    ax.set_xlabel("applied flips")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.set_title(
        f"{report.config['task']} / {report.config['ranker']} (seed {report.seed})"
    )
    ax.legend(loc="best")
    fig.tight_layout()
    curve_path = directory / "accuracy_curve.png"
    fig.savefig(curve_path, dpi=120)
    plt.close(fig)
    written.append(curve_path)

    if report.iterations:
        taxonomy = {
            name: (li, kind) for name, (li, kind) in report.config["tensors"].items()
        }
        rows = distribution_rows(
            _census_table(report), taxonomy, report.threshold
        )
        fig, ax = plt.subplots(figsize=(7, 4))
        labels = [f"L{li}:{kind}" for li, kind, _ in rows]
        counts = [n for _, _, n in rows]
        ax.bar(range(len(rows)), counts, color="#4878a8")
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
        ax.set_ylabel("critical single flips")
        ax.set_title(
            f"distribution of critical flips "
            f"({census_label(report.crit_1flip_count or 0)} total)"
        )
        fig.tight_layout()
        dist_path = directory / "distribution.png"
        fig.savefig(dist_path, dpi=120)
        plt.close(fig)
        written.append(dist_path)

    return written
