"""Metric tables from run reports.

The machine format is the run's JSON report itself; the table is derived from
it alone, so ``table(machine)`` can be regenerated at any time.
"""
import json
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

from .errors import ReportError

COLUMNS = ("OA", "UA", "PA", "mIoU", "F1")


def percent(value):
    """Fraction -> percentage string, 2 decimals, ties to even. ``None`` -> 'n/a'."""
    if value is None:
        return "n/a"
    d = Decimal(repr(float(value))) * 100
    return f"{d.quantize(Decimal('0.01'), rounding=ROUND_HALF_EVEN)}%"


def metric_row(metrics):
    """OA, UA, PA, mIoU, F1 from a serialised MetricReport."""
    m = metrics["macro"]
    return [metrics["oa"], m["ua"], m["pa"], m["miou"], m["f1"]]


def report_arms(run):
    """(arm name, metrics) pairs for one run report: the method, then any ensemble members."""
    if run.get("test") is None:
        raise ReportError(f"report for {run.get('method')!r} has no test metrics")
    arms = [(run["method"], run["test"])]
    for name, metrics in (run.get("members_test") or {}).items():
        arms.append((f"{run['method']}/{name}", metrics))
    return arms


def format_table(arms):
    header = ["Method", *COLUMNS]
    rows = [[name, *(percent(v) for v in metric_row(m))] for name, m in arms]
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header, *rows]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def emit_report(runs, fmt="table", path=None):
    """Render one or more run reports (dicts) and optionally write the result to ``path``."""
    if isinstance(runs, dict):
        runs = [runs]
    if fmt == "table":
        text = format_table([arm for run in runs for arm in report_arms(run)])
    elif fmt == "machine":
        text = json.dumps(runs[0] if len(runs) == 1 else runs, indent=1) + "\n"
    else:
        raise ReportError(f"unknown report format {fmt!r}")
    if path is not None:
        try:
            Path(path).write_text(text)
        except OSError as e:
            raise ReportError(f"could not write report {path}: {e}") from e
    return text


def load_reports(paths):
    runs = []
    for p in paths:
        try:
            data = json.loads(Path(p).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ReportError(f"cannot read report {p}: {e}") from e
        runs.extend(data if isinstance(data, list) else [data])
    return runs
