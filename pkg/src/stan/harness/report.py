"""CSV metrics output and plain-text summaries."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

CSV_HEADER = ("experiment", "seed", "epoch", "split", "metric", "value")


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(rows, split: str = "test") -> list[tuple[str, str, int, float, float]]:
    """(experiment, metric, n_seeds, mean, std) over the final value per seed."""
    final = {}
    for exp, seed, epoch, sp, metric, value in rows:
        if sp != split:
            continue
        key = (exp, metric, seed)
        if key not in final or int(epoch) >= final[key][0]:
            final[key] = (int(epoch), float(value))
    grouped = defaultdict(list)
    for (exp, metric, _), (_, value) in sorted(final.items()):
        grouped[(exp, metric)].append(value)
    return [(exp, metric, len(v), float(np.mean(v)), float(np.std(v)))
            for (exp, metric), v in grouped.items()]


def rows_from_dicts(records) -> list[tuple]:
    return [(r["experiment"], r["seed"], r["epoch"], r["split"], r["metric"], r["value"])
            for r in records]


def format_table(headers, rows) -> str:
    cells = [[str(h) for h in headers]] + [[_cell(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.4f}"
    return str(v)


def summary_text(rows, split: str = "test") -> str:
    return format_table(("experiment", "metric", "seeds", "mean", "std"), summarize(rows, split))


def write_summary(rows, path, split: str = "test") -> None:
    Path(path).write_text(summary_text(rows, split))
