"""Tabulation of tuning rows: summaries, the comparison table, p-values, figures.

Rows are read from the documented CSV schema only (see ``CSV_COLUMNS``).
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, InputError
from .stats import ranksum_test, signedrank_test
from .tuner import Row, default_grid, mean_by_alpha, select_alpha

CSV_COLUMNS = Row.CSV_COLUMNS
METRIC_COLUMNS = {"psnr": "psnr_db", "ssim": "ssim"}


def write_rows(rows: Iterable[Row], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r.csv_record())


def read_rows(paths) -> list[Row]:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    rows = []
    for p in paths:
        with open(p, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise InputError(f"{p}: missing columns {sorted(missing)}")
            for rec in reader:
                rows.append(Row(
                    config_id=rec["config_id"], field_strength=float(rec["field_strength"]),
                    n_series=int(rec["n_series"]), ga_weeks=float(rec["ga_weeks"]),
                    regularizer=rec["regularizer"], alpha=float(rec["alpha"]), repeat=int(rec["repeat"]),
                    psnr_db=float(rec["psnr_db"]), ssim=float(rec["ssim"])))
    return rows


def _by(rows: Sequence[Row], *keys) -> dict:
    out = defaultdict(list)
    for r in rows:
        out[tuple(getattr(r, k) for k in keys)].append(r)
    return dict(sorted(out.items()))


def _paired_p(x, y):
    try:
        return signedrank_test(x, y).p_value
    except DegenerateInputError:
        return None


def default_alpha_for(regularizer: str) -> float:
    return default_grid(regularizer).default_alpha


def summarize(rows: Sequence[Row], default_alpha: float) -> dict:
    """Pooled α*, gains over the default and paired p-values for one regularizer.

    α* maximises the mean metric over all rows; the paired test compares the
    per-(configuration, repeat) metric at α* with that at the default.
    """
    if not rows:
        raise InputError("no rows to summarize")
    if len({r.regularizer for r in rows}) != 1:
        raise InputError("rows mix regularizers")
    out = {"default_alpha": default_alpha, "gains": {}, "p_values": {}}
    for metric, col in METRIC_COLUMNS.items():
        star = select_alpha(rows, metric)
        out[f"alpha_star_{metric}"] = star
        cells = {(r.config_id, r.repeat, r.alpha): getattr(r, col) for r in rows}
        keys = sorted({(c, k) for c, k, _ in cells})
        at_star = [cells[k + (star,)] for k in keys if k + (default_alpha,) in cells]
        at_def = [cells[k + (default_alpha,)] for k in keys if k + (star,) in cells]
        if not at_def:
            raise InputError(f"default alpha {default_alpha} is not in the rows")
        gain = float(np.mean(np.subtract(at_star, at_def)))
        out["gains"][col] = gain if math.isfinite(gain) else None
        out["p_values"][col] = _paired_p(at_star, at_def)
    out["regularizer"] = rows[0].regularizer
    out["configurations"] = [
        {"config_id": cid, "alpha_star_psnr": select_alpha(rs, "psnr"), "alpha_star_ssim": select_alpha(rs, "ssim")}
        for (cid,), rs in _by(rows, "config_id").items()
    ]
    return out


def per_config_alpha_star(rows: Sequence[Row], metric: str) -> dict[str, float]:
    return {cid: select_alpha(rs, metric) for (cid,), rs in _by(rows, "config_id").items()}


def table1(rows: Sequence[Row], defaults: dict[str, float] | None = None) -> tuple[list[dict], list[dict]]:
    """Mean metrics at α_def and at α* per (field strength, series count).

    Each configuration (phantom) contributes its own α*; means are taken over
    configurations.  Returns ``(table, tests)`` where ``tests`` lists paired
    signed-rank p-values of α* against α_def.
    """
    defaults = dict(defaults or {})
    table, tests = [], []
    regs = sorted({r.regularizer for r in rows})
    for (fs, ns), group in _by(rows, "field_strength", "n_series").items():
        line = {"field_strength": fs, "n_series": ns, "n_configurations": len({r.config_id for r in group})}
        for reg in regs:
            rr = [r for r in group if r.regularizer == reg]
            a_def = defaults.get(reg, default_alpha_for(reg))
            for metric, col in METRIC_COLUMNS.items():
                star_vals, def_vals = [], []
                for (cid,), rs in _by(rr, "config_id").items():
                    means = mean_by_alpha(rs, metric)
                    if a_def not in means:
                        raise InputError(f"{cid}: default alpha {a_def} missing for {reg}")
                    star_vals.append(means[select_alpha(rs, metric)])
                    def_vals.append(means[a_def])
                line[f"{reg}_{col}_default"] = float(np.mean(def_vals)) if def_vals else None
                line[f"{reg}_{col}_tuned"] = float(np.mean(star_vals)) if star_vals else None
                if star_vals:
                    tests.append({"field_strength": fs, "n_series": ns, "regularizer": reg, "metric": col,
                                  "n": len(star_vals), "p_value": _paired_p(star_vals, def_vals)})
        table.append(line)
    return table, tests


def series_trend_tests(rows: Sequence[Row]) -> list[dict]:
    """Rank-sum tests of per-configuration α* between series counts at each field strength."""
    out = []
    for (reg, fs), rr in _by(rows, "regularizer", "field_strength").items():
        counts = sorted({r.n_series for r in rr})
        for lo, hi in zip(counts, counts[1:]):
            for metric in METRIC_COLUMNS:
                a = list(per_config_alpha_star([r for r in rr if r.n_series == lo], metric).values())
                b = list(per_config_alpha_star([r for r in rr if r.n_series == hi], metric).values())
                res = ranksum_test(b, a)
                out.append({"regularizer": reg, "field_strength": fs, "metric": metric,
                            "n_series": [lo, hi], "mean_alpha_star": [float(np.mean(a)), float(np.mean(b))],
                            "p_value": res.p_value, "method": res.method})
    return out


def format_table(table: list[dict]) -> str:
    """Markdown rendering of :func:`table1` output."""
    if not table:
        return ""
    cols = list(table[0])
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for line in table:
        cells = []
        for c in cols:
            v = line[c]
            cells.append("" if v is None else (f"{v:.4g}" if isinstance(v, float) else str(v)))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_figures(rows: Sequence[Row], out_dir) -> list[Path]:
    """Write α* box plots and mean metric-vs-α curves as PNG files."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for (reg,), rr in _by(rows, "regularizer").items():
        groups = _by(rr, "field_strength", "n_series")
        labels = [f"{fs:g}T; {ns}" for fs, ns in groups]

        fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
        for ax, metric in zip(axes, METRIC_COLUMNS):
            data = [list(per_config_alpha_star(g, metric).values()) for g in groups.values()]
            ax.boxplot(data)
            ax.set_xticks(range(1, len(labels) + 1), labels)
            ax.set_yscale("log")
            ax.set_title(f"α* ({metric.upper()})")
            ax.set_xlabel("configuration (field; series)")
        fig.suptitle(reg)
        fig.tight_layout()
        path = out_dir / f"alpha_star_{reg}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(path)

        fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
        for ax, (metric, col) in zip(axes, METRIC_COLUMNS.items()):
            for label, g in zip(labels, groups.values()):
                means = mean_by_alpha(g, metric)
                ax.plot(list(means), list(means.values()), marker="o", label=label)
            ax.axvline(default_alpha_for(reg), color="grey", ls=":", lw=1)
            ax.set_xscale("log")
            ax.set_xlabel("α")
            ax.set_ylabel(col)
        axes[0].legend(fontsize=8)
        fig.suptitle(f"{reg}: mean metric vs α")
        fig.tight_layout()
        path = out_dir / f"metric_curves_{reg}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written
