"""Consolidated tables and figures from a directory of grid runs.

One CSV table per headline metric (mean-square bound, actuator energy,
sparsity, average cost with baseline comparisons), each keyed by
(protocol, p, sigma_scale), plus grouped-bar renderings of the same tables.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


class ReportError(ValueError):
    pass


TABLES = {
    "msb": ("fig_msb.csv", ["msb", "msb_time_avg"]),
    "energy": ("fig_energy.csv", ["actuator_energy"]),
    "sparsity": ("fig_sparsity.csv", ["sparsity_pct"]),
    "cost": ("fig_cost.csv", ["avg_cost"]),
}


def collect_runs(run_dir: str) -> list[dict]:
    """Load every grid point's metrics.json; validates completeness against
    the run manifest when present."""
    manifest_path = os.path.join(run_dir, "manifest.json")
    expected = None
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            expected = json.load(fh).get("labels")
    rows = []
    labels_seen = []
    for entry in sorted(os.listdir(run_dir)):
        mpath = os.path.join(run_dir, entry, "metrics.json")
        if os.path.isfile(mpath):
            with open(mpath) as fh:
                doc = json.load(fh)
            doc["label"] = entry
            rows.append(doc)
            labels_seen.append(entry)
    if not rows:
        raise ReportError(f"no completed runs under {run_dir}")
    if expected is not None:
        missing = sorted(set(expected) - set(labels_seen))
        if missing:
            raise ReportError(f"missing grid cells: {', '.join(missing)}")
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_tables(rows: list[dict], out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    baseline_kinds = sorted({k for row in rows for k in row.get("baselines", {})})
    for key, (fname, metric_names) in TABLES.items():
        cols = ["protocol", "p", "sigma_scale"] + metric_names
        if key == "cost":
            for bk in baseline_kinds:
                cols += [f"{bk}_avg_cost", f"{bk}_cost_pct_diff"]
        path = os.path.join(out_dir, fname)
        with open(path, "w", newline="") as fh:
            fh.write(",".join(cols) + "\n")
            for row in sorted(rows, key=_row_key):
                grid = row["grid"]
                vals = [str(grid["protocol"]), _fmt(grid["p"]), _fmt(grid["sigma_scale"])]
                vals += [_fmt(row["metrics"].get(name)) for name in metric_names]
                if key == "cost":
                    for bk in baseline_kinds:
                        base = row.get("baselines", {}).get(bk)
                        if base is None:
                            vals += ["", ""]
                        else:
                            cost = row["metrics"]["avg_cost"]
                            bcost = base["avg_cost"]
                            pct = 100.0 * (bcost - cost) / bcost if bcost else 0.0
                            vals += [_fmt(bcost), _fmt(pct)]
                fh.write(",".join(vals) + "\n")
        written.append(path)
    return written


def _row_key(row: dict):
    g = row["grid"]
    return (str(g["protocol"]), float(g["p"] or 0), float(g["sigma_scale"] or 0))


def render_figures(rows: list[dict], out_dir: str) -> list[str]:
    """Grouped-bar chart per metric: one panel per noise scale, bars grouped
    by success probability, one series per protocol."""
    os.makedirs(out_dir, exist_ok=True)
    sigmas = sorted({row["grid"]["sigma_scale"] for row in rows},
                    key=lambda v: (v is None, v))
    ps = sorted({row["grid"]["p"] for row in rows}, key=lambda v: (v is None, v))
    protocols = sorted({row["grid"]["protocol"] for row in rows})
    lookup = {(r["grid"]["protocol"], r["grid"]["p"], r["grid"]["sigma_scale"]): r
              for r in rows}
    written = []
    panels = [("msb_time_avg", "mean square bound (time average)", "fig_msb.png"),
              ("actuator_energy", "average actuator energy", "fig_energy.png"),
              ("sparsity_pct", "null-control instants [%]", "fig_sparsity.png"),
              ("avg_cost", "average stage cost", "fig_cost.png")]
    width = 0.8 / max(len(protocols), 1)
    for metric, title, fname in panels:
        fig, axes = plt.subplots(1, len(sigmas), figsize=(4 * len(sigmas), 4),
                                 squeeze=False)
        for ax, sig in zip(axes[0], sigmas):
            for k, proto in enumerate(protocols):
                vals = []
                for p in ps:
                    row = lookup.get((proto, p, sig))
                    vals.append(row["metrics"].get(metric) if row else float("nan"))
                pos = [i + (k - (len(protocols) - 1) / 2) * width
                       for i in range(len(ps))]
                ax.bar(pos, vals, width=width, label=proto)
            ax.set_xticks(range(len(ps)))
            ax.set_xticklabels([f"{p:g}" if p is not None else "-" for p in ps])
            ax.set_xlabel("success probability p")
            ax.set_title(f"noise scale {sig:g}" if sig is not None else "base noise")
            ax.grid(axis="y", alpha=0.4)
        axes[0][0].set_ylabel(title)
        axes[0][-1].legend()
        fig.tight_layout()
        path = os.path.join(out_dir, fname)
        fig.savefig(path, dpi=130)
        plt.close(fig)
        written.append(path)
    return written
