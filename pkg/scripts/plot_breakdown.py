"""Stacked per-layer time bars from ``bench net`` CSV reports.

    for e in baseline bsgemm bsgemm-intl; do
        bench net --model runs/toy/toy.model --engine $e > runs/$e.csv
    done
    python scripts/plot_breakdown.py runs/baseline.csv runs/bsgemm.csv runs/bsgemm-intl.csv -o breakdown.png

Needs matplotlib (``pip install -e .[plot]``).
"""

import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PARTS = ("t_lower_ns", "t_pack_ns", "t_matmul_ns", "t_other_ns")
LABELS = ("lowering", "packing", "matmul", "other")


def read_report(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("reports", nargs="+")
    p.add_argument("-o", "--out", default="breakdown.png")
    args = p.parse_args()
    reports = {Path(r).stem: read_report(r) for r in args.reports}
    # one group of bars per matrix layer, one bar per configuration
    layers = [r["layer"] for r in next(iter(reports.values())) if r["kind"].startswith("Quant")]
    width = 0.8 / len(reports)
    fig, ax = plt.subplots(figsize=(2 + 1.5 * len(layers), 4))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    x = np.arange(len(layers))
    for i, (name, rows) in enumerate(reports.items()):
        by_layer = {r["layer"]: r for r in rows}
        bottom = np.zeros(len(layers))
        for j, part in enumerate(PARTS):
            ms = np.array([int(by_layer[l][part]) / 1e6 if l in by_layer else 0.0 for l in layers])
            ax.bar(x + i * width, ms, width, bottom=bottom, color=colors[j % len(colors)],
                   label=LABELS[j] if i == 0 else None, edgecolor="black", linewidth=0.3)
            bottom += ms
        for xi, total in zip(x, bottom):
            ax.text(xi + i * width, total, name, rotation=90, ha="center", va="bottom", fontsize=7)
    ax.set_xticks(x + width * (len(reports) - 1) / 2, layers)
    ax.set_ylabel("time (ms)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print(args.out)


if __name__ == "__main__":
    main()
