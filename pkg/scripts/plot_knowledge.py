#!/usr/bin/env python3
"""Plot the per-node-group perplexity deviation from a knowledge profile CSV.

Usage: python scripts/plot_knowledge.py RUN_DIR [OUT.png]
"""

import csv
import sys
from pathlib import Path


def main() -> int:
    run_dir = Path(sys.argv[1])
    out = Path(sys.argv[2]) if len(sys.argv) > 2 else run_dir / "knowledge_distribution.png"
    rows = list(csv.DictReader((run_dir / "knowledge_profile.csv").open()))
    names = [r["node_group"] for r in rows]
    deviations = [float(r["deviation"]) for r in rows]
    flagged = [r["unprunable"] == "True" for r in rows]

    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not installed; deviations:")
        for n, d, f in zip(names, deviations, flagged):
            print(f"  {n:24s} {d:+.6f}{'  [unprunable]' if f else ''}")
        return 0

    colors = ["tab:red" if f else "tab:blue" for f in flagged]
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(names)), 4))
    ax.bar(range(len(names)), deviations, color=colors)
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_ylabel("perplexity deviation vs intact model")
    ax.set_title("knowledge distribution across node groups")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
