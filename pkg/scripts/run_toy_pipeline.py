#!/usr/bin/env python3
"""Run the whole pipeline on the default toy configuration and print the report.

Usage: python scripts/run_toy_pipeline.py [OUT_DIR] [SEED]
"""

import sys
from pathlib import Path

from lorashear import pipeline
from lorashear.config import PipelineConfig


def main() -> int:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs/toy")
    cfg = PipelineConfig()
    if len(sys.argv) > 2:
        cfg.seed = int(sys.argv[2])
    pipeline.run_all(cfg, out)
    print((out / "report.md").read_text())
    print(f"artifacts in {out}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
