"""Simulate a synthetic fleet and run every pipeline stage on it through the CLI.

Usage: python scripts/run_fleet.py ROOT [n_batteries] [jobs]
"""

import json
import sys
import time
from pathlib import Path

from sohgp.cli import STAGES, main as cli


def main():
    root = Path(sys.argv[1])
    n = int(sys.argv[2]) if len(sys.argv) > 2 else 50
    jobs = sys.argv[3] if len(sys.argv) > 3 else "1"
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config.json"
    cfg.write_text(json.dumps({"input_dir": str(root / "fleet"), "work_dir": str(root / "work"),
                               "output_dir": str(root / "report"), "fleet": {"n_batteries": n}}))
    t0 = time.time()
    for stage in STAGES:
        code = cli(["--config", str(cfg), "--jobs", jobs, stage])
        print(f"{stage}: exit {code} at {time.time() - t0:.0f}s", flush=True)
        if code:
            return code
    print((root / "report" / "summary.txt").read_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
