"""End-of-life classification on an in-memory synthetic fleet.

Usage: python scripts/classification_study.py [n_batteries] [out.json] [protocols]

protocols is a comma-separated subset of matched,end,all; "all" pools five
horizons per training set and is about 20x slower.
"""

import json
import sys
import time
from dataclasses import replace

from sohgp.config import PipelineConfig
from sohgp.evaluation import run_nested_cv
from sohgp.pipeline import example_table, run_in_memory
from sohgp.synthfleet import FleetConfig, simulate_battery


def main():
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 200
    out = sys.argv[2] if len(sys.argv) > 2 else "classification_study.json"
    modes = (sys.argv[3] if len(sys.argv) > 3 else "matched,end").split(",")
    fleet = FleetConfig(n_batteries=n, seed=7)
    cfg = PipelineConfig()
    t0 = time.time()
    labels = {}

    def stream():
        for i in range(n):
            series, p = simulate_battery(fleet, i)
            labels[p.battery_id] = p.label
            yield series

    results, _ = run_in_memory(stream(), cfg, progress=lambda i, b: print(f"fit {i} {b} {time.time() - t0:.0f}s", flush=True))
    table = example_table(results, labels)
    with open(out.replace(".json", "_table.json"), "w") as fh:
        json.dump({"ids": list(table.battery_ids), "labels": table.labels.tolist(),
                   "inputs": {str(h): {k: v.tolist() for k, v in d.items()} for h, d in table.inputs.items()}}, fh)
    for mode in modes:
        report = run_nested_cv(table, replace(cfg.classifier, train_horizons=mode))
        print(mode, "cases", report.n_cases)
        for r in report.summary:
            print(mode, r["scenario"], r["horizon_days"], f"{r['mean']:.3f} +- {r['std']:.3f}")
        report.write_json(out.replace(".json", f"_{mode}.json"))
    print("total", time.time() - t0)


if __name__ == "__main__":
    main()
